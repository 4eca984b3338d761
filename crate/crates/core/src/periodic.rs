//! Periodic steady state x_p and the period-averaged quantities built on it.
//!
//! The one-period flow is affine, x(T) = a·x(0) + b with a = e^{−∫₀ᵀ(λ+σ)},
//! so x_p(0) = b/(1 − a) is found directly instead of by burn-in.
//!
//! [`lemma_gap`] reports w[σ], the constant-input benchmark w[σ̄], the
//! quadratic gap (1/T)∫(x_p − x*)²(λ+σ) and the residual of
//! `w[σ̄] − w[σ] = gap`. [`moment_identities`] checks the two first-moment
//! identities (1/T)∫(λ+σ)x_p = σ̄ and (1/T)∫(λ+σ)x_p² = σ̄ − w[σ].

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynamics::{self, admit_state, default_step, rk4_step, CompensatedSum, Trajectory};
use crate::error::{Error, Result};
use crate::signals::{InputSignal, QuadratureSpec, SystemParams};

/// Affine one-period map x(T) = a·x(0) + b.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoincareMap {
    pub a: f64,
    pub b: f64,
    /// 1 − a, kept separately so the fixed point stays accurate when a ≈ 1.
    pub one_minus_a: f64,
}

impl PoincareMap {
    pub fn apply(&self, x: f64) -> f64 {
        self.a * x + self.b
    }

    /// x_p(0), the unique fixed point.
    pub fn fixed_point(&self) -> f64 {
        (self.b / self.one_minus_a).clamp(0.0, 1.0)
    }
}

/// Summary of one periodic experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodicReport {
    pub sigma_bar: f64,
    pub x_star: f64,
    pub w_sigma: f64,
    pub w_const: f64,
    pub gap: f64,
    pub residual_lemma: f64,
    pub residual_i1: f64,
    pub residual_i2: f64,
}

/// Where a report came from, for the JSON export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub lambda: f64,
    /// Integration step for smooth signals; `None` for closed-form propagation.
    pub grid_step: Option<f64>,
    pub signal: InputSignal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicRecord {
    pub report: PeriodicReport,
    pub provenance: Provenance,
}

impl PeriodicRecord {
    pub fn new(signal: &InputSignal, params: &SystemParams, quad: &QuadratureSpec) -> Result<Self> {
        let report = lemma_gap_with(signal, params, quad)?;
        Ok(Self {
            report,
            provenance: Provenance {
                lambda: params.lambda(),
                grid_step: grid_step(signal, params, quad)?,
                signal: signal.clone(),
            },
        })
    }
}

/// One CSV row per record: `kind, lambda, <report fields>, grid_step`.
pub fn write_records_csv<W: Write>(records: &[PeriodicRecord], out: W) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    writer.write_record([
        "kind",
        "lambda",
        "sigma_bar",
        "x_star",
        "w_sigma",
        "w_const",
        "gap",
        "residual_lemma",
        "residual_i1",
        "residual_i2",
        "grid_step",
    ])?;
    for record in records {
        let r = &record.report;
        let mut buf = format_fields(&[
            record.provenance.lambda,
            r.sigma_bar,
            r.x_star,
            r.w_sigma,
            r.w_const,
            r.gap,
            r.residual_lemma,
            r.residual_i1,
            r.residual_i2,
        ]);
        buf.insert(0, signal_kind(&record.provenance.signal).to_string());
        buf.push(record.provenance.grid_step.map(format_f64).unwrap_or_default());
        writer.write_record(&buf)?;
    }
    writer.flush()?;
    Ok(())
}

fn format_fields(values: &[f64]) -> Vec<String> {
    values.iter().map(|&v| format_f64(v)).collect()
}

/// Shortest representation that parses back to the same double.
pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

pub(crate) fn signal_kind(signal: &InputSignal) -> &'static str {
    match signal {
        InputSignal::Constant(_) => "constant",
        InputSignal::PiecewiseConstant(_) => "piecewise_constant",
        InputSignal::ClippedSinusoidSum(_) => "clipped_sinusoid_sum",
        InputSignal::Sampled(_) => "sampled",
    }
}

fn require_period(signal: &InputSignal) -> Result<f64> {
    signal.period().ok_or(Error::NotPeriodic)
}

/// Number of integration steps per period and their length, for smooth signals.
fn smooth_grid(signal: &InputSignal, params: &SystemParams, quad: &QuadratureSpec, period: f64) -> (usize, f64) {
    let step = quad.step.unwrap_or_else(|| default_step(signal, params));
    let n = ((period / step - 1e-9).ceil() as usize).max(1);
    (n, period / n as f64)
}

fn grid_step(signal: &InputSignal, params: &SystemParams, quad: &QuadratureSpec) -> Result<Option<f64>> {
    let period = require_period(signal)?;
    Ok((!signal.is_segment_exact()).then(|| smooth_grid(signal, params, quad, period).1))
}

pub fn poincare_map(signal: &InputSignal, params: &SystemParams) -> Result<PoincareMap> {
    poincare_map_with(signal, params, &QuadratureSpec::default())
}

/// One-period map. `b` is the image of 0; `a` is e^{−∫₀ᵀ(λ+σ)}, which equals
/// Φ(1) − Φ(0) for this affine flow.
pub fn poincare_map_with(signal: &InputSignal, params: &SystemParams, quad: &QuadratureSpec) -> Result<PoincareMap> {
    let period = require_period(signal)?;
    let lambda = params.lambda();
    let (b, log_decay) = if let Some(segments) = signal.segments(period) {
        let mut x = 0.0;
        let mut log_decay = CompensatedSum::default();
        for seg in segments {
            x = dynamics::step_exact(x, seg.level, seg.duration(), params).0;
            log_decay.add((lambda + seg.level) * seg.duration());
        }
        (x, log_decay.value())
    } else {
        let (n, h) = smooth_grid(signal, params, quad, period);
        let rhs = |t: f64, y: &[f64; 2]| {
            let s = signal.evaluate(t);
            [s * (1.0 - y[0]) - lambda * y[0], lambda + s]
        };
        let mut y = [0.0, 0.0];
        for i in 0..n {
            let t = h * i as f64;
            y = rk4_step(rhs, t, &y, h);
            y[0] = admit_state(y[0], t + h, h)?;
        }
        (y[0], y[1])
    };
    Ok(PoincareMap {
        a: (-log_decay).exp(),
        b,
        one_minus_a: -(-log_decay).exp_m1(),
    })
}

pub fn periodic_solution(signal: &InputSignal, params: &SystemParams) -> Result<Trajectory> {
    periodic_solution_with(signal, params, &QuadratureSpec::default())
}

/// One period of x_p, sampled on `quad`'s grid (T/10⁴ by default) plus
/// segment breakpoints.
pub fn periodic_solution_with(signal: &InputSignal, params: &SystemParams, quad: &QuadratureSpec) -> Result<Trajectory> {
    let period = require_period(signal)?;
    let x0 = poincare_map_with(signal, params, quad)?.fixed_point();
    let n = quad.intervals(period);
    let knots: Vec<f64> = (1..=n)
        .map(|i| if i == n { period } else { period * i as f64 / n as f64 })
        .collect();
    let max_step = if signal.is_segment_exact() {
        period
    } else {
        smooth_grid(signal, params, quad, period).1
    };
    dynamics::simulate_on_knots(signal, params, x0, &knots, max_step)
}

/// w[σ̄] = λσ̄/(λ + σ̄), the averaged output under constant inflow σ̄.
pub fn constant_benchmark(sigma_bar: f64, params: &SystemParams) -> Result<f64> {
    if !(sigma_bar >= 0.0) {
        return Err(Error::Domain(format!("mean inflow must be >= 0, got {sigma_bar}")));
    }
    if sigma_bar.is_infinite() {
        return Ok(params.lambda());
    }
    let lambda = params.lambda();
    Ok(lambda * sigma_bar / (lambda + sigma_bar))
}

/// One-period integrals along x_p.
#[derive(Debug, Clone, Copy)]
struct PeriodMoments {
    period: f64,
    sigma_bar: f64,
    x_star: f64,
    /// ∫x_p
    int_x: f64,
    /// ∫(λ+σ)x_p
    int_weighted_x: f64,
    /// ∫(λ+σ)x_p²
    int_weighted_x2: f64,
    /// ∫(λ+σ)(x_p − x*)²
    int_gap: f64,
}

fn period_moments(signal: &InputSignal, params: &SystemParams, quad: &QuadratureSpec) -> Result<PeriodMoments> {
    let period = require_period(signal)?;
    let lambda = params.lambda();
    let sigma_bar = signal.mean_over_period(quad)?;
    let x_star = sigma_bar / (lambda + sigma_bar);
    let map = poincare_map_with(signal, params, quad)?;
    let mut x = map.fixed_point();

    if let Some(segments) = signal.segments(period) {
        let mut int_x = CompensatedSum::default();
        let mut int_wx = CompensatedSum::default();
        let mut int_wx2 = CompensatedSum::default();
        let mut int_gap = CompensatedSum::default();
        for seg in segments {
            let h = seg.duration();
            let rate = lambda + seg.level;
            let attractor = seg.level / rate;
            let excess = x - attractor;
            let q1 = -(-rate * h).exp_m1();
            let q2 = -(-2.0 * rate * h).exp_m1();
            // ∫e^{−ks} = q1/k and ∫e^{−2ks} = q2/(2k) over the segment
            let lin = q1 / rate;
            let quad_term = q2 / (2.0 * rate);
            let seg_x = attractor * h + excess * lin;
            let seg_x2 = attractor * attractor * h + 2.0 * attractor * excess * lin + excess * excess * quad_term;
            let offset = attractor - x_star;
            let seg_gap = offset * offset * h + 2.0 * offset * excess * lin + excess * excess * quad_term;
            int_x.add(seg_x);
            int_wx.add(rate * seg_x);
            int_wx2.add(rate * seg_x2);
            int_gap.add(rate * seg_gap);
            x = attractor + excess * (1.0 - q1);
        }
        return Ok(PeriodMoments {
            period,
            sigma_bar,
            x_star,
            int_x: int_x.value(),
            int_weighted_x: int_wx.value(),
            int_weighted_x2: int_wx2.value(),
            int_gap: int_gap.value(),
        });
    }

    let (n, h) = smooth_grid(signal, params, quad, period);
    let rhs = |t: f64, y: &[f64; 5]| {
        let s = signal.evaluate(t);
        let xv = y[0];
        let w = lambda + s;
        let dev = xv - x_star;
        [s - w * xv, xv, w * xv, w * xv * xv, w * dev * dev]
    };
    let mut y = [x, 0.0, 0.0, 0.0, 0.0];
    for i in 0..n {
        let t = h * i as f64;
        y = rk4_step(rhs, t, &y, h);
        y[0] = admit_state(y[0], t + h, h)?;
    }
    Ok(PeriodMoments {
        period,
        sigma_bar,
        x_star,
        int_x: y[1],
        int_weighted_x: y[2],
        int_weighted_x2: y[3],
        int_gap: y[4],
    })
}

/// w[σ] = λ·(1/T)∫₀ᵀ x_p.
pub fn averaged_output(signal: &InputSignal, params: &SystemParams) -> Result<f64> {
    averaged_output_with(signal, params, &QuadratureSpec::default())
}

pub fn averaged_output_with(signal: &InputSignal, params: &SystemParams, quad: &QuadratureSpec) -> Result<f64> {
    let period = require_period(signal)?;
    let lambda = params.lambda();
    if let Some(levels) = signal.levels() {
        if levels.iter().all(|&c| c == levels[0]) {
            // x_p ≡ σ/(λ+σ) exactly
            return constant_benchmark(levels[0], params);
        }
    }
    if let Some(segments) = signal.segments(period) {
        let mut x = poincare_map_with(signal, params, quad)?.fixed_point();
        let mut area = CompensatedSum::default();
        for seg in segments {
            let (x1, seg_area) = dynamics::step_exact(x, seg.level, seg.duration(), params);
            area.add(seg_area);
            x = x1;
        }
        return Ok(lambda * area.value() / period);
    }
    let moments = period_moments(signal, params, quad)?;
    Ok(lambda * moments.int_x / moments.period)
}

pub fn lemma_gap(signal: &InputSignal, params: &SystemParams) -> Result<PeriodicReport> {
    lemma_gap_with(signal, params, &QuadratureSpec::default())
}

pub fn lemma_gap_with(signal: &InputSignal, params: &SystemParams, quad: &QuadratureSpec) -> Result<PeriodicReport> {
    let m = period_moments(signal, params, quad)?;
    let w_sigma = params.lambda() * m.int_x / m.period;
    let w_const = constant_benchmark(m.sigma_bar, params)?;
    let gap = m.int_gap / m.period;
    Ok(PeriodicReport {
        sigma_bar: m.sigma_bar,
        x_star: m.x_star,
        w_sigma,
        w_const,
        gap,
        residual_lemma: (w_const - w_sigma - gap).abs(),
        residual_i1: (m.int_weighted_x / m.period - m.sigma_bar).abs(),
        residual_i2: (m.int_weighted_x2 / m.period - (m.sigma_bar - w_sigma)).abs(),
    })
}

/// `(|(1/T)∫(λ+σ)x_p − σ̄|, |(1/T)∫(λ+σ)x_p² − (σ̄ − w[σ])|)`.
pub fn moment_identities(signal: &InputSignal, params: &SystemParams) -> Result<(f64, f64)> {
    moment_identities_with(signal, params, &QuadratureSpec::default())
}

pub fn moment_identities_with(signal: &InputSignal, params: &SystemParams, quad: &QuadratureSpec) -> Result<(f64, f64)> {
    let report = lemma_gap_with(signal, params, quad)?;
    Ok((report.residual_i1, report.residual_i2))
}
