//! Seeded randomized invariant suites over periodic piecewise-constant inputs.
//!
//! One ChaCha8 stream generates every case, so a seed and a case index
//! identify a signal exactly; failing cases carry their signal for replay.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotic::{certificates_from, running_averages_at, solution_independence_check};
use crate::dynamics::simulate_at;
use crate::error::Result;
use crate::periodic::{lemma_gap, poincare_map, PeriodicReport};
use crate::signals::{InputSignal, QuadratureSpec, SystemParams};

pub const MAX_SEGMENTS: usize = 20;
pub const MAX_LEVEL: f64 = 5.0;
pub const LAMBDA_RANGE: (f64, f64) = (0.1, 10.0);
pub const PERIOD_RANGE: (f64, f64) = (0.5, 10.0);
pub const CONTRACTION_PERIODS: usize = 20;

/// Occupancy a level needs before the strict-gap check applies.
pub const OCCUPANCY_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteCase {
    pub index: usize,
    pub lambda: f64,
    pub signal: InputSignal,
}

impl SuiteCase {
    pub fn params(&self) -> Result<SystemParams> {
        SystemParams::new(self.lambda)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub lemma: f64,
    pub identities: f64,
    pub theorem1: f64,
    pub strict_gap: f64,
    pub contraction: f64,
    pub independence: f64,
    pub certificate: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            lemma: 1e-8,
            identities: 1e-8,
            theorem1: 1e-9,
            strict_gap: 1e-10,
            contraction: 1e-10,
            independence: 1e-10,
            certificate: 1e-9,
        }
    }
}

impl Tolerances {
    /// Every tolerance set to `tol`.
    pub fn uniform(tol: f64) -> Self {
        Self {
            lemma: tol,
            identities: tol,
            theorem1: tol,
            strict_gap: tol,
            contraction: tol,
            independence: tol,
            certificate: tol,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.gen_range(lo..hi)
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

/// Random periodic piecewise-constant signal.
///
/// Segment durations are random weights in [0.05, 1) normalised to the
/// period. Every tenth case has all levels equal, and about one level in
/// eight is exactly zero.
fn random_case(rng: &mut ChaCha8Rng, index: usize) -> Result<SuiteCase> {
    let lambda = log_uniform(rng, LAMBDA_RANGE);
    let period = log_uniform(rng, PERIOD_RANGE);
    let k = rng.gen_range(1..=MAX_SEGMENTS);
    let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut breakpoints = Vec::with_capacity(k + 1);
    let mut acc = 0.0;
    breakpoints.push(0.0);
    for w in &weights[..k - 1] {
        acc += w;
        breakpoints.push(period * acc / total);
    }
    breakpoints.push(period);
    let levels: Vec<f64> = if index % 10 == 9 {
        vec![uniform(rng, (0.0, MAX_LEVEL)); k]
    } else {
        (0..k)
            .map(|_| if rng.gen_range(0..8) == 0 { 0.0 } else { uniform(rng, (0.0, MAX_LEVEL)) })
            .collect()
    };
    Ok(SuiteCase {
        index,
        lambda,
        signal: InputSignal::piecewise_constant(breakpoints, levels, true)?,
    })
}

/// `n` cases from `seed`; case i depends only on the seed and cases before it.
pub fn random_periodic_suite(seed: u64, n: usize) -> Result<Vec<SuiteCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| random_case(&mut rng, i)).collect()
}

/// Number of distinct levels occupying at least 1% of the period.
pub fn occupied_levels(signal: &InputSignal) -> usize {
    let Some(period) = signal.period() else { return 0 };
    let mut occupancy: Vec<(f64, f64)> = Vec::new();
    for seg in signal.segments(period).into_iter().flatten() {
        match occupancy.iter_mut().find(|(level, _)| *level == seg.level) {
            Some(entry) => entry.1 += seg.duration(),
            None => occupancy.push((seg.level, seg.duration())),
        }
    }
    occupancy
        .iter()
        .filter(|(_, d)| *d >= OCCUPANCY_FRACTION * period)
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicOutcome {
    pub case: SuiteCase,
    pub report: PeriodicReport,
    /// w[σ] − λσ̄/(λ+σ̄)
    pub theorem1_excess: f64,
    /// Two distinct levels each occupy at least 1% of the period.
    pub strict_gap_required: bool,
    /// max over n ≤ 20 and x(0) ∈ {0, 1} of |x(nT) − x_p(0)| − aⁿ|x(0) − x_p(0)|
    pub contraction_excess: f64,
    pub failures: Vec<String>,
}

impl PeriodicOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn check_periodic_case(case: &SuiteCase, tol: &Tolerances) -> Result<PeriodicOutcome> {
    let params = case.params()?;
    let signal = &case.signal;
    let report = lemma_gap(signal, &params)?;
    let theorem1_excess = report.w_sigma - report.w_const;
    let strict_gap_required = occupied_levels(signal) >= 2;

    let map = poincare_map(signal, &params)?;
    let xp = map.fixed_point();
    let period = signal.period().expect("suite signals are periodic");
    let times: Vec<f64> = (1..=CONTRACTION_PERIODS).map(|n| n as f64 * period).collect();
    let mut contraction_excess = f64::NEG_INFINITY;
    for x0 in [0.0, 1.0] {
        let traj = simulate_at(signal, &params, x0, &times)?;
        for (&t, &x) in traj.times().iter().zip(traj.states()) {
            let n = (t / period).round();
            if n < 1.0 || (t - n * period).abs() > 1e-9 * t {
                continue;
            }
            let n = n as i32;
            let excess = (x - xp).abs() - map.a.powi(n) * (x0 - xp).abs();
            contraction_excess = contraction_excess.max(excess);
        }
    }

    let mut failures = Vec::new();
    if !(report.residual_lemma <= tol.lemma) {
        failures.push(format!("residual_lemma {:e} > {:e}", report.residual_lemma, tol.lemma));
    }
    for (name, r) in [("residual_i1", report.residual_i1), ("residual_i2", report.residual_i2)] {
        if !(r <= tol.identities) {
            failures.push(format!("{name} {r:e} > {:e}", tol.identities));
        }
    }
    if !(theorem1_excess <= tol.theorem1) {
        failures.push(format!("w[σ] exceeds the constant benchmark by {theorem1_excess:e}"));
    }
    if strict_gap_required && !(report.gap > tol.strict_gap) {
        failures.push(format!("gap {:e} not above {:e} for a non-constant signal", report.gap, tol.strict_gap));
    }
    if !(contraction_excess <= tol.contraction) {
        failures.push(format!("contraction bound exceeded by {contraction_excess:e}"));
    }
    Ok(PeriodicOutcome {
        case: case.clone(),
        report,
        theorem1_excess,
        strict_gap_required,
        contraction_excess,
        failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticSettings {
    /// Horizon of the solution-independence check.
    pub tau: f64,
    /// Certificates run on whole periods between `tau_min` and `tau_max`.
    pub tau_min: f64,
    pub tau_max: f64,
    pub checkpoints: usize,
}

impl Default for AsymptoticSettings {
    fn default() -> Self {
        Self {
            tau: 100.0,
            tau_min: 10.0,
            tau_max: 1e4,
            checkpoints: 16,
        }
    }
}

/// Log-spaced whole-period checkpoints in [tau_min, tau_max], deduplicated.
pub fn period_checkpoints(period: f64, settings: &AsymptoticSettings) -> Vec<f64> {
    let n = settings.checkpoints.max(2);
    let ratio = (settings.tau_max / settings.tau_min).ln();
    let mut cycles: Vec<u64> = (0..n)
        .map(|i| {
            let tau = settings.tau_min * (ratio * i as f64 / (n - 1) as f64).exp();
            ((tau / period).round() as u64).max(1)
        })
        .collect();
    cycles.dedup();
    cycles.into_iter().map(|c| c as f64 * period).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticOutcome {
    pub case: SuiteCase,
    pub avg_diff: f64,
    pub independence_bound: f64,
    /// Smallest certificate slack over both starts and every checkpoint.
    pub min_slack: f64,
    /// Log-log slope of |correction| against τ from x(0) = 0; `None` when the
    /// correction vanishes identically.
    pub correction_slope: Option<f64>,
    pub failures: Vec<String>,
}

impl AsymptoticOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

pub fn check_asymptotic_case(case: &SuiteCase, settings: &AsymptoticSettings, tol: &Tolerances) -> Result<AsymptoticOutcome> {
    let params = case.params()?;
    let signal = &case.signal;
    let period = signal.period().expect("suite signals are periodic");
    let quad = QuadratureSpec::default();
    let sigma_bar = signal.mean_over_period(&quad)?;

    let independence = solution_independence_check(signal, &params, 0.0, 1.0, settings.tau)?;
    let taus = period_checkpoints(period, settings);
    let mut min_slack = f64::INFINITY;
    let mut correction_slope = None;
    for x0 in [0.0, 1.0] {
        let averages = running_averages_at(signal, &params, x0, &taus, &quad)?;
        let certs = certificates_from(&averages, &params, sigma_bar);
        min_slack = certs.iter().map(|c| c.slack).fold(min_slack, f64::min);
        if x0 == 0.0 {
            let scaled = certs.last().map_or(0.0, |c| (c.correction * c.tau).abs());
            if scaled > 1e-9 && certs.iter().all(|c| c.correction != 0.0) {
                let mags: Vec<f64> = certs.iter().map(|c| c.correction.abs()).collect();
                correction_slope = Some(log_slope(&taus, &mags));
            }
        }
    }

    let mut failures = Vec::new();
    if !(independence.avg_diff <= independence.bound + tol.independence) {
        failures.push(format!(
            "averaged difference {:e} exceeds |Δx0|/(λτ) = {:e}",
            independence.avg_diff, independence.bound
        ));
    }
    if !(min_slack >= -tol.certificate) {
        failures.push(format!("finite-τ certificate slack {min_slack:e} below {:e}", -tol.certificate));
    }
    Ok(AsymptoticOutcome {
        case: case.clone(),
        avg_diff: independence.avg_diff,
        independence_bound: independence.bound,
        min_slack,
        correction_slope,
        failures,
    })
}

pub fn run_periodic_suite(cases: &[SuiteCase], tol: &Tolerances) -> Result<Vec<PeriodicOutcome>> {
    cases.par_iter().map(|c| check_periodic_case(c, tol)).collect()
}

pub fn run_asymptotic_suite(
    cases: &[SuiteCase],
    settings: &AsymptoticSettings,
    tol: &Tolerances,
) -> Result<Vec<AsymptoticOutcome>> {
    cases.par_iter().map(|c| check_asymptotic_case(c, settings, tol)).collect()
}

/// Counts of residuals per decade: bucket i holds values in [10^(lo+i), 10^(lo+i+1)),
/// with the first bucket also holding everything smaller (including zero) and
/// the last everything larger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecadeHistogram {
    pub lowest_exponent: i32,
    pub counts: Vec<usize>,
}

impl DecadeHistogram {
    pub fn new(lowest_exponent: i32, highest_exponent: i32) -> Self {
        Self {
            lowest_exponent,
            counts: vec![0; (highest_exponent - lowest_exponent).max(1) as usize],
        }
    }

    pub fn add(&mut self, value: f64) {
        let last = self.counts.len() - 1;
        let bucket = if value > 0.0 {
            let e = value.log10().floor() as i64 - self.lowest_exponent as i64;
            e.clamp(0, last as i64) as usize
        } else {
            0
        };
        self.counts[bucket] += 1;
    }
}
