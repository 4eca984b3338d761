//! Long-run averages for inputs that need not be periodic.
//!
//! A single forward pass records ∫σ, ∫x and x(τ) at a list of checkpoints.
//! The limsup of a running mean is estimated by the maximum over the last
//! half of the checkpoints (tail-max).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynamics::{check_occupancy, default_step, propagate};
use crate::error::{Error, Result};
use crate::periodic::format_f64;
use crate::signals::{InputSignal, QuadratureSpec, SystemParams};

pub const DEFAULT_CHECKPOINTS: usize = 64;

/// Ratio between the last and first checkpoint of the default log grid.
pub const CHECKPOINT_SPAN: f64 = 1000.0;

/// Floating-point allowance used in place of a quadrature error for
/// closed-form passes.
const EXACT_PASS_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningAverages {
    pub x0: f64,
    pub taus: Vec<f64>,
    /// (1/τ)∫₀^τ σ
    pub mean_input: Vec<f64>,
    /// (1/τ)∫₀^τ x
    pub mean_state: Vec<f64>,
    /// x(τ)
    pub states: Vec<f64>,
    pub sigma_bar_est: f64,
    pub w_est: f64,
    /// First checkpoint index of the tail-max window.
    pub window_start: usize,
}

impl RunningAverages {
    /// Window `[τ_first, τ_last]` over which the limsups were estimated.
    pub fn window(&self) -> (f64, f64) {
        (self.taus[self.window_start], *self.taus.last().expect("non-empty"))
    }

    /// λσ̄(τ)/(λ+σ̄(τ)) − λ·mean_state(τ) at every checkpoint.
    pub fn pointwise_margins(&self, params: &SystemParams) -> Vec<f64> {
        let lambda = params.lambda();
        self.mean_input
            .iter()
            .zip(&self.mean_state)
            .map(|(&s, &m)| lambda * s / (lambda + s) - lambda * m)
            .collect()
    }
}

/// Maximum of the last half of `values` and the index where that half starts.
pub fn tail_max(values: &[f64]) -> (f64, usize) {
    let start = values.len() / 2;
    let max = values[start..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (max, start)
}

/// `n` logarithmically spaced checkpoints from `tau_max/1000` to `tau_max`.
pub fn log_checkpoints(tau_max: f64, n: usize) -> Vec<f64> {
    let first = tau_max / CHECKPOINT_SPAN;
    let ratio = CHECKPOINT_SPAN.ln() / (n - 1) as f64;
    (0..n)
        .map(|i| if i + 1 == n { tau_max } else { first * (ratio * i as f64).exp() })
        .collect()
}

/// max(1000/λ, 100·T), or 1000/λ without an intrinsic period.
pub fn default_horizon(signal: &InputSignal, params: &SystemParams) -> f64 {
    let base = 1000.0 / params.lambda();
    match signal.period() {
        Some(period) if !matches!(signal, InputSignal::Constant(_)) => base.max(100.0 * period),
        _ => base,
    }
}

pub fn running_averages(
    signal: &InputSignal,
    params: &SystemParams,
    x0: f64,
    tau_max: f64,
    n_checkpoints: usize,
) -> Result<RunningAverages> {
    if !(tau_max.is_finite() && tau_max > 0.0) {
        return Err(Error::Domain(format!("tau_max must be finite and > 0, got {tau_max}")));
    }
    if n_checkpoints < 2 {
        return Err(Error::Domain(format!("need at least 2 checkpoints, got {n_checkpoints}")));
    }
    running_averages_at(signal, params, x0, &log_checkpoints(tau_max, n_checkpoints), &QuadratureSpec::default())
}

/// Running averages at arbitrary increasing checkpoints. `quad.step` overrides
/// the numeric step for smooth signals.
pub fn running_averages_at(
    signal: &InputSignal,
    params: &SystemParams,
    x0: f64,
    taus: &[f64],
    quad: &QuadratureSpec,
) -> Result<RunningAverages> {
    check_occupancy(x0)?;
    if taus.is_empty() || !(taus[0] > 0.0) || taus.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Domain("checkpoints must be positive and strictly increasing".into()));
    }
    let step = quad.step.unwrap_or_else(|| default_step(signal, params));
    let mut mean_input = Vec::with_capacity(taus.len());
    let mut mean_state = Vec::with_capacity(taus.len());
    let mut states = Vec::with_capacity(taus.len());
    propagate(signal, params, x0, taus, step, false, |s| {
        mean_input.push(s.int_sigma / s.t);
        mean_state.push(s.int_x / s.t);
        states.push(s.x);
    })?;
    let (sigma_bar_est, window_start) = tail_max(&mean_input);
    let (state_est, _) = tail_max(&mean_state);
    Ok(RunningAverages {
        x0,
        taus: taus.to_vec(),
        mean_input,
        mean_state,
        states,
        sigma_bar_est,
        w_est: params.lambda() * state_est,
        window_start,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Check {
    pub w_est: f64,
    pub sigma_bar_est: f64,
    /// λσ̄_est/(λ+σ̄_est)
    pub bound: f64,
    /// bound − w_est
    pub margin: f64,
    /// ε_est = quadrature error + 2/(λτ_max) + 1/τ_window
    pub slack: f64,
    pub quadrature_error: f64,
    /// margin < −slack
    pub violated: bool,
    pub window_start: f64,
    pub window_end: f64,
}

/// Compare the estimated long-run output with the constant-input bound at
/// the estimated mean input.
///
/// For smooth signals the quadrature error is estimated by repeating the
/// pass at twice the step. The 1/τ_window term bounds how far the initial
/// condition can move λ·(1/τ)∫x anywhere in the tail window, since two
/// solutions differ by at most |Δx(0)|e^{−λt}.
pub fn theorem2_check(signal: &InputSignal, params: &SystemParams, x0: f64, tau_max: f64) -> Result<Theorem2Check> {
    let lambda = params.lambda();
    let bound_of = |s: f64| lambda * s / (lambda + s);
    let averages = running_averages(signal, params, x0, tau_max, DEFAULT_CHECKPOINTS)?;
    let bound = bound_of(averages.sigma_bar_est);
    let quadrature_error = if signal.is_segment_exact() {
        EXACT_PASS_SLACK
    } else {
        let coarse_step = 2.0 * default_step(signal, params);
        let coarse = running_averages_at(signal, params, x0, &averages.taus, &QuadratureSpec::with_step(coarse_step))?;
        (coarse.w_est - averages.w_est).abs() + (bound_of(coarse.sigma_bar_est) - bound).abs() + EXACT_PASS_SLACK
    };
    let (window_start, window_end) = averages.window();
    let slack = quadrature_error + 2.0 / (lambda * tau_max) + 1.0 / window_start;
    let margin = bound - averages.w_est;
    Ok(Theorem2Check {
        w_est: averages.w_est,
        sigma_bar_est: averages.sigma_bar_est,
        bound,
        margin,
        slack,
        quadrature_error,
        violated: margin < -slack,
        window_start,
        window_end,
    })
}

/// The finite-horizon inequality
/// λ(1/τ)∫x ≤ (1−x*)²(1/τ)∫σ + λx*² + (2x*−1)(x(τ)−x(0))/τ − (x(τ)²−x(0)²)/(2τ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiniteTauCertificate {
    pub tau: f64,
    pub lhs: f64,
    pub rhs: f64,
    /// rhs − lhs = (1/τ)∫(x − x*)²(λ+σ) ≥ 0
    pub slack: f64,
    /// The two boundary terms of rhs, which vanish like 1/τ.
    pub correction: f64,
}

/// Certificates at each τ in `taus`.
///
/// x* = σ̄/(λ+σ̄) uses the exact period mean for periodic signals and the
/// tail-max estimate over `taus` otherwise; the inequality holds for any
/// constant x*.
pub fn finite_tau_certificates(
    signal: &InputSignal,
    params: &SystemParams,
    x0: f64,
    taus: &[f64],
) -> Result<Vec<FiniteTauCertificate>> {
    let averages = running_averages_at(signal, params, x0, taus, &QuadratureSpec::default())?;
    let sigma_bar = match signal.period() {
        Some(_) => signal.mean_over_period(&QuadratureSpec::default())?,
        None => averages.sigma_bar_est,
    };
    Ok(certificates_from(&averages, params, sigma_bar))
}

/// Certificates from an existing pass with a caller-chosen σ̄.
pub fn certificates_from(averages: &RunningAverages, params: &SystemParams, sigma_bar: f64) -> Vec<FiniteTauCertificate> {
    let lambda = params.lambda();
    let x_star = sigma_bar / (lambda + sigma_bar);
    let x0 = averages.x0;
    (0..averages.taus.len())
        .map(|i| {
            let tau = averages.taus[i];
            let x_tau = averages.states[i];
            let lhs = lambda * averages.mean_state[i];
            let correction = (2.0 * x_star - 1.0) * (x_tau - x0) / tau - (x_tau * x_tau - x0 * x0) / (2.0 * tau);
            let rhs = (1.0 - x_star).powi(2) * averages.mean_input[i] + lambda * x_star * x_star + correction;
            FiniteTauCertificate {
                tau,
                lhs,
                rhs,
                slack: rhs - lhs,
                correction,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndependenceCheck {
    /// |(1/τ)∫x_a − (1/τ)∫x_b|
    pub avg_diff: f64,
    /// |x_a(0) − x_b(0)|/(λτ)
    pub bound: f64,
}

impl IndependenceCheck {
    pub fn holds(&self) -> bool {
        self.avg_diff <= self.bound + 1e-10
    }
}

pub fn solution_independence_check(
    signal: &InputSignal,
    params: &SystemParams,
    x0_a: f64,
    x0_b: f64,
    tau: f64,
) -> Result<IndependenceCheck> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Domain(format!("tau must be finite and > 0, got {tau}")));
    }
    let quad = QuadratureSpec::default();
    let a = running_averages_at(signal, params, x0_a, &[tau], &quad)?;
    let b = running_averages_at(signal, params, x0_b, &[tau], &quad)?;
    Ok(IndependenceCheck {
        avg_diff: (a.mean_state[0] - b.mean_state[0]).abs(),
        bound: (x0_a - x0_b).abs() / (params.lambda() * tau),
    })
}

/// CSV with columns `tau, mean_input, mean_state, lhs, rhs, slack`.
pub fn write_csv<W: Write>(averages: &RunningAverages, certificates: &[FiniteTauCertificate], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["tau", "mean_input", "mean_state", "lhs", "rhs", "slack"])?;
    for (i, cert) in certificates.iter().enumerate() {
        writer.write_record([
            format_f64(averages.taus[i]),
            format_f64(averages.mean_input[i]),
            format_f64(averages.mean_state[i]),
            format_f64(cert.lhs),
            format_f64(cert.rhs),
            format_f64(cert.slack),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
