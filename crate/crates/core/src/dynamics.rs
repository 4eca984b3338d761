//! Forward solution of x' = σ(t)(1 − x) − λx.
//!
//! On constant-σ segments the equation is linear with constant coefficients,
//! so states and the running integral ∫x are propagated in closed form.
//! Clipped sinusoid inputs use classical RK4 on an augmented state that also
//! carries ∫x and ∫σ.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::signals::{InputSignal, QuadratureSpec, SystemParams};

/// Largest overshoot outside [0, 1] that is treated as rounding and clamped.
pub const CLAMP_TOLERANCE: f64 = 1e-12;

/// Closed-form solution over a segment of constant inflow `c` and length `h`.
///
/// Returns `(x1, ∫₀ʰ x)`. With `k = λ + c` and `x∞ = c/k`,
/// `x1 = x∞ + (x0 − x∞)e^{−kh}` and `∫x = x∞h + (x0 − x∞)(1 − e^{−kh})/k`.
pub fn step_exact(x0: f64, c: f64, h: f64, params: &SystemParams) -> (f64, f64) {
    let rate = params.lambda() + c;
    let attractor = c / rate;
    let excess = x0 - attractor;
    let one_minus_decay = -(-rate * h).exp_m1();
    let x1 = attractor + excess * (1.0 - one_minus_decay);
    let integral = attractor * h + excess * one_minus_decay / rate;
    (x1.clamp(0.0, 1.0), integral)
}

/// Default grid step: resolves the fastest time constant 1/(λ + σ) and, for
/// periodic smooth inputs, at least 10⁴ steps per period.
pub fn default_step(signal: &InputSignal, params: &SystemParams) -> f64 {
    let mut step = (0.01 / params.lambda()).min(0.01 / (1.0 + signal.upper_bound()));
    if let (false, Some(period)) = (signal.is_segment_exact(), signal.period()) {
        step = step.min(period / 1e4);
    }
    step
}

pub(crate) fn rk4_step<const N: usize>(
    rhs: impl Fn(f64, &[f64; N]) -> [f64; N],
    t: f64,
    y: &[f64; N],
    h: f64,
) -> [f64; N] {
    let shift = |base: &[f64; N], k: &[f64; N], scale: f64| {
        let mut out = *base;
        for (o, d) in out.iter_mut().zip(k) {
            *o += scale * d;
        }
        out
    };
    let k1 = rhs(t, y);
    let k2 = rhs(t + 0.5 * h, &shift(y, &k1, 0.5 * h));
    let k3 = rhs(t + 0.5 * h, &shift(y, &k2, 0.5 * h));
    let k4 = rhs(t + h, &shift(y, &k3, h));
    let mut out = *y;
    for i in 0..N {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Clamp a numerically propagated occupancy into [0, 1], or fail if the
/// overshoot is larger than rounding.
pub(crate) fn admit_state(x: f64, time: f64, step: f64) -> Result<f64> {
    if !(-CLAMP_TOLERANCE..=1.0 + CLAMP_TOLERANCE).contains(&x) {
        return Err(Error::StepSize {
            time,
            state: x,
            step,
            suggested_step: step / 4.0,
        });
    }
    Ok(x.clamp(0.0, 1.0))
}

pub(crate) fn check_occupancy(x0: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&x0) {
        return Err(Error::Domain(format!("initial occupancy must lie in [0, 1], got {x0}")));
    }
    Ok(())
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }

    pub fn plus(&self, value: f64) -> f64 {
        let mut copy = *self;
        copy.add(value);
        copy.value()
    }
}

/// State of a forward pass at a recorded time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Sample {
    pub t: f64,
    pub x: f64,
    pub int_x: f64,
    pub int_sigma: f64,
    /// Inflow level on the interval ending at `t` (segment-exact passes only).
    pub level: Option<f64>,
}

/// Single forward pass from `x0` at t = 0, calling `visit` at every knot
/// (increasing, positive; the last knot is the horizon). Segment-exact passes
/// may also visit interior breakpoints when `visit_breakpoints` is set.
pub(crate) fn propagate(
    signal: &InputSignal,
    params: &SystemParams,
    x0: f64,
    knots: &[f64],
    max_step: f64,
    visit_breakpoints: bool,
    mut visit: impl FnMut(Sample),
) -> Result<()> {
    let Some(&horizon) = knots.last() else {
        return Ok(());
    };
    let tiny = 1e-12 * horizon.max(1.0);
    let mut t = 0.0;
    let mut x = x0;
    let mut k = knots.partition_point(|&s| s <= 0.0);

    if let Some(segments) = signal.segments(horizon) {
        // Knots inside a segment are reached from the segment start in one
        // closed-form step, so rounding does not accumulate along fine grids.
        let mut acc_x = CompensatedSum::default();
        let mut acc_sigma = CompensatedSum::default();
        for seg in segments {
            let (x_start, level) = (x, seg.level);
            let sample_at = |to: f64, acc_x: &CompensatedSum, acc_sigma: &CompensatedSum| {
                let dt = (to - seg.start).max(0.0);
                let (x1, area) = step_exact(x_start, level, dt, params);
                Sample {
                    t: to,
                    x: x1,
                    int_x: acc_x.plus(area),
                    int_sigma: acc_sigma.plus(level * dt),
                    level: Some(level),
                }
            };
            while k < knots.len() && knots[k] < seg.end - tiny {
                visit(sample_at(knots[k], &acc_x, &acc_sigma));
                k += 1;
            }
            let end = sample_at(seg.end, &acc_x, &acc_sigma);
            let dt = seg.duration();
            acc_x.add(step_exact(x_start, level, dt, params).1);
            acc_sigma.add(level * dt);
            x = end.x;
            if k < knots.len() && knots[k] <= seg.end + tiny {
                visit(Sample { t: knots[k], ..end });
                k += 1;
            } else if visit_breakpoints && seg.end > tiny {
                visit(end);
            }
        }
        return Ok(());
    }

    let (mut int_x, mut int_sigma) = (0.0, 0.0);
    let lambda = params.lambda();
    let rhs = |time: f64, y: &[f64; 3]| {
        let s = signal.evaluate(time);
        [s * (1.0 - y[0]) - lambda * y[0], y[0], s]
    };
    while k < knots.len() {
        let target = knots[k];
        let n = ((target - t) / max_step - 1e-9).ceil().max(1.0) as usize;
        let h = (target - t) / n as f64;
        let start = t;
        let mut y = [x, int_x, int_sigma];
        for i in 0..n {
            let now = start + h * i as f64;
            y = rk4_step(rhs, now, &y, h);
            y[0] = admit_state(y[0], now + h, h)?;
        }
        t = target;
        [x, int_x, int_sigma] = y;
        visit(Sample { t, x, int_x, int_sigma, level: None });
        k += 1;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Integration {
    /// Closed-form propagation; `interval_levels[i]` is σ on `(tᵢ, tᵢ₊₁)`.
    SegmentExact { interval_levels: Vec<f64> },
    /// Classical RK4 with at most this step.
    Rk4 { max_step: f64 },
}

/// Sampled solution of the flow equation.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<f64>,
    sigma: Vec<f64>,
    cumulative_x: Vec<f64>,
    cumulative_sigma: Vec<f64>,
    integration: Integration,
}

#[derive(Serialize)]
struct TrajectoryRow {
    t: f64,
    x: f64,
    sigma: f64,
    cumulative_x: f64,
}

impl Trajectory {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn cumulative_x(&self) -> &[f64] {
        &self.cumulative_x
    }

    pub fn cumulative_sigma(&self) -> &[f64] {
        &self.cumulative_sigma
    }

    pub fn integration(&self) -> &Integration {
        &self.integration
    }

    pub fn initial_state(&self) -> f64 {
        self.states[0]
    }

    pub fn final_state(&self) -> f64 {
        *self.states.last().expect("trajectory is never empty")
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("trajectory is never empty")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// ∫₀ᵗ x. Exact between grid points for segment-exact trajectories,
    /// trapezoid on the linear interpolant otherwise.
    fn cumulative_at(&self, t: f64, params: &SystemParams) -> f64 {
        let i = self.times.partition_point(|&s| s <= t).saturating_sub(1);
        if i + 1 >= self.times.len() || t == self.times[i] {
            return self.cumulative_x[i];
        }
        let dt = t - self.times[i];
        let partial = match &self.integration {
            Integration::SegmentExact { interval_levels } => {
                step_exact(self.states[i], interval_levels[i], dt, params).1
            }
            Integration::Rk4 { .. } => {
                let width = self.times[i + 1] - self.times[i];
                let x_t = self.states[i] + (self.states[i + 1] - self.states[i]) * dt / width;
                0.5 * dt * (self.states[i] + x_t)
            }
        };
        self.cumulative_x[i] + partial
    }

    /// (1/(to − from))∫_from^to x dt.
    ///
    /// `params` must be the ones the trajectory was simulated with; they are
    /// only used to integrate exactly inside a grid interval.
    pub fn average_x(&self, from: f64, to: f64, params: &SystemParams) -> Result<f64> {
        let start = self.times[0];
        let end = self.horizon();
        let slack = 1e-12 * end.abs().max(1.0);
        if !(from < to) || from < start - slack || to > end + slack {
            return Err(Error::OutOfRange { from, to, start, end });
        }
        let area = self.cumulative_at(to.min(end), params) - self.cumulative_at(from.max(start), params);
        Ok((area / (to - from)).clamp(0.0, 1.0))
    }

    /// CSV with columns `t, x, sigma, cumulative_x`; floats use shortest
    /// round-trip formatting.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        for i in 0..self.times.len() {
            writer.serialize(TrajectoryRow {
                t: self.times[i],
                x: self.states[i],
                sigma: self.sigma[i],
                cumulative_x: self.cumulative_x[i],
            })?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Solve from `x0` over `[0, horizon]`, recording a uniform grid (plus every
/// segment breakpoint for segment-exact signals).
///
/// `grid.step = None` uses [`default_step`].
pub fn simulate(
    signal: &InputSignal,
    params: &SystemParams,
    x0: f64,
    horizon: f64,
    grid: &QuadratureSpec,
) -> Result<Trajectory> {
    check_occupancy(x0)?;
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::Domain(format!("horizon must be finite and > 0, got {horizon}")));
    }
    let step = grid.step.unwrap_or_else(|| default_step(signal, params));
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::Domain(format!("grid step must be finite and > 0, got {step}")));
    }
    let n = ((horizon / step - 1e-9).ceil() as usize).max(1);
    let knots: Vec<f64> = (1..=n)
        .map(|i| if i == n { horizon } else { horizon * i as f64 / n as f64 })
        .collect();
    simulate_on_knots(signal, params, x0, &knots, step)
}

/// Solve from `x0` and record the state at each of `times` (increasing, > 0).
///
/// Segment breakpoints are also recorded for segment-exact signals; smooth
/// signals are integrated with [`default_step`].
pub fn simulate_at(signal: &InputSignal, params: &SystemParams, x0: f64, times: &[f64]) -> Result<Trajectory> {
    check_occupancy(x0)?;
    if times.is_empty() || times.windows(2).any(|w| !(w[1] > w[0])) || !(times[0] > 0.0) {
        return Err(Error::Domain("record times must be positive and strictly increasing".into()));
    }
    simulate_on_knots(signal, params, x0, times, default_step(signal, params))
}

pub(crate) fn simulate_on_knots(
    signal: &InputSignal,
    params: &SystemParams,
    x0: f64,
    knots: &[f64],
    max_step: f64,
) -> Result<Trajectory> {
    let capacity = knots.len() + 1;
    let mut times = Vec::with_capacity(capacity);
    let mut states = Vec::with_capacity(capacity);
    let mut cumulative_x = Vec::with_capacity(capacity);
    let mut cumulative_sigma = Vec::with_capacity(capacity);
    let mut levels = Vec::with_capacity(capacity);
    times.push(0.0);
    states.push(x0);
    cumulative_x.push(0.0);
    cumulative_sigma.push(0.0);
    propagate(signal, params, x0, knots, max_step, true, |s| {
        times.push(s.t);
        states.push(s.x);
        cumulative_x.push(s.int_x);
        cumulative_sigma.push(s.int_sigma);
        if let Some(level) = s.level {
            levels.push(level);
        }
    })?;
    let sigma = times.iter().map(|&t| signal.evaluate(t)).collect();
    let integration = if signal.is_segment_exact() {
        Integration::SegmentExact { interval_levels: levels }
    } else {
        Integration::Rk4 { max_step }
    };
    Ok(Trajectory {
        times,
        states,
        sigma,
        cumulative_x,
        cumulative_sigma,
        integration,
    })
}
