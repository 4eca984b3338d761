//! Non-negative inflow waveforms σ(t) and the outflow constant λ.
//!
//! Four closed representations are supported. Constant, piecewise-constant and
//! sampled signals are *segment-exact*: they can be walked as a sequence of
//! constant-level segments, which the propagators integrate in closed form.
//! Clipped sinusoid sums are smooth between clip crossings and go through the
//! numeric integrator.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of quadrature intervals per period.
pub const DEFAULT_INTERVALS_PER_PERIOD: usize = 10_000;

/// Uniform grid step for quadrature and numeric integration.
///
/// `step: None` selects the per-use default (T/10⁴ for one-period work).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub step: Option<f64>,
}

impl QuadratureSpec {
    pub fn with_step(step: f64) -> Self {
        Self { step: Some(step) }
    }

    /// Number of equal intervals covering `span`, never coarser than the requested step.
    pub fn intervals(&self, span: f64) -> usize {
        match self.step {
            Some(step) => ((span / step - 1e-9).ceil() as usize).max(1),
            None => DEFAULT_INTERVALS_PER_PERIOD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    lambda: f64,
}

impl SystemParams {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::Domain(format!(
                "lambda must be finite and > 0, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }

    #[inline]
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// A constant-level stretch `[start, end)` of a segment-exact signal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub level: f64,
}

impl Segment {
    #[inline]
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constant {
    level: f64,
    period: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstant {
    breakpoints: Vec<f64>,
    levels: Vec<f64>,
    periodic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinusoidTerm {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClippedSinusoidSum {
    mean: f64,
    terms: Vec<SinusoidTerm>,
    period: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    step: f64,
    values: Vec<f64>,
    periodic: bool,
}

/// Inflow waveform. Validated at construction; immutable afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SignalDescription", into = "SignalDescription")]
pub enum InputSignal {
    Constant(Constant),
    PiecewiseConstant(PiecewiseConstant),
    ClippedSinusoidSum(ClippedSinusoidSum),
    Sampled(Sampled),
}

fn check_rate(name: &str, value: f64) -> Result<()> {
    if !value.is_finite() || value < 0.0 {
        return Err(Error::InvalidSignal(format!(
            "{name} must be finite and >= 0, got {value}"
        )));
    }
    Ok(())
}

fn check_positive(name: &str, value: f64) -> Result<()> {
    if !value.is_finite() || value <= 0.0 {
        return Err(Error::InvalidSignal(format!(
            "{name} must be finite and > 0, got {value}"
        )));
    }
    Ok(())
}

impl InputSignal {
    pub fn constant(level: f64) -> Result<Self> {
        Self::constant_with_period(level, 1.0)
    }

    /// Constant inflow with a nominal period, used when the signal is analysed
    /// as a periodic input (the Poincaré map depends on T even though σ does not).
    pub fn constant_with_period(level: f64, period: f64) -> Result<Self> {
        check_rate("constant level", level)?;
        check_positive("period", period)?;
        Ok(Self::Constant(Constant { level, period }))
    }

    pub fn piecewise_constant(breakpoints: Vec<f64>, levels: Vec<f64>, periodic: bool) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(Error::InvalidSignal(
                "piecewise-constant signal needs at least two breakpoints".into(),
            ));
        }
        if levels.len() + 1 != breakpoints.len() {
            return Err(Error::InvalidSignal(format!(
                "expected {} levels for {} breakpoints, got {}",
                breakpoints.len() - 1,
                breakpoints.len(),
                levels.len()
            )));
        }
        if breakpoints[0] != 0.0 {
            return Err(Error::InvalidSignal(format!(
                "first breakpoint must be 0, got {}",
                breakpoints[0]
            )));
        }
        for pair in breakpoints.windows(2) {
            if !pair[1].is_finite() || pair[1] <= pair[0] {
                return Err(Error::InvalidSignal(format!(
                    "breakpoints must be strictly increasing and finite ({} then {})",
                    pair[0], pair[1]
                )));
            }
        }
        for &c in &levels {
            check_rate("level", c)?;
        }
        Ok(Self::PiecewiseConstant(PiecewiseConstant {
            breakpoints,
            levels,
            periodic,
        }))
    }

    /// Periodic piecewise-constant signal on `k` equal segments of `[0, period)`.
    pub fn equal_segments(period: f64, levels: Vec<f64>) -> Result<Self> {
        check_positive("period", period)?;
        if levels.is_empty() {
            return Err(Error::InvalidSignal("no levels given".into()));
        }
        let k = levels.len();
        let mut breakpoints: Vec<f64> = (0..k).map(|i| period * i as f64 / k as f64).collect();
        breakpoints.push(period);
        Self::piecewise_constant(breakpoints, levels, true)
    }

    /// `max(0, mean + Σ Aᵢ sin(ωᵢ t + φᵢ))`.
    ///
    /// When `period` is given it must be a common period of every term.
    /// Otherwise a period is inferred when all frequency ratios are rationals
    /// with denominators up to 1000; if none is found the signal is treated
    /// as non-periodic.
    pub fn clipped_sinusoid_sum(mean: f64, terms: Vec<SinusoidTerm>, period: Option<f64>) -> Result<Self> {
        if !mean.is_finite() {
            return Err(Error::InvalidSignal(format!("mean must be finite, got {mean}")));
        }
        if terms.is_empty() {
            return Err(Error::InvalidSignal(
                "sinusoid sum needs at least one term (use a constant signal instead)".into(),
            ));
        }
        for term in &terms {
            if !term.amplitude.is_finite() || !term.phase.is_finite() {
                return Err(Error::InvalidSignal(
                    "amplitudes and phases must be finite".into(),
                ));
            }
            check_positive("angular frequency", term.frequency)?;
        }
        let period = match period {
            Some(p) => {
                check_positive("period", p)?;
                for term in &terms {
                    let cycles = term.frequency * p / TAU;
                    if (cycles - cycles.round()).abs() > 1e-9 * cycles.max(1.0) || cycles.round() < 1.0 {
                        return Err(Error::InvalidSignal(format!(
                            "period {p} is not a multiple of 2π/{}",
                            term.frequency
                        )));
                    }
                }
                Some(p)
            }
            None => common_period(&terms),
        };
        Ok(Self::ClippedSinusoidSum(ClippedSinusoidSum {
            mean,
            terms,
            period,
        }))
    }

    /// Left-continuous piecewise-constant interpolation of `values` on a grid of
    /// spacing `step`; value `vᵢ` holds on `[i·step, (i+1)·step)`.
    pub fn sampled(step: f64, values: Vec<f64>, periodic: bool) -> Result<Self> {
        check_positive("sample step", step)?;
        if values.is_empty() {
            return Err(Error::InvalidSignal("sampled signal has no values".into()));
        }
        for &v in &values {
            check_rate("sample value", v)?;
        }
        Ok(Self::Sampled(Sampled {
            step,
            values,
            periodic,
        }))
    }

    pub fn evaluate(&self, t: f64) -> f64 {
        match self {
            Self::Constant(c) => c.level,
            Self::PiecewiseConstant(pc) => {
                let span = pc.span();
                let local = if pc.periodic { t.rem_euclid(span) } else { t };
                let idx = pc.breakpoints[1..].partition_point(|&b| b <= local);
                pc.levels[idx.min(pc.levels.len() - 1)]
            }
            Self::Sampled(s) => {
                let span = s.span();
                let local = if s.periodic { t.rem_euclid(span) } else { t };
                let idx = (local / s.step).floor().max(0.0) as usize;
                s.values[idx.min(s.values.len() - 1)]
            }
            Self::ClippedSinusoidSum(cs) => {
                let t = match cs.period {
                    Some(p) => t.rem_euclid(p),
                    None => t,
                };
                let raw = cs.terms.iter().fold(cs.mean, |acc, term| {
                    acc + term.amplitude * (term.frequency * t + term.phase).sin()
                });
                raw.max(0.0)
            }
        }
    }

    pub fn period(&self) -> Option<f64> {
        match self {
            Self::Constant(c) => Some(c.period),
            Self::PiecewiseConstant(pc) => pc.periodic.then(|| pc.span()),
            Self::Sampled(s) => s.periodic.then(|| s.span()),
            Self::ClippedSinusoidSum(cs) => cs.period,
        }
    }

    pub fn is_periodic(&self) -> bool {
        self.period().is_some()
    }

    /// True when σ is constant on a known list of segments.
    pub fn is_segment_exact(&self) -> bool {
        !matches!(self, Self::ClippedSinusoidSum(_))
    }

    /// An upper bound on σ(t) over all t.
    pub fn upper_bound(&self) -> f64 {
        match self {
            Self::Constant(c) => c.level,
            Self::PiecewiseConstant(pc) => pc.levels.iter().copied().fold(0.0, f64::max),
            Self::Sampled(s) => s.values.iter().copied().fold(0.0, f64::max),
            Self::ClippedSinusoidSum(cs) => {
                (cs.mean + cs.terms.iter().map(|t| t.amplitude.abs()).sum::<f64>()).max(0.0)
            }
        }
    }

    /// Constant-level segments covering `[0, horizon)`, or `None` for smooth signals.
    ///
    /// Periodic signals repeat their base pattern; a non-periodic piecewise or
    /// sampled signal holds its last level after the final breakpoint.
    pub fn segments(&self, horizon: f64) -> Option<SegmentIter<'_>> {
        if !self.is_segment_exact() {
            return None;
        }
        Some(SegmentIter {
            signal: self,
            horizon,
            cycle: 0,
            cell: 0,
            done: !(horizon > 0.0),
        })
    }

    /// σ̄ = (1/T)∫₀ᵀ σ(t)dt.
    ///
    /// Exact for segment-exact signals; composite trapezoid on the quadrature
    /// grid for clipped sinusoid sums.
    pub fn mean_over_period(&self, quad: &QuadratureSpec) -> Result<f64> {
        let period = self.period().ok_or(Error::NotPeriodic)?;
        Ok(match self {
            Self::Constant(c) => c.level,
            Self::PiecewiseConstant(pc) => {
                let area: f64 = pc
                    .levels
                    .iter()
                    .zip(pc.breakpoints.windows(2))
                    .map(|(c, w)| c * (w[1] - w[0]))
                    .sum();
                area / period
            }
            Self::Sampled(s) => s.values.iter().sum::<f64>() / s.values.len() as f64,
            Self::ClippedSinusoidSum(_) => trapezoid(|t| self.evaluate(t), 0.0, period, quad.intervals(period)) / period,
        })
    }

    /// Levels of a segment-exact signal's base pattern.
    pub fn levels(&self) -> Option<Vec<f64>> {
        match self {
            Self::Constant(c) => Some(vec![c.level]),
            Self::PiecewiseConstant(pc) => Some(pc.levels.clone()),
            Self::Sampled(s) => Some(s.values.clone()),
            Self::ClippedSinusoidSum(_) => None,
        }
    }

    fn cell_count(&self) -> usize {
        match self {
            Self::Constant(_) => 1,
            Self::PiecewiseConstant(pc) => pc.levels.len(),
            Self::Sampled(s) => s.values.len(),
            Self::ClippedSinusoidSum(_) => 0,
        }
    }

    fn cell(&self, j: usize) -> Segment {
        match self {
            Self::Constant(c) => Segment {
                start: 0.0,
                end: c.period,
                level: c.level,
            },
            Self::PiecewiseConstant(pc) => Segment {
                start: pc.breakpoints[j],
                end: pc.breakpoints[j + 1],
                level: pc.levels[j],
            },
            Self::Sampled(s) => Segment {
                start: s.step * j as f64,
                end: s.step * (j + 1) as f64,
                level: s.values[j],
            },
            Self::ClippedSinusoidSum(_) => unreachable!("smooth signals have no cells"),
        }
    }

    fn base_span(&self) -> f64 {
        match self {
            Self::Constant(c) => c.period,
            Self::PiecewiseConstant(pc) => pc.span(),
            Self::Sampled(s) => s.span(),
            Self::ClippedSinusoidSum(cs) => cs.period.unwrap_or(f64::INFINITY),
        }
    }
}

impl PiecewiseConstant {
    fn span(&self) -> f64 {
        *self.breakpoints.last().expect("validated non-empty")
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }
}

impl Sampled {
    fn span(&self) -> f64 {
        self.step * self.values.len() as f64
    }
}

impl ClippedSinusoidSum {
    pub fn terms(&self) -> &[SinusoidTerm] {
        &self.terms
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }
}

pub struct SegmentIter<'a> {
    signal: &'a InputSignal,
    horizon: f64,
    cycle: u64,
    cell: usize,
    done: bool,
}

impl Iterator for SegmentIter<'_> {
    type Item = Segment;

    fn next(&mut self) -> Option<Segment> {
        if self.done {
            return None;
        }
        let signal = self.signal;
        if let InputSignal::Constant(c) = signal {
            self.done = true;
            return Some(Segment {
                start: 0.0,
                end: self.horizon,
                level: c.level,
            });
        }
        let span = signal.base_span();
        if self.cycle > 0 && !signal.is_periodic() {
            self.done = true;
            let last = signal.cell(signal.cell_count() - 1);
            return (span < self.horizon).then_some(Segment {
                start: span,
                end: self.horizon,
                level: last.level,
            });
        }
        let offset = self.cycle as f64 * span;
        let cell = signal.cell(self.cell);
        let start = offset + cell.start;
        if start >= self.horizon {
            self.done = true;
            return None;
        }
        let end = (offset + cell.end).min(self.horizon);
        self.cell += 1;
        if self.cell == signal.cell_count() {
            self.cell = 0;
            self.cycle += 1;
        }
        if end >= self.horizon {
            self.done = true;
        }
        Some(Segment {
            start,
            end,
            level: cell.level,
        })
    }
}

/// Composite trapezoid rule with `n` equal intervals on `[a, b]`.
pub fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n.max(1);
    let h = (b - a) / n as f64;
    let interior: f64 = (1..n).map(|i| f(a + h * i as f64)).sum();
    h * (0.5 * (f(a) + f(b)) + interior)
}

/// Best rational approximation `p/q` of `r > 0` with `q <= max_den`, if within `tol`.
fn rational_approx(r: f64, max_den: u64, tol: f64) -> Option<(u64, u64)> {
    let (mut p0, mut q0, mut p1, mut q1) = (0u64, 1u64, 1u64, 0u64);
    let mut x = r;
    for _ in 0..64 {
        let a = x.floor();
        if a > 1e12 {
            break;
        }
        let a = a as u64;
        let (p2, q2) = (a * p1 + p0, a * q1 + q0);
        if q2 > max_den {
            break;
        }
        (p0, q0, p1, q1) = (p1, q1, p2, q2);
        if (r - p1 as f64 / q1 as f64).abs() <= tol * r {
            return Some((p1, q1));
        }
        let frac = x - a as f64;
        if frac == 0.0 {
            break;
        }
        x = 1.0 / frac;
    }
    None
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn common_period(terms: &[SinusoidTerm]) -> Option<f64> {
    let reference = terms[0].frequency;
    let ratios: Option<Vec<(u64, u64)>> = terms
        .iter()
        .map(|t| rational_approx(t.frequency / reference, 1000, 1e-12))
        .collect();
    let ratios = ratios?;
    let lcm = ratios
        .iter()
        .try_fold(1u64, |acc, &(_, q)| acc.checked_mul(q / gcd(acc, q)))?;
    let numerators: Vec<u64> = ratios.iter().map(|&(p, q)| p * (lcm / q)).collect();
    let g = numerators.iter().copied().fold(0, gcd);
    let fundamental = reference * g as f64 / lcm as f64;
    Some(TAU / fundamental)
}

/// Serialized form of [`InputSignal`]: a `kind` discriminator plus numeric fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SignalDescription {
    Constant {
        level: f64,
        #[serde(default = "default_period", skip_serializing_if = "is_unit")]
        period: f64,
    },
    PiecewiseConstant {
        breakpoints: Vec<f64>,
        levels: Vec<f64>,
        #[serde(default = "default_true")]
        periodic: bool,
    },
    ClippedSinusoidSum {
        mean: f64,
        amplitudes: Vec<f64>,
        frequencies: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        phases: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        period: Option<f64>,
    },
    Sampled {
        step: f64,
        values: Vec<f64>,
        #[serde(default = "default_true")]
        periodic: bool,
    },
}

fn default_period() -> f64 {
    1.0
}

fn is_unit(p: &f64) -> bool {
    *p == 1.0
}

fn default_true() -> bool {
    true
}

impl TryFrom<SignalDescription> for InputSignal {
    type Error = Error;

    fn try_from(desc: SignalDescription) -> Result<Self> {
        match desc {
            SignalDescription::Constant { level, period } => Self::constant_with_period(level, period),
            SignalDescription::PiecewiseConstant {
                breakpoints,
                levels,
                periodic,
            } => Self::piecewise_constant(breakpoints, levels, periodic),
            SignalDescription::ClippedSinusoidSum {
                mean,
                amplitudes,
                frequencies,
                phases,
                period,
            } => {
                let phases = phases.unwrap_or_else(|| vec![0.0; amplitudes.len()]);
                if amplitudes.len() != frequencies.len() || phases.len() != amplitudes.len() {
                    return Err(Error::InvalidSignal(
                        "amplitudes, frequencies and phases must have equal lengths".into(),
                    ));
                }
                let terms = amplitudes
                    .into_iter()
                    .zip(frequencies)
                    .zip(phases)
                    .map(|((amplitude, frequency), phase)| SinusoidTerm {
                        amplitude,
                        frequency,
                        phase,
                    })
                    .collect();
                Self::clipped_sinusoid_sum(mean, terms, period)
            }
            SignalDescription::Sampled {
                step,
                values,
                periodic,
            } => Self::sampled(step, values, periodic),
        }
    }
}

impl From<InputSignal> for SignalDescription {
    fn from(signal: InputSignal) -> Self {
        match signal {
            InputSignal::Constant(c) => Self::Constant {
                level: c.level,
                period: c.period,
            },
            InputSignal::PiecewiseConstant(pc) => Self::PiecewiseConstant {
                breakpoints: pc.breakpoints,
                levels: pc.levels,
                periodic: pc.periodic,
            },
            InputSignal::ClippedSinusoidSum(cs) => Self::ClippedSinusoidSum {
                mean: cs.mean,
                amplitudes: cs.terms.iter().map(|t| t.amplitude).collect(),
                frequencies: cs.terms.iter().map(|t| t.frequency).collect(),
                phases: Some(cs.terms.iter().map(|t| t.phase).collect()),
                period: cs.period,
            },
            InputSignal::Sampled(s) => Self::Sampled {
                step: s.step,
                values: s.values,
                periodic: s.periodic,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn two_level() -> InputSignal {
        InputSignal::piecewise_constant(vec![0.0, 1.0, 2.0], vec![0.0, 2.0], true).unwrap()
    }

    #[test]
    fn evaluate_examples() {
        assert_eq!(InputSignal::constant(1.0).unwrap().evaluate(7.3), 1.0);
        assert_eq!(two_level().evaluate(2.5), 0.0);
        assert_eq!(two_level().evaluate(1.5), 2.0);
        let cs = InputSignal::clipped_sinusoid_sum(
            1.0,
            vec![SinusoidTerm {
                amplitude: 2.0,
                frequency: 1.0,
                phase: 0.0,
            }],
            None,
        )
        .unwrap();
        assert_eq!(cs.evaluate(3.0 * PI / 2.0), 0.0);
    }

    #[test]
    fn mean_examples() {
        let quad = QuadratureSpec::default();
        assert_eq!(InputSignal::constant(1.0).unwrap().mean_over_period(&quad).unwrap(), 1.0);
        assert_eq!(two_level().mean_over_period(&quad).unwrap(), 1.0);
        let cs = InputSignal::clipped_sinusoid_sum(
            1.0,
            vec![SinusoidTerm {
                amplitude: 0.5,
                frequency: TAU,
                phase: 0.0,
            }],
            None,
        )
        .unwrap();
        assert!((cs.period().unwrap() - 1.0).abs() < 1e-15);
        let mean = cs.mean_over_period(&quad).unwrap();
        assert!((mean - 1.0).abs() < 1e-12, "{mean}");
        // independent cross-check at h = 1e-4 by a direct trapezoid sum
        let n = 10_000;
        let f = |t: f64| 1.0 + 0.5 * (TAU * t).sin();
        let mut s = 0.5 * (f(0.0) + f(1.0));
        for i in 1..n {
            s += f(i as f64 / n as f64);
        }
        assert!((s / n as f64 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_periodic_mean_is_rejected() {
        let pc = InputSignal::piecewise_constant(vec![0.0, 1.0], vec![1.0], false).unwrap();
        assert!(matches!(pc.mean_over_period(&QuadratureSpec::default()), Err(Error::NotPeriodic)));
        let qp = InputSignal::clipped_sinusoid_sum(
            1.0,
            vec![
                SinusoidTerm { amplitude: 0.5, frequency: 1.0, phase: 0.0 },
                SinusoidTerm { amplitude: 0.5, frequency: 2f64.sqrt(), phase: 0.0 },
            ],
            None,
        )
        .unwrap();
        assert!(!qp.is_periodic());
    }

    #[test]
    fn commensurate_period_inference() {
        let cs = InputSignal::clipped_sinusoid_sum(
            1.0,
            vec![
                SinusoidTerm { amplitude: 0.3, frequency: 2.0, phase: 0.0 },
                SinusoidTerm { amplitude: 0.3, frequency: 3.0, phase: 1.0 },
            ],
            None,
        )
        .unwrap();
        assert!((cs.period().unwrap() - TAU).abs() < 1e-12);
        assert!(InputSignal::clipped_sinusoid_sum(
            1.0,
            vec![SinusoidTerm { amplitude: 0.3, frequency: 2.0, phase: 0.0 }],
            Some(1.0)
        )
        .is_err());
    }

    #[test]
    fn construction_errors() {
        assert!(InputSignal::constant(-1.0).is_err());
        assert!(InputSignal::constant(f64::NAN).is_err());
        assert!(InputSignal::piecewise_constant(vec![0.0, 1.0, 1.0], vec![1.0, 1.0], true).is_err());
        assert!(InputSignal::piecewise_constant(vec![0.5, 1.0], vec![1.0], true).is_err());
        assert!(InputSignal::piecewise_constant(vec![0.0, 1.0], vec![1.0, 2.0], true).is_err());
        assert!(InputSignal::piecewise_constant(vec![0.0, 1.0], vec![-0.1], true).is_err());
        assert!(InputSignal::sampled(0.0, vec![1.0], true).is_err());
        assert!(InputSignal::sampled(0.1, vec![], true).is_err());
        assert!(InputSignal::constant_with_period(1.0, 0.0).is_err());
        assert!(SystemParams::new(0.0).is_err());
    }

    #[test]
    fn segments_cover_horizon() {
        let segs: Vec<_> = two_level().segments(3.5).unwrap().collect();
        assert_eq!(segs.len(), 4);
        assert_eq!(segs[2], Segment { start: 2.0, end: 3.0, level: 0.0 });
        assert_eq!(segs[3], Segment { start: 3.0, end: 3.5, level: 2.0 });

        let once = InputSignal::piecewise_constant(vec![0.0, 1.0, 2.0], vec![0.5, 2.0], false).unwrap();
        let segs: Vec<_> = once.segments(5.0).unwrap().collect();
        assert_eq!(segs.last().unwrap(), &Segment { start: 2.0, end: 5.0, level: 2.0 });
        assert_eq!(once.evaluate(4.0), 2.0);
    }

    #[test]
    fn sampled_is_left_constant() {
        let s = InputSignal::sampled(0.5, vec![1.0, 3.0], true).unwrap();
        assert_eq!(s.evaluate(0.49), 1.0);
        assert_eq!(s.evaluate(0.5), 3.0);
        assert_eq!(s.evaluate(1.2), 1.0);
        assert_eq!(s.period(), Some(1.0));
        assert_eq!(s.mean_over_period(&QuadratureSpec::default()).unwrap(), 2.0);
    }

    #[test]
    fn description_round_trip() {
        let text = "kind = \"piecewise_constant\"\nbreakpoints = [0.0, 1.0, 2.0]\nlevels = [0.0, 2.0]\n";
        let signal: InputSignal = toml::from_str(text).unwrap();
        assert_eq!(signal, two_level());
        let back: InputSignal = serde_json::from_str(&serde_json::to_string(&signal).unwrap()).unwrap();
        assert_eq!(back, signal);
        assert!(toml::from_str::<InputSignal>("kind = \"constant\"\nlevel = 1.0\nbogus = 2\n").is_err());
        assert!(toml::from_str::<InputSignal>("kind = \"constant\"\nlevel = -1.0\n").is_err());
    }

    fn arb_piecewise() -> impl Strategy<Value = InputSignal> {
        (prop::collection::vec((0.01f64..2.0, 0.0f64..5.0), 1..12)).prop_map(|cells| {
            let mut bps = vec![0.0];
            let mut levels = Vec::new();
            for (d, c) in cells {
                bps.push(bps.last().unwrap() + d);
                levels.push(c);
            }
            InputSignal::piecewise_constant(bps, levels, true).unwrap()
        })
    }

    fn arb_sinusoid() -> impl Strategy<Value = InputSignal> {
        (
            -1.0f64..3.0,
            prop::collection::vec((-2.0f64..2.0, 1u32..5, 0.0f64..TAU), 1..4),
        )
            .prop_map(|(m, terms)| {
                let terms = terms
                    .into_iter()
                    .map(|(a, n, p)| SinusoidTerm { amplitude: a, frequency: n as f64, phase: p })
                    .collect();
                InputSignal::clipped_sinusoid_sum(m, terms, None).unwrap()
            })
    }

    proptest! {
        #[test]
        fn non_negative_everywhere(sig in prop_oneof![arb_piecewise(), arb_sinusoid()], t in 0.0f64..100.0) {
            prop_assert!(sig.evaluate(t) >= 0.0);
        }

        #[test]
        fn periodic_piecewise_repeats(sig in arb_piecewise(), t in 0.0f64..50.0) {
            let period = sig.period().unwrap();
            prop_assert_eq!(sig.evaluate(t), sig.evaluate(t + period));
        }

        #[test]
        fn commensurate_sinusoids_repeat(sig in arb_sinusoid(), t in 0.0f64..50.0) {
            let period = sig.period().unwrap();
            prop_assert!((sig.evaluate(t) - sig.evaluate(t + period)).abs() <= 1e-12);
        }

        #[test]
        fn mean_scales_linearly(levels in prop::collection::vec(0.0f64..5.0, 1..10), alpha in 0.0f64..4.0) {
            let quad = QuadratureSpec::default();
            let base = InputSignal::equal_segments(2.0, levels.clone()).unwrap();
            let scaled = InputSignal::equal_segments(2.0, levels.iter().map(|c| alpha * c).collect()).unwrap();
            let lhs = scaled.mean_over_period(&quad).unwrap();
            let rhs = alpha * base.mean_over_period(&quad).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }
}
