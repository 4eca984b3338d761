//! Falsification harness: search mean-constrained waveform families for an
//! averaged output above the constant-inflow benchmark λσ̄/(λ+σ̄).
//!
//! Every evaluated waveform is projected onto the mean constraint first and
//! logged, so the "never beats the benchmark" check runs over the whole log.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::periodic::{averaged_output, constant_benchmark, format_f64};
use crate::signals::{InputSignal, QuadratureSpec, SystemParams};

pub const DEFAULT_EVALUATION_CAP: usize = 10_000;

/// Largest exhaustive grid `grid_search` will enumerate.
pub const MAX_GRID_POINTS: usize = 10_000_000;

/// Outputs closer than this are treated as ties.
const TIE_TOLERANCE: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum WaveformFamily {
    /// Two-level switching: `high` on `[0, duty·T)`, `low` on `[duty·T, T)`.
    BangBang { period: f64 },
    /// `segments` free levels on an equal partition of the period.
    PiecewiseConstantFree { period: f64, segments: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilyPoint {
    BangBang { low: f64, high: f64, duty: f64 },
    Levels { levels: Vec<f64> },
}

impl WaveformFamily {
    pub fn period(&self) -> f64 {
        match *self {
            Self::BangBang { period } | Self::PiecewiseConstantFree { period, .. } => period,
        }
    }

    fn validate(&self) -> Result<()> {
        let period = self.period();
        if !(period.is_finite() && period > 0.0) {
            return Err(Error::Domain(format!("family period must be finite and > 0, got {period}")));
        }
        if let Self::PiecewiseConstantFree { segments: 0, .. } = self {
            return Err(Error::Domain("piecewise family needs at least one segment".into()));
        }
        Ok(())
    }

    /// The constant waveform at `mean`, expressed in this family.
    pub fn constant_point(&self, mean: f64, duty: f64) -> FamilyPoint {
        match *self {
            Self::BangBang { .. } => FamilyPoint::BangBang { low: mean, high: mean, duty },
            Self::PiecewiseConstantFree { segments, .. } => FamilyPoint::Levels { levels: vec![mean; segments] },
        }
    }

    fn accepts(&self, point: &FamilyPoint) -> Result<()> {
        match (self, point) {
            (Self::BangBang { .. }, FamilyPoint::BangBang { duty, .. }) if (0.0..=1.0).contains(duty) => Ok(()),
            (Self::PiecewiseConstantFree { segments, .. }, FamilyPoint::Levels { levels }) if levels.len() == *segments => {
                Ok(())
            }
            _ => Err(Error::Domain(format!("point {point:?} does not belong to family {self:?}"))),
        }
    }

    /// Column names for the family coordinates in the evaluation log.
    pub fn coordinate_names(&self) -> Vec<String> {
        match *self {
            Self::BangBang { .. } => vec!["low".into(), "high".into(), "duty".into()],
            Self::PiecewiseConstantFree { segments, .. } => (0..segments).map(|i| format!("level_{i}")).collect(),
        }
    }
}

impl FamilyPoint {
    /// Level coordinates (`[low, high]` for bang-bang).
    pub fn levels(&self) -> Vec<f64> {
        match self {
            Self::BangBang { low, high, .. } => vec![*low, *high],
            Self::Levels { levels } => levels.clone(),
        }
    }

    /// Time fraction carried by each level; the mean is Σ wᵢ·levelᵢ.
    pub fn weights(&self) -> Vec<f64> {
        match self {
            Self::BangBang { duty, .. } => vec![1.0 - duty, *duty],
            Self::Levels { levels } => vec![1.0 / levels.len() as f64; levels.len()],
        }
    }

    pub fn mean(&self) -> f64 {
        self.levels().iter().zip(self.weights()).map(|(c, w)| c * w).sum()
    }

    fn with_levels(&self, levels: Vec<f64>) -> Self {
        match self {
            Self::BangBang { duty, .. } => Self::BangBang { low: levels[0], high: levels[1], duty: *duty },
            Self::Levels { .. } => Self::Levels { levels },
        }
    }

    /// Coordinates as logged: `(low, high, duty)` or the levels.
    pub fn coordinates(&self) -> Vec<f64> {
        match self {
            Self::BangBang { low, high, duty } => vec![*low, *high, *duty],
            Self::Levels { levels } => levels.clone(),
        }
    }

    /// Euclidean distance in level coordinates to the constant waveform at `mean`.
    pub fn distance_to_constant(&self, mean: f64) -> f64 {
        self.levels().iter().map(|c| (c - mean).powi(2)).sum::<f64>().sqrt()
    }

    pub fn to_signal(&self, period: f64) -> Result<InputSignal> {
        match *self {
            Self::BangBang { low, high, duty } => {
                if duty <= 0.0 || low == high {
                    InputSignal::constant_with_period(low, period)
                } else if duty >= 1.0 {
                    InputSignal::constant_with_period(high, period)
                } else {
                    InputSignal::piecewise_constant(vec![0.0, duty * period, period], vec![high, low], true)
                }
            }
            Self::Levels { ref levels } => InputSignal::equal_segments(period, levels.clone()),
        }
    }
}

/// Euclidean projection of `levels` onto `{Σ wᵢcᵢ = target, c ≥ 0}`.
///
/// Shifts every level along its weight, clips negatives to zero and
/// redistributes over the remaining levels until no new level clips.
fn project_levels(levels: &[f64], weights: &[f64], target: f64) -> Result<Vec<f64>> {
    if !(target.is_finite() && target >= 0.0) {
        return Err(Error::Infeasible(format!("target mean {target} is not a finite non-negative rate")));
    }
    let mut out: Vec<f64> = levels.to_vec();
    let mut free: Vec<usize> = (0..levels.len()).filter(|&i| weights[i] > 0.0).collect();
    for (i, c) in out.iter_mut().enumerate() {
        if weights[i] <= 0.0 {
            *c = c.max(0.0);
        }
    }
    loop {
        if free.is_empty() {
            if target > 0.0 {
                return Err(Error::Infeasible(format!("no level can carry mean {target}")));
            }
            for (i, c) in out.iter_mut().enumerate() {
                if weights[i] > 0.0 {
                    *c = 0.0;
                }
            }
            return Ok(out);
        }
        let carried: f64 = free.iter().map(|&i| weights[i] * levels[i]).sum();
        let norm: f64 = free.iter().map(|&i| weights[i] * weights[i]).sum();
        let shift = (target - carried) / norm;
        let before = free.len();
        free.retain(|&i| levels[i] + shift * weights[i] >= 0.0);
        if free.len() == before {
            for i in 0..out.len() {
                if weights[i] > 0.0 {
                    out[i] = if free.contains(&i) { levels[i] + shift * weights[i] } else { 0.0 };
                }
            }
            return Ok(out);
        }
    }
}

/// Nearest family point (Euclidean in level coordinates, duty fixed) whose
/// mean equals `target_mean`.
pub fn project_to_mean(point: &FamilyPoint, target_mean: f64) -> Result<FamilyPoint> {
    let projected = project_levels(&point.levels(), &point.weights(), target_mean)?;
    Ok(point.with_levels(projected))
}

/// One logged evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub coordinates: Vec<f64>,
    /// Mean of the evaluated signal, recomputed from the waveform.
    pub mean: f64,
    pub w: f64,
    pub benchmark: f64,
    /// benchmark − w
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub family: WaveformFamily,
    pub best_params: FamilyPoint,
    pub best_w: f64,
    pub benchmark_w: f64,
    /// benchmark_w − best_w
    pub optimality_gap: f64,
    pub evaluations: usize,
    /// Evaluation cap reached before convergence.
    pub capped: bool,
    /// Evaluations tied with the best output and resolved toward the constant waveform.
    pub ties: usize,
    #[serde(skip)]
    pub log: Vec<Evaluation>,
}

impl OptimizationResult {
    /// Largest w − benchmark over every logged evaluation.
    pub fn max_excess(&self) -> f64 {
        self.log.iter().map(|e| -e.gap).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest |mean − target| over every logged evaluation.
    pub fn max_mean_error(&self, target_mean: f64) -> f64 {
        self.log.iter().map(|e| (e.mean - target_mean).abs()).fold(0.0, f64::max)
    }

    /// Evaluation log with the family coordinates followed by `mean, w, benchmark, gap`.
    pub fn write_log_csv<W: Write>(&self, out: W) -> Result<()> {
        write_log_csv(&self.family, &self.log, out)
    }
}

pub fn write_log_csv<W: Write>(family: &WaveformFamily, log: &[Evaluation], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let mut header = family.coordinate_names();
    header.extend(["mean", "w", "benchmark", "gap"].map(String::from));
    writer.write_record(&header)?;
    for e in log {
        let mut row: Vec<String> = e.coordinates.iter().map(|&c| format_f64(c)).collect();
        row.extend([e.mean, e.w, e.benchmark, e.gap].map(format_f64));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

fn evaluate(point: &FamilyPoint, period: f64, params: &SystemParams, benchmark: f64) -> Result<Evaluation> {
    let signal = point.to_signal(period)?;
    let w = averaged_output(&signal, params)?;
    Ok(Evaluation {
        coordinates: point.coordinates(),
        mean: signal.mean_over_period(&QuadratureSpec::default())?,
        w,
        benchmark,
        gap: benchmark - w,
    })
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
        .collect()
}

/// Feasible points of the exhaustive grid.
///
/// Bang-bang: `low` on `resolution` points of `[0, mean]` times duty on the
/// interior points `j/(resolution+1)`; `high` follows from the mean.
/// Piecewise: the first k−1 levels on `resolution` points of `[0, 2·mean]`,
/// the last level from the mean (kept when ≥ 0).
fn grid_points(family: &WaveformFamily, target: f64, resolution: usize) -> Result<Vec<FamilyPoint>> {
    match *family {
        WaveformFamily::BangBang { .. } => {
            let lows = linspace(0.0, target, resolution);
            let mut points = Vec::with_capacity(resolution * resolution);
            for j in 1..=resolution {
                let duty = j as f64 / (resolution + 1) as f64;
                for &low in &lows {
                    let high = (target - (1.0 - duty) * low) / duty;
                    points.push(FamilyPoint::BangBang { low, high: high.max(low), duty });
                }
            }
            Ok(points)
        }
        WaveformFamily::PiecewiseConstantFree { segments, .. } => {
            if segments == 1 {
                return Ok(vec![FamilyPoint::Levels { levels: vec![target] }]);
            }
            let axis = linspace(0.0, 2.0 * target, resolution);
            let count = (resolution as u128).pow(segments as u32 - 1);
            if count > MAX_GRID_POINTS as u128 {
                return Err(Error::Domain(format!(
                    "grid of {count} points exceeds the limit of {MAX_GRID_POINTS}; lower the resolution"
                )));
            }
            let total = target * segments as f64;
            let mut points = Vec::new();
            let mut index = vec![0usize; segments - 1];
            'outer: loop {
                let mut levels: Vec<f64> = index.iter().map(|&i| axis[i]).collect();
                let last = total - levels.iter().sum::<f64>();
                if last >= -1e-12 * (1.0 + total) {
                    levels.push(last.max(0.0));
                    points.push(FamilyPoint::Levels { levels });
                }
                for slot in index.iter_mut().rev() {
                    *slot += 1;
                    if *slot < resolution {
                        continue 'outer;
                    }
                    *slot = 0;
                }
                break;
            }
            Ok(points)
        }
    }
}

/// Exhaustive search over a feasible grid; evaluations run in parallel.
///
/// Ties (outputs within 1e-14) go to the point closest to the constant
/// waveform, then to the earliest grid point.
pub fn grid_search(
    family: &WaveformFamily,
    target_mean: f64,
    params: &SystemParams,
    resolution: usize,
) -> Result<OptimizationResult> {
    family.validate()?;
    if resolution < 2 {
        return Err(Error::Domain(format!("grid resolution must be >= 2, got {resolution}")));
    }
    let benchmark = constant_benchmark(target_mean, params)?;
    let period = family.period();
    let points: Vec<FamilyPoint> = grid_points(family, target_mean, resolution)?
        .iter()
        .map(|p| project_to_mean(p, target_mean))
        .collect::<Result<_>>()?;
    let log: Vec<Evaluation> = points
        .par_iter()
        .map(|p| evaluate(p, period, params, benchmark))
        .collect::<Result<_>>()?;

    let top = log.iter().map(|e| e.w).fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..log.len()).filter(|&i| log[i].w >= top - TIE_TOLERANCE).collect();
    let best = *tied
        .iter()
        .min_by(|&&a, &&b| {
            let da = points[a].distance_to_constant(target_mean);
            let db = points[b].distance_to_constant(target_mean);
            da.total_cmp(&db).then(a.cmp(&b))
        })
        .expect("grid is never empty");
    Ok(OptimizationResult {
        family: *family,
        best_params: points[best].clone(),
        best_w: log[best].w,
        benchmark_w: benchmark,
        optimality_gap: benchmark - log[best].w,
        evaluations: log.len(),
        capped: false,
        ties: tied.len() - 1,
        log,
    })
}

struct Search<'a> {
    period: f64,
    params: &'a SystemParams,
    benchmark: f64,
    cap: usize,
    log: Vec<Evaluation>,
}

impl Search<'_> {
    fn exhausted(&self) -> bool {
        self.log.len() >= self.cap
    }

    fn eval(&mut self, point: &FamilyPoint) -> Result<f64> {
        let e = evaluate(point, self.period, self.params, self.benchmark)?;
        let w = e.w;
        self.log.push(e);
        Ok(w)
    }

    /// Golden-section maximisation of `w(make(s))` over `[lo, hi]`, with the
    /// endpoints checked too. Returns the best `(s, w)` seen.
    fn line_search(
        &mut self,
        lo: f64,
        hi: f64,
        make: impl Fn(f64) -> Result<FamilyPoint>,
    ) -> Result<(f64, f64)> {
        const INV_PHI: f64 = 0.618_033_988_749_894_8;
        let tol = 1e-10 * (1.0 + (hi - lo).abs());
        let mut best = (lo, self.eval(&make(lo)?)?);
        let w_hi = self.eval(&make(hi)?)?;
        if w_hi > best.1 {
            best = (hi, w_hi);
        }
        let (mut a, mut b) = (lo, hi);
        let mut c = b - INV_PHI * (b - a);
        let mut d = a + INV_PHI * (b - a);
        let mut fc = self.eval(&make(c)?)?;
        let mut fd = self.eval(&make(d)?)?;
        while (b - a) > tol && !self.exhausted() {
            if fc >= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - INV_PHI * (b - a);
                fc = self.eval(&make(c)?)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + INV_PHI * (b - a);
                fd = self.eval(&make(d)?)?;
            }
        }
        for (s, w) in [(c, fc), (d, fd)] {
            if w > best.1 {
                best = (s, w);
            }
        }
        Ok(best)
    }
}

pub fn coordinate_descent(
    family: &WaveformFamily,
    target_mean: f64,
    params: &SystemParams,
    start: &FamilyPoint,
    tol: f64,
) -> Result<OptimizationResult> {
    coordinate_descent_with_cap(family, target_mean, params, start, tol, DEFAULT_EVALUATION_CAP)
}

/// Line-search one coordinate at a time, re-projecting onto the mean after
/// every move, until a full sweep improves w by less than `tol`.
///
/// Bang-bang points move along `low ∈ [0, mean]` with duty fixed and `high`
/// determined by the mean. Piecewise points move level i by δ and project,
/// with δ ∈ [−levelᵢ, k·mean].
pub fn coordinate_descent_with_cap(
    family: &WaveformFamily,
    target_mean: f64,
    params: &SystemParams,
    start: &FamilyPoint,
    tol: f64,
    cap: usize,
) -> Result<OptimizationResult> {
    family.validate()?;
    family.accepts(start)?;
    if (start.mean() - target_mean).abs() > 1e-10 * (1.0 + target_mean) {
        return Err(Error::Domain(format!(
            "start point mean {} differs from target {target_mean}",
            start.mean()
        )));
    }
    let benchmark = constant_benchmark(target_mean, params)?;
    let mut search = Search {
        period: family.period(),
        params,
        benchmark,
        cap,
        log: Vec::new(),
    };
    let mut current = project_to_mean(start, target_mean)?;
    let mut current_w = search.eval(&current)?;

    loop {
        let sweep_start = current_w;
        match &current {
            FamilyPoint::BangBang { duty, .. } => {
                let duty = *duty;
                let make = |low: f64| -> Result<FamilyPoint> {
                    let high = if duty > 0.0 { (target_mean - (1.0 - duty) * low) / duty } else { low };
                    Ok(FamilyPoint::BangBang { low, high: high.max(low), duty })
                };
                let (low, w) = search.line_search(0.0, target_mean, make)?;
                if w > current_w {
                    current = make(low)?;
                    current_w = w;
                }
            }
            FamilyPoint::Levels { .. } => {
                let k = current.levels().len();
                for i in 0..k {
                    if search.exhausted() {
                        break;
                    }
                    let base = current.clone();
                    let make = |delta: f64| -> Result<FamilyPoint> {
                        let mut levels = base.levels();
                        levels[i] += delta;
                        project_to_mean(&base.with_levels(levels), target_mean)
                    };
                    let lo = -base.levels()[i];
                    let hi = k as f64 * target_mean;
                    let (delta, w) = search.line_search(lo, hi, make)?;
                    if w > current_w {
                        current = make(delta)?;
                        current_w = w;
                    }
                }
            }
        }
        if current_w - sweep_start < tol || search.exhausted() {
            break;
        }
    }

    let capped = search.exhausted();
    Ok(OptimizationResult {
        family: *family,
        best_params: current,
        best_w: current_w,
        benchmark_w: benchmark,
        optimality_gap: benchmark - current_w,
        evaluations: search.log.len(),
        capped,
        ties: 0,
        log: search.log,
    })
}

/// Random feasible start: bang-bang duty in [0.05, 0.95) with `low` in
/// [0, mean); piecewise levels uniform in [0, 3·mean) projected onto the mean.
pub fn random_start<R: Rng>(family: &WaveformFamily, mean: f64, rng: &mut R) -> Result<FamilyPoint> {
    match *family {
        WaveformFamily::BangBang { .. } => {
            let duty = rng.gen_range(0.05..0.95);
            let low = if mean > 0.0 { rng.gen_range(0.0..mean) } else { 0.0 };
            Ok(FamilyPoint::BangBang { low, high: (mean - (1.0 - duty) * low) / duty, duty })
        }
        WaveformFamily::PiecewiseConstantFree { segments, .. } => {
            let raw: Vec<f64> = (0..segments)
                .map(|_| if mean > 0.0 { rng.gen_range(0.0..3.0 * mean) } else { 0.0 })
                .collect();
            project_to_mean(&FamilyPoint::Levels { levels: raw }, mean)
        }
    }
}

/// Coordinate descent from `starts` random points drawn from one ChaCha8
/// stream seeded with `seed`; runs concurrently, results in start order.
pub fn multi_start_descent(
    family: &WaveformFamily,
    target_mean: f64,
    params: &SystemParams,
    seed: u64,
    starts: usize,
    tol: f64,
) -> Result<Vec<OptimizationResult>> {
    family.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<FamilyPoint> = (0..starts)
        .map(|_| random_start(family, target_mean, &mut rng))
        .collect::<Result<_>>()?;
    points
        .par_iter()
        .map(|p| coordinate_descent(family, target_mean, params, p, tol))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureEstimate {
    pub epsilons: Vec<f64>,
    /// w[σ̄ + ε·direction] − w[σ̄] for each ε.
    pub differences: Vec<f64>,
    /// κ in −Δw ≈ κε², least squares through the origin.
    pub kappa: f64,
    /// Least-squares slope of log(−Δw) against log ε; `None` when some Δw is not negative.
    pub slope: Option<f64>,
    /// Coefficient of determination of the log-log fit.
    pub r_squared: Option<f64>,
}

/// Response of the averaged output to zero-mean level perturbations of the
/// constant waveform on an equal partition of the period.
pub fn perturbation_response(
    signal_mean: f64,
    params: &SystemParams,
    period: f64,
    direction: &[f64],
    epsilons: &[f64],
) -> Result<CurvatureEstimate> {
    if direction.is_empty() || epsilons.is_empty() {
        return Err(Error::Domain("direction and epsilons must be non-empty".into()));
    }
    let scale = direction.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let drift = direction.iter().sum::<f64>() / direction.len() as f64;
    if drift.abs() > 1e-12 * (1.0 + scale) {
        return Err(Error::Domain(format!("direction must have zero mean, got {drift}")));
    }
    let base = constant_benchmark(signal_mean, params)?;
    let mut differences = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let levels: Vec<f64> = direction.iter().map(|d| signal_mean + eps * d).collect();
        let min_level = levels.iter().copied().fold(f64::INFINITY, f64::min);
        if min_level < 0.0 {
            return Err(Error::Clipping { epsilon: eps, min_level });
        }
        let signal = InputSignal::equal_segments(period, levels)?;
        differences.push(averaged_output(&signal, params)? - base);
    }
    let num: f64 = epsilons.iter().zip(&differences).map(|(e, d)| -d * e * e).sum();
    let den: f64 = epsilons.iter().map(|e| e.powi(4)).sum();
    let kappa = num / den;
    let (slope, r_squared) = if epsilons.len() >= 2 && differences.iter().all(|&d| d < 0.0) {
        let xs: Vec<f64> = epsilons.iter().map(|e| e.ln()).collect();
        let ys: Vec<f64> = differences.iter().map(|d| (-d).ln()).collect();
        let (slope, r2) = log_log_fit(&xs, &ys);
        (Some(slope), Some(r2))
    } else {
        (None, None)
    };
    Ok(CurvatureEstimate {
        epsilons: epsilons.to_vec(),
        differences,
        kappa,
        slope,
        r_squared,
    })
}

fn log_log_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(lambda: f64) -> SystemParams {
        SystemParams::new(lambda).unwrap()
    }

    fn levels(v: &[f64]) -> FamilyPoint {
        FamilyPoint::Levels { levels: v.to_vec() }
    }

    /// Projection by enumerating every active set: fix the complement at zero,
    /// shift the rest uniformly onto the mean, keep feasible candidates, take
    /// the closest.
    fn brute_force_projection(p: &[f64], target: f64) -> Vec<f64> {
        let k = p.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 1u32..(1 << k) {
            let free: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
            let shift = (target * k as f64 - free.iter().map(|&i| p[i]).sum::<f64>()) / free.len() as f64;
            let mut cand = vec![0.0; k];
            for &i in &free {
                cand[i] = p[i] + shift;
            }
            if cand.iter().any(|&c| c < -1e-15) {
                continue;
            }
            let dist: f64 = cand.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
            if best.as_ref().is_none_or(|(d, _)| dist < *d) {
                best = Some((dist, cand));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_to_mean(&levels(&[0.0, 2.0]), 1.0).unwrap(), levels(&[0.0, 2.0]));
        assert_eq!(project_to_mean(&levels(&[1.0, 1.0]), 2.0).unwrap(), levels(&[2.0, 2.0]));
        let projected = project_to_mean(&levels(&[0.2, 3.8, 0.0, 0.0]), 0.5).unwrap();
        let oracle = brute_force_projection(&[0.2, 3.8, 0.0, 0.0], 0.5);
        assert_eq!(oracle, vec![0.0, 2.0, 0.0, 0.0]);
        for (a, b) in projected.levels().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((projected.mean() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn projection_errors_and_bang_bang_weights() {
        assert!(matches!(project_to_mean(&levels(&[1.0]), -1.0), Err(Error::Infeasible(_))));
        let bb = FamilyPoint::BangBang { low: 0.0, high: 0.0, duty: 0.25 };
        let p = project_to_mean(&bb, 1.0).unwrap();
        // shift along the weights (0.75, 0.25): θ = 1/(0.75² + 0.25²)
        let theta = 1.0 / (0.5625 + 0.0625);
        assert_eq!(p, FamilyPoint::BangBang { low: 0.75 * theta, high: 0.25 * theta, duty: 0.25 });
        assert!((p.mean() - 1.0).abs() < 1e-15);
        assert_eq!(project_to_mean(&levels(&[3.0, 0.0]), 0.0).unwrap(), levels(&[0.0, 0.0]));
    }

    #[test]
    fn grid_search_bang_bang_prefers_constant() {
        let p = params(1.0);
        let family = WaveformFamily::BangBang { period: 2.0 };
        let result = grid_search(&family, 1.0, &p, 11).unwrap();
        assert!(result.optimality_gap.abs() < 1e-15);
        assert!(result.best_params.distance_to_constant(1.0) < 1e-15);
        assert_eq!(result.ties, 10);
        for e in &result.log {
            if (e.coordinates[0] - 1.0).abs() > 1e-12 {
                assert!(e.w < 0.5, "{e:?}");
            }
        }
        assert!(result.max_excess() <= 1e-9);
        assert!(result.max_mean_error(1.0) <= 1e-10);
    }

    #[test]
    fn grid_search_piecewise() {
        let p = params(1.0);
        let single = grid_search(&WaveformFamily::PiecewiseConstantFree { period: 1.0, segments: 1 }, 1.0, &p, 5).unwrap();
        assert_eq!(single.evaluations, 1);
        assert_eq!(single.optimality_gap, 0.0);

        let four = grid_search(&WaveformFamily::PiecewiseConstantFree { period: 1.0, segments: 4 }, 1.0, &p, 9).unwrap();
        assert_eq!(four.best_params, levels(&[1.0, 1.0, 1.0, 1.0]));
        // exhaustive grid is its own oracle: the best non-constant point is strictly worse
        let runner_up = four
            .log
            .iter()
            .filter(|e| e.coordinates.iter().any(|&c| (c - 1.0).abs() > 1e-12))
            .map(|e| e.w)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(runner_up < four.best_w);
        assert!(four.max_excess() <= 1e-9);
        assert!(grid_search(&WaveformFamily::PiecewiseConstantFree { period: 1.0, segments: 4 }, 1.0, &p, 1).is_err());
    }

    #[test]
    fn descent_from_constant_stops_at_once() {
        let p = params(1.0);
        let family = WaveformFamily::PiecewiseConstantFree { period: 1.0, segments: 3 };
        let r = coordinate_descent(&family, 1.0, &p, &levels(&[1.0, 1.0, 1.0]), 1e-12).unwrap();
        assert_eq!(r.best_params, levels(&[1.0, 1.0, 1.0]));
        assert!(r.optimality_gap.abs() < 1e-15);
    }

    #[test]
    fn descent_from_two_level_start() {
        let p = params(1.0);
        let family = WaveformFamily::PiecewiseConstantFree { period: 2.0, segments: 2 };
        let r = coordinate_descent(&family, 1.0, &p, &levels(&[0.0, 2.0]), 1e-13).unwrap();
        assert!(!r.capped);
        assert!(r.best_params.distance_to_constant(1.0) < 1e-3, "{:?}", r.best_params);
        assert!(r.max_excess() <= 1e-9);

        let bb = WaveformFamily::BangBang { period: 2.0 };
        let start = FamilyPoint::BangBang { low: 0.0, high: 2.0, duty: 0.5 };
        let r = coordinate_descent(&bb, 1.0, &p, &start, 1e-13).unwrap();
        assert!(r.best_params.distance_to_constant(1.0) < 1e-3);
    }

    #[test]
    fn descent_lambda_sweep() {
        let family = WaveformFamily::PiecewiseConstantFree { period: 1.0, segments: 4 };
        for lambda in [0.1, 1.0, 10.0] {
            let start = project_to_mean(&levels(&[2.5, 0.1, 0.9, 0.3]), 1.0).unwrap();
            let r = coordinate_descent(&family, 1.0, &params(lambda), &start, 1e-13).unwrap();
            assert!(r.optimality_gap < 1e-6 && r.optimality_gap > -1e-9, "λ={lambda}: {}", r.optimality_gap);
        }
    }

    #[test]
    fn descent_rejects_infeasible_start_and_reports_cap() {
        let p = params(1.0);
        let family = WaveformFamily::PiecewiseConstantFree { period: 1.0, segments: 2 };
        assert!(coordinate_descent(&family, 1.0, &p, &levels(&[0.0, 1.0]), 1e-12).is_err());
        assert!(coordinate_descent(&family, 1.0, &p, &levels(&[1.0]), 1e-12).is_err());
        let r = coordinate_descent_with_cap(&family, 1.0, &p, &levels(&[0.0, 2.0]), 0.0, 20).unwrap();
        assert!(r.capped);
        assert!(r.evaluations <= 23);
    }

    #[test]
    fn multi_start_is_seeded() {
        let family = WaveformFamily::PiecewiseConstantFree { period: 1.0, segments: 3 };
        let a = multi_start_descent(&family, 1.0, &params(1.0), 5, 4, 1e-15).unwrap();
        let b = multi_start_descent(&family, 1.0, &params(1.0), 5, 4, 1e-15).unwrap();
        assert_eq!(a, b);
        for r in &a {
            assert!(r.best_params.distance_to_constant(1.0) < 1e-3);
            assert!((r.log[0].mean - 1.0).abs() < 1e-12);
        }
        let bb = WaveformFamily::BangBang { period: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = random_start(&bb, 2.0, &mut rng).unwrap();
            assert!((p.mean() - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbation_examples() {
        let p = params(1.0);
        let zero = perturbation_response(1.0, &p, 2.0, &[0.0, 0.0], &[0.1, 0.05]).unwrap();
        assert!(zero.differences.iter().all(|&d| d == 0.0));
        assert_eq!(zero.kappa, 0.0);
        assert!(zero.slope.is_none());

        let est = perturbation_response(1.0, &p, 2.0, &[1.0, -1.0], &[0.1, 0.05, 0.025]).unwrap();
        let slope = est.slope.unwrap();
        assert!((slope - 2.0).abs() <= 0.05, "slope {slope}");
        assert!(est.kappa > 0.0);

        assert!(matches!(
            perturbation_response(0.1, &p, 2.0, &[1.0, -1.0], &[0.5]),
            Err(Error::Clipping { .. })
        ));
        assert!(perturbation_response(1.0, &p, 2.0, &[1.0, 0.0], &[0.1]).is_err());
    }

    #[test]
    fn curvature_vanishes_with_fast_switching() {
        let p = params(1.0);
        let kappas: Vec<f64> = [4.0, 2.0, 1.0, 0.5]
            .iter()
            .map(|&t| perturbation_response(1.0, &p, t, &[1.0, -1.0], &[0.1, 0.05, 0.025]).unwrap().kappa)
            .collect();
        assert!(kappas.windows(2).all(|w| w[1] < w[0]), "{kappas:?}");
    }

    #[test]
    fn log_csv_layout() {
        let p = params(1.0);
        let r = grid_search(&WaveformFamily::BangBang { period: 1.0 }, 1.0, &p, 2).unwrap();
        let mut buf = Vec::new();
        r.write_log_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "low,high,duty,mean,w,benchmark,gap");
        assert_eq!(text.lines().count(), 1 + r.evaluations);
    }

    proptest! {
        #[test]
        fn projection_is_feasible_and_optimal(p in prop::collection::vec(-1.0f64..4.0, 1..6), target in 0.0f64..3.0) {
            let projected = project_to_mean(&levels(&p), target).unwrap().levels();
            prop_assert!(projected.iter().all(|&c| c >= 0.0));
            let mean = projected.iter().sum::<f64>() / p.len() as f64;
            prop_assert!((mean - target).abs() <= 1e-12 * (1.0 + target));
            if target > 0.0 {
                let oracle = brute_force_projection(&p, target);
                for (a, b) in projected.iter().zip(&oracle) {
                    prop_assert!((a - b).abs() <= 1e-10);
                }
            }
        }

        #[test]
        fn time_rescaling_leaves_normalised_output(
            lv in prop::collection::vec(0.0f64..5.0, 1..6),
            lambda in 0.1f64..10.0,
            alpha in 0.2f64..5.0,
        ) {
            let w1 = averaged_output(&InputSignal::equal_segments(1.5, lv.clone()).unwrap(), &params(lambda)).unwrap();
            let scaled: Vec<f64> = lv.iter().map(|c| c / alpha).collect();
            let w2 = averaged_output(&InputSignal::equal_segments(1.5 * alpha, scaled).unwrap(), &params(lambda / alpha)).unwrap();
            prop_assert!((w1 / lambda - w2 / (lambda / alpha)).abs() <= 1e-9);
        }
    }
}
