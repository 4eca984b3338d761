//! `bottleneck`: simulations, periodic analyses, verification suites,
//! asymptotic studies and optimizer experiments for the inflow/outflow model.
//!
//! Exit status: 0 success, 1 invariant violation, 2 usage or validation error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use bottleneck_core::asymptotic::{
    certificates_from, default_horizon, log_checkpoints, running_averages_at, theorem2_check, write_csv,
    DEFAULT_CHECKPOINTS,
};
use bottleneck_core::dynamics::simulate;
use bottleneck_core::optimize::{grid_search, multi_start_descent, write_log_csv, WaveformFamily};
use bottleneck_core::periodic::{poincare_map_with, PeriodicRecord};
use bottleneck_core::signals::{InputSignal, QuadratureSpec, SystemParams};
use bottleneck_core::suite::{
    check_asymptotic_case, check_periodic_case, random_periodic_suite, run_asymptotic_suite, run_periodic_suite,
    AsymptoticSettings, DecadeHistogram, SuiteCase, Tolerances,
};

#[derive(Parser)]
#[command(name = "bottleneck", version, about = "Periodic and asymptotic analysis of the bottleneck flow model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one trajectory and write it as CSV (t, x, sigma, cumulative_x).
    Simulate(Common),
    /// Poincaré map, periodic orbit and gap-identity report for a periodic signal (JSON).
    Periodic(Common),
    /// Randomized invariant suites, or a replay of one case when a signal is given (JSON).
    Verify(Common),
    /// Running averages, finite-τ certificates and the long-run output bound.
    Asymptotic(Common),
    /// Grid search plus multi-start coordinate descent over a waveform family.
    Optimize(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML, or JSON when the extension is .json).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Service rate λ > 0.
    #[arg(long)]
    lambda: Option<f64>,
    /// Signal description file (TOML with a `kind` key).
    #[arg(long)]
    signal: Option<PathBuf>,
    /// Simulation horizon, or τ_max for `asymptotic`.
    #[arg(long)]
    horizon: Option<f64>,
    /// Output path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for randomized suites and random starts.
    #[arg(long)]
    seed: Option<u64>,
    /// Tolerance applied to every checked invariant.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum CommandKind {
    Simulate,
    Periodic,
    Verify,
    Asymptotic,
    Optimize,
}

/// Config file contents. Every key is optional; command-line flags win.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    command: Option<CommandKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    /// Inline signal description.
    #[serde(skip_serializing_if = "Option::is_none")]
    signal: Option<InputSignal>,
    /// Signal description file, relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    signal_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    x0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    horizon: Option<f64>,
    /// Integration step override.
    #[serde(skip_serializing_if = "Option::is_none")]
    grid_step: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tolerance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Evaluation log CSV for `optimize`.
    #[serde(skip_serializing_if = "Option::is_none")]
    log: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoints: Option<usize>,
    /// Periodic suite size for `verify`.
    #[serde(skip_serializing_if = "Option::is_none")]
    cases: Option<usize>,
    /// Asymptotic suite size for `verify`.
    #[serde(skip_serializing_if = "Option::is_none")]
    asymptotic_cases: Option<usize>,
    /// τ of the solution-independence check.
    #[serde(skip_serializing_if = "Option::is_none")]
    tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    family: Option<WaveformFamily>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    resolution: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    starts: Option<usize>,
}

/// Outcome of a command that ran to completion.
enum Status {
    Ok,
    Violation(String),
}

const DEFAULT_SEED: u64 = 0;
const DEFAULT_CASES: usize = 500;
const DEFAULT_ASYMPTOTIC_CASES: usize = 100;
const DEFAULT_RESOLUTION_BANG_BANG: usize = 21;
const DEFAULT_RESOLUTION_LEVELS: usize = 9;
const DEFAULT_STARTS: usize = 20;
const DESCENT_TOL: f64 = 1e-15;
/// Same tie rule as the grid search: outputs this close go to the point nearer the constant waveform.
const TIE_TOLERANCE: f64 = 1e-14;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, common) = match cli.command {
        Command::Simulate(c) => (CommandKind::Simulate, c),
        Command::Periodic(c) => (CommandKind::Periodic, c),
        Command::Verify(c) => (CommandKind::Verify, c),
        Command::Asymptotic(c) => (CommandKind::Asymptotic, c),
        Command::Optimize(c) => (CommandKind::Optimize, c),
    };
    let config = match resolve(kind, &common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let run = match kind {
        CommandKind::Simulate => cmd_simulate(&config),
        CommandKind::Periodic => cmd_periodic(&config),
        CommandKind::Verify => cmd_verify(&config),
        CommandKind::Asymptotic => cmd_asymptotic(&config),
        CommandKind::Optimize => cmd_optimize(&config),
    };
    match run {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Violation(msg)) => {
            eprintln!("invariant violated: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn read_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut config: ExperimentConfig = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?
    } else {
        toml::from_str(&text).map_err(|e| anyhow!("invalid config {}:\n{e}", path.display()))?
    };
    if let Some(file) = &config.signal_file {
        if file.is_relative() {
            config.signal_file = Some(path.parent().unwrap_or(Path::new(".")).join(file));
        }
    }
    Ok(config)
}

fn read_signal(path: &Path) -> anyhow::Result<InputSignal> {
    let text = fs::read_to_string(path).with_context(|| format!("reading signal {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("invalid signal {}", path.display()))
    } else {
        toml::from_str(&text).map_err(|e| anyhow!("invalid signal {}:\n{e}", path.display()))
    }
}

fn check_positive(name: &str, v: Option<f64>) -> anyhow::Result<()> {
    match v {
        Some(v) if !(v.is_finite() && v > 0.0) => bail!("{name} must be finite and > 0, got {v}"),
        _ => Ok(()),
    }
}

/// Merges config file and flags, then validates everything the command will use.
fn resolve(kind: CommandKind, flags: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &flags.config {
        Some(path) => read_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(declared) = config.command {
        if declared != kind {
            bail!("config declares command {declared:?} but {kind:?} was invoked");
        }
    }
    config.lambda = flags.lambda.or(config.lambda);
    config.horizon = flags.horizon.or(config.horizon);
    config.out = flags.out.clone().or(config.out);
    config.seed = flags.seed.or(config.seed);
    config.tolerance = flags.tolerance.or(config.tolerance);
    if let Some(path) = &flags.signal {
        config.signal = None;
        config.signal_file = Some(path.clone());
    }
    if let Some(path) = config.signal_file.take() {
        if config.signal.is_some() {
            bail!("give either an inline signal or signal_file, not both");
        }
        config.signal = Some(read_signal(&path)?);
    }

    check_positive("lambda", config.lambda)?;
    check_positive("horizon", config.horizon)?;
    check_positive("grid_step", config.grid_step)?;
    check_positive("tolerance", config.tolerance)?;
    check_positive("tau", config.tau)?;
    if let Some(x0) = config.x0 {
        if !(0.0..=1.0).contains(&x0) {
            bail!("x0 must lie in [0, 1], got {x0}");
        }
    }
    if let Some(m) = config.mean {
        if !(m.is_finite() && m >= 0.0) {
            bail!("mean must be finite and >= 0, got {m}");
        }
    }
    match kind {
        CommandKind::Simulate | CommandKind::Periodic | CommandKind::Asymptotic => {
            if config.signal.is_none() {
                bail!("{kind:?} needs a signal (--signal, `signal` or `signal_file`)");
            }
            if config.lambda.is_none() {
                bail!("{kind:?} needs --lambda or `lambda`");
            }
            if kind == CommandKind::Periodic && !config.signal.as_ref().unwrap().is_periodic() {
                bail!("periodic analysis needs a periodic signal; use `asymptotic` instead");
            }
        }
        CommandKind::Verify => {
            if config.signal.is_some() != config.lambda.is_some() {
                bail!("replaying a single case needs both a signal and lambda");
            }
            if config.signal.as_ref().is_some_and(|s| !s.is_periodic()) {
                bail!("verify replays periodic signals only");
            }
        }
        CommandKind::Optimize => {
            if config.family.is_none() || config.mean.is_none() || config.lambda.is_none() {
                bail!("optimize needs `family`, `mean` and `lambda`");
            }
            if config.resolution.is_some_and(|r| r < 2) {
                bail!("resolution must be >= 2");
            }
        }
    }
    Ok(config)
}

fn params(config: &ExperimentConfig) -> anyhow::Result<SystemParams> {
    Ok(SystemParams::new(config.lambda.expect("validated"))?)
}

fn quadrature(config: &ExperimentConfig) -> QuadratureSpec {
    config.grid_step.map_or_else(QuadratureSpec::default, QuadratureSpec::with_step)
}

/// Writes `bytes` to `path`, or to stdout when `path` is `None`.
fn emit(path: Option<&Path>, bytes: &[u8]) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
            Ok(())
        }
    }
}

fn emit_json(path: Option<&Path>, value: &serde_json::Value) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    emit(path, text.as_bytes())
}

fn cmd_simulate(config: &ExperimentConfig) -> anyhow::Result<Status> {
    let params = params(config)?;
    let signal = config.signal.as_ref().expect("validated");
    let horizon = config.horizon.unwrap_or(20.0 / params.lambda());
    let traj = simulate(signal, &params, config.x0.unwrap_or(0.0), horizon, &quadrature(config))?;
    let mut buf = Vec::new();
    traj.write_csv(&mut buf)?;
    emit(config.out.as_deref(), &buf)?;
    Ok(Status::Ok)
}

fn cmd_periodic(config: &ExperimentConfig) -> anyhow::Result<Status> {
    let params = params(config)?;
    let signal = config.signal.as_ref().expect("validated");
    let quad = quadrature(config);
    let record = PeriodicRecord::new(signal, &params, &quad)?;
    let map = poincare_map_with(signal, &params, &quad)?;
    let tol = config.tolerance.unwrap_or(1e-8);
    let report = &record.report;
    let worst = report.residual_lemma.max(report.residual_i1).max(report.residual_i2);
    emit_json(
        config.out.as_deref(),
        &json!({
            "poincare": { "a": map.a, "b": map.b, "fixed_point": map.fixed_point() },
            "report": record.report,
            "provenance": record.provenance,
            "tolerance": tol,
        }),
    )?;
    if worst > tol {
        return Ok(Status::Violation(format!("largest residual {worst:e} exceeds tolerance {tol:e}")));
    }
    if report.w_sigma - report.w_const > tol {
        return Ok(Status::Violation(format!(
            "w[σ] = {} exceeds the constant benchmark {}",
            report.w_sigma, report.w_const
        )));
    }
    Ok(Status::Ok)
}

fn tolerances(config: &ExperimentConfig) -> Tolerances {
    config.tolerance.map_or_else(Tolerances::default, Tolerances::uniform)
}

fn asymptotic_settings(config: &ExperimentConfig) -> AsymptoticSettings {
    let defaults = AsymptoticSettings::default();
    AsymptoticSettings {
        tau: config.tau.unwrap_or(defaults.tau),
        tau_max: config.horizon.unwrap_or(defaults.tau_max),
        checkpoints: config.checkpoints.unwrap_or(defaults.checkpoints),
        ..defaults
    }
}

/// Config that replays one case through `verify`.
fn replay_config(case: &SuiteCase, config: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        command: Some(CommandKind::Verify),
        lambda: Some(case.lambda),
        signal: Some(case.signal.clone()),
        tolerance: config.tolerance,
        horizon: config.horizon,
        tau: config.tau,
        checkpoints: config.checkpoints,
        ..Default::default()
    }
}

fn cmd_verify(config: &ExperimentConfig) -> anyhow::Result<Status> {
    let tol = tolerances(config);
    let settings = asymptotic_settings(config);
    let seed = config.seed.unwrap_or(DEFAULT_SEED);
    let (periodic_cases, asymptotic_cases) = match (&config.signal, config.lambda) {
        (Some(signal), Some(lambda)) => {
            let case = SuiteCase { index: 0, lambda, signal: signal.clone() };
            (vec![case.clone()], vec![case])
        }
        _ => (
            random_periodic_suite(seed, config.cases.unwrap_or(DEFAULT_CASES))?,
            random_periodic_suite(seed.wrapping_add(1), config.asymptotic_cases.unwrap_or(DEFAULT_ASYMPTOTIC_CASES))?,
        ),
    };
    let replaying = config.signal.is_some();
    let periodic = if replaying {
        vec![check_periodic_case(&periodic_cases[0], &tol)?]
    } else {
        run_periodic_suite(&periodic_cases, &tol)?
    };
    let asymptotic = if replaying {
        vec![check_asymptotic_case(&asymptotic_cases[0], &settings, &tol)?]
    } else {
        run_asymptotic_suite(&asymptotic_cases, &settings, &tol)?
    };

    let mut histograms = serde_json::Map::new();
    let series: [(&str, Vec<f64>); 6] = [
        ("residual_lemma", periodic.iter().map(|o| o.report.residual_lemma).collect()),
        ("residual_i1", periodic.iter().map(|o| o.report.residual_i1).collect()),
        ("residual_i2", periodic.iter().map(|o| o.report.residual_i2).collect()),
        ("theorem1_excess", periodic.iter().map(|o| o.theorem1_excess.max(0.0)).collect()),
        ("contraction_excess", periodic.iter().map(|o| o.contraction_excess.max(0.0)).collect()),
        ("certificate_deficit", asymptotic.iter().map(|o| (-o.min_slack).max(0.0)).collect()),
    ];
    let mut maxima = serde_json::Map::new();
    for (name, values) in &series {
        let mut h = DecadeHistogram::new(-18, -4);
        values.iter().for_each(|&v| h.add(v));
        histograms.insert(name.to_string(), serde_json::to_value(h)?);
        maxima.insert(name.to_string(), json!(values.iter().copied().fold(0.0, f64::max)));
    }
    let min_strict_gap = periodic
        .iter()
        .filter(|o| o.strict_gap_required)
        .map(|o| o.report.gap)
        .fold(f64::INFINITY, f64::min);
    let mut failures = Vec::new();
    for o in periodic.iter().filter(|o| !o.passed()) {
        failures.push(json!({ "suite": "periodic", "failures": o.failures, "replay": replay_config(&o.case, config) }));
    }
    for o in asymptotic.iter().filter(|o| !o.passed()) {
        failures.push(json!({ "suite": "asymptotic", "failures": o.failures, "replay": replay_config(&o.case, config) }));
    }
    let cases: Vec<_> = if replaying {
        vec![json!({ "periodic": periodic[0], "asymptotic": asymptotic[0] })]
    } else {
        Vec::new()
    };
    let passed = failures.is_empty();
    emit_json(
        config.out.as_deref(),
        &json!({
            "seed": if replaying { None } else { Some(seed) },
            "tolerances": tol,
            "asymptotic_settings": settings,
            "periodic_cases": periodic.len(),
            "asymptotic_cases": asymptotic.len(),
            "histogram_lowest_exponent": -18,
            "histograms": histograms,
            "maxima": maxima,
            "min_strict_gap": if min_strict_gap.is_finite() { Some(min_strict_gap) } else { None },
            "passed": passed,
            "failures": failures,
            "cases": cases,
        }),
    )?;
    if passed {
        Ok(Status::Ok)
    } else {
        Ok(Status::Violation(format!("{} failing case(s); see the `failures` array for replay configs", failures.len())))
    }
}

fn cmd_asymptotic(config: &ExperimentConfig) -> anyhow::Result<Status> {
    let params = params(config)?;
    let signal = config.signal.as_ref().expect("validated");
    let x0 = config.x0.unwrap_or(0.0);
    let tau_max = config.horizon.unwrap_or_else(|| default_horizon(signal, &params));
    let taus = log_checkpoints(tau_max, config.checkpoints.unwrap_or(DEFAULT_CHECKPOINTS));
    let quad = quadrature(config);
    let averages = running_averages_at(signal, &params, x0, &taus, &quad)?;
    let sigma_bar = match signal.period() {
        Some(_) => signal.mean_over_period(&quad)?,
        None => averages.sigma_bar_est,
    };
    let certificates = certificates_from(&averages, &params, sigma_bar);
    let check = theorem2_check(signal, &params, x0, tau_max)?;
    let tol = config.tolerance.unwrap_or(1e-9);
    let min_slack = certificates.iter().map(|c| c.slack).fold(f64::INFINITY, f64::min);

    let mut csv = Vec::new();
    write_csv(&averages, &certificates, &mut csv)?;
    let summary = json!({ "theorem2": check, "min_certificate_slack": min_slack, "tolerance": tol, "x0": x0 });
    match &config.out {
        Some(path) => {
            emit(Some(path), &csv)?;
            emit_json(Some(&path.with_extension("json")), &summary)?;
        }
        None => emit_json(None, &json!({ "summary": summary, "csv": String::from_utf8(csv)? }))?,
    }
    if check.violated {
        return Ok(Status::Violation(format!("long-run output bound exceeded: margin {:e}, slack {:e}", check.margin, check.slack)));
    }
    if min_slack < -tol {
        return Ok(Status::Violation(format!("finite-τ certificate slack {min_slack:e} below {:e}", -tol)));
    }
    Ok(Status::Ok)
}

fn cmd_optimize(config: &ExperimentConfig) -> anyhow::Result<Status> {
    let params = params(config)?;
    let family = config.family.expect("validated");
    let mean = config.mean.expect("validated");
    let seed = config.seed.unwrap_or(DEFAULT_SEED);
    let tol = config.tolerance.unwrap_or(1e-9);
    let resolution = config.resolution.unwrap_or(match family {
        WaveformFamily::BangBang { .. } => DEFAULT_RESOLUTION_BANG_BANG,
        WaveformFamily::PiecewiseConstantFree { .. } => DEFAULT_RESOLUTION_LEVELS,
    });
    let grid = grid_search(&family, mean, &params, resolution)?;
    let descents = multi_start_descent(&family, mean, &params, seed, config.starts.unwrap_or(DEFAULT_STARTS), DESCENT_TOL)?;

    let mut log = grid.log.clone();
    let mut best = grid.clone();
    for r in &descents {
        log.extend(r.log.iter().cloned());
        let tied = (r.best_w - best.best_w).abs() <= TIE_TOLERANCE;
        let closer = r.best_params.distance_to_constant(mean) < best.best_params.distance_to_constant(mean);
        if (!tied && r.best_w > best.best_w) || (tied && closer) {
            best = r.clone();
        }
    }
    let max_excess = log.iter().map(|e| -e.gap).fold(f64::NEG_INFINITY, f64::max);
    let max_mean_error = log.iter().map(|e| (e.mean - mean).abs()).fold(0.0, f64::max);
    let total: usize = log.len();
    let result = json!({
        "seed": seed,
        "lambda": params.lambda(),
        "mean": mean,
        "family": family,
        "resolution": resolution,
        "best_params": best.best_params,
        "best_w": best.best_w,
        "benchmark_w": best.benchmark_w,
        "optimality_gap": best.optimality_gap,
        "evaluations": total,
        "max_excess": max_excess,
        "max_mean_error": max_mean_error,
        "tolerance": tol,
        "grid": grid,
        "descents": descents,
    });
    let log_path = config
        .log
        .clone()
        .or_else(|| config.out.as_ref().map(|p| p.with_extension("evaluations.csv")));
    if let Some(path) = &log_path {
        let mut buf = Vec::new();
        write_log_csv(&family, &log, &mut buf)?;
        emit(Some(path), &buf)?;
    }
    emit_json(config.out.as_deref(), &result)?;
    if max_excess > tol {
        return Ok(Status::Violation(format!("an evaluation exceeds the benchmark by {max_excess:e}")));
    }
    if max_mean_error > 1e-10 {
        return Ok(Status::Violation(format!("an evaluated waveform misses the mean by {max_mean_error:e}")));
    }
    Ok(Status::Ok)
}
