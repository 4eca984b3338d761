use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid signal: {0}")]
    InvalidSignal(String),

    #[error("signal is not periodic; use the running-average estimators for non-periodic inputs")]
    NotPeriodic,

    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "numeric step produced occupancy {state} at t = {time} (step {step}); \
         reduce the grid step below {suggested_step}"
    )]
    StepSize {
        time: f64,
        state: f64,
        step: f64,
        suggested_step: f64,
    },

    #[error("time range [{from}, {to}] is outside the trajectory [{start}, {end}]")]
    OutOfRange {
        from: f64,
        to: f64,
        start: f64,
        end: f64,
    },

    #[error("mean constraint infeasible: {0}")]
    Infeasible(String),

    #[error("perturbation clips at epsilon = {epsilon} (min level {min_level}); use a smaller epsilon")]
    Clipping { epsilon: f64, min_level: f64 },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
