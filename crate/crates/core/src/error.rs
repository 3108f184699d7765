use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the solver and its drivers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("unknown sphere rule `{0}`")]
    UnknownRule(String),

    #[error("sphere rule `{rule}` does not support order {order}")]
    UnsupportedOrder { rule: String, order: usize },

    #[error("sphere rule self-test failed: {0}")]
    QuadratureSelfTest(String),

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("occupation {value} at index {index} outside admissible range [0, {bound}]")]
    OccupationOutOfRange { index: usize, value: f64, bound: f64 },

    #[error("{what} = {value} outside domain: {bound}")]
    Domain {
        what: &'static str,
        value: f64,
        bound: String,
    },

    #[error("collision normal is not a unit vector (|n| = {norm})")]
    NonUnitNormal { norm: f64 },

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("gram matrix of collision invariants is singular")]
    SingularGram,

    #[error("time step {dt} exceeds the collision-rate bound {bound} (max rate {rate})")]
    StepSize { dt: f64, bound: f64, rate: f64 },

    #[error("state value {value} at index {index} leaves the invariant region [0, {bound}]")]
    InvariantViolation { index: usize, value: f64, bound: f64 },

    #[error("time went backwards: {previous} -> {current}")]
    TimeRegression { previous: f64, current: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("oracle cost guard: n_v = {n_v} exceeds {limit}")]
    CostGuard { n_v: usize, limit: usize },

    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("invalid stepper configuration: {0}")]
    InvalidStepper(String),

    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("invalid config value for `{key}`: {message}")]
    ConfigValue { key: String, message: String },

    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("unknown check `{0}` (expected equilibrium, oracle, geometry or conservation)")]
    UnknownCheck(String),

    #[error("snapshot format: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
