use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("time constant tau[{row}][{col}] = {value} must be positive")]
    NonPositiveTimeConstant { row: usize, col: usize, value: f64 },

    #[error("sample time {0} must be positive")]
    NonPositiveSampleTime(f64),

    #[error("dead time of input {input} ({dead_time} s) is not an integer multiple of the sample time {sample_time} s")]
    NonIntegerDelay {
        input: usize,
        dead_time: f64,
        sample_time: f64,
    },

    #[error("discrete pole coefficient a[{row}][{col}] = {value} is not strictly inside the unit circle")]
    UnstableSubprocess { row: usize, col: usize, value: f64 },

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("prediction horizon must be at least 1")]
    ZeroHorizon,

    #[error("normal-equations matrix is numerically singular (condition estimate {condition:e})")]
    SingularSystem { condition: f64 },

    #[error("reference sequence covers {available} samples but {required} are needed")]
    DelayMismatch { required: usize, available: usize },

    #[error("eigenvalue solver did not converge on a {dimension}x{dimension} companion matrix")]
    EigenvalueFailure { dimension: usize },

    #[error("loop {loop_index} has no phase crossover below the Nyquist frequency")]
    NoCrossover { loop_index: usize },

    #[error("no feasible epsilon: the largest candidate {epsilon} still violates the constraints")]
    NoFeasibleEpsilon { epsilon: f64 },

    #[error("simulation diverged at step {step} (|y| = {magnitude:e})")]
    NumericalDivergence { step: usize, magnitude: f64 },

    #[error("metrics requested on an empty series")]
    EmptySeries,

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}
