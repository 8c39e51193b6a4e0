use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("levels {0} and {1} are degenerate; transition labels would be ambiguous")]
    DegenerateLevels(usize, usize),

    #[error("hyperfine expression has a pole: A = {a} rad/s is equal to ∓2ω_I (ω_I = {omega_i} rad/s)")]
    HyperfinePole { a: f64, omega_i: f64 },

    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },

    #[error("carrier at {carrier_hz:.1} Hz is within 1 kHz of two transitions ({first} and {second})")]
    AmbiguousTransition {
        carrier_hz: f64,
        first: usize,
        second: usize,
    },

    #[error("point-dipole approximation is invalid at r = {0:.3} Å")]
    SiteTooClose(f64),

    #[error("structure file, line {line}: {message}")]
    Structure { line: usize, message: String },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("trace unresolved: found {found} clusters, {requested} requested")]
    Unresolved { found: usize, requested: usize },

    #[error("distribution is unimodal; no readout threshold")]
    Unimodal,

    #[error("{0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
