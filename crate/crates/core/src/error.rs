use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("infeasible: constraint {worst} residual {residual:.3e} after {iterations} iterations")]
    Infeasible {
        worst: usize,
        residual: f64,
        iterations: usize,
    },

    #[error("synthesis infeasible at vertex {vertex}: {reason}")]
    SynthesisInfeasible { vertex: usize, reason: String },

    #[error("certificate invalid: {0}")]
    Certificate(String),

    #[error("run aborted at t = {t:.3} s: {reason}")]
    Divergence { t: f64, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
