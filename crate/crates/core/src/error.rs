use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain of the function.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("invalid model parameters: {0}")]
    InvalidParams(String),

    /// Explicit upwind step would not be monotone.
    #[error("CFL violation: {0}")]
    Cfl(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("node (class {class}, k_t {k_t}, k_s {k_s}) is not in the class domain")]
    InvalidNode { class: u8, k_t: usize, k_s: usize },

    #[error("empty barrier candidate set")]
    EmptyCandidates,

    #[error("non-finite value in class {class} at t = {t}, s = {s}, x = {x} (iteration {iteration})")]
    NonFinite {
        class: u8,
        t: f64,
        s: f64,
        x: f64,
        iteration: usize,
    },

    #[error("no convergence after {iterations} iterations (last sup change {last_change:e}, tolerance {tol:e})")]
    NonConvergence {
        iterations: usize,
        last_change: f64,
        tol: f64,
    },

    #[error("policy or field does not belong to this grid")]
    IncompatibleGrid,
}

impl Error {
    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors raised by input validation rather than by the numerics.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::NonFinite { .. } | Error::NonConvergence { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
