use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate fracture {id}: {reason}")]
    DegenerateFracture { id: usize, reason: String },

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    Solver { iterations: usize, residual: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("degenerate neighborhood of coarse vertex {vertex}: {reason}")]
    DegenerateNeighborhood { vertex: usize, reason: String },

    #[error("spectral problem failed on coarse vertex {vertex}: {reason}")]
    Spectral { vertex: usize, reason: String },

    #[error("forward solve failed at time step {step}: {reason}")]
    Forward { step: usize, reason: String },

    #[error("flux recovery failed on coarse element {element}: {reason}")]
    FluxRecovery { element: usize, reason: String },

    #[error("inversion state error: {0}")]
    State(String),

    #[error("step rejected at iteration {iteration}: {reason}; try a smaller step length")]
    StepRejected { iteration: usize, reason: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
