use thiserror::Error;

use crate::solver::SolveStats;

#[derive(Debug, Error)]
pub enum Error {
    /// Parameters violate the existence condition of the Dirichlet problem.
    #[error("inadmissible parameters: {0}")]
    Admissibility(String),

    #[error("point outside the operation's domain: {0}")]
    Domain(String),

    #[error("path construction failed: {0}")]
    Construction(String),

    #[error("mesh generation failed: {0}")]
    Mesh(String),

    /// Boundary or pin data cannot be the trace of a spacelike field.
    #[error("infeasible boundary data: {0}")]
    Data(String),

    #[error("solver did not converge: {message} (iterations {}, residual {:.3e})", stats.iterations, stats.residual)]
    Solver { message: String, stats: SolveStats },

    #[error("degenerate slack on triangle {triangle}: w = {slack:e}")]
    DegenerateSlack { triangle: usize, slack: f64 },

    #[error("topology: {0}")]
    Topology(String),

    #[error("integration quality: {0}")]
    IntegrationQuality(String),

    #[error("missing capability: {0}")]
    Capability(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
