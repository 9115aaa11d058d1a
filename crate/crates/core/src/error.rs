//! Shared error type for the whole pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// File-format violations: bad magic, truncated payload, garbled header.
    #[error("format error: {0}")]
    Format(String),

    /// A precondition on an argument was violated.
    #[error("validation error: {0}")]
    Validation(String),

    /// Input is structurally valid but numerically degenerate (e.g. zero variance).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Tensor/volume shape mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// A patch grid leaves voxels uncovered; reports the first such voxel.
    #[error("coverage gap: stride exceeds patch size, first uncovered voxel at ({0}, {1}, {2})")]
    Coverage(usize, usize, usize),

    /// A structure id has no voxels in the label map.
    #[error("structure {0} has no voxels")]
    EmptyStructure(u16),

    /// An iterative solver hit its iteration cap before reaching tolerance.
    #[error("solver did not converge: residual {residual:.3e} after {iterations} iterations")]
    Convergence { residual: f64, iterations: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
