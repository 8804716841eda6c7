use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid product space: {0}")]
    InvalidSpace(String),
    #[error("unusable sampling: {0}")]
    InvalidGrid(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("inconsistent index partition: {0}")]
    Partition(String),
    #[error("unsupported factor dimension {0} (expected 1, 2 or 3)")]
    UnsupportedDimension(usize),
    #[error("direction undefined at the frequency origin")]
    UndefinedDirection,
    #[error("invalid atom: {0}")]
    InvalidAtom(String),
    #[error("level {level} out of range (max {max})")]
    LevelOutOfRange { level: u32, max: u32 },
    #[error("invalid sector index {nu} for level {level} ({count} sectors)")]
    InvalidSector { level: u32, nu: usize, count: usize },
    #[error("operator is not tensor-factorizable: {0}")]
    NotFactorizable(String),
    #[error("operator has no multiplier form: {0}")]
    NotMultiplier(String),
    #[error("phase is degenerate: {0}")]
    Degenerate(String),
    #[error("power iteration did not converge: {0}")]
    NonConvergence(String),
    #[error("complement mask is empty (influence constant too large for the grid)")]
    EmptyMask,
    #[error("truncation defect {defect:.3e} exceeds {limit:.1e}; smallest atoms under-resolved")]
    Truncation { defect: f64, limit: f64 },
    #[error("insufficient grid: {0}")]
    InsufficientGrid(String),
    #[error("fit needs at least {needed} points, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("malformed field container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
