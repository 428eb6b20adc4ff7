use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} out of range 1..={steps}")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("region {source_id} ({height}x{width}) is smaller than the {patch}x{patch} patch size")]
    RegionTooSmall { source_id: String, height: usize, width: usize, patch: usize },

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("class code {0} is outside 0..=6")]
    InvalidClassCode(u32),

    #[error("duplicate patch {0}")]
    DuplicatePatch(String),

    #[error("insufficient tissue: {tissue_pixels} of {total_pixels} pixels above the optical density threshold")]
    InsufficientTissue { tissue_pixels: usize, total_pixels: usize },

    #[error("stain matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("matrix square root failed: {0}")]
    SqrtFailed(String),
}

pub type Result<T> = std::result::Result<T, Error>;
