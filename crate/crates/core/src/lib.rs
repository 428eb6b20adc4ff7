//! Scalar-generic numerics for nuclei-conditioned histology diffusion.
//!
//! Every numeric routine is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision used by the training pipeline (`f32`) and
//! by reference computations (`f64`).

pub mod diffusion;
pub mod error;
pub mod linalg;
pub mod mask;
pub mod metrics;
pub mod patch;
pub mod scalar;
pub mod schedule;
pub mod stain;
pub mod synth;

pub use error::{Error, Result};
pub use mask::{encode, null_mask, ConditioningTensor, NucleiClass, COND_CHANNELS};
pub use patch::{AnnotatedRegion, Magnification, Manifest, PatchRecord, Split};
pub use scalar::Scalar;
pub use schedule::{NoiseSchedule, ScheduleParams};
pub use stain::{StainParams, StainProfile};

pub type NoiseSchedule32 = NoiseSchedule<f32>;
pub type NoiseSchedule64 = NoiseSchedule<f64>;
pub type StainProfile32 = StainProfile<f32>;
pub type StainProfile64 = StainProfile<f64>;
pub type FeatureSet32 = metrics::FeatureSet<f32>;
pub type FeatureSet64 = metrics::FeatureSet<f64>;
