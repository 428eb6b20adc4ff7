//! Neural components: a scalar-generic layer engine with manual backward
//! passes, the mask-conditioned U-Net denoiser, its trainer and sampler, and
//! an Inception-V3 feature extractor for evaluation.

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod inception;
pub mod layers;
pub mod optim;
pub mod param;
pub mod presets;
pub mod sampler;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
pub use optim::{AdamW, AdamWConfig, EmaState};
pub use param::{Module, Param};
pub use presets::Preset;
pub use sampler::{sample, SamplerConfig};
pub use tensor::Tensor;
pub use trainer::{Phase, StepReport, TrainConfig, Trainer, TrainingSet};
pub use unet::{Denoiser, DenoiserConfig, DenoiserOutput};

pub type Denoiser32 = Denoiser<f32>;
pub type Denoiser64 = Denoiser<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Trainer32 = Trainer<f32>;
pub type Trainer64 = Trainer<f64>;
