//! Single-file checkpoints: safetensors payload plus JSON metadata.
//!
//! Tensor keys are `model.<param>`, `ema.<param>`, `adam.m.<param>` and
//! `adam.v.<param>`. The metadata carries everything needed to rebuild the
//! denoiser and sample without the training configuration.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nucleidiff_core::{NoiseSchedule, NucleiClass, Scalar, ScheduleParams};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamW, EmaState};
use crate::param::Module;
use crate::trainer::{Phase, TrainConfig, Trainer};
use crate::unet::{Denoiser, DenoiserConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub dtype: String,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleParams,
    /// `(code, name)` for every mask class channel.
    pub classes: Vec<(u8, String)>,
    pub train: TrainConfig,
    pub phase: Phase,
    pub step: u64,
    pub ema_updates: u64,
    pub adam_steps: u64,
    pub software_version: String,
}

pub fn class_table() -> Vec<(u8, String)> {
    NucleiClass::ALL.iter().map(|c| (c.code(), c.name().to_string())).collect()
}

fn to_bytes<F: Scalar>(values: &[F]) -> Vec<u8> {
    let mut out = Vec::with_capacity(std::mem::size_of_val(values));
    for v in values {
        let x = v.to_f64().unwrap_or(f64::NAN);
        if F::DTYPE == "f32" {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Decodes an f32/f64 tensor into `F`.
pub fn view_to_vec<F: Scalar>(view: &TensorView<'_>) -> Result<Vec<F>> {
    let data = view.data();
    match view.dtype() {
        Dtype::F32 => {
            Ok(data.chunks_exact(4).map(|c| F::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect())
        }
        Dtype::F64 => Ok(data.chunks_exact(8).map(|c| F::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect()),
        d => Err(Error::Checkpoint(format!("unsupported tensor dtype {d:?}"))),
    }
}

fn dtype<F: Scalar>() -> Dtype {
    if F::DTYPE == "f32" {
        Dtype::F32
    } else {
        Dtype::F64
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save<F: Scalar>(path: &Path, trainer: &mut Trainer<F>) -> Result<()> {
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        dtype: F::DTYPE.to_string(),
        denoiser: trainer.model.config.clone(),
        schedule: trainer.schedule.params(),
        classes: class_table(),
        train: trainer.config.clone(),
        phase: trainer.phase,
        step: trainer.step,
        ema_updates: trainer.ema.updates,
        adam_steps: trainer.optimizer.steps,
        software_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let mut shapes = Vec::new();
    let mut model = Vec::new();
    trainer.model.visit_params("", &mut |name, p| {
        shapes.push((name.to_string(), p.shape.clone()));
        model.push(to_bytes(&p.value));
    });
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(4 * shapes.len());
    for (i, (name, shape)) in shapes.iter().enumerate() {
        buffers.push((format!("model.{name}"), shape.clone(), std::mem::take(&mut model[i])));
        buffers.push((format!("ema.{name}"), shape.clone(), to_bytes(&trainer.ema.shadow[i])));
        buffers.push((format!("adam.m.{name}"), shape.clone(), to_bytes(&trainer.optimizer.m[i])));
        buffers.push((format!("adam.v.{name}"), shape.clone(), to_bytes(&trainer.optimizer.v[i])));
    }
    let views = buffers
        .iter()
        .map(|(k, s, b)| TensorView::new(dtype::<F>(), s.clone(), b).map(|v| (k.clone(), v)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let json = serde_json::to_string(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let info = HashMap::from([("nucleidiff".to_string(), json)]);
    let bytes = safetensors::serialize(views, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// A loaded checkpoint: raw weights in `model`, plus EMA and optimizer state.
#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub meta: CheckpointMeta,
    pub model: Denoiser<F>,
    pub ema: Vec<Vec<F>>,
    pub adam_m: Vec<Vec<F>>,
    pub adam_v: Vec<Vec<F>>,
}

pub fn read_meta(bytes: &[u8]) -> Result<CheckpointMeta> {
    let (_, md) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let json = md
        .metadata()
        .as_ref()
        .and_then(|m| m.get("nucleidiff"))
        .ok_or_else(|| Error::Checkpoint("missing checkpoint metadata".into()))?;
    let meta: CheckpointMeta =
        serde_json::from_str(json).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", meta.format_version)));
    }
    Ok(meta)
}

pub fn load<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let meta = read_meta(&bytes)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model = Denoiser::<F>::new(meta.denoiser.clone(), 0)?;
    let names = model.param_names();
    let fetch = |key: String, expect: usize| -> Result<Vec<F>> {
        let view = st.tensor(&key).map_err(|_| Error::Checkpoint(format!("missing tensor {key}")))?;
        let v = view_to_vec(&view)?;
        if v.len() != expect {
            return Err(Error::Checkpoint(format!("tensor {key} has {} values, expected {expect}", v.len())));
        }
        Ok(v)
    };
    let mut sizes = Vec::new();
    model.visit_params("", &mut |_, p| sizes.push(p.len()));
    let mut weights = Vec::new();
    let mut ema = Vec::new();
    let mut adam_m = Vec::new();
    let mut adam_v = Vec::new();
    for (name, &n) in names.iter().zip(&sizes) {
        weights.push(fetch(format!("model.{name}"), n)?);
        ema.push(fetch(format!("ema.{name}"), n)?);
        adam_m.push(fetch(format!("adam.m.{name}"), n)?);
        adam_v.push(fetch(format!("adam.v.{name}"), n)?);
    }
    model.load_flat_params(&weights)?;
    Ok(Checkpoint { meta, model, ema, adam_m, adam_v })
}

impl<F: Scalar> Checkpoint<F> {
    pub fn schedule(&self) -> Result<NoiseSchedule<F>> {
        Ok(self.meta.schedule.build()?)
    }

    /// The denoiser carrying EMA weights, as used for sampling.
    pub fn ema_model(&self) -> Result<Denoiser<F>> {
        let mut m = self.model.clone();
        m.load_flat_params(&self.ema)?;
        Ok(m)
    }

    /// Rebuilds a trainer. Resuming requires `config` to match the stored
    /// one in every field that affects the trajectory; `phase` may only move
    /// from a main checkpoint into finetuning, which restarts the step count.
    pub fn into_trainer(self, config: TrainConfig, phase: Phase) -> Result<Trainer<F>> {
        let diff = config.trajectory_diff(&self.meta.train);
        if !diff.is_empty() {
            return Err(Error::ConfigMismatch(diff.join("\n")));
        }
        let step = match (self.meta.phase, phase) {
            (a, b) if a == b => self.meta.step,
            (Phase::Main, Phase::Finetune) => 0,
            (a, b) => {
                return Err(Error::ConfigMismatch(format!("  phase: checkpoint {a} vs requested {b}")));
            }
        };
        let schedule = self.schedule()?;
        let mut trainer = Trainer::new(self.model, schedule, config, phase)?;
        let ema = EmaState {
            shadow: self.ema,
            decay: trainer.config.ema_decay,
            warmup: trainer.config.ema_warmup,
            updates: self.meta.ema_updates,
        };
        if !ema.shapes_match(&mut trainer.model) {
            return Err(Error::Checkpoint("EMA shadow does not match model".into()));
        }
        trainer.ema = ema;
        let mut opt = AdamW::new(trainer.config.adamw(), &mut trainer.model);
        opt.restore(&mut trainer.model, self.adam_m, self.adam_v, self.meta.adam_steps)?;
        trainer.optimizer = opt;
        trainer.step = step;
        Ok(trainer)
    }
}
