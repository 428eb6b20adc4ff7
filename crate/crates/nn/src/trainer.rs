//! Two-phase optimization loop with conditioning dropout and EMA.

use std::fmt;
use std::str::FromStr;

use nucleidiff_core::diffusion::{from_u8, hybrid_loss, q_sample, LossInputs, LossReport};
use nucleidiff_core::{encode, NoiseSchedule, PatchRecord, Scalar, COND_CHANNELS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig, EmaState};
use crate::param::Module;
use crate::tensor::Tensor;
use crate::unet::Denoiser;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Main,
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Main => "main",
            Phase::Finetune => "finetune",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "main" => Ok(Phase::Main),
            "finetune" => Ok(Phase::Finetune),
            _ => Err(Error::Config(format!("unknown phase {s:?} (expected main or finetune)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_main: f64,
    pub lr_finetune: f64,
    pub cond_drop_rate_main: f64,
    pub cond_drop_rate_finetune: f64,
    pub ema_decay: f64,
    pub ema_warmup: bool,
    pub lambda_vlb: f64,
    pub batch_size: usize,
    pub max_steps_main: u64,
    pub max_steps_finetune: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            lr_main: 1e-4,
            lr_finetune: 2e-5,
            cond_drop_rate_main: 0.0,
            cond_drop_rate_finetune: 0.2,
            ema_decay: 0.999,
            ema_warmup: false,
            lambda_vlb: 0.001,
            batch_size: 40,
            max_steps_main: 150_000,
            max_steps_finetune: 50_000,
            checkpoint_every: 5_000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
        }
    }

    /// Desk-scale settings: short phases, a larger step size and EMA warmup
    /// so a 2k-step run can converge.
    pub fn tiny() -> Self {
        Self {
            lr_main: 1e-3,
            lr_finetune: 2e-4,
            batch_size: 16,
            max_steps_main: 2_000,
            max_steps_finetune: 500,
            checkpoint_every: 500,
            ema_warmup: true,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, r) in [
            ("cond_drop_rate_main", self.cond_drop_rate_main),
            ("cond_drop_rate_finetune", self.cond_drop_rate_finetune),
            ("ema_decay", self.ema_decay),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must lie in [0, 1], got {r}"));
            }
        }
        for (name, lr) in [("lr_main", self.lr_main), ("lr_finetune", self.lr_finetune)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.lambda_vlb < 0.0 || !self.lambda_vlb.is_finite() {
            return bad(format!("lambda_vlb must be non-negative, got {}", self.lambda_vlb));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 || self.adam_eps <= 0.0 {
            return bad("weight_decay and grad_clip must be non-negative and adam_eps positive".into());
        }
        Ok(())
    }

    pub fn lr(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Main => self.lr_main,
            Phase::Finetune => self.lr_finetune,
        }
    }

    pub fn cond_drop_rate(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Main => self.cond_drop_rate_main,
            Phase::Finetune => self.cond_drop_rate_finetune,
        }
    }

    pub fn max_steps(&self, phase: Phase) -> u64 {
        match phase {
            Phase::Main => self.max_steps_main,
            Phase::Finetune => self.max_steps_finetune,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
        }
    }

    /// Field-by-field differences that would change the optimization
    /// trajectory. Step budgets and checkpoint cadence are excluded.
    pub fn trajectory_diff(&self, other: &TrainConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let (a, b) = (a.as_object().unwrap(), b.as_object().unwrap());
        a.iter()
            .filter(|(k, _)| !matches!(k.as_str(), "max_steps_main" | "max_steps_finetune" | "checkpoint_every"))
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, v)| {
                format!(
                    "  {k}: checkpoint {} vs requested {}",
                    b.get(k).map_or("<absent>".into(), |x| x.to_string()),
                    v
                )
            })
            .collect()
    }
}

/// Decoded training patches: images in `[-1, 1]` and their encoded masks.
#[derive(Debug, Clone)]
pub struct TrainingSet<F> {
    pub size: usize,
    pub images: Vec<Vec<F>>,
    pub masks: Vec<Vec<F>>,
    pub ids: Vec<String>,
}

impl<F: Scalar> TrainingSet<F> {
    pub fn from_records(records: &[PatchRecord]) -> Result<Self> {
        let size = records.first().map(|r| r.size).ok_or_else(|| Error::Config("empty training set".into()))?;
        let mut set = Self { size, images: Vec::new(), masks: Vec::new(), ids: Vec::new() };
        for r in records {
            if r.size != size {
                return Err(Error::Shape(format!("patch {} is {}px, expected {size}px", r.id(), r.size)));
            }
            set.images.push(hwc_to_chw(&r.pixels, size));
            let m = encode(&r.class_map, &r.inst_map, size, size)?;
            set.masks.push(m.layout.iter().map(|&b| F::lit(b as f64)).collect());
            set.ids.push(r.id());
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Interleaved 8-bit RGB to planar `[-1, 1]`.
pub fn hwc_to_chw<F: Scalar>(pixels: &[u8], size: usize) -> Vec<F> {
    let hw = size * size;
    let mut out = vec![F::zero(); 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            out[c * hw + p] = from_u8(pixels[p * 3 + c]);
        }
    }
    out
}

/// Stream derived from `(seed, stream, a, b)`; every random decision in
/// training and sampling draws from one of these so runs are resumable.
pub fn derived_rng(seed: u64, stream: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, v) in [seed, stream, a, b].into_iter().enumerate() {
        key[i * 8..(i + 1) * 8].copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_SAMPLE: u64 = 2;

#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub phase: Phase,
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub null_masks: usize,
    pub loss: LossReport,
    pub batch: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Trainer<F> {
    pub model: Denoiser<F>,
    pub optimizer: AdamW<F>,
    pub ema: EmaState<F>,
    pub schedule: NoiseSchedule<F>,
    pub config: TrainConfig,
    pub phase: Phase,
    /// Steps completed in the current phase.
    pub step: u64,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(mut model: Denoiser<F>, schedule: NoiseSchedule<F>, config: TrainConfig, phase: Phase) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(config.adamw(), &mut model);
        let ema = EmaState::new(&mut model, config.ema_decay, config.ema_warmup);
        Ok(Self { model, optimizer, ema, schedule, config, phase, step: 0 })
    }

    /// Moves a finished main phase into finetuning: weights, EMA and
    /// optimizer moments carry over; the step counter restarts.
    pub fn begin_finetune(&mut self) {
        self.phase = Phase::Finetune;
        self.step = 0;
    }

    /// Batch indices, timesteps, noise and null-mask decisions for `step`.
    fn draw(&self, rng: &mut ChaCha8Rng, n: usize) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
        let b = self.config.batch_size;
        let idx = if b <= n {
            rand::seq::index::sample(rng, n, b).into_vec()
        } else {
            (0..b).map(|_| rng.random_range(0..n)).collect()
        };
        let steps = self.schedule.steps();
        let t = (0..b).map(|_| rng.random_range(1..=steps)).collect();
        let rate = self.config.cond_drop_rate(self.phase);
        let drop = (0..b).map(|_| rng.random::<f64>() < rate).collect();
        (idx, t, drop)
    }

    /// One optimizer step on a freshly drawn batch.
    pub fn train_step(&mut self, data: &TrainingSet<F>) -> Result<StepReport> {
        if data.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let mut rng = derived_rng(self.config.seed, STREAM_TRAIN, self.phase as u64, self.step);
        let (idx, t, drop) = self.draw(&mut rng, data.len());
        let size = data.size;
        let b = idx.len();
        let mut x0 = Vec::with_capacity(b * 3 * size * size);
        let mut mask = Vec::with_capacity(b * COND_CHANNELS * size * size);
        for (&i, &null) in idx.iter().zip(&drop) {
            x0.extend_from_slice(&data.images[i]);
            if null {
                mask.extend(std::iter::repeat_n(F::zero(), data.masks[i].len()));
            } else {
                mask.extend_from_slice(&data.masks[i]);
            }
        }
        let eps: Vec<F> = (0..x0.len()).map(|_| F::lit(rng.sample::<f64, _>(StandardNormal))).collect();
        let x_t = q_sample(&self.schedule, &x0, &t, &eps)?;
        let x_t = Tensor::from_vec(x_t, &[b, 3, size, size])?;
        let mask = Tensor::from_vec(mask, &[b, COND_CHANNELS, size, size])?;

        self.model.zero_grad();
        let out = self.model.forward_train(&x_t, &mask, &t, &mut rng)?;
        let inputs =
            LossInputs { x0: &x0, x_t: &x_t.data, eps: &eps, t: &t, eps_hat: &out.eps_hat.data, v: &out.v.data };
        let (loss, grads) = hybrid_loss(&self.schedule, &inputs, F::lit(self.config.lambda_vlb))?;
        let batch: Vec<String> = idx.iter().map(|&i| data.ids[i].clone()).collect();
        if !(loss.l_hybrid.is_finite() && loss.l_simple.is_finite()) {
            return Err(Error::NonFiniteLoss { step: self.step, timesteps: t, batch });
        }
        self.model.backward(&grads.eps_hat, &grads.v);
        let lr = self.config.lr(self.phase);
        let grad_norm = self.optimizer.step(&mut self.model, lr);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, timesteps: t, batch });
        }
        self.ema.update(&mut self.model);
        self.step += 1;
        Ok(StepReport {
            phase: self.phase,
            step: self.step,
            lr,
            grad_norm,
            null_masks: drop.iter().filter(|&&d| d).count(),
            loss,
            batch,
        })
    }

    /// Trains until `until` steps of the current phase have completed,
    /// calling `on_step` after each one.
    pub fn run(
        &mut self,
        data: &TrainingSet<F>,
        until: u64,
        mut on_step: impl FnMut(&Self, &StepReport) -> Result<()>,
    ) -> Result<()> {
        while self.step < until {
            let report = self.train_step(data)?;
            on_step(self, &report)?;
        }
        Ok(())
    }

    /// A copy of the denoiser carrying the EMA weights.
    pub fn ema_model(&self) -> Result<Denoiser<F>> {
        let mut m = self.model.clone();
        m.load_flat_params(&self.ema.shadow)?;
        Ok(m)
    }
}

/// Mean `l_simple` over every patch at each of `timesteps`, with noise
/// drawn from `seed`. Masks are always the real ones.
pub fn eval_l_simple<F: Scalar>(
    model: &mut Denoiser<F>,
    schedule: &NoiseSchedule<F>,
    data: &TrainingSet<F>,
    timesteps: &[usize],
    seed: u64,
) -> Result<f64> {
    let size = data.size;
    let n = data.len();
    let x0: Vec<F> = data.images.concat();
    let mask = Tensor::from_vec(data.masks.concat(), &[n, COND_CHANNELS, size, size])?;
    let mut total = 0.0;
    for (k, &t) in timesteps.iter().enumerate() {
        let mut rng = derived_rng(seed, STREAM_TRAIN + 100, k as u64, t as u64);
        let eps: Vec<F> = (0..x0.len()).map(|_| F::lit(rng.sample::<f64, _>(StandardNormal))).collect();
        let tt = vec![t; n];
        let x_t = Tensor::from_vec(q_sample(schedule, &x0, &tt, &eps)?, &[n, 3, size, size])?;
        let out = model.predict(&x_t, &mask, &tt)?;
        total += nucleidiff_core::diffusion::loss_simple(&eps, &out.eps_hat.data)?.to_f64().unwrap();
    }
    Ok(total / timesteps.len() as f64)
}
