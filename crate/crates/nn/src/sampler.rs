//! Ancestral sampling with classifier-free guidance.

use nucleidiff_core::diffusion::{guided_eps, p_mean_variance, to_u8};
use nucleidiff_core::{NoiseSchedule, Scalar};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::{derived_rng, STREAM_SAMPLE};
use crate::unet::Denoiser;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub guidance_scale: f64,
    pub clip_x0: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { guidance_scale: 0.0, clip_x0: true }
    }
}

/// One noise stream per sample, so an image depends only on its own seed
/// and mask, not on the rest of the batch.
pub fn sample_rngs(seeds: &[u64]) -> Vec<ChaCha8Rng> {
    seeds.iter().map(|&s| derived_rng(s, STREAM_SAMPLE, 0, 0)).collect()
}

fn gaussian<F: Scalar>(rngs: &mut [ChaCha8Rng], per_sample: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(rngs.len() * per_sample);
    for rng in rngs.iter_mut() {
        out.extend((0..per_sample).map(|_| F::lit(rng.sample::<f64, _>(StandardNormal))));
    }
    out
}

/// Runs the reverse chain `t = T..1` from pure noise.
///
/// Each step evaluates the denoiser under `masks` and under the all-zero
/// null mask in one doubled batch (the null half is skipped when the
/// guidance scale is zero, which leaves the result unchanged), combines the
/// noise estimates with [`guided_eps`], takes the variance weights from the
/// conditional branch, and draws `x_{t-1}`. No noise is added at `t = 1`.
/// Returns NCHW images, clamped to `[-1, 1]` when `clip_x0` is set.
pub fn sample<F: Scalar>(
    model: &mut Denoiser<F>,
    schedule: &NoiseSchedule<F>,
    masks: &Tensor<F>,
    seeds: &[u64],
    config: SamplerConfig,
) -> Result<Tensor<F>> {
    let (b, _, h, w) = masks.dims4();
    if seeds.len() != b {
        return Err(Error::Shape(format!("{} seeds for {b} masks", seeds.len())));
    }
    let ch = model.config.in_channels;
    let per = ch * h * w;
    let mut rngs = sample_rngs(seeds);
    let mut x = Tensor::from_vec(gaussian(&mut rngs, per), &[b, ch, h, w])?;
    let guided = config.guidance_scale != 0.0;
    let both_masks = guided.then(|| Tensor::cat_batch(&[masks, &Tensor::zeros(&masks.shape)]));
    let scale = F::lit(config.guidance_scale);
    for t in (1..=schedule.steps()).rev() {
        let (eps, v) = match &both_masks {
            Some(m2) => {
                let xx = Tensor::cat_batch(&[&x, &x]);
                let out = model.predict(&xx, m2, &vec![t; 2 * b])?;
                let cond = out.eps_hat.slice_batch(0, b);
                let uncond = out.eps_hat.slice_batch(b, 2 * b);
                (guided_eps(&cond.data, &uncond.data, scale)?, out.v.slice_batch(0, b).data)
            }
            None => {
                let out = model.predict(&x, masks, &vec![t; b])?;
                (out.eps_hat.data, out.v.data)
            }
        };
        let step = p_mean_variance(schedule, &eps, &v, &x.data, &vec![t; b], config.clip_x0)?;
        if step.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample { step: t });
        }
        let next: Vec<F> = if t > 1 {
            let z = gaussian::<F>(&mut rngs, per);
            step.mean
                .iter()
                .zip(&step.log_variance)
                .zip(&z)
                .map(|((&m, &lv), &zv)| m + (F::lit(0.5) * lv).exp() * zv)
                .collect()
        } else if config.clip_x0 {
            step.mean.iter().map(|&m| m.max(-F::one()).min(F::one())).collect()
        } else {
            step.mean
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample { step: t });
        }
        x.data = next;
    }
    Ok(x)
}

/// Planar `[-1, 1]` sample to interleaved 8-bit RGB.
pub fn to_rgb8<F: Scalar>(x: &Tensor<F>, index: usize) -> Vec<u8> {
    let (_, c, h, w) = x.dims4();
    let hw = h * w;
    let base = index * c * hw;
    let mut out = vec![0u8; hw * 3];
    for p in 0..hw {
        for k in 0..3 {
            out[p * 3 + k] = to_u8(x.data[base + k * hw + p]);
        }
    }
    out
}
