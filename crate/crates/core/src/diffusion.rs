//! Forward corruption, reverse-step parameterization and training objectives.
//!
//! Batches are flat slices holding `B` samples of `dim` values each, with one
//! 1-based timestep per sample. The variational term is reported in bits per
//! dimension and scaled by `T`, so `l_vlb` estimates the full bound
//! `L_0 + ... + L_{T-1}` from a single sampled timestep per sample.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

fn sample_dim(total: usize, batch: usize) -> Result<usize> {
    if batch == 0 || !total.is_multiple_of(batch) {
        return Err(Error::ShapeMismatch(format!("{total} values cannot be split into {batch} samples")));
    }
    Ok(total / batch)
}

fn same_len<F>(a: &[F], b: &[F], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{what}: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn q_sample<F: Scalar>(s: &NoiseSchedule<F>, x0: &[F], t: &[usize], eps: &[F]) -> Result<Vec<F>> {
    same_len(x0, eps, "q_sample x0/eps")?;
    let dim = sample_dim(x0.len(), t.len())?;
    let mut out = Vec::with_capacity(x0.len());
    for (b, &tb) in t.iter().enumerate() {
        let (ca, cb) = s.marginal_coeffs(tb)?;
        let r = b * dim..(b + 1) * dim;
        out.extend(x0[r.clone()].iter().zip(&eps[r]).map(|(&x, &e)| ca * x + cb * e));
    }
    Ok(out)
}

/// Mean squared error over every element of the batch.
pub fn loss_simple<F: Scalar>(eps: &[F], eps_hat: &[F]) -> Result<F> {
    same_len(eps, eps_hat, "loss_simple")?;
    if eps.is_empty() {
        return Ok(F::zero());
    }
    let sum: F = eps.iter().zip(eps_hat).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(sum / F::lit(eps.len() as f64))
}

/// Gradient of [`loss_simple`] with respect to `eps_hat`.
pub fn loss_simple_grad<F: Scalar>(eps: &[F], eps_hat: &[F]) -> Result<Vec<F>> {
    same_len(eps, eps_hat, "loss_simple_grad")?;
    let scale = F::lit(2.0) / F::lit(eps.len().max(1) as f64);
    Ok(eps.iter().zip(eps_hat).map(|(&a, &b)| scale * (b - a)).collect())
}

/// `L_hybrid = L_simple + λ·L_vlb`.
pub fn loss_hybrid<F: Scalar>(l_simple: F, l_vlb: F, lambda: F) -> F {
    l_simple + lambda * l_vlb
}

/// Classifier-free guidance: `cond + s·(cond − uncond)`.
pub fn guided_eps<F: Scalar>(eps_cond: &[F], eps_uncond: &[F], scale: F) -> Result<Vec<F>> {
    same_len(eps_cond, eps_uncond, "guided_eps")?;
    Ok(eps_cond.iter().zip(eps_uncond).map(|(&c, &u)| c + scale * (c - u)).collect())
}

/// KL(N(mean1, e^logvar1) ‖ N(mean2, e^logvar2)) in nats.
pub fn normal_kl<F: Scalar>(mean1: F, logvar1: F, mean2: F, logvar2: F) -> F {
    let half = F::lit(0.5);
    let d = mean1 - mean2;
    half * ((logvar2 - logvar1) - F::one() + (logvar1 - logvar2).exp() + d * d * (-logvar2).exp())
}

/// ∂ normal_kl / ∂ logvar2.
pub fn normal_kl_grad_logvar2<F: Scalar>(mean1: F, logvar1: F, mean2: F, logvar2: F) -> F {
    let d = mean1 - mean2;
    F::lit(0.5) * (F::one() - (logvar1 - logvar2).exp() - d * d * (-logvar2).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;
const LOG_FLOOR: f64 = 1e-12;

/// Tanh approximation of the standard normal CDF.
pub fn approx_standard_normal_cdf<F: Scalar>(x: F) -> F {
    let u = F::lit(GELU_C) * (x + F::lit(GELU_K) * x * x * x);
    F::lit(0.5) * (F::one() + u.tanh())
}

fn approx_standard_normal_pdf<F: Scalar>(x: F) -> F {
    let u = F::lit(GELU_C) * (x + F::lit(GELU_K) * x * x * x);
    let th = u.tanh();
    F::lit(0.5) * (F::one() - th * th) * F::lit(GELU_C) * (F::one() + F::lit(3.0 * GELU_K) * x * x)
}

/// Log-likelihood of `x` (on the `[-1, 1]` 8-bit lattice) under a Gaussian
/// discretized into 256 bins, together with its derivative in `log_scale`.
pub fn discretized_gaussian_log_likelihood<F: Scalar>(x: F, mean: F, log_scale: F) -> (F, F) {
    let bin = F::lit(1.0 / 255.0);
    let floor = F::lit(LOG_FLOOR);
    let centered = x - mean;
    let inv_stdv = (-log_scale).exp();
    let plus_in = inv_stdv * (centered + bin);
    let min_in = inv_stdv * (centered - bin);
    let cdf_plus = approx_standard_normal_cdf(plus_in);
    let cdf_min = approx_standard_normal_cdf(min_in);
    // d(plus_in)/d(log_scale) = -plus_in, likewise for min_in.
    let d_plus = -approx_standard_normal_pdf(plus_in) * plus_in;
    let d_min = -approx_standard_normal_pdf(min_in) * min_in;
    if x < F::lit(-0.999) {
        if cdf_plus > floor {
            (cdf_plus.ln(), d_plus / cdf_plus)
        } else {
            (floor.ln(), F::zero())
        }
    } else if x > F::lit(0.999) {
        let tail = F::one() - cdf_min;
        if tail > floor {
            (tail.ln(), -d_min / tail)
        } else {
            (floor.ln(), F::zero())
        }
    } else {
        let delta = cdf_plus - cdf_min;
        if delta > floor {
            (delta.ln(), (d_plus - d_min) / delta)
        } else {
            (floor.ln(), F::zero())
        }
    }
}

/// Mean and clipped log-variance of the true posterior q(x_{t−1} | x_t, x0).
pub fn q_posterior<F: Scalar>(s: &NoiseSchedule<F>, x0: &[F], x_t: &[F], t: &[usize]) -> Result<(Vec<F>, Vec<F>)> {
    same_len(x0, x_t, "q_posterior")?;
    let dim = sample_dim(x0.len(), t.len())?;
    let mut mean = Vec::with_capacity(x0.len());
    let mut logvar = Vec::with_capacity(x0.len());
    for (b, &tb) in t.iter().enumerate() {
        let i = s.index(tb)?;
        for k in b * dim..(b + 1) * dim {
            mean.push(s.posterior_coef_x0[i] * x0[k] + s.posterior_coef_xt[i] * x_t[k]);
            logvar.push(s.posterior_log_variance_clipped[i]);
        }
    }
    Ok((mean, logvar))
}

/// Parameters of the learned reverse step p(x_{t−1} | x_t).
#[derive(Debug, Clone)]
pub struct ReverseStep<F> {
    pub mean: Vec<F>,
    pub log_variance: Vec<F>,
    pub pred_x0: Vec<F>,
}

/// Turns the noise prediction and variance coefficient into the reverse-step Gaussian.
///
/// `v` must already be squashed into `[0, 1]`; the log-variance interpolates
/// between the clipped log β̃_t (`v = 0`) and log β_t (`v = 1`).
pub fn p_mean_variance<F: Scalar>(
    s: &NoiseSchedule<F>,
    eps_hat: &[F],
    v: &[F],
    x_t: &[F],
    t: &[usize],
    clip_x0: bool,
) -> Result<ReverseStep<F>> {
    same_len(eps_hat, x_t, "p_mean_variance eps_hat/x_t")?;
    same_len(v, x_t, "p_mean_variance v/x_t")?;
    let dim = sample_dim(x_t.len(), t.len())?;
    let n = x_t.len();
    let mut out = ReverseStep {
        mean: Vec::with_capacity(n),
        log_variance: Vec::with_capacity(n),
        pred_x0: Vec::with_capacity(n),
    };
    for (b, &tb) in t.iter().enumerate() {
        let i = s.index(tb)?;
        let (max_log, min_log) = (s.log_beta[i], s.posterior_log_variance_clipped[i]);
        for k in b * dim..(b + 1) * dim {
            let mut x0 = s.sqrt_recip_alpha_bar[i] * x_t[k] - s.sqrt_recipm1_alpha_bar[i] * eps_hat[k];
            if clip_x0 {
                x0 = x0.max(-F::one()).min(F::one());
            }
            out.pred_x0.push(x0);
            out.mean.push(s.posterior_coef_x0[i] * x0 + s.posterior_coef_xt[i] * x_t[k]);
            out.log_variance.push(v[k] * max_log + (F::one() - v[k]) * min_log);
        }
    }
    Ok(out)
}

/// Per-sample diagnostics of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimestepLoss {
    pub t: usize,
    pub l_simple: f64,
    /// Bits per dimension of the single VLB term at `t` (unscaled by T).
    pub l_vlb_term: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_simple: f64,
    pub l_vlb: f64,
    pub l_hybrid: f64,
    pub per_timestep: Vec<TimestepLoss>,
}

/// Gradients of `l_hybrid` with respect to the denoiser outputs.
#[derive(Debug, Clone)]
pub struct LossGrads<F> {
    pub eps_hat: Vec<F>,
    pub v: Vec<F>,
}

/// Inputs to the hybrid objective for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a, F> {
    pub x0: &'a [F],
    pub x_t: &'a [F],
    pub eps: &'a [F],
    pub t: &'a [usize],
    pub eps_hat: &'a [F],
    pub v: &'a [F],
}

/// Per-sample VLB terms (bits/dim, unscaled) and their gradient in `v`.
///
/// The model mean is built from `eps_hat` but treated as a constant: no
/// gradient flows back into the noise prediction from this term.
pub fn vlb_terms<F: Scalar>(s: &NoiseSchedule<F>, inp: &LossInputs<'_, F>) -> Result<(Vec<F>, Vec<F>)> {
    same_len(inp.x0, inp.x_t, "vlb x0/x_t")?;
    let dim = sample_dim(inp.x0.len(), inp.t.len())?;
    let model = p_mean_variance(s, inp.eps_hat, inp.v, inp.x_t, inp.t, false)?;
    let (true_mean, true_logvar) = q_posterior(s, inp.x0, inp.x_t, inp.t)?;
    let inv_ln2 = F::lit(std::f64::consts::LOG2_E);
    let per_dim = F::one() / F::lit(dim as f64);
    let mut terms = Vec::with_capacity(inp.t.len());
    let mut grad_v = vec![F::zero(); inp.v.len()];
    for (b, &tb) in inp.t.iter().enumerate() {
        let i = s.index(tb)?;
        let dlogvar_dv = s.log_beta[i] - s.posterior_log_variance_clipped[i];
        let mut acc = F::zero();
        for k in b * dim..(b + 1) * dim {
            let (m, lv) = (model.mean[k], model.log_variance[k]);
            let (val, dval_dlogvar) = if tb == 1 {
                let (ll, dll_dscale) = discretized_gaussian_log_likelihood(inp.x0[k], m, F::lit(0.5) * lv);
                (-ll, -F::lit(0.5) * dll_dscale)
            } else {
                (
                    normal_kl(true_mean[k], true_logvar[k], m, lv),
                    normal_kl_grad_logvar2(true_mean[k], true_logvar[k], m, lv),
                )
            };
            acc += val;
            grad_v[k] = dval_dlogvar * dlogvar_dv * per_dim * inv_ln2;
        }
        terms.push(acc * per_dim * inv_ln2);
    }
    Ok((terms, grad_v))
}

/// `l_vlb`: mean over the batch of `T · L_t`, in bits per dimension.
pub fn loss_vlb<F: Scalar>(s: &NoiseSchedule<F>, inp: &LossInputs<'_, F>) -> Result<F> {
    let (terms, _) = vlb_terms(s, inp)?;
    let scale = F::lit(s.steps() as f64) / F::lit(terms.len() as f64);
    Ok(terms.iter().copied().sum::<F>() * scale)
}

/// Evaluates `l_simple`, `l_vlb` and `l_hybrid` and their gradients.
///
/// `eps_hat` receives gradient only from `l_simple`; `v` only from `λ·l_vlb`.
pub fn hybrid_loss<F: Scalar>(
    s: &NoiseSchedule<F>,
    inp: &LossInputs<'_, F>,
    lambda: F,
) -> Result<(LossReport, LossGrads<F>)> {
    same_len(inp.eps, inp.eps_hat, "hybrid eps/eps_hat")?;
    same_len(inp.v, inp.eps_hat, "hybrid v/eps_hat")?;
    let dim = sample_dim(inp.eps.len(), inp.t.len())?;
    let batch = inp.t.len();
    let l_simple = loss_simple(inp.eps, inp.eps_hat)?;
    let grad_eps = loss_simple_grad(inp.eps, inp.eps_hat)?;
    let (terms, mut grad_v) = vlb_terms(s, inp)?;
    let steps = F::lit(s.steps() as f64);
    let l_vlb = terms.iter().copied().sum::<F>() * steps / F::lit(batch as f64);
    let gscale = lambda * steps / F::lit(batch as f64);
    for g in &mut grad_v {
        *g *= gscale;
    }
    let l_hybrid = loss_hybrid(l_simple, l_vlb, lambda);
    let per_timestep = (0..batch)
        .map(|b| {
            let r = b * dim..(b + 1) * dim;
            let mse = loss_simple(&inp.eps[r.clone()], &inp.eps_hat[r]).unwrap_or(F::nan());
            TimestepLoss { t: inp.t[b], l_simple: to_f64(mse), l_vlb_term: to_f64(terms[b]) }
        })
        .collect();
    let report =
        LossReport { l_simple: to_f64(l_simple), l_vlb: to_f64(l_vlb), l_hybrid: to_f64(l_hybrid), per_timestep };
    Ok((report, LossGrads { eps_hat: grad_eps, v: grad_v }))
}

fn to_f64<F: Scalar>(x: F) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Maps `[-1, 1]` back to 8-bit intensities.
pub fn to_u8<F: Scalar>(x: F) -> u8 {
    let v = ((x + F::one()) * F::lit(127.5)).round();
    v.max(F::zero()).min(F::lit(255.0)).to_u8().unwrap_or(0)
}

/// 8-bit intensity to `[-1, 1]` via `x / 127.5 − 1`.
pub fn from_u8<F: Scalar>(x: u8) -> F {
    F::lit(x as f64 / 127.5 - 1.0)
}
