//! Per-timestep constants of the Gaussian forward process.
//!
//! Timesteps are 1-based (`1..=T`) at the API; arrays are stored 0-based.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Parameters that fully determine a schedule; stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleParams {
    pub fn build<F: Scalar>(&self) -> Result<NoiseSchedule<F>> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule<F> {
    params: ScheduleParams,
    pub beta: Vec<F>,
    pub alpha: Vec<F>,
    pub alpha_bar: Vec<F>,
    /// ᾱ_{t-1}, with ᾱ_0 = 1.
    pub alpha_bar_prev: Vec<F>,
    pub sqrt_alpha_bar: Vec<F>,
    pub sqrt_one_minus_alpha_bar: Vec<F>,
    pub sqrt_recip_alpha_bar: Vec<F>,
    pub sqrt_recipm1_alpha_bar: Vec<F>,
    /// β̃_t; zero at t = 1.
    pub posterior_variance: Vec<F>,
    /// log β̃_t with the t = 1 entry replaced by the t = 2 entry.
    pub posterior_log_variance_clipped: Vec<F>,
    pub posterior_coef_x0: Vec<F>,
    pub posterior_coef_xt: Vec<F>,
    pub log_beta: Vec<F>,
}

impl<F: Scalar> NoiseSchedule<F> {
    /// Linearly spaced β from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("step count must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let beta: Vec<F> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    F::lit(beta_start)
                } else {
                    let frac = i as f64 / (steps - 1) as f64;
                    F::lit(beta_start + (beta_end - beta_start) * frac)
                }
            })
            .collect();
        Ok(Self::from_betas(ScheduleParams { steps, beta_start, beta_end }, beta))
    }

    fn from_betas(params: ScheduleParams, beta: Vec<F>) -> Self {
        let one = F::one();
        let alpha: Vec<F> = beta.iter().map(|&b| one - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = one;
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let alpha_bar_prev: Vec<F> = std::iter::once(one).chain(alpha_bar.iter().copied()).take(beta.len()).collect();

        let posterior_variance: Vec<F> =
            (0..beta.len()).map(|i| beta[i] * (one - alpha_bar_prev[i]) / (one - alpha_bar[i])).collect();
        let posterior_log_variance_clipped: Vec<F> = (0..beta.len())
            .map(|i| {
                let v = if i == 0 && beta.len() > 1 { posterior_variance[1] } else { posterior_variance[i] };
                // T = 1 leaves nothing to clip to; fall back to β so the log stays finite.
                if v > F::zero() {
                    v.ln()
                } else {
                    beta[i].ln()
                }
            })
            .collect();

        Self {
            params,
            sqrt_alpha_bar: alpha_bar.iter().map(|a| a.sqrt()).collect(),
            sqrt_one_minus_alpha_bar: alpha_bar.iter().map(|&a| (one - a).sqrt()).collect(),
            sqrt_recip_alpha_bar: alpha_bar.iter().map(|&a| (one / a).sqrt()).collect(),
            sqrt_recipm1_alpha_bar: alpha_bar.iter().map(|&a| (one / a - one).sqrt()).collect(),
            posterior_coef_x0: (0..beta.len())
                .map(|i| beta[i] * alpha_bar_prev[i].sqrt() / (one - alpha_bar[i]))
                .collect(),
            posterior_coef_xt: (0..beta.len())
                .map(|i| (one - alpha_bar_prev[i]) * alpha[i].sqrt() / (one - alpha_bar[i]))
                .collect(),
            log_beta: beta.iter().map(|b| b.ln()).collect(),
            posterior_variance,
            posterior_log_variance_clipped,
            alpha_bar_prev,
            alpha_bar,
            alpha,
            beta,
        }
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// 0-based index of the 1-based timestep `t`.
    pub fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            Err(Error::TimestepOutOfRange { t, steps: self.steps() })
        } else {
            Ok(t - 1)
        }
    }

    /// `(√ᾱ_t, √(1−ᾱ_t))`.
    pub fn marginal_coeffs(&self, t: usize) -> Result<(F, F)> {
        let i = self.index(t)?;
        Ok((self.sqrt_alpha_bar[i], self.sqrt_one_minus_alpha_bar[i]))
    }

    /// Signal-to-noise ratio ᾱ_t / (1 − ᾱ_t).
    pub fn snr(&self, t: usize) -> Result<F> {
        let i = self.index(t)?;
        Ok(self.alpha_bar[i] / (F::one() - self.alpha_bar[i]))
    }
}
