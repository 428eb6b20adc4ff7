use nucleidiff_core::Scalar;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::Module;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, grad_clip: 1.0 }
    }
}

/// Adam with decoupled weight decay. Moment buffers follow the module's
/// parameter visit order.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub steps: u64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new<M: Module<F>>(config: AdamWConfig, model: &mut M) -> Self {
        let mut m = Vec::new();
        model.visit_params("", &mut |_, p| m.push(vec![F::zero(); p.len()]));
        Self { config, v: m.clone(), m, steps: 0 }
    }

    /// Clips gradients in place and applies one update. Returns the global
    /// gradient norm measured before clipping.
    pub fn step<M: Module<F>>(&mut self, model: &mut M, lr: f64) -> f64 {
        let norm = clip_grad_norm(model, self.config.grad_clip);
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let (one_b1, one_b2) = (F::lit(1.0 - c.beta1), F::lit(1.0 - c.beta2));
        let step_size = F::lit(lr / bc1);
        let sqrt_bc2 = F::lit(bc2.sqrt());
        let eps = F::lit(c.eps);
        let decay = F::lit(1.0 - lr * c.weight_decay);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params("", &mut |_, p| {
            let (m, v) = (&mut ms[i], &mut vs[i]);
            for k in 0..p.value.len() {
                let g = p.grad[k];
                m[k] = b1 * m[k] + one_b1 * g;
                v[k] = b2 * v[k] + one_b2 * g * g;
                let denom = v[k].sqrt() / sqrt_bc2 + eps;
                p.value[k] = p.value[k] * decay - step_size * m[k] / denom;
            }
            i += 1;
        });
        norm
    }

    /// Restores moment buffers, checking them against the model layout.
    pub fn restore<M: Module<F>>(&mut self, model: &mut M, m: Vec<Vec<F>>, v: Vec<Vec<F>>, steps: u64) -> Result<()> {
        let mut sizes = Vec::new();
        model.visit_params("", &mut |_, p| sizes.push(p.len()));
        let fits = |x: &Vec<Vec<F>>| x.len() == sizes.len() && x.iter().zip(&sizes).all(|(a, &n)| a.len() == n);
        if !fits(&m) || !fits(&v) {
            return Err(Error::Checkpoint("optimizer state does not match model parameters".into()));
        }
        self.m = m;
        self.v = v;
        self.steps = steps;
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`
/// (factor `max_norm / (norm + 1e-6)`). Returns the pre-clip norm.
pub fn clip_grad_norm<F: Scalar, M: Module<F>>(model: &mut M, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    model.visit_params("", &mut |_, p| {
        sq += p.grad.iter().map(|g| g.to_f64().unwrap().powi(2)).sum::<f64>();
    });
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = F::lit(max_norm / (norm + 1e-6));
        model.visit_params("", &mut |_, p| p.grad.iter_mut().for_each(|g| *g *= k));
    }
    norm
}

/// Exponential moving average of model parameters.
#[derive(Debug, Clone)]
pub struct EmaState<F> {
    pub shadow: Vec<Vec<F>>,
    pub decay: f64,
    /// Ramp the effective decay as `min(decay, (1 + n) / (10 + n))`.
    pub warmup: bool,
    pub updates: u64,
}

impl<F: Scalar> EmaState<F> {
    pub fn new<M: Module<F>>(model: &mut M, decay: f64, warmup: bool) -> Self {
        let mut shadow = Vec::new();
        model.visit_params("", &mut |_, p| shadow.push(p.value.clone()));
        Self { shadow, decay, warmup, updates: 0 }
    }

    pub fn effective_decay(&self) -> f64 {
        if self.warmup {
            let n = self.updates as f64;
            self.decay.min((1.0 + n) / (10.0 + n))
        } else {
            self.decay
        }
    }

    /// `shadow <- d * shadow + (1 - d) * weight`.
    pub fn update<M: Module<F>>(&mut self, model: &mut M) {
        let d = self.effective_decay();
        let (keep, take) = (F::lit(d), F::lit(1.0 - d));
        let mut i = 0;
        let shadow = &mut self.shadow;
        model.visit_params("", &mut |_, p| {
            for (s, &w) in shadow[i].iter_mut().zip(&p.value) {
                *s = keep * *s + take * w;
            }
            i += 1;
        });
        self.updates += 1;
    }

    pub fn shapes_match<M: Module<F>>(&self, model: &mut M) -> bool {
        let mut ok = true;
        let mut i = 0;
        model.visit_params("", &mut |_, p| {
            ok &= self.shadow.get(i).is_some_and(|s| s.len() == p.len());
            i += 1;
        });
        ok && i == self.shadow.len()
    }
}
