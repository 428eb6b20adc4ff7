use nucleidiff_core::scalar::{gemm, MatRef};
use nucleidiff_core::Scalar;
use rand_chacha::ChaCha8Rng;

use crate::layers::{Conv2d, GroupNorm};
use crate::param::{join, Module, Param};
use crate::tensor::Tensor;

/// Multi-head spatial self-attention with a residual connection.
///
/// The `qkv` projection interleaves heads: head `h` owns channels
/// `[3dh, 3dh + d)` for queries, then keys, then values.
#[derive(Debug, Clone)]
pub struct AttentionBlock<F> {
    pub norm: GroupNorm<F>,
    pub qkv: Conv2d<F>,
    pub proj: Conv2d<F>,
    pub heads: usize,
    qkv_out: Option<Tensor<F>>,
    weights: Vec<Vec<F>>,
}

impl<F: Scalar> AttentionBlock<F> {
    pub fn new(channels: usize, groups: usize, head_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let heads = (channels / head_channels.max(1)).max(1);
        assert_eq!(channels % heads, 0, "attention channels not divisible by heads");
        Self {
            norm: GroupNorm::new(groups, channels, true),
            qkv: Conv2d::new(channels, 3 * channels, (1, 1), 1, (0, 0), true, rng),
            proj: Conv2d::new(channels, channels, (1, 1), 1, (0, 0), true, rng),
            heads,
            qkv_out: None,
            weights: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor<F>, train: bool) -> Tensor<F> {
        let (n, c, h, w) = x.dims4();
        let l = h * w;
        let d = c / self.heads;
        let scale = F::one() / F::from_usize(d).unwrap().sqrt();
        let hn = self.norm.forward(x, train);
        let qkv = self.qkv.forward(&hn, train);
        let mut att = Tensor::zeros(&[n, c, h, w]);
        let mut weights = Vec::with_capacity(if train { n * self.heads } else { 0 });
        let mut s = vec![F::zero(); l * l];
        for b in 0..n {
            for hd in 0..self.heads {
                let base = (b * 3 * c + hd * 3 * d) * l;
                let q = &qkv.data[base..base + d * l];
                let k = &qkv.data[base + d * l..base + 2 * d * l];
                let v = &qkv.data[base + 2 * d * l..base + 3 * d * l];
                gemm(
                    scale,
                    q,
                    MatRef::transposed(d, l),
                    k,
                    MatRef::row_major(d, l),
                    F::zero(),
                    &mut s,
                    MatRef::row_major(l, l),
                );
                for row in s.chunks_mut(l) {
                    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
                    let mut z = F::zero();
                    for e in row.iter_mut() {
                        *e = (*e - m).exp();
                        z += *e;
                    }
                    row.iter_mut().for_each(|e| *e /= z);
                }
                let out = &mut att.data[(b * c + hd * d) * l..(b * c + (hd + 1) * d) * l];
                gemm(
                    F::one(),
                    v,
                    MatRef::row_major(d, l),
                    &s,
                    MatRef::transposed(l, l),
                    F::zero(),
                    out,
                    MatRef::row_major(d, l),
                );
                if train {
                    weights.push(s.clone());
                }
            }
        }
        let mut y = self.proj.forward(&att, train);
        y.add_assign(x);
        if train {
            self.qkv_out = Some(qkv);
            self.weights = weights;
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let qkv = self.qkv_out.take().expect("attention backward without cached forward");
        let weights = std::mem::take(&mut self.weights);
        let (n, c, h, w) = dy.dims4();
        let l = h * w;
        let d = c / self.heads;
        let scale = F::one() / F::from_usize(d).unwrap().sqrt();
        let datt = self.proj.backward(dy, true).unwrap();
        let mut dqkv = Tensor::zeros(&qkv.shape);
        let mut dw = vec![F::zero(); l * l];
        for b in 0..n {
            for hd in 0..self.heads {
                let wts = &weights[b * self.heads + hd];
                let base = (b * 3 * c + hd * 3 * d) * l;
                let q = &qkv.data[base..base + d * l];
                let k = &qkv.data[base + d * l..base + 2 * d * l];
                let v = &qkv.data[base + 2 * d * l..base + 3 * d * l];
                let da = &datt.data[(b * c + hd * d) * l..(b * c + (hd + 1) * d) * l];
                let (dq_k, dv) = dqkv.data[base..base + 3 * d * l].split_at_mut(2 * d * l);
                // dv = da W ; dW = da^T v
                gemm(
                    F::one(),
                    da,
                    MatRef::row_major(d, l),
                    wts,
                    MatRef::row_major(l, l),
                    F::zero(),
                    dv,
                    MatRef::row_major(d, l),
                );
                gemm(
                    F::one(),
                    da,
                    MatRef::transposed(d, l),
                    v,
                    MatRef::row_major(d, l),
                    F::zero(),
                    &mut dw,
                    MatRef::row_major(l, l),
                );
                for (drow, wrow) in dw.chunks_mut(l).zip(wts.chunks(l)) {
                    let dot = drow.iter().zip(wrow).map(|(&a, &b)| a * b).sum::<F>();
                    for (g, &p) in drow.iter_mut().zip(wrow) {
                        *g = p * (*g - dot);
                    }
                }
                let (dq, dk) = dq_k.split_at_mut(d * l);
                gemm(
                    scale,
                    k,
                    MatRef::row_major(d, l),
                    &dw,
                    MatRef::transposed(l, l),
                    F::zero(),
                    dq,
                    MatRef::row_major(d, l),
                );
                gemm(
                    scale,
                    q,
                    MatRef::row_major(d, l),
                    &dw,
                    MatRef::row_major(l, l),
                    F::zero(),
                    dk,
                    MatRef::row_major(d, l),
                );
            }
        }
        let dhn = self.qkv.backward(&dqkv, true).unwrap();
        let mut dx = self.norm.backward(&dhn);
        dx.add_assign(dy);
        dx
    }
}

impl<F: Scalar> Module<F> for AttentionBlock<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.qkv.visit_params(&join(prefix, "qkv"), f);
        self.proj.visit_params(&join(prefix, "proj"), f);
    }
}
