//! Layers with hand-written backward passes.
//!
//! Every layer caches what its backward pass needs during a `forward` call
//! made with `train = true`; `backward` consumes that cache and accumulates
//! parameter gradients (it never overwrites them).

use nucleidiff_core::scalar::{gemm, MatRef};
use nucleidiff_core::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::param::{join, Module, Param};
use crate::tensor::Tensor;

#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// 2-D convolution via im2col and gemm. Kernels may be rectangular and the
/// padding asymmetric between axes.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: (usize, usize),
    input: Option<Tensor<F>>,
}

impl<F: Scalar> Conv2d<F> {
    /// PyTorch-style default init: weights and bias `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: (usize, usize),
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel.0 * kernel.1) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = Param::uniform(&[out_channels, in_channels, kernel.0, kernel.1], bound, rng);
        let bias = bias.then(|| Param::uniform(&[out_channels], bound, rng));
        Self { weight, bias, in_channels, out_channels, kernel, stride, padding, input: None }
    }

    /// Square kernel `k` with "same" padding `k / 2`.
    pub fn same(in_channels: usize, out_channels: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::new(in_channels, out_channels, (k, k), 1, (k / 2, k / 2), true, rng)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel;
        let (ph, pw) = self.padding;
        ((h + 2 * ph - kh) / self.stride + 1, (w + 2 * pw - kw) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == 1 && self.padding == (0, 0)
    }

    fn k_dim(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    /// Valid output columns `lo..hi` for kernel column offset `j`.
    fn valid_range(&self, j: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if pad > j { (pad - j).div_ceil(s) } else { 0 };
        let hi = if w + pad > j { ((w + pad - j - 1) / s + 1).min(ow) } else { 0 };
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[F], h: usize, w: usize, oh: usize, ow: usize, col: &mut [F]) {
        let (kh, kw) = self.kernel;
        let (ph, pw) = self.padding;
        let s = self.stride;
        let ohw = oh * ow;
        for c in 0..self.in_channels {
            let xc = &x[c * h * w..(c + 1) * h * w];
            for i in 0..kh {
                for j in 0..kw {
                    let row = (c * kh + i) * kw + j;
                    let dst = &mut col[row * ohw..(row + 1) * ohw];
                    let (lo, hi) = self.valid_range(j, pw, w, ow);
                    for oy in 0..oh {
                        let d = &mut dst[oy * ow..(oy + 1) * ow];
                        let iy = (oy * s + i) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            d.fill(F::zero());
                            continue;
                        }
                        let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                        d[..lo].fill(F::zero());
                        d[hi..].fill(F::zero());
                        if s == 1 {
                            let start = lo + j - pw;
                            d[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        } else {
                            for ox in lo..hi {
                                d[ox] = src[ox * s + j - pw];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[F], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [F]) {
        let (kh, kw) = self.kernel;
        let (ph, pw) = self.padding;
        let s = self.stride;
        let ohw = oh * ow;
        for c in 0..self.in_channels {
            let xc = &mut dx[c * h * w..(c + 1) * h * w];
            for i in 0..kh {
                for j in 0..kw {
                    let row = (c * kh + i) * kw + j;
                    let src = &col[row * ohw..(row + 1) * ohw];
                    let (lo, hi) = self.valid_range(j, pw, w, ow);
                    for oy in 0..oh {
                        let iy = (oy * s + i) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let d = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                        let srow = &src[oy * ow..(oy + 1) * ow];
                        for ox in lo..hi {
                            d[ox * s + j - pw] += srow[ox];
                        }
                    }
                }
            }
        }
    }

    /// Forward pass without touching the cache.
    pub fn apply(&self, x: &Tensor<F>) -> Tensor<F> {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_hw(h, w);
        let ohw = oh * ow;
        let kd = self.k_dim();
        let mut y = Tensor::zeros(&[n, self.out_channels, oh, ow]);
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![F::zero(); kd * ohw] };
        for b in 0..n {
            let xb = &x.data[b * c * h * w..(b + 1) * c * h * w];
            let cols: &[F] = if self.is_pointwise() {
                xb
            } else {
                self.im2col(xb, h, w, oh, ow, &mut col);
                &col
            };
            let yb = &mut y.data[b * self.out_channels * ohw..(b + 1) * self.out_channels * ohw];
            gemm(
                F::one(),
                &self.weight.value,
                MatRef::row_major(self.out_channels, kd),
                cols,
                MatRef::row_major(kd, ohw),
                F::zero(),
                yb,
                MatRef::row_major(self.out_channels, ohw),
            );
            if let Some(bias) = &self.bias {
                for (o, &bv) in bias.value.iter().enumerate() {
                    yb[o * ohw..(o + 1) * ohw].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor<F>, train: bool) -> Tensor<F> {
        let y = self.apply(x);
        self.input = train.then(|| x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<F>, need_dx: bool) -> Option<Tensor<F>> {
        let x = self.input.take().expect("conv backward without cached forward");
        let (n, c, h, w) = x.dims4();
        let (oh, ow) = self.output_hw(h, w);
        let ohw = oh * ow;
        let kd = self.k_dim();
        let co = self.out_channels;
        assert_eq!(dy.shape, vec![n, co, oh, ow], "conv grad shape");
        let pointwise = self.is_pointwise();
        let mut col = if pointwise { Vec::new() } else { vec![F::zero(); kd * ohw] };
        let mut dcol = if need_dx && !pointwise { vec![F::zero(); kd * ohw] } else { Vec::new() };
        let mut dx = need_dx.then(|| Tensor::zeros(&x.shape));
        for b in 0..n {
            let xb = &x.data[b * c * h * w..(b + 1) * c * h * w];
            let dyb = &dy.data[b * co * ohw..(b + 1) * co * ohw];
            let cols: &[F] = if pointwise {
                xb
            } else {
                self.im2col(xb, h, w, oh, ow, &mut col);
                &col
            };
            gemm(
                F::one(),
                dyb,
                MatRef::row_major(co, ohw),
                cols,
                MatRef::transposed(kd, ohw),
                F::one(),
                &mut self.weight.grad,
                MatRef::row_major(co, kd),
            );
            if let Some(bias) = &mut self.bias {
                for o in 0..co {
                    bias.grad[o] += dyb[o * ohw..(o + 1) * ohw].iter().copied().sum::<F>();
                }
            }
            if let Some(dx) = &mut dx {
                let dxb = &mut dx.data[b * c * h * w..(b + 1) * c * h * w];
                let target: &mut [F] = if pointwise { dxb } else { &mut dcol };
                gemm(
                    F::one(),
                    &self.weight.value,
                    MatRef::transposed(co, kd),
                    dyb,
                    MatRef::row_major(co, ohw),
                    F::zero(),
                    target,
                    MatRef::row_major(kd, ohw),
                );
                if !pointwise {
                    let dxb = &mut dx.data[b * c * h * w..(b + 1) * c * h * w];
                    self.col2im(&dcol, h, w, oh, ow, dxb);
                }
            }
        }
        dx
    }
}

impl<F: Scalar> Module<F> for Conv2d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Group normalization over NCHW, optionally with a per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm<F> {
    pub groups: usize,
    pub channels: usize,
    pub eps: F,
    pub weight: Option<Param<F>>,
    pub bias: Option<Param<F>>,
    xhat: Option<Tensor<F>>,
    inv_std: Vec<F>,
}

impl<F: Scalar> GroupNorm<F> {
    pub fn new(groups: usize, channels: usize, affine: bool) -> Self {
        assert!(
            groups > 0 && channels.is_multiple_of(groups),
            "{channels} channels not divisible into {groups} groups"
        );
        Self {
            groups,
            channels,
            eps: F::lit(1e-5),
            weight: affine.then(|| Param::filled(&[channels], F::one())),
            bias: affine.then(|| Param::filled(&[channels], F::zero())),
            xhat: None,
            inv_std: Vec::new(),
        }
    }

    fn normalize(&self, x: &Tensor<F>) -> (Tensor<F>, Vec<F>) {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.channels, "group norm channels");
        let per = c / self.groups * h * w;
        let count = F::from_usize(per).unwrap();
        let mut xhat = Tensor::zeros(&x.shape);
        let mut inv = Vec::with_capacity(n * self.groups);
        for (src, dst) in x.data.chunks(per).zip(xhat.data.chunks_mut(per)) {
            let mean = src.iter().copied().sum::<F>() / count;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / count;
            let is = F::one() / (var + self.eps).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv.push(is);
        }
        (xhat, inv)
    }

    fn affine(&self, mut xhat: Tensor<F>) -> Tensor<F> {
        if let (Some(g), Some(b)) = (&self.weight, &self.bias) {
            let (_, c, h, w) = xhat.dims4();
            let hw = h * w;
            for (i, plane) in xhat.data.chunks_mut(hw).enumerate() {
                let (gv, bv) = (g.value[i % c], b.value[i % c]);
                plane.iter_mut().for_each(|v| *v = *v * gv + bv);
            }
        }
        xhat
    }

    pub fn apply(&self, x: &Tensor<F>) -> Tensor<F> {
        self.affine(self.normalize(x).0)
    }

    pub fn forward(&mut self, x: &Tensor<F>, train: bool) -> Tensor<F> {
        let (xhat, inv) = self.normalize(x);
        let y = self.affine(xhat.clone());
        if train {
            self.xhat = Some(xhat);
            self.inv_std = inv;
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let xhat = self.xhat.take().expect("group norm backward without cached forward");
        let (_, c, h, w) = xhat.dims4();
        let hw = h * w;
        let mut dxhat = dy.clone();
        if let (Some(g), Some(b)) = (&mut self.weight, &mut self.bias) {
            for (i, (dplane, xplane)) in dxhat.data.chunks_mut(hw).zip(xhat.data.chunks(hw)).enumerate() {
                let ch = i % c;
                let mut sg = F::zero();
                let mut sb = F::zero();
                for (d, &xv) in dplane.iter_mut().zip(xplane) {
                    sg += *d * xv;
                    sb += *d;
                    *d *= g.value[ch];
                }
                g.grad[ch] += sg;
                b.grad[ch] += sb;
            }
        }
        let per = c / self.groups * hw;
        let m = F::from_usize(per).unwrap();
        let mut dx = Tensor::zeros(&xhat.shape);
        for (gi, ((d, xh), out)) in
            dxhat.data.chunks(per).zip(xhat.data.chunks(per)).zip(dx.data.chunks_mut(per)).enumerate()
        {
            let sum_d = d.iter().copied().sum::<F>();
            let sum_dx = d.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>();
            let k = self.inv_std[gi] / m;
            for ((o, &dv), &xv) in out.iter_mut().zip(d).zip(xh) {
                *o = k * (m * dv - sum_d - xv * sum_dx);
            }
        }
        dx
    }
}

impl<F: Scalar> Module<F> for GroupNorm<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        if let Some(w) = &mut self.weight {
            f(&join(prefix, "weight"), w);
        }
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// `y = x W^T + b` on `(batch, features)` tensors.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub in_features: usize,
    pub out_features: usize,
    input: Option<Tensor<F>>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Self {
            weight: Param::uniform(&[out_features, in_features], bound, rng),
            bias: Param::uniform(&[out_features], bound, rng),
            in_features,
            out_features,
            input: None,
        }
    }

    pub fn apply(&self, x: &Tensor<F>) -> Tensor<F> {
        let n = x.shape[0];
        assert_eq!(x.numel(), n * self.in_features, "linear input features");
        let mut y = Tensor::zeros(&[n, self.out_features]);
        gemm(
            F::one(),
            &x.data,
            MatRef::row_major(n, self.in_features),
            &self.weight.value,
            MatRef::transposed(self.out_features, self.in_features),
            F::zero(),
            &mut y.data,
            MatRef::row_major(n, self.out_features),
        );
        for row in y.data.chunks_mut(self.out_features) {
            for (v, &b) in row.iter_mut().zip(&self.bias.value) {
                *v += b;
            }
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor<F>, train: bool) -> Tensor<F> {
        let y = self.apply(x);
        self.input = train.then(|| x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let x = self.input.take().expect("linear backward without cached forward");
        let n = x.shape[0];
        let (fi, fo) = (self.in_features, self.out_features);
        gemm(
            F::one(),
            &dy.data,
            MatRef::transposed(n, fo),
            &x.data,
            MatRef::row_major(n, fi),
            F::one(),
            &mut self.weight.grad,
            MatRef::row_major(fo, fi),
        );
        for row in dy.data.chunks(fo) {
            for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(&x.shape);
        gemm(
            F::one(),
            &dy.data,
            MatRef::row_major(n, fo),
            &self.weight.value,
            MatRef::row_major(fo, fi),
            F::zero(),
            &mut dx.data,
            MatRef::row_major(n, fi),
        );
        dx
    }
}

impl<F: Scalar> Module<F> for Linear<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// `x * sigmoid(x)`.
#[derive(Debug, Clone, Default)]
pub struct Silu<F> {
    input: Option<Vec<F>>,
}

impl<F: Scalar> Silu<F> {
    pub fn new() -> Self {
        Self { input: None }
    }

    pub fn apply(x: &Tensor<F>) -> Tensor<F> {
        Tensor { data: x.data.iter().map(|&v| v * sigmoid(v)).collect(), shape: x.shape.clone() }
    }

    pub fn forward(&mut self, x: &Tensor<F>, train: bool) -> Tensor<F> {
        self.input = train.then(|| x.data.clone());
        Self::apply(x)
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let x = self.input.take().expect("silu backward without cached forward");
        let data = x
            .iter()
            .zip(&dy.data)
            .map(|(&v, &d)| {
                let s = sigmoid(v);
                d * s * (F::one() + v * (F::one() - s))
            })
            .collect();
        Tensor { data, shape: dy.shape.clone() }
    }
}

/// Inverted dropout; identity when `p == 0` or outside training.
#[derive(Debug, Clone)]
pub struct Dropout<F> {
    pub p: f64,
    mask: Option<Vec<F>>,
}

impl<F: Scalar> Dropout<F> {
    pub fn new(p: f64) -> Self {
        Self { p, mask: None }
    }

    pub fn forward(&mut self, x: &Tensor<F>, train: bool, rng: Option<&mut ChaCha8Rng>) -> Tensor<F> {
        self.mask = None;
        let rng = match rng {
            Some(r) if train && self.p > 0.0 => r,
            _ => return x.clone(),
        };
        let keep = F::lit(1.0 / (1.0 - self.p));
        let mask: Vec<F> =
            (0..x.numel()).map(|_| if rng.random::<f64>() < self.p { F::zero() } else { keep }).collect();
        let data = x.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.mask = Some(mask);
        Tensor { data, shape: x.shape.clone() }
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        match self.mask.take() {
            Some(mask) => {
                Tensor { data: dy.data.iter().zip(&mask).map(|(&d, &m)| d * m).collect(), shape: dy.shape.clone() }
            }
            None => dy.clone(),
        }
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (n, c, h, w) = x.dims4();
    let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    for (src, dst) in x.data.chunks(h * w).zip(y.data.chunks_mut(4 * h * w)) {
        for yy in 0..2 * h {
            for xx in 0..2 * w {
                dst[yy * 2 * w + xx] = src[(yy / 2) * w + xx / 2];
            }
        }
    }
    y
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_backward<F: Scalar>(dy: &Tensor<F>) -> Tensor<F> {
    let (n, c, h2, w2) = dy.dims4();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for (src, dst) in dy.data.chunks(h2 * w2).zip(dx.data.chunks_mut(h * w)) {
        for yy in 0..h2 {
            for xx in 0..w2 {
                dst[(yy / 2) * w + xx / 2] += src[yy * w2 + xx];
            }
        }
    }
    dx
}

/// Nearest resampling to `(oh, ow)` using source index `floor(dst * in / out)`.
/// Used for label maps, which must stay categorical.
pub fn resize_nearest<F: Scalar>(x: &Tensor<F>, oh: usize, ow: usize) -> Tensor<F> {
    let (n, c, h, w) = x.dims4();
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    for (src, dst) in x.data.chunks(h * w).zip(y.data.chunks_mut(oh * ow)) {
        for yy in 0..oh {
            let sy = yy * h / oh;
            for xx in 0..ow {
                dst[yy * ow + xx] = src[sy * w + xx * w / ow];
            }
        }
    }
    y
}

/// Spatially-adaptive normalization: a parameter-free group norm whose
/// output is modulated per pixel by `(1 + gamma(mask))` and shifted by
/// `beta(mask)`, both predicted from the conditioning tensor.
#[derive(Debug, Clone)]
pub struct Spade<F> {
    pub norm: GroupNorm<F>,
    pub shared: Conv2d<F>,
    pub gamma: Conv2d<F>,
    pub beta: Conv2d<F>,
    normalized: Option<Tensor<F>>,
    gamma_out: Option<Tensor<F>>,
    hidden: Option<Tensor<F>>,
}

impl<F: Scalar> Spade<F> {
    pub fn new(groups: usize, channels: usize, cond_channels: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm: GroupNorm::new(groups, channels, false),
            shared: Conv2d::same(cond_channels, hidden, 3, rng),
            gamma: Conv2d::same(hidden, channels, 3, rng),
            beta: Conv2d::same(hidden, channels, 3, rng),
            normalized: None,
            gamma_out: None,
            hidden: None,
        }
    }

    /// `seg` must already match the spatial size of `x`.
    pub fn forward(&mut self, x: &Tensor<F>, seg: &Tensor<F>, train: bool) -> Tensor<F> {
        let n = self.norm.forward(x, train);
        let mut a = self.shared.forward(seg, train);
        a.data.iter_mut().for_each(|v| *v = v.max(F::zero()));
        let g = self.gamma.forward(&a, train);
        let b = self.beta.forward(&a, train);
        let mut y = n.clone();
        for ((v, &gv), &bv) in y.data.iter_mut().zip(&g.data).zip(&b.data) {
            *v = *v * (F::one() + gv) + bv;
        }
        if train {
            self.normalized = Some(n);
            self.gamma_out = Some(g);
            self.hidden = Some(a);
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let n = self.normalized.take().expect("spade backward without cached forward");
        let g = self.gamma_out.take().unwrap();
        let a = self.hidden.take().unwrap();
        let mut dg = dy.clone();
        for (d, &nv) in dg.data.iter_mut().zip(&n.data) {
            *d *= nv;
        }
        let mut dn = dy.clone();
        for (d, &gv) in dn.data.iter_mut().zip(&g.data) {
            *d *= F::one() + gv;
        }
        let mut da = self.gamma.backward(&dg, true).unwrap();
        da.add_assign(&self.beta.backward(dy, true).unwrap());
        for (d, &av) in da.data.iter_mut().zip(&a.data) {
            if av <= F::zero() {
                *d = F::zero();
            }
        }
        self.shared.backward(&da, false);
        self.norm.backward(&dn)
    }
}

impl<F: Scalar> Module<F> for Spade<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.shared.visit_params(&join(prefix, "shared"), f);
        self.gamma.visit_params(&join(prefix, "gamma"), f);
        self.beta.visit_params(&join(prefix, "beta"), f);
    }
}
