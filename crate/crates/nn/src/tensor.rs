use nucleidiff_core::Scalar;

use crate::error::{Error, Result};

/// Dense row-major tensor; image batches are NCHW.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub data: Vec<F>,
    pub shape: Vec<usize>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { data: vec![F::zero(); shape.iter().product()], shape: shape.to_vec() }
    }

    pub fn from_vec(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Self { data, shape: shape.to_vec() })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(batch, channels, height, width)`.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Channel-wise concatenation of two NCHW tensors.
    pub fn cat_channels(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
        let (n, ca, h, w) = a.dims4();
        let (nb, cb, hb, wb) = b.dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "cat_channels spatial/batch mismatch");
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&a.data[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&b.data[i * cb * hw..(i + 1) * cb * hw]);
        }
        Tensor { data: out, shape: vec![n, ca + cb, h, w] }
    }

    /// Inverse of [`Tensor::cat_channels`]: splits after `ca` channels.
    pub fn split_channels(&self, ca: usize) -> (Tensor<F>, Tensor<F>) {
        let (n, c, h, w) = self.dims4();
        let cb = c - ca;
        let hw = h * w;
        let mut a = Vec::with_capacity(n * ca * hw);
        let mut b = Vec::with_capacity(n * cb * hw);
        for i in 0..n {
            let base = i * c * hw;
            a.extend_from_slice(&self.data[base..base + ca * hw]);
            b.extend_from_slice(&self.data[base + ca * hw..base + c * hw]);
        }
        (Tensor { data: a, shape: vec![n, ca, h, w] }, Tensor { data: b, shape: vec![n, cb, h, w] })
    }

    /// Rows `lo..hi` of the leading dimension.
    pub fn slice_batch(&self, lo: usize, hi: usize) -> Tensor<F> {
        let per = self.numel() / self.shape[0].max(1);
        let mut shape = self.shape.clone();
        shape[0] = hi - lo;
        Tensor { data: self.data[lo * per..hi * per].to_vec(), shape }
    }

    /// Concatenates along the leading dimension.
    pub fn cat_batch(parts: &[&Tensor<F>]) -> Tensor<F> {
        let mut shape = parts[0].shape.clone();
        shape[0] = parts.iter().map(|p| p.shape[0]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            assert_eq!(p.shape[1..], shape[1..]);
            data.extend_from_slice(&p.data);
        }
        Tensor { data, shape }
    }
}
