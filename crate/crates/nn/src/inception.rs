//! Inception-V3 (torchvision layout) for FID/IS features.
//!
//! Batch norms are folded into the preceding convolutions at load time.
//! Images are resized to 299x299 with bilinear interpolation (half-pixel
//! centres), scaled to `[-1, 1]`, and read out at the 2048-d global pool and
//! the 1000-way softmax.

use std::path::Path;

use nucleidiff_core::metrics::{FeatureSet, FeatureSource};
use nucleidiff_core::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::SafeTensors;
use sha2::{Digest, Sha256};

use crate::checkpoint::view_to_vec;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Linear};
use crate::param::Param;
use crate::tensor::Tensor;

pub const INPUT_SIZE: usize = 299;
pub const FEATURE_DIM: usize = 2048;
pub const NUM_CLASSES: usize = 1000;
pub const RESIZE_MODE: &str = "bilinear-halfpixel-299";
pub const WEIGHTS_ENV: &str = "NUCLEIDIFF_INCEPTION_WEIGHTS";
pub const WEIGHTS_FILE: &str = "inception_v3_torchvision.safetensors";
const BN_EPS: f64 = 1e-3;

enum Source<'a> {
    Random(ChaCha8Rng),
    File(SafeTensors<'a>),
}

impl Source<'_> {
    fn fetch<F: Scalar>(&self, key: &str, expect: usize) -> Result<Vec<F>> {
        let Source::File(st) = self else { unreachable!() };
        let view =
            st.tensor(key).map_err(|_| Error::Checkpoint(format!("feature extractor weights lack tensor {key}")))?;
        let v = view_to_vec(&view)?;
        if v.len() != expect {
            return Err(Error::Checkpoint(format!("tensor {key} has {} values, expected {expect}", v.len())));
        }
        Ok(v)
    }

    /// Convolution + folded batch norm named `{name}.conv` / `{name}.bn`.
    fn conv<F: Scalar>(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: (usize, usize),
        stride: usize,
        pad: (usize, usize),
    ) -> Result<Conv2d<F>> {
        let fan_in = cin * k.0 * k.1;
        match self {
            Source::Random(rng) => {
                let mut c = Conv2d::new(cin, cout, k, stride, pad, true, rng);
                let bound = (6.0 / fan_in as f64).sqrt();
                c.weight = Param::uniform(&[cout, cin, k.0, k.1], bound, rng);
                c.bias.as_mut().unwrap().value.iter_mut().for_each(|b| *b = F::zero());
                Ok(c)
            }
            Source::File(_) => {
                let mut w: Vec<F> = self.fetch(&format!("{name}.conv.weight"), cout * fan_in)?;
                let gamma: Vec<F> = self.fetch(&format!("{name}.bn.weight"), cout)?;
                let beta: Vec<F> = self.fetch(&format!("{name}.bn.bias"), cout)?;
                let mean: Vec<F> = self.fetch(&format!("{name}.bn.running_mean"), cout)?;
                let var: Vec<F> = self.fetch(&format!("{name}.bn.running_var"), cout)?;
                let mut bias = vec![F::zero(); cout];
                for o in 0..cout {
                    let s = gamma[o] / (var[o] + F::lit(BN_EPS)).sqrt();
                    w[o * fan_in..(o + 1) * fan_in].iter_mut().for_each(|x| *x *= s);
                    bias[o] = beta[o] - mean[o] * s;
                }
                let mut c = Conv2d::new(cin, cout, k, stride, pad, true, &mut ChaCha8Rng::seed_from_u64(0));
                c.weight.value = w;
                c.bias.as_mut().unwrap().value = bias;
                Ok(c)
            }
        }
    }

    fn linear<F: Scalar>(&mut self, name: &str, fin: usize, fout: usize) -> Result<Linear<F>> {
        match self {
            Source::Random(rng) => Ok(Linear::new(fin, fout, rng)),
            Source::File(_) => {
                let mut l = Linear::new(fin, fout, &mut ChaCha8Rng::seed_from_u64(0));
                l.weight.value = self.fetch(&format!("{name}.weight"), fin * fout)?;
                l.bias.value = self.fetch(&format!("{name}.bias"), fout)?;
                Ok(l)
            }
        }
    }
}

fn relu_conv<F: Scalar>(c: &Conv2d<F>, x: &Tensor<F>) -> Tensor<F> {
    let mut y = c.apply(x);
    y.data.iter_mut().for_each(|v| *v = v.max(F::zero()));
    y
}

fn chain<F: Scalar>(convs: &[Conv2d<F>], x: &Tensor<F>) -> Tensor<F> {
    convs.iter().fold(x.clone(), |h, c| relu_conv(c, &h))
}

fn cat<F: Scalar>(parts: &[Tensor<F>]) -> Tensor<F> {
    parts[1..].iter().fold(parts[0].clone(), |acc, p| Tensor::cat_channels(&acc, p))
}

fn max_pool3s2<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = ((h - 3) / 2 + 1, (w - 3) / 2 + 1);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    for (src, dst) in x.data.chunks(h * w).zip(y.data.chunks_mut(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = F::neg_infinity();
                for i in 0..3 {
                    for j in 0..3 {
                        m = m.max(src[(2 * oy + i) * w + 2 * ox + j]);
                    }
                }
                dst[oy * ow + ox] = m;
            }
        }
    }
    y
}

/// 3x3 average, stride 1, zero padding 1, padded cells counted.
fn avg_pool3<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (n, c, h, w) = x.dims4();
    let mut y = Tensor::zeros(&[n, c, h, w]);
    let ninth = F::one() / F::lit(9.0);
    for (src, dst) in x.data.chunks(h * w).zip(y.data.chunks_mut(h * w)) {
        for oy in 0..h {
            for ox in 0..w {
                let mut s = F::zero();
                for yy in oy.saturating_sub(1)..(oy + 2).min(h) {
                    for xx in ox.saturating_sub(1)..(ox + 2).min(w) {
                        s += src[yy * w + xx];
                    }
                }
                dst[oy * w + ox] = s * ninth;
            }
        }
    }
    y
}

struct BlockA<F> {
    b1: Conv2d<F>,
    b5: [Conv2d<F>; 2],
    b3: [Conv2d<F>; 3],
    pool: Conv2d<F>,
}

struct BlockB<F> {
    b3: Conv2d<F>,
    b3dbl: [Conv2d<F>; 3],
}

struct BlockC<F> {
    b1: Conv2d<F>,
    b7: [Conv2d<F>; 3],
    b7dbl: [Conv2d<F>; 5],
    pool: Conv2d<F>,
}

struct BlockD<F> {
    b3: [Conv2d<F>; 2],
    b7: [Conv2d<F>; 4],
}

struct BlockE<F> {
    b1: Conv2d<F>,
    b3_1: Conv2d<F>,
    b3_2a: Conv2d<F>,
    b3_2b: Conv2d<F>,
    dbl_1: Conv2d<F>,
    dbl_2: Conv2d<F>,
    dbl_3a: Conv2d<F>,
    dbl_3b: Conv2d<F>,
    pool: Conv2d<F>,
}

impl<F: Scalar> BlockA<F> {
    fn new(s: &mut Source, n: &str, cin: usize, pool: usize) -> Result<Self> {
        Ok(Self {
            b1: s.conv(&format!("{n}.branch1x1"), cin, 64, (1, 1), 1, (0, 0))?,
            b5: [
                s.conv(&format!("{n}.branch5x5_1"), cin, 48, (1, 1), 1, (0, 0))?,
                s.conv(&format!("{n}.branch5x5_2"), 48, 64, (5, 5), 1, (2, 2))?,
            ],
            b3: [
                s.conv(&format!("{n}.branch3x3dbl_1"), cin, 64, (1, 1), 1, (0, 0))?,
                s.conv(&format!("{n}.branch3x3dbl_2"), 64, 96, (3, 3), 1, (1, 1))?,
                s.conv(&format!("{n}.branch3x3dbl_3"), 96, 96, (3, 3), 1, (1, 1))?,
            ],
            pool: s.conv(&format!("{n}.branch_pool"), cin, pool, (1, 1), 1, (0, 0))?,
        })
    }

    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        cat(&[relu_conv(&self.b1, x), chain(&self.b5, x), chain(&self.b3, x), relu_conv(&self.pool, &avg_pool3(x))])
    }
}

impl<F: Scalar> BlockB<F> {
    fn new(s: &mut Source, n: &str, cin: usize) -> Result<Self> {
        Ok(Self {
            b3: s.conv(&format!("{n}.branch3x3"), cin, 384, (3, 3), 2, (0, 0))?,
            b3dbl: [
                s.conv(&format!("{n}.branch3x3dbl_1"), cin, 64, (1, 1), 1, (0, 0))?,
                s.conv(&format!("{n}.branch3x3dbl_2"), 64, 96, (3, 3), 1, (1, 1))?,
                s.conv(&format!("{n}.branch3x3dbl_3"), 96, 96, (3, 3), 2, (0, 0))?,
            ],
        })
    }

    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        cat(&[relu_conv(&self.b3, x), chain(&self.b3dbl, x), max_pool3s2(x)])
    }
}

impl<F: Scalar> BlockC<F> {
    fn new(s: &mut Source, n: &str, cin: usize, c7: usize) -> Result<Self> {
        let (r, c) = ((1, 7), (7, 1));
        let (pr, pc) = ((0, 3), (3, 0));
        Ok(Self {
            b1: s.conv(&format!("{n}.branch1x1"), cin, 192, (1, 1), 1, (0, 0))?,
            b7: [
                s.conv(&format!("{n}.branch7x7_1"), cin, c7, (1, 1), 1, (0, 0))?,
                s.conv(&format!("{n}.branch7x7_2"), c7, c7, r, 1, pr)?,
                s.conv(&format!("{n}.branch7x7_3"), c7, 192, c, 1, pc)?,
            ],
            b7dbl: [
                s.conv(&format!("{n}.branch7x7dbl_1"), cin, c7, (1, 1), 1, (0, 0))?,
                s.conv(&format!("{n}.branch7x7dbl_2"), c7, c7, c, 1, pc)?,
                s.conv(&format!("{n}.branch7x7dbl_3"), c7, c7, r, 1, pr)?,
                s.conv(&format!("{n}.branch7x7dbl_4"), c7, c7, c, 1, pc)?,
                s.conv(&format!("{n}.branch7x7dbl_5"), c7, 192, r, 1, pr)?,
            ],
            pool: s.conv(&format!("{n}.branch_pool"), cin, 192, (1, 1), 1, (0, 0))?,
        })
    }

    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        cat(&[relu_conv(&self.b1, x), chain(&self.b7, x), chain(&self.b7dbl, x), relu_conv(&self.pool, &avg_pool3(x))])
    }
}

impl<F: Scalar> BlockD<F> {
    fn new(s: &mut Source, n: &str, cin: usize) -> Result<Self> {
        Ok(Self {
            b3: [
                s.conv(&format!("{n}.branch3x3_1"), cin, 192, (1, 1), 1, (0, 0))?,
                s.conv(&format!("{n}.branch3x3_2"), 192, 320, (3, 3), 2, (0, 0))?,
            ],
            b7: [
                s.conv(&format!("{n}.branch7x7x3_1"), cin, 192, (1, 1), 1, (0, 0))?,
                s.conv(&format!("{n}.branch7x7x3_2"), 192, 192, (1, 7), 1, (0, 3))?,
                s.conv(&format!("{n}.branch7x7x3_3"), 192, 192, (7, 1), 1, (3, 0))?,
                s.conv(&format!("{n}.branch7x7x3_4"), 192, 192, (3, 3), 2, (0, 0))?,
            ],
        })
    }

    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        cat(&[chain(&self.b3, x), chain(&self.b7, x), max_pool3s2(x)])
    }
}

impl<F: Scalar> BlockE<F> {
    fn new(s: &mut Source, n: &str, cin: usize) -> Result<Self> {
        Ok(Self {
            b1: s.conv(&format!("{n}.branch1x1"), cin, 320, (1, 1), 1, (0, 0))?,
            b3_1: s.conv(&format!("{n}.branch3x3_1"), cin, 384, (1, 1), 1, (0, 0))?,
            b3_2a: s.conv(&format!("{n}.branch3x3_2a"), 384, 384, (1, 3), 1, (0, 1))?,
            b3_2b: s.conv(&format!("{n}.branch3x3_2b"), 384, 384, (3, 1), 1, (1, 0))?,
            dbl_1: s.conv(&format!("{n}.branch3x3dbl_1"), cin, 448, (1, 1), 1, (0, 0))?,
            dbl_2: s.conv(&format!("{n}.branch3x3dbl_2"), 448, 384, (3, 3), 1, (1, 1))?,
            dbl_3a: s.conv(&format!("{n}.branch3x3dbl_3a"), 384, 384, (1, 3), 1, (0, 1))?,
            dbl_3b: s.conv(&format!("{n}.branch3x3dbl_3b"), 384, 384, (3, 1), 1, (1, 0))?,
            pool: s.conv(&format!("{n}.branch_pool"), cin, 192, (1, 1), 1, (0, 0))?,
        })
    }

    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let b3 = relu_conv(&self.b3_1, x);
        let b3 = cat(&[relu_conv(&self.b3_2a, &b3), relu_conv(&self.b3_2b, &b3)]);
        let d = relu_conv(&self.dbl_2, &relu_conv(&self.dbl_1, x));
        let d = cat(&[relu_conv(&self.dbl_3a, &d), relu_conv(&self.dbl_3b, &d)]);
        cat(&[relu_conv(&self.b1, x), b3, d, relu_conv(&self.pool, &avg_pool3(x))])
    }
}

/// Pool features and class probabilities of one batch.
#[derive(Debug, Clone)]
pub struct InceptionOutput<F> {
    pub features: Vec<F>,
    pub probs: Vec<F>,
    pub n: usize,
}

pub struct InceptionV3<F> {
    stem: Vec<Conv2d<F>>,
    a: Vec<BlockA<F>>,
    b: BlockB<F>,
    c: Vec<BlockC<F>>,
    d: BlockD<F>,
    e: Vec<BlockE<F>>,
    fc: Linear<F>,
    weights_version: String,
}

impl<F: Scalar> InceptionV3<F> {
    fn build(mut s: Source) -> Result<Self> {
        let stem = vec![
            s.conv("Conv2d_1a_3x3", 3, 32, (3, 3), 2, (0, 0))?,
            s.conv("Conv2d_2a_3x3", 32, 32, (3, 3), 1, (0, 0))?,
            s.conv("Conv2d_2b_3x3", 32, 64, (3, 3), 1, (1, 1))?,
            s.conv("Conv2d_3b_1x1", 64, 80, (1, 1), 1, (0, 0))?,
            s.conv("Conv2d_4a_3x3", 80, 192, (3, 3), 1, (0, 0))?,
        ];
        let a = vec![
            BlockA::new(&mut s, "Mixed_5b", 192, 32)?,
            BlockA::new(&mut s, "Mixed_5c", 256, 64)?,
            BlockA::new(&mut s, "Mixed_5d", 288, 64)?,
        ];
        let b = BlockB::new(&mut s, "Mixed_6a", 288)?;
        let c = vec![
            BlockC::new(&mut s, "Mixed_6b", 768, 128)?,
            BlockC::new(&mut s, "Mixed_6c", 768, 160)?,
            BlockC::new(&mut s, "Mixed_6d", 768, 160)?,
            BlockC::new(&mut s, "Mixed_6e", 768, 192)?,
        ];
        let d = BlockD::new(&mut s, "Mixed_7a", 768)?;
        let e = vec![BlockE::new(&mut s, "Mixed_7b", 1280)?, BlockE::new(&mut s, "Mixed_7c", 2048)?];
        let fc = s.linear("fc", FEATURE_DIM, NUM_CLASSES)?;
        Ok(Self { stem, a, b, c, d, e, fc, weights_version: String::new() })
    }

    /// Randomly initialized network; only for tests and offline smoke runs,
    /// its features carry no perceptual meaning.
    pub fn random(seed: u64) -> Self {
        let mut net = Self::build(Source::Random(ChaCha8Rng::seed_from_u64(seed))).expect("random init cannot fail");
        net.weights_version = format!("random-init-seed-{seed}");
        net
    }

    /// Loads torchvision-named weights (`Conv2d_1a_3x3.conv.weight`,
    /// `...bn.running_var`, `fc.weight`, ...) from a safetensors file.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|_| Error::MissingWeights {
            path: path.display().to_string(),
            hint: format!(
                "expected the torchvision Inception-V3 state dict converted to safetensors ({WEIGHTS_FILE}); \
                 pass its path explicitly or set {WEIGHTS_ENV}"
            ),
        })?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut net = Self::build(Source::File(st))?;
        net.weights_version = format!("sha256:{}", &hex::encode(Sha256::digest(&bytes))[..16]);
        Ok(net)
    }

    /// Resolves weights from `explicit`, then the environment variable.
    pub fn locate(explicit: Option<&Path>) -> Result<Self> {
        match explicit {
            Some(p) => Self::load(p),
            None => match std::env::var_os(WEIGHTS_ENV) {
                Some(p) => Self::load(Path::new(&p)),
                None => Err(Error::MissingWeights {
                    path: format!("${WEIGHTS_ENV}"),
                    hint: format!(
                        "no feature extractor weights configured; convert the torchvision Inception-V3 \
                         weights to {WEIGHTS_FILE} and set {WEIGHTS_ENV} to its path"
                    ),
                }),
            },
        }
    }

    pub fn weights_version(&self) -> &str {
        &self.weights_version
    }

    /// Hash of everything that changes the features: weights and resize mode.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.weights_version.as_bytes());
        h.update(b"|");
        h.update(RESIZE_MODE.as_bytes());
        hex::encode(h.finalize())[..16].to_string()
    }

    /// Forward pass on a `(n, 3, 299, 299)` batch scaled to `[-1, 1]`.
    pub fn forward(&self, x: &Tensor<F>) -> InceptionOutput<F> {
        let mut h = relu_conv(&self.stem[0], x);
        h = relu_conv(&self.stem[1], &h);
        h = relu_conv(&self.stem[2], &h);
        h = max_pool3s2(&h);
        h = relu_conv(&self.stem[3], &h);
        h = relu_conv(&self.stem[4], &h);
        h = max_pool3s2(&h);
        for blk in &self.a {
            h = blk.forward(&h);
        }
        h = self.b.forward(&h);
        for blk in &self.c {
            h = blk.forward(&h);
        }
        h = self.d.forward(&h);
        for blk in &self.e {
            h = blk.forward(&h);
        }
        let (n, c, hh, ww) = h.dims4();
        let hw = F::from_usize(hh * ww).unwrap();
        let features: Vec<F> = h.data.chunks(hh * ww).map(|p| p.iter().copied().sum::<F>() / hw).collect();
        let logits = self.fc.apply(&Tensor { data: features.clone(), shape: vec![n, c] });
        let mut probs = logits.data;
        for row in probs.chunks_mut(NUM_CLASSES) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        InceptionOutput { features, probs, n }
    }

    /// Features of interleaved 8-bit RGB images (all `height x width`),
    /// processed one at a time.
    pub fn extract(
        &self,
        images: &[Vec<u8>],
        height: usize,
        width: usize,
        source: FeatureSource,
    ) -> Result<FeatureSet<F>> {
        let mut features = Vec::with_capacity(images.len() * FEATURE_DIM);
        let mut probs = Vec::with_capacity(images.len() * NUM_CLASSES);
        for (i, img) in images.iter().enumerate() {
            if img.len() != height * width * 3 {
                return Err(Error::Shape(format!(
                    "image {i} has {} bytes, expected {}",
                    img.len(),
                    height * width * 3
                )));
            }
            let x = resize_bilinear(img, height, width, INPUT_SIZE);
            let out = self.forward(&x);
            features.extend(out.features);
            probs.extend(out.probs);
        }
        Ok(FeatureSet::new(features, probs, images.len(), FEATURE_DIM, NUM_CLASSES, source)?)
    }
}

/// Bilinear resize of an interleaved RGB image to `size x size`, planar
/// output in `[-1, 1]`. Sample positions use half-pixel centres with edge
/// clamping (no antialiasing).
pub fn resize_bilinear<F: Scalar>(img: &[u8], h: usize, w: usize, size: usize) -> Tensor<F> {
    let mut out = Tensor::zeros(&[1, 3, size, size]);
    let axis = |o: usize, n: usize| {
        let src = ((o as f64 + 0.5) * n as f64 / size as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let xs: Vec<_> = (0..size).map(|o| axis(o, w)).collect();
    for oy in 0..size {
        let (y0, y1, fy) = axis(oy, h);
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..3 {
                let p = |y: usize, x: usize| img[(y * w + x) * 3 + c] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                let v = top * (1.0 - fy) + bot * fy;
                out.data[(c * size + oy) * size + ox] = F::lit(v / 127.5 - 1.0);
            }
        }
    }
    out
}
