//! The semantic U-Net denoiser: a plain group-normalized encoder and a
//! decoder whose normalization layers are modulated by the conditioning mask.

use nucleidiff_core::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionBlock;
use crate::error::{Error, Result};
use crate::layers::{
    resize_nearest, sigmoid, upsample2, upsample2_backward, Conv2d, Dropout, GroupNorm, Linear, Silu, Spade,
};
use crate::param::{join, Module, Param};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Network output channels: `in_channels` for the noise estimate plus
    /// `in_channels` for the variance interpolation.
    pub out_channels: usize,
    pub cond_channels: usize,
    pub base_width: usize,
    pub channel_multipliers: Vec<usize>,
    pub attention_resolutions: Vec<usize>,
    pub num_res_blocks_per_level: usize,
    pub time_embed_dim: usize,
    pub head_channels: usize,
    pub norm_groups: usize,
    pub spade_hidden: usize,
    pub dropout: f64,
}

impl DenoiserConfig {
    pub fn paper() -> Self {
        Self {
            image_size: 128,
            in_channels: 3,
            out_channels: 6,
            cond_channels: nucleidiff_core::COND_CHANNELS,
            base_width: 128,
            channel_multipliers: vec![1, 1, 2, 2, 4],
            attention_resolutions: vec![32, 16, 8],
            num_res_blocks_per_level: 2,
            time_embed_dim: 512,
            head_channels: 64,
            norm_groups: 32,
            spade_hidden: 128,
            dropout: 0.0,
        }
    }

    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            out_channels: 6,
            cond_channels: nucleidiff_core::COND_CHANNELS,
            base_width: 32,
            channel_multipliers: vec![1, 2],
            attention_resolutions: vec![],
            num_res_blocks_per_level: 1,
            time_embed_dim: 128,
            head_channels: 32,
            norm_groups: 8,
            spade_hidden: 32,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.out_channels != 2 * self.in_channels {
            return bad("out_channels must be twice in_channels (noise estimate plus variance interpolation)");
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad("channel_multipliers must be non-empty and positive");
        }
        if self.base_width == 0 || self.time_embed_dim == 0 || self.spade_hidden == 0 {
            return bad("widths must be positive");
        }
        for &m in &self.channel_multipliers {
            if !(m * self.base_width).is_multiple_of(self.norm_groups) {
                return bad("every level width must be divisible by norm_groups");
            }
        }
        if !self.base_width.is_multiple_of(2) {
            return bad("base_width must be even for the sinusoidal embedding");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        self.check_resolution(self.image_size)
    }

    /// Accepts powers of two that survive every downsampling with at least 4 pixels.
    pub fn check_resolution(&self, size: usize) -> Result<()> {
        let down = 1usize << (self.channel_multipliers.len() - 1);
        if !size.is_power_of_two() || size < 4 * down {
            return Err(Error::Config(format!(
                "resolution {size} unsupported: need a power of two of at least {}",
                4 * down
            )));
        }
        Ok(())
    }
}

/// Encoder blocks normalize with affine group norm; middle and decoder
/// blocks use mask-driven spatially-adaptive normalization.
#[derive(Debug, Clone)]
pub enum Norm<F> {
    Group(GroupNorm<F>),
    Spade(Box<Spade<F>>),
}

impl<F: Scalar> Norm<F> {
    fn forward(&mut self, x: &Tensor<F>, seg: &Tensor<F>, train: bool) -> Tensor<F> {
        match self {
            Norm::Group(g) => g.forward(x, train),
            Norm::Spade(s) => s.forward(x, seg, train),
        }
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        match self {
            Norm::Group(g) => g.backward(dy),
            Norm::Spade(s) => s.backward(dy),
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        match self {
            Norm::Group(g) => g.visit_params(prefix, f),
            Norm::Spade(s) => s.visit_params(prefix, f),
        }
    }
}

/// Residual block with timestep scale/shift applied after the second norm.
#[derive(Debug, Clone)]
pub struct ResBlock<F> {
    norm1: Norm<F>,
    act1: Silu<F>,
    conv1: Conv2d<F>,
    emb_act: Silu<F>,
    emb_proj: Linear<F>,
    norm2: Norm<F>,
    act2: Silu<F>,
    dropout: Dropout<F>,
    conv2: Conv2d<F>,
    skip: Option<Conv2d<F>>,
    normed2: Option<Tensor<F>>,
    scale_shift: Option<Tensor<F>>,
}

impl<F: Scalar> ResBlock<F> {
    fn new(cfg: &DenoiserConfig, cin: usize, cout: usize, spade: bool, rng: &mut ChaCha8Rng) -> Self {
        let norm = |c: usize, rng: &mut ChaCha8Rng| {
            if spade {
                Norm::Spade(Box::new(Spade::new(cfg.norm_groups, c, cfg.cond_channels, cfg.spade_hidden, rng)))
            } else {
                Norm::Group(GroupNorm::new(cfg.norm_groups, c, true))
            }
        };
        let norm1 = norm(cin, rng);
        let conv1 = Conv2d::same(cin, cout, 3, rng);
        let emb_proj = Linear::new(cfg.time_embed_dim, 2 * cout, rng);
        let norm2 = norm(cout, rng);
        let conv2 = Conv2d::same(cout, cout, 3, rng);
        let skip = (cin != cout).then(|| Conv2d::new(cin, cout, (1, 1), 1, (0, 0), true, rng));
        Self {
            norm1,
            act1: Silu::new(),
            conv1,
            emb_act: Silu::new(),
            emb_proj,
            norm2,
            act2: Silu::new(),
            dropout: Dropout::new(cfg.dropout),
            conv2,
            skip,
            normed2: None,
            scale_shift: None,
        }
    }

    fn forward(&mut self, x: &Tensor<F>, emb: &Tensor<F>, seg: &Tensor<F>, ctx: &mut Ctx<'_>) -> Tensor<F> {
        let train = ctx.train;
        let h = self.norm1.forward(x, seg, train);
        let h = self.act1.forward(&h, train);
        let h = self.conv1.forward(&h, train);
        let e = self.emb_act.forward(emb, train);
        let ss = self.emb_proj.forward(&e, train);
        let n2 = self.norm2.forward(&h, seg, train);
        let (b, c, hh, ww) = n2.dims4();
        let hw = hh * ww;
        let mut h = n2.clone();
        for bi in 0..b {
            for ci in 0..c {
                let scale = ss.data[bi * 2 * c + ci];
                let shift = ss.data[bi * 2 * c + c + ci];
                let plane = &mut h.data[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                plane.iter_mut().for_each(|v| *v = *v * (F::one() + scale) + shift);
            }
        }
        let h = self.act2.forward(&h, train);
        let h = self.dropout.forward(&h, train, ctx.rng.as_deref_mut());
        let mut h = self.conv2.forward(&h, train);
        match &mut self.skip {
            Some(s) => h.add_assign(&s.forward(x, train)),
            None => h.add_assign(x),
        }
        if train {
            self.normed2 = Some(n2);
            self.scale_shift = Some(ss);
        }
        h
    }

    /// Returns `(dx, d_emb)`.
    fn backward(&mut self, dy: &Tensor<F>) -> (Tensor<F>, Tensor<F>) {
        let n2 = self.normed2.take().expect("resblock backward without cached forward");
        let ss = self.scale_shift.take().unwrap();
        let dh = self.conv2.backward(dy, true).unwrap();
        let dh = self.dropout.backward(&dh);
        let mut dh = self.act2.backward(&dh);
        let (b, c, hh, ww) = dh.dims4();
        let hw = hh * ww;
        let mut dss = Tensor::zeros(&ss.shape);
        for bi in 0..b {
            for ci in 0..c {
                let scale = ss.data[bi * 2 * c + ci];
                let range = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                let mut ds = F::zero();
                let mut dt = F::zero();
                for (d, &n) in dh.data[range.clone()].iter_mut().zip(&n2.data[range]) {
                    ds += *d * n;
                    dt += *d;
                    *d *= F::one() + scale;
                }
                dss.data[bi * 2 * c + ci] = ds;
                dss.data[bi * 2 * c + c + ci] = dt;
            }
        }
        let dh = self.norm2.backward(&dh);
        let dh = self.conv1.backward(&dh, true).unwrap();
        let dh = self.act1.backward(&dh);
        let mut dx = self.norm1.backward(&dh);
        match &mut self.skip {
            Some(s) => dx.add_assign(&s.backward(dy, true).unwrap()),
            None => dx.add_assign(dy),
        }
        let de = self.emb_proj.backward(&dss);
        let demb = self.emb_act.backward(&de);
        (dx, demb)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.emb_proj.visit_params(&join(prefix, "emb_proj"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_params(&join(prefix, "skip"), f);
        }
    }
}

struct Ctx<'a> {
    train: bool,
    rng: Option<&'a mut ChaCha8Rng>,
}

#[derive(Debug, Clone)]
enum EncoderBlock<F> {
    Stem(Conv2d<F>),
    Res { res: ResBlock<F>, attn: Option<AttentionBlock<F>> },
    Down(Conv2d<F>),
}

#[derive(Debug, Clone)]
struct DecoderBlock<F> {
    res: ResBlock<F>,
    attn: Option<AttentionBlock<F>>,
    up: Option<Conv2d<F>>,
    /// Channels of the incoming activation (the rest of the input is the skip).
    h_channels: usize,
    level: usize,
}

#[derive(Debug, Clone)]
pub struct DenoiserOutput<F> {
    pub eps_hat: Tensor<F>,
    /// Variance interpolation weights in (0, 1).
    pub v: Tensor<F>,
}

/// Sinusoidal embedding `[cos(t f_i), sin(t f_i)]` with `f_i = 10000^(-i/half)`.
pub fn timestep_embedding<F: Scalar>(t: &[usize], dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[t.len(), dim]);
    for (b, &tv) in t.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = tv as f64 * freq;
            out.data[b * dim + i] = F::lit(arg.cos());
            out.data[b * dim + half + i] = F::lit(arg.sin());
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Denoiser<F> {
    pub config: DenoiserConfig,
    time_in: Linear<F>,
    time_act: Silu<F>,
    time_out: Linear<F>,
    encoder: Vec<EncoderBlock<F>>,
    encoder_channels: Vec<usize>,
    middle: (ResBlock<F>, Option<AttentionBlock<F>>, ResBlock<F>),
    decoder: Vec<DecoderBlock<F>>,
    out_norm: GroupNorm<F>,
    out_act: Silu<F>,
    out_conv: Conv2d<F>,
    v_cache: Option<Tensor<F>>,
    depth: usize,
}

impl<F: Scalar> Denoiser<F> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let cfg = &config;
        let base = cfg.base_width;
        let levels = cfg.channel_multipliers.len();
        let time_in = Linear::new(base, cfg.time_embed_dim, rng);
        let time_out = Linear::new(cfg.time_embed_dim, cfg.time_embed_dim, rng);
        let attn_at = |res: usize, ch: usize, rng: &mut ChaCha8Rng| {
            cfg.attention_resolutions
                .contains(&res)
                .then(|| AttentionBlock::new(ch, cfg.norm_groups, cfg.head_channels, rng))
        };

        let mut encoder = vec![EncoderBlock::Stem(Conv2d::same(cfg.in_channels, base, 3, rng))];
        let mut encoder_channels = vec![base];
        let mut ch = base;
        let mut res = cfg.image_size;
        for (level, &mult) in cfg.channel_multipliers.iter().enumerate() {
            for _ in 0..cfg.num_res_blocks_per_level {
                let out = mult * base;
                let block = ResBlock::new(cfg, ch, out, false, rng);
                ch = out;
                encoder.push(EncoderBlock::Res { res: block, attn: attn_at(res, ch, rng) });
                encoder_channels.push(ch);
            }
            if level + 1 != levels {
                encoder.push(EncoderBlock::Down(Conv2d::new(ch, ch, (3, 3), 2, (1, 1), true, rng)));
                encoder_channels.push(ch);
                res /= 2;
            }
        }

        let m1 = ResBlock::new(cfg, ch, ch, true, rng);
        let mattn = attn_at(res, ch, rng);
        let m2 = ResBlock::new(cfg, ch, ch, true, rng);

        let mut decoder = Vec::new();
        let mut skips = encoder_channels.clone();
        for (level, &mult) in cfg.channel_multipliers.iter().enumerate().rev() {
            for i in 0..=cfg.num_res_blocks_per_level {
                let skip = skips.pop().unwrap();
                let out = mult * base;
                let block = ResBlock::new(cfg, ch + skip, out, true, rng);
                let h_channels = ch;
                ch = out;
                let attn = attn_at(res, ch, rng);
                let up = (level > 0 && i == cfg.num_res_blocks_per_level).then(|| Conv2d::same(ch, ch, 3, rng));
                decoder.push(DecoderBlock { res: block, attn, up, h_channels, level });
                if level > 0 && i == cfg.num_res_blocks_per_level {
                    res *= 2;
                }
            }
        }

        let out_norm = GroupNorm::new(cfg.norm_groups, ch, true);
        let out_conv = Conv2d::same(ch, cfg.out_channels, 3, rng);
        Ok(Self {
            time_in,
            time_act: Silu::new(),
            time_out,
            encoder,
            encoder_channels,
            middle: (m1, mattn, m2),
            decoder,
            out_norm,
            out_act: Silu::new(),
            out_conv,
            v_cache: None,
            depth: levels,
            config,
        })
    }

    fn check_inputs(&self, x: &Tensor<F>, mask: &Tensor<F>, t: &[usize]) -> Result<()> {
        if x.shape.len() != 4 || mask.shape.len() != 4 {
            return Err(Error::Shape("inputs must be NCHW".into()));
        }
        let (b, c, h, w) = x.dims4();
        let (mb, mc, mh, mw) = mask.dims4();
        if c != self.config.in_channels {
            return Err(Error::Shape(format!("expected {} image channels, got {c}", self.config.in_channels)));
        }
        if mc != self.config.cond_channels {
            return Err(Error::Shape(format!("expected {} mask channels, got {mc}", self.config.cond_channels)));
        }
        if (mb, mh, mw) != (b, h, w) {
            return Err(Error::Shape(format!("mask {:?} does not match image {:?}", mask.shape, x.shape)));
        }
        if h != w {
            return Err(Error::Shape(format!("non-square input {h}x{w}")));
        }
        self.config.check_resolution(h)?;
        if t.len() != b {
            return Err(Error::Shape(format!("{} timesteps for batch of {b}", t.len())));
        }
        Ok(())
    }

    /// Deterministic evaluation-mode forward pass.
    pub fn predict(&mut self, x: &Tensor<F>, mask: &Tensor<F>, t: &[usize]) -> Result<DenoiserOutput<F>> {
        self.run(x, mask, t, Ctx { train: false, rng: None })
    }

    /// Training forward pass; caches activations for [`Denoiser::backward`].
    /// `rng` drives dropout inside residual blocks.
    pub fn forward_train(
        &mut self,
        x: &Tensor<F>,
        mask: &Tensor<F>,
        t: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<DenoiserOutput<F>> {
        self.run(x, mask, t, Ctx { train: true, rng: Some(rng) })
    }

    fn run(&mut self, x: &Tensor<F>, mask: &Tensor<F>, t: &[usize], mut ctx: Ctx<'_>) -> Result<DenoiserOutput<F>> {
        self.check_inputs(x, mask, t)?;
        let train = ctx.train;
        let size = x.shape[2];
        let pyramid: Vec<Tensor<F>> = (0..self.depth)
            .map(|l| if l == 0 { mask.clone() } else { resize_nearest(mask, size >> l, size >> l) })
            .collect();
        let deepest = &pyramid[self.depth - 1];

        let temb = timestep_embedding::<F>(t, self.config.base_width);
        let e = self.time_in.forward(&temb, train);
        let e = self.time_act.forward(&e, train);
        let emb = self.time_out.forward(&e, train);

        let mut hs: Vec<Tensor<F>> = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        for block in &mut self.encoder {
            h = match block {
                EncoderBlock::Stem(c) | EncoderBlock::Down(c) => c.forward(&h, train),
                EncoderBlock::Res { res, attn } => {
                    // Encoder norms ignore the mask; any same-level tensor satisfies the signature.
                    let mut o = res.forward(&h, &emb, deepest, &mut ctx);
                    if let Some(a) = attn {
                        o = a.forward(&o, train);
                    }
                    o
                }
            };
            hs.push(h.clone());
        }

        h = self.middle.0.forward(&h, &emb, deepest, &mut ctx);
        if let Some(a) = &mut self.middle.1 {
            h = a.forward(&h, train);
        }
        h = self.middle.2.forward(&h, &emb, deepest, &mut ctx);

        for block in &mut self.decoder {
            let skip = hs.pop().unwrap();
            let cat = Tensor::cat_channels(&h, &skip);
            h = block.res.forward(&cat, &emb, &pyramid[block.level], &mut ctx);
            if let Some(a) = &mut block.attn {
                h = a.forward(&h, train);
            }
            if let Some(up) = &mut block.up {
                h = up.forward(&upsample2(&h), train);
            }
        }

        let h = self.out_norm.forward(&h, train);
        let h = self.out_act.forward(&h, train);
        let out = self.out_conv.forward(&h, train);
        let (eps_hat, mut v) = out.split_channels(self.config.in_channels);
        v.data.iter_mut().for_each(|z| *z = sigmoid(*z));
        if train {
            self.v_cache = Some(v.clone());
        }
        Ok(DenoiserOutput { eps_hat, v })
    }

    /// Back-propagates loss gradients with respect to `eps_hat` and `v`
    /// (flat, matching the output tensors) and accumulates parameter gradients.
    pub fn backward(&mut self, d_eps: &[F], d_v: &[F]) {
        let v = self.v_cache.take().expect("denoiser backward without training forward");
        assert_eq!(d_eps.len(), v.numel());
        assert_eq!(d_v.len(), v.numel());
        let d_eps = Tensor { data: d_eps.to_vec(), shape: v.shape.clone() };
        let d_raw = Tensor {
            data: d_v.iter().zip(&v.data).map(|(&g, &s)| g * s * (F::one() - s)).collect(),
            shape: v.shape.clone(),
        };
        let dout = Tensor::cat_channels(&d_eps, &d_raw);
        let dh = self.out_conv.backward(&dout, true).unwrap();
        let dh = self.out_act.backward(&dh);
        let mut dh = self.out_norm.backward(&dh);

        let n_enc = self.encoder.len();
        let mut dskips: Vec<Option<Tensor<F>>> = vec![None; n_enc];
        let mut demb: Option<Tensor<F>> = None;
        let add_emb = |demb: &mut Option<Tensor<F>>, d: Tensor<F>| match demb {
            Some(acc) => acc.add_assign(&d),
            None => *demb = Some(d),
        };

        for (j, block) in self.decoder.iter_mut().enumerate().rev() {
            if let Some(up) = &mut block.up {
                dh = upsample2_backward(&up.backward(&dh, true).unwrap());
            }
            if let Some(a) = &mut block.attn {
                dh = a.backward(&dh);
            }
            let (dcat, de) = block.res.backward(&dh);
            add_emb(&mut demb, de);
            let (dprev, dskip) = dcat.split_channels(block.h_channels);
            dskips[n_enc - 1 - j] = Some(dskip);
            dh = dprev;
        }

        let (dm, de) = self.middle.2.backward(&dh);
        add_emb(&mut demb, de);
        dh = dm;
        if let Some(a) = &mut self.middle.1 {
            dh = a.backward(&dh);
        }
        let (dm, de) = self.middle.0.backward(&dh);
        add_emb(&mut demb, de);
        dh = dm;

        for (i, block) in self.encoder.iter_mut().enumerate().rev() {
            dh.add_assign(dskips[i].as_ref().unwrap());
            dh = match block {
                EncoderBlock::Stem(c) => {
                    c.backward(&dh, false);
                    break;
                }
                EncoderBlock::Down(c) => c.backward(&dh, true).unwrap(),
                EncoderBlock::Res { res, attn } => {
                    if let Some(a) = attn {
                        dh = a.backward(&dh);
                    }
                    let (dx, de) = res.backward(&dh);
                    add_emb(&mut demb, de);
                    dx
                }
            };
        }

        let de = self.time_out.backward(&demb.unwrap());
        let de = self.time_act.backward(&de);
        self.time_in.backward(&de);
    }

    /// Channel counts of the skip activations, in encoder order.
    pub fn skip_channels(&self) -> &[usize] {
        &self.encoder_channels
    }

    /// Flattened copy of every parameter value, in visit order.
    pub fn flat_params(&mut self) -> Vec<Vec<F>> {
        let mut out = Vec::new();
        self.visit_params("", &mut |_, p| out.push(p.value.clone()));
        out
    }

    /// Overwrites parameter values in visit order.
    pub fn load_flat_params(&mut self, values: &[Vec<F>]) -> Result<()> {
        let mut i = 0;
        let mut err = None;
        self.visit_params("", &mut |name, p| {
            match values.get(i) {
                Some(v) if v.len() == p.value.len() => p.value.copy_from_slice(v),
                _ if err.is_none() => err = Some(format!("parameter {name} missing or mis-sized")),
                _ => {}
            }
            i += 1;
        });
        if i != values.len() && err.is_none() {
            err = Some(format!("expected {i} parameter tensors, got {}", values.len()));
        }
        err.map_or(Ok(()), |e| Err(Error::Shape(e)))
    }
}

impl<F: Scalar> Module<F> for Denoiser<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.time_in.visit_params(&join(prefix, "time_embed.0"), f);
        self.time_out.visit_params(&join(prefix, "time_embed.2"), f);
        for (i, block) in self.encoder.iter_mut().enumerate() {
            let p = join(prefix, &format!("input_blocks.{i}"));
            match block {
                EncoderBlock::Stem(c) | EncoderBlock::Down(c) => c.visit_params(&p, f),
                EncoderBlock::Res { res, attn } => {
                    res.visit(&join(&p, "res"), f);
                    if let Some(a) = attn {
                        a.visit_params(&join(&p, "attn"), f);
                    }
                }
            }
        }
        self.middle.0.visit(&join(prefix, "middle.0"), f);
        if let Some(a) = &mut self.middle.1 {
            a.visit_params(&join(prefix, "middle.1"), f);
        }
        self.middle.2.visit(&join(prefix, "middle.2"), f);
        for (i, block) in self.decoder.iter_mut().enumerate() {
            let p = join(prefix, &format!("output_blocks.{i}"));
            block.res.visit(&join(&p, "res"), f);
            if let Some(a) = &mut block.attn {
                a.visit_params(&join(&p, "attn"), f);
            }
            if let Some(u) = &mut block.up {
                u.visit_params(&join(&p, "up"), f);
            }
        }
        self.out_norm.visit_params(&join(prefix, "out.norm"), f);
        self.out_conv.visit_params(&join(prefix, "out.conv"), f);
    }
}
