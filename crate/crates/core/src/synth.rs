//! Synthetic H&E regions with instance annotation, for demos and tests.
//!
//! Tissue is rendered in optical-density space as a mix of two stain vectors:
//! a smoothly varying eosin stroma with elliptical nuclei whose hematoxylin
//! load, size and shape depend on the nuclei class.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::mask::NucleiClass;
use crate::patch::AnnotatedRegion;
use crate::stain::{INCIDENT, OD_OFFSET, REFERENCE_EOSIN, REFERENCE_HEMATOXYLIN};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub height: usize,
    pub width: usize,
    /// Expected nuclei per 10 000 pixels.
    pub nuclei_density: f64,
    /// Multiplies every nucleus radius.
    pub radius_scale: f64,
    pub hematoxylin: [f64; 3],
    pub eosin: [f64; 3],
    /// Standard deviation of per-pixel OD noise.
    pub noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            height: 256,
            width: 256,
            nuclei_density: 12.0,
            radius_scale: 1.0,
            hematoxylin: REFERENCE_HEMATOXYLIN,
            eosin: REFERENCE_EOSIN,
            noise: 0.01,
        }
    }
}

impl SynthParams {
    /// Perturbs both stain vectors, mimicking a different staining lab.
    pub fn with_color_cast(mut self, seed: u64, strength: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in [&mut self.hematoxylin, &mut self.eosin] {
            for x in v.iter_mut() {
                *x = (*x * (1.0 + strength * rng.random_range(-1.0..1.0))).max(0.01);
            }
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            v.iter_mut().for_each(|x| *x /= n);
        }
        self
    }
}

struct Shape {
    class: NucleiClass,
    radius: f64,
    aspect: f64,
    hematoxylin: f64,
}

fn class_shape(class: NucleiClass) -> Shape {
    let (radius, aspect, hematoxylin) = match class {
        NucleiClass::Lymphocyte => (3.5, 1.0, 1.5),
        NucleiClass::Epithelial => (6.0, 1.5, 0.9),
        NucleiClass::Plasma => (4.5, 1.2, 1.2),
        NucleiClass::Neutrophil => (4.5, 1.1, 1.1),
        NucleiClass::Eosinophil => (4.5, 1.3, 0.8),
        NucleiClass::Connective => (3.0, 3.0, 1.0),
        NucleiClass::Background => (0.0, 1.0, 0.0),
    };
    Shape { class, radius, aspect, hematoxylin }
}

/// Renders one region; identical `(id, seed, params)` give identical output.
pub fn synthetic_region(source_id: &str, seed: u64, params: &SynthParams) -> Result<AnnotatedRegion> {
    let (h, w) = (params.height, params.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Smooth stroma: a few random plane waves.
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let freq: f64 = rng.random_range(0.01..0.05);
            (
                freq * ang.cos(),
                freq * ang.sin(),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.08),
            )
        })
        .collect();
    let mut eosin = vec![0.0f64; h * w];
    let mut hema = vec![0.04f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let wave: f64 = waves.iter().map(|(fy, fx, ph, a)| a * (fy * y as f64 + fx * x as f64 + ph).sin()).sum();
            eosin[y * w + x] = (0.35 + wave).max(0.05);
        }
    }

    let mut inst = vec![0u32; h * w];
    let mut classes = BTreeMap::new();
    let n_nuclei = (params.nuclei_density * (h * w) as f64 / 10_000.0).round() as usize;
    let weights = [
        (NucleiClass::Epithelial, 0.35),
        (NucleiClass::Lymphocyte, 0.25),
        (NucleiClass::Connective, 0.2),
        (NucleiClass::Plasma, 0.1),
        (NucleiClass::Neutrophil, 0.05),
        (NucleiClass::Eosinophil, 0.05),
    ];
    let mut next_id = 1u32;
    for _ in 0..n_nuclei {
        let mut pick: f64 = rng.random_range(0.0..1.0);
        let mut class = NucleiClass::Epithelial;
        for (c, p) in weights {
            if pick < p {
                class = c;
                break;
            }
            pick -= p;
        }
        let shape = class_shape(class);
        let r = shape.radius * params.radius_scale * rng.random_range(0.85..1.15);
        let (ry, rx) = (r, r * shape.aspect);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let cy: f64 = rng.random_range(0.0..h as f64);
        let cx: f64 = rng.random_range(0.0..w as f64);
        let ext = rx.max(ry).ceil() as isize + 1;
        let mut painted = 0usize;
        for dy in -ext..=ext {
            for dx in -ext..=ext {
                let (py, px) = (cy as isize + dy, cx as isize + dx);
                if py < 0 || px < 0 || py >= h as isize || px >= w as isize {
                    continue;
                }
                let (fy, fx) = (py as f64 + 0.5 - cy, px as f64 + 0.5 - cx);
                let u = fx * theta.cos() + fy * theta.sin();
                let v = -fx * theta.sin() + fy * theta.cos();
                let d = (u / rx).powi(2) + (v / ry).powi(2);
                let p = py as usize * w + px as usize;
                if d <= 1.0 && inst[p] == 0 {
                    inst[p] = next_id;
                    hema[p] = shape.hematoxylin * (1.0 - 0.25 * d);
                    eosin[p] *= 0.4;
                    painted += 1;
                }
            }
        }
        if painted > 0 {
            classes.insert(next_id, shape.class);
            next_id += 1;
        }
    }

    let mut image = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        for c in 0..3 {
            let mut od = params.hematoxylin[c] * hema[p] + params.eosin[c] * eosin[p];
            if params.noise > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                od += params.noise * z;
            }
            let v = (INCIDENT * (-od.max(0.0)).exp() - OD_OFFSET).round().clamp(0.0, 255.0);
            image.push(v as u8);
        }
    }
    AnnotatedRegion::new(source_id, h, w, image, inst, classes)
}
