//! Structure-preserving stain normalization.
//!
//! Optical densities are factorized as `OD ≈ W·H` with a non-negative 3x2
//! stain matrix `W` (unit columns: hematoxylin, eosin) and sparse non-negative
//! concentrations `H`, via alternating exact non-negative solves with an L1
//! penalty on `H`. Normalization keeps a region's concentrations, rescales
//! them to the target's robust maxima and recombines them with the target's
//! stain vectors. Label maps never pass through here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::scalar::Scalar;

/// Incident intensity. Using 255 + 1 makes `I ↦ OD` a bijection on 0..=255
/// with `OD(255) = 0`.
pub const INCIDENT: f64 = 256.0;
pub const OD_OFFSET: f64 = 1.0;

/// Ruifrok & Johnston H&E reference vectors, used as the factorization seed.
pub const REFERENCE_HEMATOXYLIN: [f64; 3] = [0.650, 0.704, 0.286];
pub const REFERENCE_EOSIN: [f64; 3] = [0.072, 0.990, 0.105];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainParams {
    /// Pixels whose OD vector norm exceeds this count as tissue.
    pub od_threshold: f64,
    /// L1 weight on concentrations while learning the stain matrix.
    pub sparsity_weight: f64,
    /// L1 weight when solving concentrations for normalization.
    pub concentration_weight: f64,
    pub percentile: f64,
    pub min_tissue_fraction: f64,
    pub max_iterations: usize,
    /// Tissue pixels used for dictionary learning (evenly strided subsample).
    pub max_pixels: usize,
    /// Smallest accepted ratio of the second to first singular value of the tissue OD.
    pub min_rank_ratio: f64,
}

impl Default for StainParams {
    fn default() -> Self {
        Self {
            od_threshold: 0.15,
            sparsity_weight: 0.1,
            concentration_weight: 0.0,
            percentile: 99.0,
            min_tissue_fraction: 0.05,
            max_iterations: 200,
            max_pixels: 20_000,
            min_rank_ratio: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainProfile<F> {
    /// `stain_matrix[channel][stain]`, unit-norm non-negative columns.
    pub stain_matrix: [[F; 2]; 3],
    /// 99th-percentile concentration per stain.
    pub concentration_scale: [F; 2],
}

impl<F: Scalar> StainProfile<F> {
    pub fn column(&self, stain: usize) -> [F; 3] {
        [self.stain_matrix[0][stain], self.stain_matrix[1][stain], self.stain_matrix[2][stain]]
    }

    /// Angle between the two stain vectors, in degrees.
    pub fn separation_degrees(&self) -> F {
        angle_degrees(self.column(0), self.column(1))
    }

    /// Plain-text numeric table: one row per channel, then the scales.
    pub fn to_table(&self) -> String {
        let mut s = String::from("# channel\thematoxylin\teosin\n");
        for (name, row) in ["R", "G", "B"].iter().zip(&self.stain_matrix) {
            s.push_str(&format!("{name}\t{}\t{}\n", row[0], row[1]));
        }
        s.push_str(&format!("scale\t{}\t{}\n", self.concentration_scale[0], self.concentration_scale[1]));
        s
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::InvalidArgument(format!("bad stain table line '{line}'")));
            }
            let p =
                |s: &str| s.parse::<f64>().map(F::lit).map_err(|_| Error::InvalidArgument(format!("bad number '{s}'")));
            rows.push([p(f[1])?, p(f[2])?]);
        }
        if rows.len() != 4 {
            return Err(Error::InvalidArgument(format!("stain table needs 4 rows, found {}", rows.len())));
        }
        Ok(Self { stain_matrix: [rows[0], rows[1], rows[2]], concentration_scale: rows[3] })
    }
}

pub fn angle_degrees<F: Scalar>(a: [F; 3], b: [F; 3]) -> F {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    (dot / (na * nb)).max(-F::one()).min(F::one()).acos().to_degrees()
}

/// `OD = −ln((I + 1) / 256)`, elementwise over interleaved RGB.
pub fn to_optical_density<F: Scalar>(rgb: &[u8]) -> Vec<F> {
    rgb.iter().map(|&i| od_of(i)).collect()
}

#[inline]
fn od_of<F: Scalar>(i: u8) -> F {
    -((F::lit(i as f64 + OD_OFFSET)) / F::lit(INCIDENT)).ln()
}

/// Inverse of [`to_optical_density`], rounded and clipped to 8 bits.
pub fn from_optical_density<F: Scalar>(od: &[F]) -> Vec<u8> {
    od.iter().map(|&d| intensity_of(d)).collect()
}

#[inline]
fn intensity_of<F: Scalar>(od: F) -> u8 {
    let v = (F::lit(INCIDENT) * (-od).exp() - F::lit(OD_OFFSET)).round();
    v.max(F::zero()).min(F::lit(255.0)).to_u8().unwrap_or(0)
}

/// `argmin_{h ≥ 0} ½‖v − a·h₀ − b·h₁‖² + λ(h₀ + h₁)` in closed form (KKT enumeration).
fn nonneg_lasso2<F: Scalar>(gram: [[F; 2]; 2], rhs: [F; 2], lambda: F) -> [F; 2] {
    let zero = F::zero();
    let r = [rhs[0] - lambda, rhs[1] - lambda];
    let det = gram[0][0] * gram[1][1] - gram[0][1] * gram[0][1];
    if det > F::epsilon() * gram[0][0] * gram[1][1] {
        let h0 = (gram[1][1] * r[0] - gram[0][1] * r[1]) / det;
        let h1 = (gram[0][0] * r[1] - gram[0][1] * r[0]) / det;
        if h0 >= zero && h1 >= zero {
            return [h0, h1];
        }
    }
    // Only h0 active.
    if gram[0][0] > zero && r[0] > zero {
        let h0 = r[0] / gram[0][0];
        if gram[0][1] * h0 - r[1] >= zero {
            return [h0, zero];
        }
    }
    if gram[1][1] > zero && r[1] > zero {
        let h1 = r[1] / gram[1][1];
        if gram[0][1] * h1 - r[0] >= zero {
            return [zero, h1];
        }
    }
    [zero, zero]
}

fn concentrations<F: Scalar>(w: &[[F; 2]; 3], od: &[F], lambda: F) -> Vec<[F; 2]> {
    let col = |k: usize| [w[0][k], w[1][k], w[2][k]];
    let (a, b) = (col(0), col(1));
    let dot = |x: [F; 3], y: &[F]| x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
    let gram = [[dot(a, &a), dot(a, &b)], [dot(b, &a), dot(b, &b)]];
    od.chunks_exact(3).map(|v| nonneg_lasso2(gram, [dot(a, v), dot(b, v)], lambda)).collect()
}

fn percentile<F: Scalar>(values: &mut [F], pct: f64) -> F {
    if values.is_empty() {
        return F::zero();
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let pos = pct / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = F::lit(pos - lo as f64);
    values[lo] + (values[hi] - values[lo]) * frac
}

/// Tissue optical densities (interleaved, 3 per pixel) and the total pixel count.
fn tissue_od<F: Scalar>(rgb: &[u8], threshold: f64) -> Vec<F> {
    let thr2 = F::lit(threshold * threshold);
    let mut out = Vec::new();
    for px in rgb.chunks_exact(3) {
        let od = [od_of::<F>(px[0]), od_of::<F>(px[1]), od_of::<F>(px[2])];
        if od[0] * od[0] + od[1] * od[1] + od[2] * od[2] > thr2 {
            out.extend_from_slice(&od);
        }
    }
    out
}

/// Learns the stain matrix and robust concentration maxima of an H&E image.
pub fn estimate_stain_profile<F: Scalar>(rgb: &[u8], params: &StainParams) -> Result<StainProfile<F>> {
    if !rgb.len().is_multiple_of(3) || rgb.is_empty() {
        return Err(Error::ShapeMismatch(format!("RGB buffer of {} bytes", rgb.len())));
    }
    let total = rgb.len() / 3;
    let tissue = tissue_od::<F>(rgb, params.od_threshold);
    let n_tissue = tissue.len() / 3;
    if (n_tissue as f64) < params.min_tissue_fraction * total as f64 || n_tissue < 2 {
        return Err(Error::InsufficientTissue { tissue_pixels: n_tissue, total_pixels: total });
    }

    let stride = n_tissue.div_ceil(params.max_pixels.max(1));
    let sample: Vec<F> = tissue.chunks_exact(3).step_by(stride).flatten().copied().collect();

    let mut scatter = [F::zero(); 9];
    for v in sample.chunks_exact(3) {
        for i in 0..3 {
            for j in 0..3 {
                scatter[i * 3 + j] += v[i] * v[j];
            }
        }
    }
    let (eig, _) = symmetric_eigen(&scatter, 3);
    let ratio = (eig[1].max(F::zero()) / eig[0]).sqrt();
    if ratio.is_nan() || ratio < F::lit(params.min_rank_ratio) {
        return Err(Error::RankDeficient(format!(
            "tissue optical density is effectively one-dimensional (singular value ratio {:.2e})",
            ratio.to_f64().unwrap_or(f64::NAN)
        )));
    }

    let lambda = F::lit(params.sparsity_weight);
    let mut w = [[F::zero(); 2]; 3];
    for c in 0..3 {
        w[c] = [F::lit(REFERENCE_HEMATOXYLIN[c]), F::lit(REFERENCE_EOSIN[c])];
    }
    normalize_columns(&mut w)?;
    for _ in 0..params.max_iterations {
        let h = concentrations(&w, &sample, lambda);
        // W-step: each channel row is an independent 2-variable NNLS in H.
        let mut hh = [[F::zero(); 2]; 2];
        let mut vh = [[F::zero(); 2]; 3];
        for (k, hk) in h.iter().enumerate() {
            for i in 0..2 {
                for j in 0..2 {
                    hh[i][j] += hk[i] * hk[j];
                }
                for c in 0..3 {
                    vh[c][i] += sample[k * 3 + c] * hk[i];
                }
            }
        }
        if hh[0][0] <= F::zero() || hh[1][1] <= F::zero() {
            return Err(Error::RankDeficient("one stain received no concentration mass".into()));
        }
        let mut next = [[F::zero(); 2]; 3];
        for c in 0..3 {
            next[c] = nonneg_lasso2(hh, vh[c], F::zero());
        }
        normalize_columns(&mut next)?;
        let delta = (0..3)
            .flat_map(|c| (0..2).map(move |k| (c, k)))
            .map(|(c, k)| (next[c][k] - w[c][k]).abs())
            .fold(F::zero(), F::max);
        w = next;
        if delta < F::lit(1e-7) {
            break;
        }
    }
    if w[2][0] < w[2][1] {
        for row in &mut w {
            row.swap(0, 1);
        }
    }
    let profile_sep = angle_degrees([w[0][0], w[1][0], w[2][0]], [w[0][1], w[1][1], w[2][1]]);
    if profile_sep < F::lit(1.0) {
        return Err(Error::RankDeficient(format!("stain vectors collapsed ({profile_sep:.3} degrees apart)")));
    }

    let conc = concentrations(&w, &tissue, F::lit(params.concentration_weight));
    let mut scale = [F::zero(); 2];
    for (s, slot) in scale.iter_mut().enumerate() {
        let mut vals: Vec<F> = conc.iter().map(|c| c[s]).collect();
        *slot = percentile(&mut vals, params.percentile);
        if slot.is_nan() || *slot <= F::zero() {
            return Err(Error::RankDeficient(format!("stain {s} is absent from the tissue")));
        }
    }
    Ok(StainProfile { stain_matrix: w, concentration_scale: scale })
}

fn normalize_columns<F: Scalar>(w: &mut [[F; 2]; 3]) -> Result<()> {
    for k in 0..2 {
        let norm = (w[0][k] * w[0][k] + w[1][k] * w[1][k] + w[2][k] * w[2][k]).sqrt();
        if norm.is_nan() || norm <= F::epsilon() {
            return Err(Error::RankDeficient(format!("stain column {k} vanished")));
        }
        for row in w.iter_mut() {
            row[k] /= norm;
        }
    }
    Ok(())
}

/// Re-renders `rgb` with the target's stain vectors and concentration range.
pub fn normalize_to_target<F: Scalar>(
    rgb: &[u8],
    source: &StainProfile<F>,
    target: &StainProfile<F>,
    params: &StainParams,
) -> Vec<u8> {
    let od = to_optical_density::<F>(rgb);
    let conc = concentrations(&source.stain_matrix, &od, F::lit(params.concentration_weight));
    let ratio = [
        target.concentration_scale[0] / source.concentration_scale[0],
        target.concentration_scale[1] / source.concentration_scale[1],
    ];
    let mut out = Vec::with_capacity(rgb.len());
    for c in conc {
        let (h, e) = (c[0] * ratio[0], c[1] * ratio[1]);
        for ch in 0..3 {
            out.push(intensity_of(target.stain_matrix[ch][0] * h + target.stain_matrix[ch][1] * e));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_is_zero_density() {
        let od = to_optical_density::<f64>(&[255, 255, 255]);
        assert!(od.iter().all(|&d| d.abs() < 1e-12));
    }

    #[test]
    fn one_over_e_is_unit_density() {
        let v = (255.0 / std::f64::consts::E).round() as u8;
        let od = to_optical_density::<f64>(&[v, v, v]);
        assert!(od.iter().all(|&d| (d - 1.0).abs() < 0.02), "{od:?}");
    }

    #[test]
    fn density_is_monotone_and_invertible() {
        let all: Vec<u8> = (0..=255).collect();
        let od = to_optical_density::<f64>(&all);
        assert!(od.windows(2).all(|w| w[0] > w[1]));
        assert!(od.iter().all(|&d| d >= 0.0));
        assert_eq!(from_optical_density(&od), all);
        let od32 = to_optical_density::<f32>(&all);
        assert_eq!(from_optical_density(&od32), all);
    }

    #[test]
    fn lasso2_matches_brute_force_grid() {
        let gram = [[1.0, 0.3], [0.3, 0.8]];
        for rhs in [[0.5, 0.4], [-0.2, 0.6], [0.7, -0.1], [-0.3, -0.3], [0.05, 0.05]] {
            let h = nonneg_lasso2(gram, rhs, 0.1);
            let obj = |a: f64, b: f64| {
                0.5 * (gram[0][0] * a * a + 2.0 * gram[0][1] * a * b + gram[1][1] * b * b) - rhs[0] * a - rhs[1] * b
                    + 0.1 * (a + b)
            };
            let best = obj(h[0], h[1]);
            for i in 0..200 {
                for j in 0..200 {
                    assert!(obj(i as f64 * 0.01, j as f64 * 0.01) >= best - 1e-12);
                }
            }
        }
    }

    #[test]
    fn background_only_image_is_rejected() {
        let rgb = vec![250u8; 300];
        assert!(matches!(
            estimate_stain_profile::<f64>(&rgb, &StainParams::default()),
            Err(Error::InsufficientTissue { .. })
        ));
    }

    #[test]
    fn profile_table_round_trip() {
        let p =
            StainProfile { stain_matrix: [[0.6f64, 0.1], [0.7, 0.98], [0.3, 0.12]], concentration_scale: [1.5, 0.75] };
        assert_eq!(StainProfile::from_table(&p.to_table()).unwrap(), p);
    }
}
