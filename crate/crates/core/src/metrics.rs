//! Fréchet Inception Distance and Inception Score over extracted features.
//!
//! Statistics are accumulated in `f64` regardless of the feature precision.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSource {
    Real,
    Synthetic,
}

/// Pool features (`n x dim`) and class-probability rows (`n x classes`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet<F> {
    pub features: Vec<F>,
    pub probs: Vec<F>,
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub source: FeatureSource,
}

impl<F: Scalar> FeatureSet<F> {
    pub fn new(
        features: Vec<F>,
        probs: Vec<F>,
        n: usize,
        dim: usize,
        classes: usize,
        source: FeatureSource,
    ) -> Result<Self> {
        if features.len() != n * dim || probs.len() != n * classes {
            return Err(Error::ShapeMismatch(format!(
                "feature set of {n} rows: {} features for dim {dim}, {} probabilities for {classes} classes",
                features.len(),
                probs.len()
            )));
        }
        if let Some(i) = features.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("feature row {}", i / dim.max(1))));
        }
        let tol = F::lit(1e-3);
        for (r, row) in probs.chunks(classes.max(1)).enumerate().take(if classes == 0 { 0 } else { n }) {
            let s: F = row.iter().copied().sum();
            if row.iter().any(|p| p.is_nan() || *p < F::zero()) || (s - F::one()).abs() > tol {
                return Err(Error::InvalidArgument(format!("probability row {r} is not a distribution (sum {s})")));
            }
        }
        Ok(Self { features, probs, n, dim, classes, source })
    }

    /// Features only; the probability table is left empty.
    pub fn from_features(features: Vec<F>, n: usize, dim: usize, source: FeatureSource) -> Result<Self> {
        Self::new(features, Vec::new(), n, dim, 0, source)
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Mean and unbiased (1/(N−1)) covariance.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

pub fn gaussian_stats<F: Scalar>(fs: &FeatureSet<F>) -> Result<GaussianStats> {
    if fs.n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples for a covariance, got {}", fs.n)));
    }
    let x = DMatrix::from_fn(fs.n, fs.dim, |i, j| fs.features[i * fs.dim + j].to_f64().unwrap_or(f64::NAN));
    let mean = DVector::from_fn(fs.dim, |j, _| x.column(j).mean());
    let mut centered = x;
    for j in 0..fs.dim {
        let m = mean[j];
        centered.column_mut(j).iter_mut().for_each(|v| *v -= m);
    }
    let cov = centered.transpose() * &centered / (fs.n as f64 - 1.0);
    Ok(GaussianStats { mean, cov, n: fs.n })
}

/// A warning when the sample count cannot give a full-rank covariance.
pub fn small_sample_warning(n: usize, dim: usize) -> Option<String> {
    (n <= dim).then(|| {
        format!("only {n} samples for {dim}-dimensional features; covariance is rank deficient and FID is biased")
    })
}

fn psd_eigenvalues(m: &DMatrix<f64>, what: &str) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym
        .try_symmetric_eigen(1e-14, 10_000)
        .ok_or_else(|| Error::SqrtFailed(format!("eigen-decomposition of {what} did not converge")))?;
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let tol = 1e-8 * max.max(1.0);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -tol {
        return Err(Error::SqrtFailed(format!(
            "{what} is not positive semi-definite: eigenvalues span [{min:.3e}, {max:.3e}] (condition {:.3e})",
            max / min.abs().max(f64::MIN_POSITIVE)
        )));
    }
    let vals = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    Ok((vals, eig.eigenvectors))
}

/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`.
///
/// The trace of the square root is taken through the symmetric product
/// `Σ₁^{1/2} Σ₂ Σ₁^{1/2}`, which shares its spectrum with `Σ₁Σ₂`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::ShapeMismatch(format!("feature dims {} vs {}", a.mean.len(), b.mean.len())));
    }
    let diff = &a.mean - &b.mean;
    let (vals, vecs) = psd_eigenvalues(&a.cov, "first covariance")?;
    let sqrt_a = &vecs
        * DMatrix::from_diagonal(&DVector::from_iterator(vals.len(), vals.iter().map(|v| v.sqrt())))
        * vecs.transpose();
    let inner = &sqrt_a * &b.cov * &sqrt_a;
    let (inner_vals, _) = psd_eigenvalues(&inner, "covariance product")?;
    let tr_sqrt: f64 = inner_vals.iter().map(|v| v.sqrt()).sum();
    let d = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    if !d.is_finite() {
        return Err(Error::NonFinite("Fréchet distance".into()));
    }
    Ok(d.max(0.0))
}

pub fn fid<F: Scalar>(real: &FeatureSet<F>, fake: &FeatureSet<F>) -> Result<f64> {
    frechet_distance(&gaussian_stats(real)?, &gaussian_stats(fake)?)
}

/// `exp(E_x KL(p(y|x) ‖ p(y)))` per split; returns mean and population std over splits.
pub fn inception_score<F: Scalar>(fake: &FeatureSet<F>, splits: usize) -> Result<(f64, f64)> {
    if fake.classes == 0 {
        return Err(Error::InvalidArgument("feature set carries no class probabilities".into()));
    }
    if splits == 0 || splits > fake.n {
        return Err(Error::InvalidArgument(format!("cannot form {splits} splits from {} samples", fake.n)));
    }
    let c = fake.classes;
    let mut scores = Vec::with_capacity(splits);
    for k in 0..splits {
        let (lo, hi) = (k * fake.n / splits, (k + 1) * fake.n / splits);
        let rows: Vec<&[F]> = (lo..hi).map(|i| &fake.probs[i * c..(i + 1) * c]).collect();
        let mut marginal = vec![0.0f64; c];
        for r in &rows {
            for (m, p) in marginal.iter_mut().zip(r.iter()) {
                *m += p.to_f64().unwrap_or(0.0);
            }
        }
        marginal.iter_mut().for_each(|m| *m /= rows.len() as f64);
        let mean_kl = rows
            .iter()
            .map(|r| {
                r.iter()
                    .zip(&marginal)
                    .map(|(p, m)| {
                        let p = p.to_f64().unwrap_or(0.0);
                        if p > 0.0 {
                            p * (p.ln() - m.ln())
                        } else {
                            0.0
                        }
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / rows.len() as f64;
        scores.push(mean_kl.exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub n_real: usize,
    pub n_synthetic: usize,
    /// Hash of the feature extractor weights version and resize mode.
    pub config_hash: String,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "FID\t{:.4}\nIS\t{:.4} ± {:.4}\nreal images\t{}\nsynthetic images\t{}\nconfig hash\t{}\n",
            self.fid, self.is_mean, self.is_std, self.n_real, self.n_synthetic, self.config_hash
        );
        for w in &self.warnings {
            s.push_str(&format!("warning\t{w}\n"));
        }
        s
    }
}
