//! Subcommand implementations and the helpers they share.

pub mod ablate;
pub mod evaluate;
pub mod mask_view;
pub mod preprocess;
pub mod sample;
pub mod synth;
pub mod train;

use std::path::{Path, PathBuf};

use nucleidiff_core::metrics::{self, FeatureSet, FeatureSource, MetricReport};
use nucleidiff_core::patch::ManifestRow;
use nucleidiff_core::{encode, Magnification, NoiseSchedule, Split, COND_CHANNELS};
use nucleidiff_nn::inception::InceptionV3;
use nucleidiff_nn::sampler::to_rgb8;
use nucleidiff_nn::{sample, Denoiser, SamplerConfig, Tensor};
use sha2::{Digest, Sha256};

use crate::config::{parse_override, Assignment, RunConfig};
use crate::error::{CliError, CliResult};
use crate::io;
use crate::Common;

/// Resolves the run configuration; `extra` are flag-level overrides applied
/// after `--set`.
pub fn resolve(command: &str, common: &Common, extra: Vec<Assignment>) -> CliResult<RunConfig> {
    let mut overrides = common.set.iter().map(|s| parse_override(s)).collect::<CliResult<Vec<_>>>()?;
    overrides.extend(extra);
    RunConfig::resolve(command, common.preset, common.config.as_deref(), &overrides)
}

pub fn flag(name: &str, key: &str, value: impl ToString) -> Assignment {
    Assignment { key: key.to_string(), value: value.to_string(), origin: format!("--{name}") }
}

pub fn file_digest(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| io::data_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Manifest rows selected as mask sources.
pub fn select_rows(
    rows: &[ManifestRow],
    split: Split,
    magnification: Option<Magnification>,
    size: usize,
    limit: Option<usize>,
) -> Vec<ManifestRow> {
    let it = rows
        .iter()
        .filter(|r| r.split == split && r.size == size && magnification.is_none_or(|m| r.magnification == m))
        .cloned();
    match limit {
        Some(n) => it.take(n).collect(),
        None => it.collect(),
    }
}

/// Encoded conditioning masks plus real pixels for the selected rows.
pub struct MaskSet {
    pub ids: Vec<String>,
    pub size: usize,
    pub masks: Vec<Vec<f32>>,
    pub reals: Vec<Vec<u8>>,
}

pub fn load_masks(manifest: &Path, rows: &[ManifestRow]) -> CliResult<MaskSet> {
    if rows.is_empty() {
        return Err(CliError::Data(format!("empty mask set: no matching rows in {}", manifest.display())));
    }
    let root = io::manifest_root(manifest);
    let mut set = MaskSet { ids: Vec::new(), size: rows[0].size, masks: Vec::new(), reals: Vec::new() };
    for row in rows {
        let p = io::read_patch(&root, row)?;
        let m = encode(&p.class_map, &p.inst_map, p.size, p.size)?;
        set.masks.push(m.layout.iter().map(|&b| b as f32).collect());
        set.reals.push(p.pixels);
        set.ids.push(row.id());
    }
    Ok(set)
}

/// Samples one image per mask; mask `i` uses seed `seed + i`.
pub fn generate(
    model: &mut Denoiser<f32>,
    schedule: &NoiseSchedule<f32>,
    masks: &MaskSet,
    seed: u64,
    guidance_scale: f64,
    batch: usize,
) -> CliResult<Vec<Vec<u8>>> {
    let s = masks.size;
    let per = COND_CHANNELS * s * s;
    let config = SamplerConfig { guidance_scale, ..SamplerConfig::default() };
    let mut out = Vec::with_capacity(masks.masks.len());
    let total = masks.masks.len();
    for lo in (0..total).step_by(batch.max(1)) {
        let hi = (lo + batch.max(1)).min(total);
        let mut data = Vec::with_capacity((hi - lo) * per);
        for m in &masks.masks[lo..hi] {
            data.extend_from_slice(m);
        }
        let t = Tensor::from_vec(data, &[hi - lo, COND_CHANNELS, s, s])?;
        let seeds: Vec<u64> = (lo..hi).map(|i| seed.wrapping_add(i as u64)).collect();
        let x = sample(model, schedule, &t, &seeds, config)?;
        for k in 0..hi - lo {
            out.push(to_rgb8(&x, k));
        }
        log::info!("sampled {hi}/{total} (guidance scale {guidance_scale})");
    }
    Ok(out)
}

/// How evaluation obtains its feature extractor.
#[derive(Debug, Clone, clap::Args)]
pub struct ExtractorArgs {
    /// Inception-V3 weights (torchvision state dict as safetensors).
    #[arg(long, value_name = "FILE")]
    pub weights: Option<PathBuf>,
    /// Use a randomly initialized extractor; scores are then only internally comparable.
    #[arg(long, value_name = "SEED", conflicts_with = "weights")]
    pub random_weights: Option<u64>,
    /// Number of splits for the Inception Score.
    #[arg(long, default_value_t = 10)]
    pub splits: usize,
}

impl ExtractorArgs {
    pub fn load(&self) -> CliResult<InceptionV3<f32>> {
        match self.random_weights {
            Some(seed) => Ok(InceptionV3::random(seed)),
            None => Ok(InceptionV3::locate(self.weights.as_deref())?),
        }
    }
}

pub fn real_features(net: &InceptionV3<f32>, real: &[Vec<u8>], hw: (usize, usize)) -> CliResult<FeatureSet<f32>> {
    Ok(net.extract(real, hw.0, hw.1, FeatureSource::Real)?)
}

/// FID of `fake` against precomputed real features, and IS of `fake`.
pub fn score(
    net: &InceptionV3<f32>,
    fr: &FeatureSet<f32>,
    fake: &[Vec<u8>],
    fake_hw: (usize, usize),
    splits: usize,
    random_weights: bool,
) -> CliResult<MetricReport> {
    let ff = net.extract(fake, fake_hw.0, fake_hw.1, FeatureSource::Synthetic)?;
    let fid = metrics::fid(fr, &ff)?;
    let (is_mean, is_std) = metrics::inception_score(&ff, splits.clamp(1, fake.len()))?;
    let mut warnings = Vec::new();
    for (name, n) in [("real", fr.n), ("synthetic", fake.len())] {
        if let Some(w) = metrics::small_sample_warning(n, fr.dim) {
            warnings.push(format!("{name}: {w}"));
        }
    }
    if random_weights {
        warnings.push("randomly initialized feature extractor: scores are not comparable to published values".into());
    }
    Ok(MetricReport {
        fid,
        is_mean,
        is_std,
        n_real: fr.n,
        n_synthetic: fake.len(),
        config_hash: net.config_hash(),
        warnings,
    })
}
