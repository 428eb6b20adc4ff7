use std::fs;
use std::path::PathBuf;

use clap::Args;
use nucleidiff_core::patch::{build_manifest, extract_patches, split_region, window_geometry};
use nucleidiff_core::stain::{estimate_stain_profile, normalize_to_target};
use nucleidiff_core::{AnnotatedRegion, Magnification, Split, StainParams, StainProfile};

use crate::commands::resolve;
use crate::error::{CliError, CliResult};
use crate::io::{self, OutputGuard};
use crate::{parse_magnification, Common};

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Region container directory (`<id>.png`, `<id>.inst.png`, `<id>.classes.tsv`).
    #[arg(long)]
    pub regions: PathBuf,
    /// Output patch store; receives `manifest.tsv` and `{split}/{magnification}/` images.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.075)]
    pub test_fraction: f64,
    #[arg(long, default_value = "20x", value_parser = parse_magnification)]
    pub magnification: Magnification,
    #[arg(long, default_value_t = 0.5)]
    pub overlap: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output patch side; defaults to the preset image size.
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Region whose stain appearance all others are mapped to; defaults to the first id.
    #[arg(long)]
    pub stain_target: Option<String>,
    #[command(flatten)]
    pub common: Common,
}

pub fn run(a: PreprocessArgs) -> CliResult<()> {
    let cfg = resolve("preprocess", &a.common, Vec::new())?;
    let patch_size = a.patch_size.unwrap_or(cfg.model.image_size);
    if !(a.test_fraction > 0.0 && a.test_fraction < 1.0) {
        return Err(CliError::Usage(format!("--test-fraction must lie in (0, 1), got {}", a.test_fraction)));
    }
    let (window, _) =
        window_geometry(patch_size, a.magnification, a.overlap).map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = cfg
        .with_arg("regions", a.regions.display())
        .with_arg("out", a.out.display())
        .with_arg("test_fraction", a.test_fraction)
        .with_arg("magnification", a.magnification)
        .with_arg("overlap", a.overlap)
        .with_arg("seed", a.seed)
        .with_arg("patch_size", patch_size);

    // Every input is read and validated before anything is written.
    let ids = io::region_ids(&a.regions)?;
    let regions = ids.iter().map(|id| io::read_region(&a.regions, id)).collect::<CliResult<Vec<_>>>()?;
    let target_id = a.stain_target.clone().unwrap_or_else(|| ids[0].clone());
    let target = regions
        .iter()
        .find(|r| r.source_id == target_id)
        .ok_or_else(|| CliError::Data(format!("stain target {target_id} is not among the regions")))?;
    let params = StainParams::default();
    let target_profile: StainProfile<f64> = estimate_stain_profile(&target.image, &params)
        .map_err(|e| CliError::Data(format!("stain target {target_id}: {e}")))?;
    let cfg = cfg.with_arg("stain_target", &target_id);

    let guard = OutputGuard::acquire(&a.out, &cfg)?;
    let mut patches = Vec::new();
    let mut rejected = Vec::new();
    for region in &regions {
        let normalized = match estimate_stain_profile::<f64>(&region.image, &params) {
            Ok(p) => normalize_to_target(&region.image, &p, &target_profile, &params),
            Err(e) => {
                log::warn!("rejecting region {}: {e}", region.source_id);
                rejected.push(format!("{} ({e})", region.source_id));
                continue;
            }
        };
        let region = AnnotatedRegion { image: normalized, ..region.clone() };
        let split = match split_region(&region, a.test_fraction, a.seed, window) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("rejecting region {}: {e}", region.source_id);
                rejected.push(format!("{} ({e})", region.source_id));
                continue;
            }
        };
        for (zone, which) in [(&split.train, Split::Train), (&split.test, Split::Test)] {
            patches.extend(extract_patches(&region, zone, a.magnification, patch_size, a.overlap, which)?);
        }
        log::info!("{}: {} patches so far", region.source_id, patches.len());
    }
    if patches.is_empty() {
        return Err(CliError::Data("no patches could be extracted from any region".into()));
    }
    let mut manifest = build_manifest(&patches)?;
    let header = [
        ("region_container", io::REGION_CONTAINER.to_string()),
        ("patch_container", io::PATCH_CONTAINER.to_string()),
        ("stain_normalization", format!("region-level before patching; target region {target_id}")),
        ("test_fraction", a.test_fraction.to_string()),
        ("split_cell", window.to_string()),
        ("overlap", a.overlap.to_string()),
        ("seed", a.seed.to_string()),
        ("rejected_regions", if rejected.is_empty() { "none".into() } else { rejected.join("; ") }),
    ];
    for (k, v) in header {
        manifest.header.insert(k.to_string(), v);
    }
    let mut sorted: Vec<_> = patches.iter().collect();
    sorted.sort_by(|x, y| (&x.origin, x.magnification).cmp(&(&y.origin, y.magnification)));
    for (row, p) in manifest.rows.iter().zip(sorted) {
        io::write_patch(guard.dir(), row, p)?;
    }
    let mpath = guard.dir().join("manifest.tsv");
    fs::write(&mpath, manifest.to_tsv()).map_err(|e| io::data_err(&mpath, e))?;
    let spath = guard.dir().join("stain_target.tsv");
    fs::write(&spath, target_profile.to_table()).map_err(|e| io::data_err(&spath, e))?;
    log::info!(
        "{} train / {} test patches at {} -> {}",
        manifest.stats.split_total(Split::Train),
        manifest.stats.split_total(Split::Test),
        a.magnification,
        a.out.display()
    );
    guard.finish()
}
