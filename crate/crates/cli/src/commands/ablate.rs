use std::fs;
use std::path::PathBuf;

use clap::Args;
use nucleidiff_core::{Magnification, Split};
use nucleidiff_nn::checkpoint;

use crate::commands::{file_digest, generate, load_masks, real_features, resolve, score, select_rows, ExtractorArgs};
use crate::error::{CliError, CliResult};
use crate::io::{self, OutputGuard};
use crate::{parse_magnification, Common};

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest supplying held-out masks and the matching real patches.
    #[arg(long)]
    pub masks: PathBuf,
    /// Comma-separated guidance scales.
    #[arg(long, value_delimiter = ',', required = true)]
    pub scales: Vec<f64>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, value_parser = parse_magnification)]
    pub magnification: Option<Magnification>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub extractor: ExtractorArgs,
    #[command(flatten)]
    pub common: Common,
}

pub fn run(a: AblateArgs) -> CliResult<()> {
    if a.scales.is_empty() {
        return Err(CliError::Usage("--scales needs at least one value".into()));
    }
    let ckpt = checkpoint::load::<f32>(&a.checkpoint)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.checkpoint.display())))?;
    let mut cfg = resolve("ablate-guidance", &a.common, Vec::new())?;
    cfg.model = ckpt.meta.denoiser.clone();
    cfg.schedule = ckpt.meta.schedule;
    cfg.train = ckpt.meta.train.clone();
    let scales = a.scales.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    let mut cfg = cfg
        .with_arg("checkpoint", a.checkpoint.display())
        .with_arg("checkpoint_sha256", file_digest(&a.checkpoint)?)
        .with_arg("masks", a.masks.display())
        .with_arg("scales", scales)
        .with_arg("split", a.split)
        .with_arg("seed", a.seed)
        .with_arg("splits", a.extractor.splits)
        .with_arg("out", a.out.display());
    if let Some(n) = a.limit {
        cfg = cfg.with_arg("limit", n);
    }
    if let Some(s) = a.extractor.random_weights {
        cfg = cfg.with_arg("random_weights", s);
    }
    if let Some(w) = &a.extractor.weights {
        cfg = cfg.with_arg("weights", w.display());
    }

    let manifest = io::read_manifest(&a.masks)?;
    let rows = select_rows(&manifest.rows, a.split, a.magnification, cfg.model.image_size, a.limit);
    let masks = load_masks(&a.masks, &rows)?;
    let net = a.extractor.load()?;
    let schedule = ckpt.schedule()?;
    let mut model = ckpt.ema_model()?;

    let guard = OutputGuard::acquire(&a.out, &cfg)?;
    let s = masks.size;
    let fr = real_features(&net, &masks.reals, (s, s))?;
    let mut table = String::from("guidance_scale\tfid\tis_mean\tis_std\tn_real\tn_synthetic\tgrid\n");
    for &scale in &a.scales {
        let images = generate(&mut model, &schedule, &masks, a.seed, scale, a.batch)?;
        let report = score(&net, &fr, &images, (s, s), a.extractor.splits, a.extractor.random_weights.is_some())?;
        let grid_name = format!("grid_s{scale}.png");
        let (sheet, h, w) = io::grid(&images, s);
        io::write_rgb(&guard.dir().join(&grid_name), &sheet, h, w)?;
        table.push_str(&format!(
            "{scale}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{grid_name}\n",
            report.fid, report.is_mean, report.is_std, report.n_real, report.n_synthetic
        ));
        log::info!("s = {scale}: FID {:.4}, IS {:.4}", report.fid, report.is_mean);
        for w in &report.warnings {
            log::warn!("{w}");
        }
    }
    let tpath = guard.dir().join("ablation.tsv");
    fs::write(&tpath, &table).map_err(|e| io::data_err(&tpath, e))?;
    print!("{table}");
    guard.finish()
}
