use std::fs;
use std::path::PathBuf;

use clap::Args;
use nucleidiff_core::{Magnification, Split};
use nucleidiff_nn::checkpoint;

use crate::commands::{file_digest, generate, load_masks, resolve, select_rows};
use crate::error::{CliError, CliResult};
use crate::io::{self, OutputGuard};
use crate::{parse_magnification, Common};

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest whose label maps supply the conditioning masks.
    #[arg(long)]
    pub masks: PathBuf,
    /// Manifest split to draw masks from.
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, value_parser = parse_magnification)]
    pub magnification: Option<Magnification>,
    /// Use at most this many masks.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Classifier-free guidance scale s (0 = plain conditional sampling).
    #[arg(long, default_value_t = 0.0)]
    pub guidance_scale: f64,
    /// Mask i is sampled with seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Sample with the raw weights instead of the EMA weights.
    #[arg(long)]
    pub raw_weights: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

pub fn run(a: SampleArgs) -> CliResult<()> {
    let ckpt = checkpoint::load::<f32>(&a.checkpoint)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.checkpoint.display())))?;
    let mut cfg = resolve("sample", &a.common, Vec::new())?;
    cfg.model = ckpt.meta.denoiser.clone();
    cfg.schedule = ckpt.meta.schedule;
    cfg.train = ckpt.meta.train.clone();
    let mut cfg = cfg
        .with_arg("checkpoint", a.checkpoint.display())
        .with_arg("checkpoint_sha256", file_digest(&a.checkpoint)?)
        .with_arg("masks", a.masks.display())
        .with_arg("split", a.split)
        .with_arg("guidance_scale", a.guidance_scale)
        .with_arg("seed", a.seed)
        .with_arg("raw_weights", a.raw_weights)
        .with_arg("out", a.out.display());
    if let Some(n) = a.limit {
        cfg = cfg.with_arg("limit", n);
    }
    if let Some(m) = a.magnification {
        cfg = cfg.with_arg("magnification", m);
    }

    let manifest = io::read_manifest(&a.masks)?;
    let rows = select_rows(&manifest.rows, a.split, a.magnification, cfg.model.image_size, a.limit);
    let masks = load_masks(&a.masks, &rows)?;
    let schedule = ckpt.schedule()?;
    let mut model = if a.raw_weights { ckpt.model.clone() } else { ckpt.ema_model()? };

    let guard = OutputGuard::acquire(&a.out, &cfg)?;
    let images = generate(&mut model, &schedule, &masks, a.seed, a.guidance_scale, a.batch)?;
    let dir = guard.dir().join("images");
    fs::create_dir_all(&dir).map_err(|e| io::data_err(&dir, e))?;
    let mut table = String::from("index\tmask_id\tseed\tguidance_scale\timage\n");
    for (i, (id, img)) in masks.ids.iter().zip(&images).enumerate() {
        let name = format!("images/{id}.png");
        io::write_rgb(&guard.dir().join(&name), img, masks.size, masks.size)?;
        table.push_str(&format!("{i}\t{id}\t{}\t{}\t{name}\n", a.seed.wrapping_add(i as u64), a.guidance_scale));
    }
    let tpath = guard.dir().join("samples.tsv");
    fs::write(&tpath, table).map_err(|e| io::data_err(&tpath, e))?;
    log::info!("wrote {} samples to {}", images.len(), a.out.display());
    guard.finish()
}
