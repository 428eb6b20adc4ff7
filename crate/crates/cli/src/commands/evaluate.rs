use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;

use crate::commands::{real_features, resolve, score, ExtractorArgs};
use crate::error::{CliError, CliResult};
use crate::io::{self, OutputGuard};
use crate::Common;

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of real images (searched recursively; label sidecars are skipped).
    #[arg(long)]
    pub real: PathBuf,
    /// Directory of synthetic images.
    #[arg(long)]
    pub fake: PathBuf,
    /// Plain-text report path; a JSON copy is written next to it.
    #[arg(long)]
    pub report: PathBuf,
    #[command(flatten)]
    pub extractor: ExtractorArgs,
    #[command(flatten)]
    pub common: Common,
}

/// Loads every image in `dir`; all must share one size.
pub fn load_dir(dir: &Path) -> CliResult<(Vec<Vec<u8>>, (usize, usize))> {
    let files = io::image_files(dir)?;
    if files.len() < 2 {
        return Err(CliError::Data(format!("{} holds {} images; at least 2 are needed", dir.display(), files.len())));
    }
    let mut images = Vec::with_capacity(files.len());
    let mut hw = None;
    for f in &files {
        let (img, h, w) = io::read_rgb(f)?;
        match hw {
            None => hw = Some((h, w)),
            Some(s) if s != (h, w) => {
                return Err(io::data_err(f, format!("image is {h}x{w}, expected {}x{}", s.0, s.1)));
            }
            _ => {}
        }
        images.push(img);
    }
    Ok((images, hw.expect("non-empty")))
}

pub fn run(a: EvaluateArgs) -> CliResult<()> {
    let mut cfg = resolve("evaluate", &a.common, Vec::new())?
        .with_arg("real", a.real.display())
        .with_arg("fake", a.fake.display())
        .with_arg("report", a.report.display())
        .with_arg("splits", a.extractor.splits);
    if let Some(w) = &a.extractor.weights {
        cfg = cfg.with_arg("weights", w.display());
    }
    if let Some(s) = a.extractor.random_weights {
        cfg = cfg.with_arg("random_weights", s);
    }
    let (real, real_hw) = load_dir(&a.real)?;
    let (fake, fake_hw) = load_dir(&a.fake)?;
    let net = a.extractor.load()?;
    let out_dir = a.report.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    let guard = OutputGuard::acquire(&out_dir, &cfg)?;
    let fr = real_features(&net, &real, real_hw)?;
    let report = score(&net, &fr, &fake, fake_hw, a.extractor.splits, a.extractor.random_weights.is_some())?;
    fs::write(&a.report, report.to_text()).map_err(|e| io::data_err(&a.report, e))?;
    let json_path = a.report.with_extension("json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&json_path, json).map_err(|e| io::data_err(&json_path, e))?;
    print!("{}", report.to_text());
    guard.finish()
}
