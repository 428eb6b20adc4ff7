use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use nucleidiff_core::{Magnification, Split};
use nucleidiff_nn::checkpoint;
use nucleidiff_nn::{Denoiser, Phase, Trainer, TrainingSet};
use serde_json::json;

use crate::commands::{flag, resolve, select_rows};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{self, OutputGuard};
use crate::{parse_magnification, parse_phase, Common};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Patch manifest written by `preprocess`.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "main", value_parser = parse_phase)]
    pub phase: Phase,
    /// Continue from a checkpoint (default `<out>/last.safetensors`). Finetuning
    /// requires this, pointing at a main-phase checkpoint.
    #[arg(long, num_args = 0..=1, value_name = "CKPT")]
    pub resume: Option<Option<PathBuf>>,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict training patches to one magnification.
    #[arg(long, value_parser = parse_magnification)]
    pub magnification: Option<Magnification>,
    /// Step budget of the selected phase (`train.max_steps_<phase>`).
    #[arg(long)]
    pub steps: Option<u64>,
    /// Training seed (`train.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Batch size (`train.batch_size`).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Checkpoint cadence in steps (`train.checkpoint_every`).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

fn diff_json<T: serde::Serialize>(section: &str, a: &T, b: &T) -> Vec<String> {
    let a = serde_json::to_value(a).expect("serializable");
    let b = serde_json::to_value(b).expect("serializable");
    let (a, b) = (a.as_object().expect("object"), b.as_object().expect("object"));
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| format!("  {section}.{k}: checkpoint {} vs requested {v}", b.get(k).cloned().unwrap_or_default()))
        .collect()
}

fn build_trainer(a: &TrainArgs, cfg: &RunConfig) -> CliResult<Trainer<f32>> {
    let resume = a.resume.as_ref().map(|p| p.clone().unwrap_or_else(|| a.out.join("last.safetensors")));
    match resume {
        Some(path) => {
            let ckpt =
                checkpoint::load::<f32>(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let mut diff = diff_json("model", &cfg.model, &ckpt.meta.denoiser);
            diff.extend(diff_json("schedule", &cfg.schedule, &ckpt.meta.schedule));
            if !diff.is_empty() {
                return Err(CliError::Usage(format!(
                    "configuration does not match checkpoint {}:\n{}",
                    path.display(),
                    diff.join("\n")
                )));
            }
            log::info!("resuming from {} ({} step {})", path.display(), ckpt.meta.phase, ckpt.meta.step);
            ckpt.into_trainer(cfg.train.clone(), a.phase).map_err(|e| match e {
                nucleidiff_nn::Error::ConfigMismatch(d) => {
                    CliError::Usage(format!("configuration does not match checkpoint {}:\n{d}", path.display()))
                }
                other => other.into(),
            })
        }
        None if a.phase == Phase::Finetune => {
            Err(CliError::Usage("finetuning starts from a main-phase checkpoint: pass --resume <CKPT>".into()))
        }
        None => {
            let model = Denoiser::new(cfg.model.clone(), cfg.train.seed)?;
            Ok(Trainer::new(model, cfg.schedule.build()?, cfg.train.clone(), a.phase)?)
        }
    }
}

fn save(trainer: &mut Trainer<f32>, path: &Path) -> CliResult<()> {
    checkpoint::save(path, trainer).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn run(a: TrainArgs) -> CliResult<()> {
    let mut extra = Vec::new();
    if let Some(s) = a.steps {
        extra.push(flag("steps", &format!("train.max_steps_{}", a.phase), s));
    }
    if let Some(s) = a.seed {
        extra.push(flag("seed", "train.seed", s));
    }
    if let Some(b) = a.batch_size {
        extra.push(flag("batch-size", "train.batch_size", b));
    }
    if let Some(c) = a.checkpoint_every {
        extra.push(flag("checkpoint-every", "train.checkpoint_every", c));
    }
    let mut cfg = resolve("train", &a.common, extra)?
        .with_arg("manifest", a.manifest.display())
        .with_arg("phase", a.phase)
        .with_arg("out", a.out.display());
    if let Some(r) = &a.resume {
        cfg = cfg.with_arg("resume", r.as_ref().map_or("<out>/last.safetensors".into(), |p| p.display().to_string()));
    }
    if let Some(m) = a.magnification {
        cfg = cfg.with_arg("magnification", m);
    }

    let manifest = io::read_manifest(&a.manifest)?;
    let rows = select_rows(&manifest.rows, Split::Train, a.magnification, cfg.model.image_size, None);
    if rows.is_empty() {
        return Err(CliError::Data(format!(
            "{} has no training patches of size {}",
            a.manifest.display(),
            cfg.model.image_size
        )));
    }
    let root = io::manifest_root(&a.manifest);
    let records = rows.iter().map(|r| io::read_patch(&root, r)).collect::<CliResult<Vec<_>>>()?;
    let data = TrainingSet::<f32>::from_records(&records)?;
    let mut trainer = build_trainer(&a, &cfg)?;

    let guard = OutputGuard::acquire(&a.out, &cfg)?;
    let log_path = guard.dir().join("train_log.jsonl");
    let mut log_file =
        OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| io::data_err(&log_path, e))?;
    let phase = a.phase;
    let until = cfg.train.max_steps(phase);
    let every = cfg.train.checkpoint_every;
    let heartbeat = (until / 20).max(1);
    log::info!("training {phase} on {} patches: steps {} -> {until}", data.len(), trainer.step);
    let start = Instant::now();
    let first = trainer.step;
    while trainer.step < until {
        let r = trainer.train_step(&data)?;
        let elapsed = start.elapsed().as_secs_f64();
        let line = json!({
            "phase": phase.to_string(),
            "step": r.step,
            "l_simple": r.loss.l_simple,
            "l_vlb": r.loss.l_vlb,
            "l_hybrid": r.loss.l_hybrid,
            "lr": r.lr,
            "grad_norm": r.grad_norm,
            "null_masks": r.null_masks,
            "steps_per_sec": (r.step - first) as f64 / elapsed.max(1e-9),
        });
        writeln!(log_file, "{line}").map_err(|e| io::data_err(&log_path, e))?;
        if r.step % heartbeat == 0 {
            log::info!(
                "{phase} step {}/{until} l_simple {:.4} l_vlb {:.4} ({elapsed:.0}s)",
                r.step,
                r.loss.l_simple,
                r.loss.l_vlb
            );
        }
        if every > 0 && r.step % every == 0 && r.step < until {
            save(&mut trainer, &guard.dir().join(format!("ckpt_{phase}_{:07}.safetensors", r.step)))?;
            save(&mut trainer, &guard.dir().join("last.safetensors"))?;
        }
    }
    let final_path = guard.dir().join(format!("final_{phase}.safetensors"));
    save(&mut trainer, &final_path)?;
    save(&mut trainer, &guard.dir().join("last.safetensors"))?;
    log::info!("wrote {}", final_path.display());
    guard.finish()
}
