use std::path::PathBuf;

use clap::Args;
use nucleidiff_core::synth::{synthetic_region, SynthParams};

use crate::commands::resolve;
use crate::error::CliResult;
use crate::io::{self, OutputGuard};
use crate::Common;

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output region container directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Region side length in pixels.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Expected nuclei per 10 000 pixels.
    #[arg(long, default_value_t = 12.0)]
    pub density: f64,
    /// Relative stain-vector perturbation applied to every region but the first.
    #[arg(long, default_value_t = 0.15)]
    pub color_cast: f64,
    #[command(flatten)]
    pub common: Common,
}

pub fn run(a: SynthArgs) -> CliResult<()> {
    let cfg = resolve("synth-regions", &a.common, Vec::new())?
        .with_arg("out", a.out.display())
        .with_arg("count", a.count)
        .with_arg("seed", a.seed)
        .with_arg("size", a.size)
        .with_arg("density", a.density)
        .with_arg("color_cast", a.color_cast);
    let guard = OutputGuard::acquire(&a.out, &cfg)?;
    for i in 0..a.count {
        let base = SynthParams { height: a.size, width: a.size, nuclei_density: a.density, ..SynthParams::default() };
        let params = if i == 0 {
            base
        } else {
            base.with_color_cast(a.seed.wrapping_mul(7919).wrapping_add(i as u64), a.color_cast)
        };
        let region = synthetic_region(&format!("region{i:03}"), a.seed.wrapping_add(i as u64), &params)?;
        io::write_region(guard.dir(), &region)?;
    }
    log::info!("wrote {} regions to {}", a.count, a.out.display());
    guard.finish()
}
