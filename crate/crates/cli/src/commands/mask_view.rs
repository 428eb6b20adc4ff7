use std::path::{Path, PathBuf};

use clap::Args;
use nucleidiff_core::mask::EDGE_CHANNEL;
use nucleidiff_core::{encode, NucleiClass, COND_CHANNELS};

use crate::commands::resolve;
use crate::error::{CliError, CliResult};
use crate::io::{self, OutputGuard};
use crate::Common;

#[derive(Debug, Args)]
pub struct MaskViewArgs {
    /// Patch manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Patch id as listed in the manifest.
    #[arg(long)]
    pub patch: String,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

/// Display colour of each class channel.
pub fn class_color(class: NucleiClass) -> [u8; 3] {
    match class {
        NucleiClass::Background => [40, 40, 40],
        NucleiClass::Neutrophil => [0, 200, 255],
        NucleiClass::Epithelial => [255, 80, 80],
        NucleiClass::Lymphocyte => [80, 255, 80],
        NucleiClass::Plasma => [80, 80, 255],
        NucleiClass::Eosinophil => [255, 220, 0],
        NucleiClass::Connective => [255, 140, 255],
    }
}

/// A 3x3 sheet: the patch, a colour-coded class map with edges in white,
/// and the eight conditioning channels 0..=7 as binary tiles (last cell blank).
pub fn render(pixels: &[u8], class_map: &[u8], inst_map: &[u32], size: usize) -> CliResult<(Vec<u8>, usize, usize)> {
    let m = encode(class_map, inst_map, size, size)?;
    let mut tiles = vec![pixels.to_vec()];
    let mut overlay = Vec::with_capacity(size * size * 3);
    for p in 0..size * size {
        let rgb = if m.channel(EDGE_CHANNEL)[p] == 1 {
            [255, 255, 255]
        } else {
            class_color(NucleiClass::from_code(class_map[p] as u32)?)
        };
        overlay.extend_from_slice(&rgb);
    }
    tiles.push(overlay);
    for c in 0..COND_CHANNELS {
        tiles.push(m.channel(c).iter().flat_map(|&v| [v * 255; 3]).collect());
    }
    Ok(io::grid(&tiles, size))
}

pub fn run(a: MaskViewArgs) -> CliResult<()> {
    let cfg = resolve("mask-view", &a.common, Vec::new())?
        .with_arg("manifest", a.manifest.display())
        .with_arg("patch", &a.patch)
        .with_arg("out", a.out.display());
    let manifest = io::read_manifest(&a.manifest)?;
    let row = manifest
        .rows
        .iter()
        .find(|r| r.id() == a.patch)
        .ok_or_else(|| CliError::Data(format!("patch {} is not in {}", a.patch, a.manifest.display())))?;
    let p = io::read_patch(&io::manifest_root(&a.manifest), row)?;
    let (sheet, h, w) = render(&p.pixels, &p.class_map, &p.inst_map, p.size)?;
    let out_dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    let guard = OutputGuard::acquire(&out_dir, &cfg)?;
    io::write_rgb(&a.out, &sheet, h, w)?;
    guard.finish()
}
