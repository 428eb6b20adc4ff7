//! On-disk formats: region containers, the patch store, images and the
//! per-run output directory guard.
//!
//! A region container is a directory holding, per region `<id>`:
//! `<id>.png` (8-bit RGB), `<id>.inst.png` (16-bit grayscale instance map)
//! and `<id>.classes.tsv` (`instance_id<TAB>class_code` lines).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use nucleidiff_core::patch::ManifestRow;
use nucleidiff_core::{AnnotatedRegion, Manifest, NucleiClass, PatchRecord};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const REGION_CONTAINER: &str =
    "png-rgb8 image + png-gray16 instance map + tsv instance->class table (<id>.png, <id>.inst.png, <id>.classes.tsv)";
pub const PATCH_CONTAINER: &str = "png-rgb8 image + png-gray8 class map + png-gray16 instance map per patch";

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub fn write_rgb(path: &Path, rgb: &[u8], h: usize, w: usize) -> CliResult<()> {
    let img = RgbImage::from_raw(w as u32, h as u32, rgb.to_vec())
        .ok_or_else(|| data_err(path, "image buffer has the wrong size"))?;
    img.save(path).map_err(|e| data_err(path, e))
}

pub fn read_rgb(path: &Path) -> CliResult<(Vec<u8>, usize, usize)> {
    let img = image::open(path).map_err(|e| data_err(path, e))?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), h as usize, w as usize))
}

pub fn write_gray8(path: &Path, v: &[u8], h: usize, w: usize) -> CliResult<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, v.to_vec())
        .ok_or_else(|| data_err(path, "label buffer has the wrong size"))?;
    img.save(path).map_err(|e| data_err(path, e))
}

pub fn write_gray16(path: &Path, v: &[u32], h: usize, w: usize) -> CliResult<()> {
    let data = v
        .iter()
        .map(|&x| u16::try_from(x).map_err(|_| data_err(path, format!("instance id {x} exceeds 65535"))))
        .collect::<CliResult<Vec<u16>>>()?;
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| data_err(path, "label buffer has the wrong size"))?;
    img.save(path).map_err(|e| data_err(path, e))
}

/// Integer label image, 8- or 16-bit, read without rescaling.
pub fn read_labels(path: &Path) -> CliResult<(Vec<u32>, usize, usize)> {
    let img = image::open(path).map_err(|e| data_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let v = match img {
        image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
        image::DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(u32::from).collect(),
        other => return Err(data_err(path, format!("expected a grayscale label image, found {:?}", other.color()))),
    };
    Ok((v, h, w))
}

pub fn region_ids(dir: &Path) -> CliResult<Vec<String>> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("regions directory {} does not exist", dir.display())));
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| data_err(dir, e))? {
        let name = entry.map_err(|e| data_err(dir, e))?.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(".classes.tsv") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(CliError::Data(format!("no regions (*.classes.tsv) found in {}", dir.display())));
    }
    Ok(ids)
}

pub fn read_class_table(path: &Path) -> CliResult<BTreeMap<u32, NucleiClass>> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || CliError::Data(format!("{}:{}: expected `instance_id<TAB>class_code`", path.display(), i + 1));
        let (a, b) = line.split_once('\t').ok_or_else(bad)?;
        let id: u32 = a.trim().parse().map_err(|_| bad())?;
        let code: u32 = b.trim().parse().map_err(|_| bad())?;
        let class =
            NucleiClass::from_code(code).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.insert(id, class);
    }
    Ok(out)
}

pub fn read_region(dir: &Path, id: &str) -> CliResult<AnnotatedRegion> {
    let (image, h, w) = read_rgb(&dir.join(format!("{id}.png")))?;
    let inst_path = dir.join(format!("{id}.inst.png"));
    let (inst, ih, iw) = read_labels(&inst_path)?;
    if (ih, iw) != (h, w) {
        return Err(data_err(&inst_path, format!("instance map is {ih}x{iw}, image is {h}x{w}")));
    }
    let classes = read_class_table(&dir.join(format!("{id}.classes.tsv")))?;
    Ok(AnnotatedRegion::new(id, h, w, image, inst, classes)?)
}

pub fn write_region(dir: &Path, r: &AnnotatedRegion) -> CliResult<()> {
    write_rgb(&dir.join(format!("{}.png", r.source_id)), &r.image, r.height, r.width)?;
    write_gray16(&dir.join(format!("{}.inst.png", r.source_id)), &r.inst_map, r.height, r.width)?;
    let mut t = String::from("# instance_id\tclass_code\n");
    for (id, c) in &r.class_of_instance {
        t.push_str(&format!("{id}\t{}\n", c.code()));
    }
    let p = dir.join(format!("{}.classes.tsv", r.source_id));
    fs::write(&p, t).map_err(|e| data_err(&p, e))
}

pub fn write_patch(root: &Path, row: &ManifestRow, p: &PatchRecord) -> CliResult<()> {
    let dir = root.join(row.dir());
    fs::create_dir_all(&dir).map_err(|e| data_err(&dir, e))?;
    write_rgb(&root.join(row.image_path()), &p.pixels, p.size, p.size)?;
    write_gray8(&root.join(row.class_path()), &p.class_map, p.size, p.size)?;
    write_gray16(&root.join(row.inst_path()), &p.inst_map, p.size, p.size)
}

pub fn read_patch(root: &Path, row: &ManifestRow) -> CliResult<PatchRecord> {
    let (pixels, h, w) = read_rgb(&root.join(row.image_path()))?;
    let class_path = root.join(row.class_path());
    let (classes, ch, cw) = read_labels(&class_path)?;
    let (inst_map, ih, iw) = read_labels(&root.join(row.inst_path()))?;
    let s = row.size;
    if [h, w, ch, cw, ih, iw].iter().any(|&d| d != s) {
        return Err(CliError::Data(format!("patch {} does not match its manifest size {s}", row.id())));
    }
    let class_map = classes
        .into_iter()
        .map(|c| u8::try_from(c).map_err(|_| data_err(&class_path, format!("class code {c} out of range"))))
        .collect::<CliResult<_>>()?;
    Ok(PatchRecord {
        size: s,
        pixels,
        class_map,
        inst_map,
        magnification: row.magnification,
        origin: row.origin.clone(),
        split: row.split,
    })
}

pub fn read_manifest(path: &Path) -> CliResult<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    Manifest::parse_tsv(&text).map_err(|e| data_err(path, e))
}

/// Directory a manifest's relative paths resolve against.
pub fn manifest_root(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Every `*.png` under `dir` (recursively) except label sidecars and grids.
pub fn image_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    fn walk(d: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
        for entry in fs::read_dir(d).map_err(|e| data_err(d, e))? {
            let p = entry.map_err(|e| data_err(d, e))?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                let label = name.ends_with(".class.png") || name.ends_with(".inst.png");
                if name.ends_with(".png") && !label && !name.starts_with("grid_") {
                    out.push(p);
                }
            }
        }
        Ok(())
    }
    if !dir.is_dir() {
        return Err(CliError::Data(format!("image directory {} does not exist", dir.display())));
    }
    let mut out = Vec::new();
    walk(dir, &mut out)?;
    out.sort();
    Ok(out)
}

/// Tiles equally sized RGB images into a near-square grid.
pub fn grid(images: &[Vec<u8>], size: usize) -> (Vec<u8>, usize, usize) {
    let n = images.len().max(1);
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (h, w) = (rows * size, cols * size);
    let mut out = vec![255u8; h * w * 3];
    for (k, img) in images.iter().enumerate() {
        let (r0, c0) = ((k / cols) * size, (k % cols) * size);
        for y in 0..size {
            let dst = ((r0 + y) * w + c0) * 3;
            out[dst..dst + size * 3].copy_from_slice(&img[y * size * 3..(y + 1) * size * 3]);
        }
    }
    (out, h, w)
}

/// Exclusive claim on an output directory for the life of one command.
///
/// Creating the guard takes `.lock` (failing if another run holds it) and
/// drops an `INCOMPLETE` marker; [`OutputGuard::finish`] removes the marker.
/// A run that fails or is killed leaves the marker in place.
pub struct OutputGuard {
    dir: PathBuf,
}

impl OutputGuard {
    pub fn acquire(dir: &Path, config: &RunConfig) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| data_err(dir, e))?;
        let lock = dir.join(".lock");
        fs::OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                CliError::Data(format!(
                    "{} is locked by another run (remove {} if that run is gone)",
                    dir.display(),
                    lock.display()
                ))
            } else {
                data_err(&lock, e)
            }
        })?;
        let guard = Self { dir: dir.to_path_buf() };
        fs::write(dir.join("INCOMPLETE"), "this run did not finish; outputs here may be partial\n")
            .map_err(|e| data_err(dir, e))?;
        let name = format!("run_config.{}.txt", config.command);
        fs::write(dir.join(name), config.to_text()).map_err(|e| data_err(dir, e))?;
        fs::write(dir.join("VERSION"), format!("nucleidiff {VERSION}\n")).map_err(|e| data_err(dir, e))?;
        Ok(guard)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn finish(self) -> CliResult<()> {
        let marker = self.dir.join("INCOMPLETE");
        fs::remove_file(&marker).map_err(|e| data_err(&marker, e))
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.dir.join(".lock"));
    }
}
