//! Held-out splitting of annotated regions and overlapping patch extraction.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{NucleiClass, NUM_CLASS_CHANNELS};

/// A stained tissue region with instance-level nuclei annotation.
#[derive(Debug, Clone)]
pub struct AnnotatedRegion {
    pub source_id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major interleaved RGB.
    pub image: Vec<u8>,
    /// 0 = background, k > 0 = instance id.
    pub inst_map: Vec<u32>,
    pub class_of_instance: BTreeMap<u32, NucleiClass>,
}

impl AnnotatedRegion {
    pub fn new(
        source_id: impl Into<String>,
        height: usize,
        width: usize,
        image: Vec<u8>,
        inst_map: Vec<u32>,
        class_of_instance: BTreeMap<u32, NucleiClass>,
    ) -> Result<Self> {
        let source_id = source_id.into();
        if image.len() != height * width * 3 {
            return Err(Error::InvalidAnnotation(format!(
                "{source_id}: image holds {} bytes, expected {height}x{width}x3",
                image.len()
            )));
        }
        if inst_map.len() != height * width {
            return Err(Error::InvalidAnnotation(format!(
                "{source_id}: instance map holds {} values, expected {height}x{width}",
                inst_map.len()
            )));
        }
        for &id in &inst_map {
            if id != 0 {
                match class_of_instance.get(&id) {
                    None => return Err(Error::InvalidAnnotation(format!("{source_id}: instance {id} has no class"))),
                    Some(NucleiClass::Background) => {
                        return Err(Error::InvalidAnnotation(format!(
                            "{source_id}: instance {id} is labelled background"
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(Self { source_id, height, width, image, inst_map, class_of_instance })
    }

    /// Per-pixel class codes derived from the instance map.
    pub fn class_map(&self) -> Vec<u8> {
        self.inst_map.iter().map(|id| if *id == 0 { 0 } else { self.class_of_instance[id].code() }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(row: usize, col: usize, height: usize, width: usize) -> Self {
        Self { row, col, height, width }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn intersection_area(&self, other: &Rect) -> usize {
        let r0 = self.row.max(other.row);
        let r1 = (self.row + self.height).min(other.row + other.height);
        let c0 = self.col.max(other.col);
        let c1 = (self.col + self.width).min(other.col + other.width);
        r1.saturating_sub(r0) * c1.saturating_sub(c0)
    }

    pub fn contains_point(&self, row: usize, col: usize) -> bool {
        row >= self.row && row < self.row + self.height && col >= self.col && col < self.col + self.width
    }
}

/// Union of pairwise disjoint rectangles.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Zone {
    rects: Vec<Rect>,
}

impl Zone {
    /// Fails if any two rectangles overlap.
    pub fn new(rects: Vec<Rect>) -> Result<Self> {
        let rects: Vec<Rect> = rects.into_iter().filter(|r| r.area() > 0).collect();
        for (i, a) in rects.iter().enumerate() {
            if rects[i + 1..].iter().any(|b| a.intersection_area(b) > 0) {
                return Err(Error::InvalidArgument(format!("zone rectangles overlap at {a:?}")));
            }
        }
        Ok(Self { rects })
    }

    pub fn rects(&self) -> &[Rect] {
        &self.rects
    }

    pub fn area(&self) -> usize {
        self.rects.iter().map(Rect::area).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }

    /// Whether `r` lies entirely inside the union.
    pub fn contains(&self, r: &Rect) -> bool {
        self.rects.iter().map(|z| z.intersection_area(r)).sum::<usize>() == r.area()
    }

    pub fn contains_point(&self, row: usize, col: usize) -> bool {
        self.rects.iter().any(|r| r.contains_point(row, col))
    }

    pub fn bounding_box(&self) -> Option<Rect> {
        let r0 = self.rects.iter().map(|r| r.row).min()?;
        let c0 = self.rects.iter().map(|r| r.col).min()?;
        let r1 = self.rects.iter().map(|r| r.row + r.height).max()?;
        let c1 = self.rects.iter().map(|r| r.col + r.width).max()?;
        Some(Rect::new(r0, c0, r1 - r0, c1 - c0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionSplit {
    pub train: Zone,
    pub test: Zone,
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Holds out `test_fraction` of the region as randomly chosen `cell x cell`
/// squares on the cell grid. Everything else, including the ragged margin
/// that does not fill a whole cell, forms the training zone.
pub fn split_region(region: &AnnotatedRegion, test_fraction: f64, rng_seed: u64, cell: usize) -> Result<RegionSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    if cell == 0 {
        return Err(Error::InvalidArgument("cell size must be positive".into()));
    }
    let (h, w) = (region.height, region.width);
    if h < cell || w < cell {
        return Err(Error::RegionTooSmall { source_id: region.source_id.clone(), height: h, width: w, patch: cell });
    }
    let (rows, cols) = (h / cell, w / cell);
    let n_cells = rows * cols;
    let wanted = (test_fraction * (h * w) as f64 / (cell * cell) as f64).round() as usize;
    let n_test = wanted.clamp(1, if n_cells > 1 { n_cells - 1 } else { 1 });

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ fnv1a(region.source_id.as_bytes()));
    let mut is_test = vec![false; n_cells];
    for i in index::sample(&mut rng, n_cells, n_test) {
        is_test[i] = true;
    }

    let mut test = Vec::new();
    let mut train = Vec::new();
    for gr in 0..rows {
        let row = gr * cell;
        let mut run_start: Option<usize> = None;
        for gc in 0..cols {
            if is_test[gr * cols + gc] {
                test.push(Rect::new(row, gc * cell, cell, cell));
                if let Some(s) = run_start.take() {
                    train.push(Rect::new(row, s * cell, cell, (gc - s) * cell));
                }
            } else if run_start.is_none() {
                run_start = Some(gc);
            }
        }
        match run_start {
            Some(s) => train.push(Rect::new(row, s * cell, cell, w - s * cell)),
            None => train.push(Rect::new(row, cols * cell, cell, w - cols * cell)),
        }
    }
    train.push(Rect::new(rows * cell, 0, h - rows * cell, w));
    Ok(RegionSplit { train: Zone::new(train)?, test: Zone::new(test)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Magnification {
    X20,
    X10,
}

impl Magnification {
    /// Native pixels per output pixel along each axis.
    pub fn factor(self) -> usize {
        match self {
            Magnification::X20 => 1,
            Magnification::X10 => 2,
        }
    }
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Magnification::X20 => "20x",
            Magnification::X10 => "10x",
        })
    }
}

impl FromStr for Magnification {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "20x" | "20" => Ok(Magnification::X20),
            "10x" | "10" => Ok(Magnification::X10),
            other => Err(Error::InvalidArgument(format!("unknown magnification '{other}' (expected 20x or 10x)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub source_id: String,
    /// Top-left corner of the extraction window in native region pixels.
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub size: usize,
    /// `size x size x 3` interleaved RGB.
    pub pixels: Vec<u8>,
    pub class_map: Vec<u8>,
    pub inst_map: Vec<u32>,
    pub magnification: Magnification,
    pub origin: PatchOrigin,
    pub split: Split,
}

impl PatchRecord {
    pub fn id(&self) -> String {
        patch_id(&self.origin, self.magnification)
    }
}

pub fn patch_id(origin: &PatchOrigin, mag: Magnification) -> String {
    format!("{}_{}_r{}_c{}", origin.source_id, mag, origin.row, origin.col)
}

/// Window geometry `(window, stride)` in native pixels.
pub fn window_geometry(patch_size: usize, mag: Magnification, overlap: f64) -> Result<(usize, usize)> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!("overlap must lie in [0, 1), got {overlap}")));
    }
    let window = patch_size * mag.factor();
    let stride = ((window as f64) * (1.0 - overlap)).round() as usize;
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!("degenerate window {window} / stride {stride}")));
    }
    Ok((window, stride))
}

/// Top-left corners of every window that fits inside `zone`, anchored on the
/// stride lattice starting at the zone's bounding-box corner.
pub fn window_origins(zone: &Zone, window: usize, stride: usize) -> Vec<(usize, usize)> {
    let Some(bb) = zone.bounding_box() else { return Vec::new() };
    let mut out = Vec::new();
    let mut r = bb.row;
    while r + window <= bb.row + bb.height {
        let mut c = bb.col;
        while c + window <= bb.col + bb.width {
            if zone.contains(&Rect::new(r, c, window, window)) {
                out.push((r, c));
            }
            c += stride;
        }
        r += stride;
    }
    out
}

/// Crops every fitting window and brings it to `patch_size` pixels:
/// images by area averaging, label maps by nearest neighbour.
pub fn extract_patches(
    region: &AnnotatedRegion,
    zone: &Zone,
    magnification: Magnification,
    patch_size: usize,
    overlap: f64,
    split: Split,
) -> Result<Vec<PatchRecord>> {
    let (window, stride) = window_geometry(patch_size, magnification, overlap)?;
    let f = magnification.factor();
    let class_full = region.class_map();
    let w = region.width;
    let mut out = Vec::new();
    for (r0, c0) in window_origins(zone, window, stride) {
        if r0 + window > region.height || c0 + window > region.width {
            continue;
        }
        let n = patch_size * patch_size;
        let mut pixels = Vec::with_capacity(n * 3);
        let mut class_map = Vec::with_capacity(n);
        let mut inst_map = Vec::with_capacity(n);
        for i in 0..patch_size {
            for j in 0..patch_size {
                for ch in 0..3 {
                    let mut sum = 0u32;
                    for di in 0..f {
                        for dj in 0..f {
                            sum += region.image[((r0 + i * f + di) * w + c0 + j * f + dj) * 3 + ch] as u32;
                        }
                    }
                    let cnt = (f * f) as u32;
                    pixels.push(((sum + cnt / 2) / cnt) as u8);
                }
                let src = (r0 + i * f + f / 2) * w + c0 + j * f + f / 2;
                class_map.push(class_full[src]);
                inst_map.push(region.inst_map[src]);
            }
        }
        out.push(PatchRecord {
            size: patch_size,
            pixels,
            class_map,
            inst_map,
            magnification,
            origin: PatchOrigin { source_id: region.source_id.clone(), row: r0, col: c0 },
            split,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ManifestRow {
    pub origin: PatchOrigin,
    pub magnification: Magnification,
    pub split: Split,
    pub size: usize,
}

impl ManifestRow {
    pub fn id(&self) -> String {
        patch_id(&self.origin, self.magnification)
    }

    /// Store directory of this row, relative to the manifest.
    pub fn dir(&self) -> String {
        format!("{}/{}", self.split, self.magnification)
    }

    pub fn image_path(&self) -> String {
        format!("{}/{}.png", self.dir(), self.id())
    }

    pub fn class_path(&self) -> String {
        format!("{}/{}.class.png", self.dir(), self.id())
    }

    pub fn inst_path(&self) -> String {
        format!("{}/{}.inst.png", self.dir(), self.id())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ManifestStats {
    pub counts: BTreeMap<(Split, Magnification), usize>,
    pub class_pixels: [u64; NUM_CLASS_CHANNELS],
}

impl ManifestStats {
    pub fn count(&self, split: Split, mag: Magnification) -> usize {
        self.counts.get(&(split, mag)).copied().unwrap_or(0)
    }

    pub fn split_total(&self, split: Split) -> usize {
        self.counts.iter().filter(|((s, _), _)| *s == split).map(|(_, n)| n).sum()
    }

    pub fn class_frequencies(&self) -> [f64; NUM_CLASS_CHANNELS] {
        let total: u64 = self.class_pixels.iter().sum();
        let mut out = [0.0; NUM_CLASS_CHANNELS];
        if total > 0 {
            for (o, &c) in out.iter_mut().zip(&self.class_pixels) {
                *o = c as f64 / total as f64;
            }
        }
        out
    }
}

/// Ordered patch metadata plus dataset-level statistics and free-form header
/// entries (container format, normalization notes, run settings).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub stats: ManifestStats,
    pub header: BTreeMap<String, String>,
}

const MANIFEST_MAGIC: &str = "# nucleidiff patch manifest v1";
const MANIFEST_COLUMNS: &str = "id\tsplit\tmagnification\tsource_id\trow\tcol\tsize\timage\tclass_map\tinst_map";

/// Canonically ordered manifest; rejects duplicate (source, origin, magnification).
pub fn build_manifest(patches: &[PatchRecord]) -> Result<Manifest> {
    if patches.is_empty() {
        return Err(Error::InvalidArgument("cannot build a manifest from zero patches".into()));
    }
    let mut rows: Vec<ManifestRow> = patches
        .iter()
        .map(|p| ManifestRow { origin: p.origin.clone(), magnification: p.magnification, split: p.split, size: p.size })
        .collect();
    rows.sort();
    for pair in rows.windows(2) {
        if pair[0].origin == pair[1].origin && pair[0].magnification == pair[1].magnification {
            return Err(Error::DuplicatePatch(pair[0].id()));
        }
    }
    let mut stats = ManifestStats::default();
    for r in &rows {
        *stats.counts.entry((r.split, r.magnification)).or_default() += 1;
    }
    for p in patches {
        for &c in &p.class_map {
            if (c as usize) < NUM_CLASS_CHANNELS {
                stats.class_pixels[c as usize] += 1;
            }
        }
    }
    Ok(Manifest { rows, stats, header: BTreeMap::new() })
}

impl Manifest {
    /// Line-delimited tab-separated table with `# key: value` header lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        s.push_str(MANIFEST_MAGIC);
        s.push('\n');
        for (k, v) in &self.header {
            s.push_str(&format!("# {k}: {v}\n"));
        }
        for ((split, mag), n) in &self.stats.counts {
            s.push_str(&format!("# count.{split}.{mag}: {n}\n"));
        }
        for (c, n) in NucleiClass::ALL.iter().zip(&self.stats.class_pixels) {
            s.push_str(&format!("# class_pixels.{}: {n}\n", c.name()));
        }
        s.push_str(MANIFEST_COLUMNS);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.id(),
                r.split,
                r.magnification,
                r.origin.source_id,
                r.origin.row,
                r.origin.col,
                r.size,
                r.image_path(),
                r.class_path(),
                r.inst_path()
            ));
        }
        s
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::InvalidArgument(format!("manifest line {line}: {msg}"));
        let mut m = Manifest::default();
        let mut seen_columns = false;
        for (i, line) in text.lines().enumerate() {
            let ln = i + 1;
            if line.trim().is_empty() || line == MANIFEST_MAGIC {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# ") {
                let Some((k, v)) = rest.split_once(": ") else { continue };
                if let Some(key) = k.strip_prefix("count.") {
                    let (s, mg) = key.split_once('.').ok_or_else(|| bad(ln, format!("bad count key {k}")))?;
                    let n = v.parse().map_err(|_| bad(ln, format!("bad count {v}")))?;
                    m.stats.counts.insert((s.parse()?, mg.parse()?), n);
                } else if let Some(name) = k.strip_prefix("class_pixels.") {
                    let c = NucleiClass::ALL
                        .iter()
                        .position(|c| c.name() == name)
                        .ok_or_else(|| bad(ln, format!("unknown class {name}")))?;
                    m.stats.class_pixels[c] = v.parse().map_err(|_| bad(ln, format!("bad pixel count {v}")))?;
                } else {
                    m.header.insert(k.to_string(), v.to_string());
                }
                continue;
            }
            if !seen_columns {
                if line != MANIFEST_COLUMNS {
                    return Err(bad(ln, "unexpected column header".into()));
                }
                seen_columns = true;
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 10 {
                return Err(bad(ln, format!("expected 10 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(ln, format!("bad integer {s}")));
            let row = ManifestRow {
                split: f[1].parse()?,
                magnification: f[2].parse()?,
                origin: PatchOrigin { source_id: f[3].to_string(), row: num(f[4])?, col: num(f[5])? },
                size: num(f[6])?,
            };
            if row.id() != f[0] {
                return Err(bad(ln, format!("id {} does not match its fields", f[0])));
            }
            m.rows.push(row);
        }
        let mut counted: BTreeMap<(Split, Magnification), usize> = BTreeMap::new();
        for r in &m.rows {
            *counted.entry((r.split, r.magnification)).or_default() += 1;
        }
        if counted != m.stats.counts {
            return Err(Error::InvalidArgument("manifest counts disagree with its rows".into()));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn blank_region(id: &str, h: usize, w: usize) -> AnnotatedRegion {
        AnnotatedRegion::new(id, h, w, vec![200; h * w * 3], vec![0; h * w], BTreeMap::new()).unwrap()
    }

    #[test]
    fn region_validation() {
        assert!(AnnotatedRegion::new("a", 2, 2, vec![0; 11], vec![0; 4], BTreeMap::new()).is_err());
        assert!(AnnotatedRegion::new("a", 2, 2, vec![0; 12], vec![0, 1, 0, 0], BTreeMap::new()).is_err());
        let classes = BTreeMap::from([(1, NucleiClass::Plasma)]);
        let r = AnnotatedRegion::new("a", 2, 2, vec![0; 12], vec![0, 1, 0, 0], classes).unwrap();
        assert_eq!(r.class_map(), vec![0, 4, 0, 0]);
    }

    #[test]
    fn quadrant_split_is_one_cell() {
        let region = blank_region("r", 256, 256);
        let quadrants = [
            Rect::new(0, 0, 128, 128),
            Rect::new(0, 128, 128, 128),
            Rect::new(128, 0, 128, 128),
            Rect::new(128, 128, 128, 128),
        ];
        for seed in 0..20 {
            let s = split_region(&region, 0.25, seed, 128).unwrap();
            assert_eq!(s.test.rects().len(), 1);
            assert!(quadrants.contains(&s.test.rects()[0]));
            assert_eq!(s.test.area() as f64 / (256.0 * 256.0), 0.25);
            assert_eq!(s.train.area() + s.test.area(), 256 * 256);
        }
    }

    #[test]
    fn split_is_deterministic_and_rejects_small_regions() {
        let region = blank_region("r", 700, 900);
        assert_eq!(split_region(&region, 0.075, 3, 128).unwrap(), split_region(&region, 0.075, 3, 128).unwrap());
        assert!(matches!(split_region(&blank_region("s", 100, 300), 0.075, 0, 128), Err(Error::RegionTooSmall { .. })));
        assert!(split_region(&region, 0.0, 0, 128).is_err());
        assert!(split_region(&region, 1.0, 0, 128).is_err());
    }

    #[test]
    fn nine_windows_in_256_square() {
        let zone = Zone::new(vec![Rect::new(0, 0, 256, 256)]).unwrap();
        let (window, stride) = window_geometry(128, Magnification::X20, 0.5).unwrap();
        assert_eq!((window, stride), (128, 64));
        assert_eq!(window_origins(&zone, window, stride).len(), 9);
        let region = blank_region("r", 256, 256);
        assert_eq!(extract_patches(&region, &zone, Magnification::X20, 128, 0.5, Split::Train).unwrap().len(), 9);
        // 10x: one 256 window, resized to 128
        let p = extract_patches(&region, &zone, Magnification::X10, 128, 0.5, Split::Train).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].pixels.len(), 128 * 128 * 3);
    }

    #[test]
    fn small_zone_yields_no_patches() {
        let zone = Zone::new(vec![Rect::new(0, 0, 100, 300)]).unwrap();
        let region = blank_region("r", 300, 300);
        assert!(extract_patches(&region, &zone, Magnification::X20, 128, 0.5, Split::Test).unwrap().is_empty());
    }

    #[test]
    fn ten_x_resize_keeps_label_values() {
        let mut inst = vec![0u32; 64 * 64];
        for y in 10..30 {
            for x in 5..40 {
                inst[y * 64 + x] = if x < 20 { 1 } else { 2 };
            }
        }
        let classes = BTreeMap::from([(1, NucleiClass::Eosinophil), (2, NucleiClass::Connective)]);
        let region = AnnotatedRegion::new("r", 64, 64, vec![90; 64 * 64 * 3], inst, classes).unwrap();
        let zone = Zone::new(vec![Rect::new(0, 0, 64, 64)]).unwrap();
        let p = &extract_patches(&region, &zone, Magnification::X10, 32, 0.5, Split::Train).unwrap()[0];
        assert!(p.class_map.iter().all(|c| [0u8, 5, 6].contains(c)));
        for (c, i) in p.class_map.iter().zip(&p.inst_map) {
            assert_eq!(*c == 0, *i == 0);
        }
    }

    #[test]
    fn manifest_orders_counts_and_rejects_duplicates() {
        let region = blank_region("b", 256, 256);
        let zone = Zone::new(vec![Rect::new(0, 0, 256, 256)]).unwrap();
        let mut patches = extract_patches(&region, &zone, Magnification::X20, 128, 0.5, Split::Train).unwrap();
        let m = build_manifest(&patches).unwrap();
        assert_eq!(m.stats.count(Split::Train, Magnification::X20), 9);
        assert_eq!(m.stats.split_total(Split::Test), 0);
        patches.reverse();
        assert_eq!(build_manifest(&patches).unwrap(), m);
        let dup = patches[0].clone();
        patches.push(dup);
        assert!(matches!(build_manifest(&patches), Err(Error::DuplicatePatch(_))));
        assert!(build_manifest(&[]).is_err());
    }

    #[test]
    fn manifest_text_round_trip() {
        let region = blank_region("b", 256, 256);
        let zone = Zone::new(vec![Rect::new(0, 0, 256, 256)]).unwrap();
        let patches = extract_patches(&region, &zone, Magnification::X20, 128, 0.5, Split::Test).unwrap();
        let mut m = build_manifest(&patches).unwrap();
        m.header.insert("container".into(), "png".into());
        let back = Manifest::parse_tsv(&m.to_tsv()).unwrap();
        assert_eq!(back, m);
        let broken = m.to_tsv().replace("\t128\ttest/", "\tx\ttest/");
        assert!(Manifest::parse_tsv(&broken).is_err());
    }
}
