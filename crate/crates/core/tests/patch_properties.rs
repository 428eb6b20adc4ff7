use std::collections::BTreeMap;

use nucleidiff_core::patch::{build_manifest, extract_patches, split_region, window_origins, Manifest, Rect, Zone};
use nucleidiff_core::synth::{synthetic_region, SynthParams};
use nucleidiff_core::{AnnotatedRegion, Magnification, Split};
use proptest::prelude::*;

fn blank_region(h: usize, w: usize) -> AnnotatedRegion {
    AnnotatedRegion::new("blank", h, w, vec![200; h * w * 3], vec![0; h * w], BTreeMap::new()).unwrap()
}

#[test]
fn full_zone_yields_nine_patches() {
    let region = blank_region(256, 256);
    let zone = Zone::new(vec![Rect::new(0, 0, 256, 256)]).unwrap();
    let patches = extract_patches(&region, &zone, Magnification::X20, 128, 0.5, Split::Train).unwrap();
    assert_eq!(patches.len(), 9);
    let mut origins: Vec<(usize, usize)> = patches.iter().map(|p| (p.origin.row, p.origin.col)).collect();
    origins.sort();
    let expect: Vec<(usize, usize)> = [0, 64, 128].iter().flat_map(|&r| [0, 64, 128].map(|c| (r, c))).collect();
    assert_eq!(origins, expect);
}

#[test]
fn quarter_test_fraction_takes_one_quadrant() {
    let region = blank_region(256, 256);
    let quadrants = [
        Rect::new(0, 0, 128, 128),
        Rect::new(0, 128, 128, 128),
        Rect::new(128, 0, 128, 128),
        Rect::new(128, 128, 128, 128),
    ];
    for seed in 0..8 {
        let split = split_region(&region, 0.25, seed, 128).unwrap();
        assert_eq!(split.test.area(), 128 * 128);
        assert!(quadrants.iter().any(|q| split.test.contains(q)));
        assert_eq!(split.train.area() + split.test.area(), 256 * 256);
    }
}

#[test]
fn ten_x_labels_are_nearest_downsampled() {
    let region = synthetic_region("r", 3, &SynthParams { height: 256, width: 256, ..SynthParams::default() }).unwrap();
    let zone = Zone::new(vec![Rect::new(0, 0, 256, 256)]).unwrap();
    let patches = extract_patches(&region, &zone, Magnification::X10, 64, 0.0, Split::Train).unwrap();
    assert_eq!(patches.len(), 4);
    let classes = region.class_map();
    for p in &patches {
        for y in 0..64 {
            for x in 0..64 {
                let (sy, sx) = (p.origin.row + 2 * y + 1, p.origin.col + 2 * x + 1);
                assert_eq!(p.inst_map[y * 64 + x], region.inst_map[sy * 256 + sx]);
                assert_eq!(p.class_map[y * 64 + x], classes[sy * 256 + sx]);
            }
        }
    }
}

#[test]
fn manifest_round_trips_and_rejects_duplicates() {
    let region = synthetic_region("m", 9, &SynthParams { height: 192, width: 192, ..SynthParams::default() }).unwrap();
    let zone = Zone::new(vec![Rect::new(0, 0, 192, 192)]).unwrap();
    let patches = extract_patches(&region, &zone, Magnification::X20, 64, 0.5, Split::Train).unwrap();
    let m = build_manifest(&patches).unwrap();
    let parsed = Manifest::parse_tsv(&m.to_tsv()).unwrap();
    assert_eq!(parsed.rows, m.rows);
    assert_eq!(m.stats.count(Split::Train, Magnification::X20), 25);
    let mut dup = patches.clone();
    dup.push(patches[0].clone());
    assert!(build_manifest(&dup).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn interior_pixels_are_covered_exactly_four_times(
        top in 0usize..40, left in 0usize..40, h in 64usize..260, w in 64usize..260, half in prop::sample::select(vec![8usize, 16, 32]),
    ) {
        let window = 2 * half;
        let zone = Zone::new(vec![Rect::new(top, left, h, w)]).unwrap();
        let origins = window_origins(&zone, window, half);
        let (rh, rw) = (top + h, left + w);
        let mut count = vec![0u32; rh * rw];
        for &(r, c) in &origins {
            prop_assert!(zone.contains(&Rect::new(r, c, window, window)));
            for y in r..r + window {
                for x in c..c + window {
                    count[y * rw + x] += 1;
                }
            }
        }
        let ny = if h >= window { (h - window) / half + 1 } else { 0 };
        let nx = if w >= window { (w - window) / half + 1 } else { 0 };
        prop_assert_eq!(origins.len(), ny * nx);
        for y in top..rh {
            for x in left..rw {
                let c = count[y * rw + x];
                let interior = y >= top + window && x >= left + window && y + window < top + (ny - 1) * half + window
                    && x + window < left + (nx - 1) * half + window;
                if interior {
                    prop_assert_eq!(c, 4, "pixel ({}, {})", y, x);
                }
                let in_union = y < top + (ny - 1) * half + window && x < left + (nx - 1) * half + window;
                prop_assert_eq!(c > 0, in_union);
            }
        }
    }

    #[test]
    fn split_is_a_disjoint_deterministic_partition(seed in 0u64..500, frac in 0.05f64..0.5, cells in 2usize..5) {
        let cell = 32;
        let size = cells * cell + 17;
        let region = blank_region(size, size);
        let a = split_region(&region, frac, seed, cell).unwrap();
        let b = split_region(&region, frac, seed, cell).unwrap();
        prop_assert_eq!(a.test.rects(), b.test.rects());
        prop_assert_eq!(a.train.area() + a.test.area(), size * size);
        for r in a.train.rects() {
            for t in a.test.rects() {
                prop_assert_eq!(r.intersection_area(t), 0);
            }
        }
        let wanted = (frac * (size * size) as f64 / (cell * cell) as f64).round() as usize;
        let n_test = wanted.clamp(1, cells * cells - 1);
        prop_assert_eq!(a.test.area(), n_test * cell * cell);
        prop_assert!((a.test.area() as f64 - frac * (size * size) as f64).abs() <= (cell * cell) as f64 || n_test != wanted);
    }
}
