use std::path::Path;

use nucleidiff_core::metrics::FeatureSource;
use nucleidiff_nn::inception::{resize_bilinear, InceptionV3};
use nucleidiff_nn::Error;

fn image(seed: u8, size: usize) -> Vec<u8> {
    (0..size * size * 3).map(|i| ((i * 37 + seed as usize * 101) % 251) as u8).collect()
}

#[test]
fn features_are_2048_dimensional_and_deterministic() {
    let net = InceptionV3::<f32>::random(1);
    let imgs = vec![image(1, 32), image(2, 32)];
    let a = net.extract(&imgs, 32, 32, FeatureSource::Real).unwrap();
    let b = net.extract(&imgs, 32, 32, FeatureSource::Real).unwrap();
    assert_eq!((a.n, a.dim, a.classes), (2, 2048, 1000));
    assert_eq!(a.features, b.features);
    assert_eq!(a.probs, b.probs);
    for row in a.probs.chunks(1000) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-4);
    }
    assert!(a.features.iter().all(|v| v.is_finite()));
    assert_ne!(a.row(0), a.row(1));
}

#[test]
fn constant_colour_batch_has_negligible_feature_variance() {
    let net = InceptionV3::<f32>::random(2);
    let imgs = vec![[180u8, 90, 200].repeat(16 * 16); 3];
    let fs = net.extract(&imgs, 16, 16, FeatureSource::Synthetic).unwrap();
    let d = fs.dim;
    let mut var = 0.0f64;
    let mut norm = 0.0f64;
    for j in 0..d {
        let col: Vec<f64> = (0..fs.n).map(|i| fs.features[i * d + j] as f64).collect();
        let m = col.iter().sum::<f64>() / fs.n as f64;
        var += col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / fs.n as f64;
    }
    for i in 0..fs.n {
        norm += fs.row(i).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt() / fs.n as f64;
    }
    assert!(norm > 0.0);
    assert!(var / (d as f64) < 1e-3 * norm, "variance {var} vs mean norm {norm}");
}

#[test]
fn missing_weights_error_names_the_artifact() {
    let err = InceptionV3::<f32>::load(Path::new("/nonexistent/weights.safetensors")).err().expect("must fail");
    match &err {
        Error::MissingWeights { path, hint } => {
            assert!(path.contains("/nonexistent/weights.safetensors"));
            assert!(hint.contains("inception_v3_torchvision.safetensors"), "{hint}");
        }
        other => panic!("unexpected error {other}"),
    }
    assert!(err.to_string().contains("inception_v3_torchvision.safetensors"));
}

#[test]
fn config_hash_tracks_weights_version() {
    let a = InceptionV3::<f32>::random(1);
    let b = InceptionV3::<f32>::random(2);
    assert_ne!(a.config_hash(), b.config_hash());
    assert_eq!(a.config_hash(), InceptionV3::<f32>::random(1).config_hash());
}

#[test]
fn resize_maps_to_unit_range() {
    let img = [0u8, 128, 255].repeat(4);
    let t = resize_bilinear::<f64>(&img, 2, 2, 5);
    assert_eq!(t.shape, vec![1, 3, 5, 5]);
    assert!(t.data[..25].iter().all(|&v| (v + 1.0).abs() < 1e-12));
    assert!(t.data[50..].iter().all(|&v| (v - 1.0).abs() < 1e-12));
}
