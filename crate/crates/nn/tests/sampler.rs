use nucleidiff_core::{ScheduleParams, COND_CHANNELS};
use nucleidiff_nn::sampler::to_rgb8;
use nucleidiff_nn::{sample, Denoiser, DenoiserConfig, Error, SamplerConfig, Tensor};

fn micro() -> DenoiserConfig {
    DenoiserConfig {
        image_size: 8,
        base_width: 8,
        channel_multipliers: vec![1, 2],
        attention_resolutions: vec![],
        num_res_blocks_per_level: 1,
        time_embed_dim: 16,
        head_channels: 8,
        norm_groups: 4,
        spade_hidden: 8,
        ..DenoiserConfig::tiny()
    }
}

fn masks(b: usize) -> Tensor<f32> {
    let hw = 64;
    let mut data = vec![0.0f32; b * COND_CHANNELS * hw];
    for i in 0..b {
        for p in 0..hw {
            let class = if (p / 8 + i) % 3 == 0 { 3 } else { 0 };
            data[(i * COND_CHANNELS + class) * hw + p] = 1.0;
        }
    }
    Tensor::from_vec(data, &[b, COND_CHANNELS, 8, 8]).unwrap()
}

fn setup() -> (Denoiser<f32>, nucleidiff_core::NoiseSchedule<f32>) {
    let s = ScheduleParams { steps: 10, beta_start: 1e-2, beta_end: 0.5 }.build().unwrap();
    (Denoiser::new(micro(), 3).unwrap(), s)
}

#[test]
fn fixed_seed_is_bit_reproducible() {
    let (mut net, s) = setup();
    let cfg = SamplerConfig { guidance_scale: 2.0, ..SamplerConfig::default() };
    let a = sample(&mut net, &s, &masks(2), &[5, 6], cfg).unwrap();
    let b = sample(&mut net, &s, &masks(2), &[5, 6], cfg).unwrap();
    assert_eq!(a.data, b.data);
    let c = sample(&mut net, &s, &masks(2), &[7, 6], cfg).unwrap();
    assert_ne!(a.slice_batch(0, 1).data, c.slice_batch(0, 1).data);
}

#[test]
fn samples_depend_only_on_their_own_seed_and_mask() {
    let (mut net, s) = setup();
    let cfg = SamplerConfig::default();
    let pair = sample(&mut net, &s, &masks(2), &[11, 12], cfg).unwrap();
    let single = sample(&mut net, &s, &masks(1), &[11], cfg).unwrap();
    let d = pair.slice_batch(0, 1).data.iter().zip(&single.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(d < 1e-5, "max difference {d}");
}

#[test]
fn output_lies_in_image_range() {
    let (mut net, s) = setup();
    for scale in [0.0, 1.0, 5.0] {
        let cfg = SamplerConfig { guidance_scale: scale, ..SamplerConfig::default() };
        let x = sample(&mut net, &s, &masks(2), &[1, 2], cfg).unwrap();
        assert_eq!(x.shape, vec![2, 3, 8, 8]);
        assert!(x.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(to_rgb8(&x, 1).len(), 8 * 8 * 3);
    }
}

#[test]
fn guidance_changes_samples() {
    let (mut net, s) = setup();
    let plain = sample(&mut net, &s, &masks(1), &[3], SamplerConfig::default()).unwrap();
    let guided = sample(&mut net, &s, &masks(1), &[3], SamplerConfig { guidance_scale: 3.0, clip_x0: true }).unwrap();
    assert_ne!(plain.data, guided.data);
}

#[test]
fn seed_count_must_match_batch() {
    let (mut net, s) = setup();
    assert!(sample(&mut net, &s, &masks(2), &[1], SamplerConfig::default()).is_err());
}

#[test]
fn non_finite_values_abort_with_the_timestep() {
    let (mut net, s) = setup();
    let nan: Vec<Vec<f32>> = net.flat_params().iter().map(|p| vec![f32::NAN; p.len()]).collect();
    net.load_flat_params(&nan).unwrap();
    let cfg = SamplerConfig { guidance_scale: 0.0, clip_x0: false };
    match sample(&mut net, &s, &masks(1), &[1], cfg) {
        Err(Error::NonFiniteSample { step }) => assert_eq!(step, 10),
        other => panic!("expected NonFiniteSample, got {:?}", other.map(|t| t.shape)),
    }
}
