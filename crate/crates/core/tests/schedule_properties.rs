use nucleidiff_core::{NoiseSchedule, ScheduleParams};
use proptest::prelude::*;

fn check_invariants(s: &NoiseSchedule<f64>) {
    let n = s.steps();
    let mut prod = 1.0;
    for i in 0..n {
        prod *= 1.0 - s.beta[i];
        assert!((s.alpha_bar[i] - prod).abs() <= 1e-12, "alpha_bar[{i}]");
        assert!((s.alpha[i] + s.beta[i] - 1.0).abs() <= 1e-12);
        let ab = s.alpha_bar[i];
        let abp = if i == 0 { 1.0 } else { s.alpha_bar[i - 1] };
        assert_eq!(s.alpha_bar_prev[i], abp);
        assert!((s.sqrt_alpha_bar[i].powi(2) + s.sqrt_one_minus_alpha_bar[i].powi(2) - 1.0).abs() <= 1e-12);
        assert!((s.sqrt_recip_alpha_bar[i] * s.sqrt_alpha_bar[i] - 1.0).abs() <= 1e-12);
        assert!((s.sqrt_recipm1_alpha_bar[i].powi(2) - (1.0 / ab - 1.0)).abs() <= 1e-12 * (1.0 / ab));
        let post = s.beta[i] * (1.0 - abp) / (1.0 - ab);
        assert!((s.posterior_variance[i] - post).abs() <= 1e-12);
        assert!(s.posterior_variance[i] <= s.beta[i] + 1e-15);
        assert!((s.posterior_coef_x0[i] - s.beta[i] * abp.sqrt() / (1.0 - ab)).abs() <= 1e-12);
        assert!((s.posterior_coef_xt[i] - s.alpha[i].sqrt() * (1.0 - abp) / (1.0 - ab)).abs() <= 1e-12);
        assert!((s.log_beta[i] - s.beta[i].ln()).abs() <= 1e-12);
        if i > 0 {
            assert!(s.beta[i] >= s.beta[i - 1]);
            assert!(s.alpha_bar[i] < s.alpha_bar[i - 1]);
            assert!(s.snr(i + 1).unwrap() < s.snr(i).unwrap());
        }
    }
    assert_eq!(s.posterior_variance[0], 0.0);
}

#[test]
fn invariants_hold_at_reference_lengths() {
    for steps in [2, 10, 1000] {
        check_invariants(&NoiseSchedule::linear(steps, 1e-4, 0.02).unwrap());
    }
}

#[test]
fn two_step_hand_values() {
    let s = NoiseSchedule::<f64>::linear(2, 0.1, 0.2).unwrap();
    assert_eq!(s.alpha_bar, vec![0.9, 0.9 * 0.8]);
    assert!((s.alpha_bar[1] - 0.72).abs() < 1e-15);
    assert!((s.posterior_variance[1] - 0.2 * 0.1 / 0.28).abs() < 1e-15);
    assert!((s.posterior_variance[1] - 0.071_428_571_428_571_4).abs() < 1e-15);
}

#[test]
fn clipped_log_variance_replaces_the_zero_first_entry() {
    let s = NoiseSchedule::<f64>::linear(10, 1e-4, 0.02).unwrap();
    assert_eq!(s.posterior_log_variance_clipped[0], s.posterior_log_variance_clipped[1]);
    for i in 1..10 {
        assert!((s.posterior_log_variance_clipped[i] - s.posterior_variance[i].ln()).abs() < 1e-12);
    }
}

#[test]
fn rejects_invalid_parameters() {
    assert!(NoiseSchedule::<f64>::linear(0, 1e-4, 0.02).is_err());
    assert!(NoiseSchedule::<f64>::linear(10, 0.0, 0.02).is_err());
    assert!(NoiseSchedule::<f64>::linear(10, 0.02, 0.01).is_err());
    assert!(NoiseSchedule::<f64>::linear(10, 1e-4, 1.0).is_err());
    let s = NoiseSchedule::<f64>::linear(10, 1e-4, 0.02).unwrap();
    assert!(s.index(0).is_err());
    assert!(s.index(11).is_err());
}

#[test]
fn params_round_trip() {
    let p = ScheduleParams { steps: 100, beta_start: 1e-3, beta_end: 0.2 };
    let s = p.build::<f32>().unwrap();
    assert_eq!(s.params(), p);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invariants_hold_for_random_schedules(steps in 2usize..400, start in 1e-5f64..1e-2, span in 0.0f64..0.3) {
        let s = NoiseSchedule::linear(steps, start, start + span).unwrap();
        check_invariants(&s);
    }

    #[test]
    fn f32_tracks_f64(steps in 2usize..200, start in 1e-5f64..1e-2, span in 0.0f64..0.3) {
        let a = NoiseSchedule::<f64>::linear(steps, start, start + span).unwrap();
        let b = NoiseSchedule::<f32>::linear(steps, start, start + span).unwrap();
        for i in 0..steps {
            prop_assert!((a.alpha_bar[i] - b.alpha_bar[i] as f64).abs() < 1e-5);
            prop_assert!((a.posterior_coef_xt[i] - b.posterior_coef_xt[i] as f64).abs() < 1e-4);
        }
    }
}
