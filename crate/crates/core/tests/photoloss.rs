use autodiff::{Tensor, Var};
use mvstta::geometry::PosedImage;
use mvstta::photoloss::*;
use mvstta::scenegen::{generate_dataset, SceneSpec};
use proptest::prelude::*;

fn loss_at(views: &[PosedImage], depth: &Tensor, cfg: &PhotoLossConfig) -> f64 {
    photometric_loss_from_depth(views, &Var::constant(depth.clone()), cfg).unwrap().item()
}

#[test]
fn ground_truth_depth_beats_scaled_depth() {
    let cfg = PhotoLossConfig::default();
    let data = generate_dataset(&SceneSpec { seed: 0, ..Default::default() }, 100).unwrap();
    let wins = data
        .iter()
        .filter(|s| loss_at(&s.views, &s.gt_depth, &cfg) < loss_at(&s.views, &s.gt_depth.map(|d| 1.05 * d), &cfg))
        .count();
    assert!(wins >= 95, "{wins}/100");
}

#[test]
fn black_scene_has_zero_loss() {
    let mut sample = generate_dataset(&SceneSpec::default(), 1).unwrap().remove(0);
    for v in &mut sample.views {
        v.image = Tensor::zeros(v.image.shape());
    }
    let cfg = PhotoLossConfig::default();
    assert_eq!(loss_at(&sample.views, &sample.gt_depth, &cfg), 0.0);
    assert_eq!(loss_at(&sample.views, &sample.gt_depth.map(|d| 0.9 * d), &cfg), 0.0);
}

#[test]
fn loss_is_invariant_to_source_order() {
    let sample = generate_dataset(&SceneSpec { seed: 5, ..Default::default() }, 1).unwrap().remove(0);
    let cfg = PhotoLossConfig::default();
    let depth = sample.gt_depth.map(|d| 1.02 * d);
    let base = loss_at(&sample.views, &depth, &cfg);
    let mut views = sample.views.clone();
    views[1..].reverse();
    assert!((loss_at(&views, &depth, &cfg) - base).abs() < 1e-12);
    views[1..].rotate_left(1);
    assert!((loss_at(&views, &depth, &cfg) - base).abs() < 1e-12);
}

#[test]
fn reference_as_only_source_gives_zero() {
    let sample = generate_dataset(&SceneSpec::default(), 1).unwrap().remove(0);
    let views = vec![sample.views[0].clone(), sample.views[0].clone()];
    let cfg = PhotoLossConfig { top_k: 1, ..Default::default() };
    assert!(loss_at(&views, &sample.gt_depth, &cfg).abs() < 1e-12);
}

#[test]
fn bad_configs_and_inputs_are_rejected() {
    let sample = generate_dataset(&SceneSpec::default(), 1).unwrap().remove(0);
    let depth = Var::constant(sample.gt_depth.clone());
    let too_many = PhotoLossConfig { top_k: 5, ..Default::default() };
    assert!(photometric_loss_from_depth(&sample.views, &depth, &too_many).is_err());
    let even = PhotoLossConfig { ssim_window: 4, ..Default::default() };
    assert!(photometric_loss_from_depth(&sample.views, &depth, &even).is_err());
    assert!(photometric_loss_from_depth(&sample.views[..1], &depth, &PhotoLossConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loss_is_nonnegative_and_finite(seed in 0u64..500, scale in 0.8..1.25f64, k in 1usize..=4) {
        let spec = SceneSpec { seed, height: 12, width: 16, focal: 15.0, ..Default::default() };
        let sample = generate_dataset(&spec, 1).unwrap().remove(0);
        let cfg = PhotoLossConfig { top_k: k, ssim_window: 5, ..Default::default() };
        let l = loss_at(&sample.views, &sample.gt_depth.map(|d| scale * d), &cfg);
        prop_assert!(l.is_finite() && l >= 0.0);
    }

    #[test]
    fn topk_sum_grows_with_k(seed in 0u64..500) {
        let spec = SceneSpec { seed, height: 12, width: 16, focal: 15.0, ..Default::default() };
        let sample = generate_dataset(&spec, 1).unwrap().remove(0);
        let depth = sample.gt_depth.map(|d| 1.1 * d);
        let at = |k| {
            let cfg = PhotoLossConfig { top_k: k, ssim_weight: 0.0, ssim_window: 5, ..Default::default() };
            loss_at(&sample.views, &depth, &cfg)
        };
        for k in 1..4 {
            prop_assert!(at(k) <= at(k + 1) + 1e-12);
        }
    }
}
