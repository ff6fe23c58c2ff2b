use autodiff::{check_gradient, Tensor, Var};
use mvstta::geometry::{inverse_warp, DepthHypotheses, PosedImage};
use mvstta::mvsnet::*;
use mvstta::scenegen::{generate_dataset, generate_scene, Layout, SceneSpec};
use mvstta::Result;
use proptest::prelude::*;

fn small_spec(seed: u64) -> SceneSpec {
    SceneSpec { seed, height: 8, width: 8, focal: 9.0, depth_count: 4, ..Default::default() }
}

/// Mean-pooling projection and a center-tap cost kernel, everything else from `init_params`.
fn identity_like(arch: &Arch) -> ModelParams {
    let mut theta = init_params(arch, 0).unwrap().theta;
    let f = arch.feature_width();
    let taps = arch.cost_kernel.pow(3);
    let start = arch.feature_param_count();
    let (proj, cost) = (start, start + f + 1);
    theta[proj..proj + f].iter_mut().for_each(|v| *v = 1.0 / f as f64);
    theta[proj + f] = 0.0;
    theta[cost..cost + taps].iter_mut().for_each(|v| *v = 0.0);
    theta[cost + taps / 2] = 1.0;
    theta[cost + taps] = 0.0;
    ModelParams::new(arch.clone(), theta).unwrap()
}

fn with_net<T>(params: &ModelParams, f: impl FnOnce(&Network) -> Result<T>) -> T {
    let tape = autodiff::Tape::new();
    let theta = tape.leaf(params.tensor());
    let net = Network::new(&params.arch, &theta).unwrap();
    f(&net).unwrap()
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    for seed in 0..3u64 {
        let sample = generate_dataset(&small_spec(seed), 1).unwrap().remove(0);
        let params = init_params(&Arch::with_width(4), seed).unwrap();
        assert!(params.theta.len() <= 1000);
        let err = check_gradient(
            |_, x| {
                let net = Network::new(&params.arch, x)?;
                let pred = net.forward(&sample.views[..3], &sample.hyps)?;
                primary_loss(&pred, &sample.gt_depth, &sample.valid)
            },
            &params.tensor(),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: {err:e}");
    }
}

#[test]
fn zero_image_and_zero_params_give_zero_features() {
    let arch = Arch::default();
    let params = ModelParams::new(arch.clone(), vec![0.0; arch.param_count()]).unwrap();
    let feats = with_net(&params, |n| n.extract_features(&Tensor::zeros(&[6, 7, 3])));
    assert_eq!(feats.shape(), &[6, 7, 8]);
    assert!(feats.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn constant_image_gives_constant_interior_features() {
    let params = init_params(&Arch::default(), 3).unwrap();
    let feats = with_net(&params, |n| n.extract_features(&Tensor::from_fn(&[9, 10, 3], |i| [0.2, 0.5, 0.9][i % 3])));
    let v = feats.value();
    // two 3x3 layers: two pixels from the border see no padding
    let at = |r: usize, c: usize, f: usize| v.data()[(r * 10 + c) * 8 + f];
    for r in 2..7 {
        for c in 2..8 {
            for f in 0..8 {
                assert!((at(r, c, f) - at(2, 2, f)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn identical_cameras_give_identical_volumes() {
    let sample = generate_dataset(&SceneSpec::default(), 1).unwrap().remove(0);
    let views = vec![sample.views[0].clone(), sample.views[0].clone()];
    let params = init_params(&Arch::default(), 1).unwrap();
    let vols = with_net(&params, |n| n.build_feature_volumes(&views, &sample.hyps));
    assert_eq!(vols[0].shape(), &[32, 48, 16, 8]);
    assert!(vols[0].value().max_abs_diff(vols[1].value()) < 1e-12);
}

#[test]
fn plane_at_true_depth_aligns_source_and_reference() {
    let sample = generate_scene(&SceneSpec::default(), 4, Layout::FrontoParallel).unwrap();
    let d = sample.gt_depth.data()[0];
    assert!(sample.gt_depth.data().iter().all(|&v| (v - d).abs() < 1e-9));
    let hyps = DepthHypotheses::new(d, d + 1.0, 2).unwrap();
    for src in 1..sample.views.len() {
        let views = [sample.views[0].clone(), sample.views[src].clone()];
        let feats: Vec<Var> = views.iter().map(|v| Var::constant(v.image.clone())).collect();
        let vols = warp_feature_volumes(&views, &feats, &hyps).unwrap();
        let (_, mask) = inverse_warp(&views[1], &views[0].camera, &Var::constant(sample.gt_depth.clone())).unwrap();
        let (h, w) = (sample.height(), sample.width());
        let (mut err, mut n) = (0.0, 0);
        for p in 0..h * w {
            if mask.bits()[p] {
                for c in 0..3 {
                    let idx = (p * 2) * 3 + c;
                    err += (vols[1].value().data()[idx] - vols[0].value().data()[idx]).abs();
                    n += 1;
                }
            }
        }
        assert!(n > h * w, "too few visible pixels");
        assert!(err / (n as f64) < 0.02, "source {src}: {}", err / n as f64);
    }
}

#[test]
fn zero_features_give_zero_volumes() {
    let sample = generate_dataset(&SceneSpec::default(), 1).unwrap().remove(0);
    let feats: Vec<Var> = (0..3).map(|_| Var::constant(Tensor::zeros(&[32, 48, 5]))).collect();
    let vols = warp_feature_volumes(&sample.views[..3], &feats, &sample.hyps).unwrap();
    assert!(vols.iter().all(|v| v.value().data().iter().all(|&x| x == 0.0)));
}

#[test]
fn uniform_cost_gives_uniform_probability() {
    let params = identity_like(&Arch::default());
    let cost = Var::constant(Tensor::from_fn(&[4, 5, 6, 8], |i| 0.3 + (i / 48) as f64 * 0.01));
    let prob = with_net(&params, |n| n.regularize(&cost));
    for v in prob.value().data() {
        assert!((v - 1.0 / 6.0).abs() < 1e-12, "{v}");
    }
}

#[test]
fn low_cost_hypothesis_wins() {
    let params = identity_like(&Arch::default());
    let (h, w, d, f) = (4, 5, 6, 8);
    let best = |pixel: usize| (pixel * 7) % d;
    let cost = Var::constant(Tensor::from_fn(&[h, w, d, f], |i| {
        let (pixel, k) = (i / (d * f), (i / f) % d);
        if k == best(pixel) { 0.0 } else { 10.0 }
    }));
    let prob = with_net(&params, |n| n.regularize(&cost));
    let p = prob.value().data();
    for pixel in 0..h * w {
        let row = &p[pixel * d..(pixel + 1) * d];
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let arg = (0..d).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(arg, best(pixel));
    }
}

#[test]
fn forward_is_deterministic_and_in_range() {
    let sample = generate_dataset(&SceneSpec { seed: 2, ..Default::default() }, 1).unwrap().remove(0);
    let params = init_params(&Arch::default(), 2).unwrap();
    let a = predict_depth(&params, &sample.views[..3], &sample.hyps).unwrap();
    let b = predict_depth(&params, &sample.views[..3], &sample.hyps).unwrap();
    assert_eq!(a, b);
    assert!(a.data().iter().all(|&v| (2.0..=4.0).contains(&v)));
}

#[test]
fn too_few_views_or_bad_theta_are_rejected() {
    let sample = generate_dataset(&SceneSpec::default(), 1).unwrap().remove(0);
    let params = init_params(&Arch::default(), 0).unwrap();
    assert!(predict_depth(&params, &sample.views[..1], &sample.hyps).is_err());
    assert!(ModelParams::new(Arch::default(), vec![0.0; 10]).is_err());
    let tape = autodiff::Tape::new();
    assert!(Network::new(&params.arch, &tape.leaf(Tensor::zeros(&[10]))).is_err());
}

fn permuted(views: &[PosedImage], order: &[usize]) -> Vec<PosedImage> {
    std::iter::once(views[0].clone()).chain(order.iter().map(|&i| views[i].clone())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn source_order_does_not_change_depth(seed in 0u64..1000, param_seed in 0u64..1000) {
        let sample = generate_dataset(&small_spec(seed), 1).unwrap().remove(0);
        let params = init_params(&Arch::with_width(4), param_seed).unwrap();
        let a = predict_depth(&params, &permuted(&sample.views, &[1, 2, 3]), &sample.hyps).unwrap();
        let b = predict_depth(&params, &permuted(&sample.views, &[3, 1, 2]), &sample.hyps).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn scaled_images_keep_depth_in_range(seed in 0u64..1000, scale in 0.1..10.0f64) {
        let mut sample = generate_dataset(&small_spec(seed), 1).unwrap().remove(0);
        for v in &mut sample.views {
            v.image = v.image.map(|x| x * scale);
        }
        let params = init_params(&Arch::with_width(4), seed).unwrap();
        let depth = predict_depth(&params, &sample.views[..3], &sample.hyps).unwrap();
        prop_assert!(depth.data().iter().all(|&v| (2.0 - 1e-12..=4.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn variance_ignores_a_common_offset(seed in 0u64..1000, offset in -5.0..5.0f64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let vols: Vec<Tensor> = (0..3).map(|_| Tensor::from_fn(&[2, 3, 4, 2], |_| rng.gen_range(-1.0..1.0))).collect();
        let common = Tensor::from_fn(&[2, 3, 4, 2], |i| offset * (i as f64).sin());
        let plain = variance_cost(&vols.iter().map(|v| Var::constant(v.clone())).collect::<Vec<_>>()).unwrap();
        let shifted: Vec<Var> = vols.iter().map(|v| Var::constant(v.zip_map(&common, |a, b| a + b))).collect();
        let shifted = variance_cost(&shifted).unwrap();
        prop_assert!(plain.value().max_abs_diff(shifted.value()) < 1e-12);
    }
}
