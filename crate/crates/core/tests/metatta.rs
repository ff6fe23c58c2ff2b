use autodiff::{Tape, Tensor, Var};
use mvstta::metatta::*;
use mvstta::Result;
use mvstta::mvsnet::{init_params, predict_depth, primary_loss, Arch, ModelParams};
use mvstta::scenegen::{generate_dataset, Layout, SceneSample, SceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn symmetric(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let m = random(&[n, n], rng);
    Tensor::from_fn(&[n, n], |i| {
        let (r, c) = (i / n, i % n);
        m.data()[r * n + c] + m.data()[c * n + r]
    })
}

fn matvec(a: &Tensor, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n).map(|r| (0..n).map(|c| a.data()[r * n + c] * x[c]).sum()).collect()
}

fn tiny_spec(seed: u64) -> SceneSpec {
    SceneSpec { seed, height: 10, width: 14, focal: 13.0, depth_count: 6, ..Default::default() }
}

fn tiny_params(seed: u64) -> ModelParams {
    let p = init_params(&Arch::with_width(4), seed).unwrap();
    assert!(p.theta.len() <= 500, "{}", p.theta.len());
    p
}

#[test]
fn quadratic_meta_gradient_matches_closed_form() {
    let n = 8;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = symmetric(n, &mut rng);
        let c = random(&[n, 1], &mut rng);
        let theta = random(&[n, 1], &mut rng);
        let alpha = rng.gen_range(0.01..0.2);
        let av = Var::constant(a.clone());
        let inner = |x: &Var| -> Result<Var> { Ok(x.matmul_tn(&av.matmul(x)?)?.scale(0.5)?.sum()?) };
        let cv = Var::constant(c.clone());
        let outer = |x: &Var| -> Result<Var> { Ok(x.sub(&cv)?.square()?.sum()?.scale(0.5)?) };

        let at = matvec(&a, theta.data());
        let phi: Vec<f64> = theta.data().iter().zip(&at).map(|(t, g)| t - alpha * g).collect();
        let resid: Vec<f64> = phi.iter().zip(c.data()).map(|(p, c)| p - c).collect();
        let a_resid = matvec(&a, &resid);
        let expected: Vec<f64> = resid.iter().zip(&a_resid).map(|(r, ar)| r - alpha * ar).collect();

        let tape = Tape::new();
        let leaf = tape.leaf(theta.clone());
        let (adapted, _) = adapt(&tape, &leaf, inner, alpha, 1, true).unwrap();
        for (x, y) in adapted.value().data().iter().zip(&phi) {
            assert!((x - y).abs() < 1e-12);
        }

        let (g, _, _) = composed_meta_gradient(&theta, inner, outer, alpha, 1, true).unwrap();
        for (x, y) in g.data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-10, "seed {seed}: {x} vs {y}");
        }
    }
}

#[test]
fn linear_inner_loss_makes_orders_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b = Var::constant(random(&[6, 1], &mut rng));
    let c = Var::constant(random(&[6, 1], &mut rng));
    let theta = random(&[6, 1], &mut rng);
    let inner = |x: &Var| -> Result<Var> { Ok(b.matmul_tn(x)?.sum()?) };
    let outer = |x: &Var| -> Result<Var> { Ok(x.sub(&c)?.square()?.sum()?) };
    for steps in [1, 3] {
        let (second, _, l2) = composed_meta_gradient(&theta, inner, outer, 0.3, steps, true).unwrap();
        let (first, _, l1) = composed_meta_gradient(&theta, inner, outer, 0.3, steps, false).unwrap();
        assert_eq!(l1, l2);
        assert!(second.max_abs_diff(&first) < 1e-14);
    }
}

#[test]
fn second_order_differs_from_first_order_when_curved() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Var::constant(symmetric(4, &mut rng));
    let theta = random(&[4, 1], &mut rng);
    let inner = |x: &Var| -> Result<Var> { Ok(x.matmul_tn(&a.matmul(x)?)?.scale(0.5)?.sum()?) };
    let outer = |x: &Var| -> Result<Var> { Ok(x.square()?.sum()?) };
    let (second, _, _) = composed_meta_gradient(&theta, inner, outer, 0.1, 1, true).unwrap();
    let (first, _, _) = composed_meta_gradient(&theta, inner, outer, 0.1, 1, false).unwrap();
    assert!(second.max_abs_diff(&first) > 1e-3);
}

fn composed_objective(params: &ModelParams, sample: &SceneSample, cfg: &MetaConfig) -> f64 {
    let phi = inner_adapt(params, sample, cfg, cfg.alpha, cfg.inner_steps, false).unwrap();
    let pred = predict_depth(&phi, &sample.views[..cfg.n_views], &sample.hyps).unwrap();
    primary_loss(&Var::constant(pred), &sample.gt_depth, &sample.valid).unwrap().item()
}

fn max_fd_error(params: &ModelParams, sample: &SceneSample, cfg: &MetaConfig) -> f64 {
    let (g, _) = meta_gradient(params, sample, cfg).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..params.theta.len() {
        let shifted = |d: f64| {
            let mut t = params.theta.clone();
            t[i] += d;
            composed_objective(&params.with_theta(t).unwrap(), sample, cfg)
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        worst = worst.max((g.data()[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    worst
}

#[test]
fn mvs_meta_gradient_matches_finite_differences() {
    let data = generate_dataset(&tiny_spec(3), 2).unwrap();
    let params = tiny_params(3);
    let cfg = MetaConfig { alpha: 0.5, ..Default::default() };
    for sample in &data {
        let err = max_fd_error(&params, sample, &cfg);
        assert!(err < 1e-4, "scene {}: {err:e}", sample.seed);
    }
}

#[test]
fn two_inner_steps_match_finite_differences() {
    let data = generate_dataset(&tiny_spec(8), 1).unwrap();
    let params = tiny_params(8);
    let cfg = MetaConfig { alpha: 0.3, inner_steps: 2, ..Default::default() };
    let err = max_fd_error(&params, &data[0], &cfg);
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn degenerate_rates_and_counts_leave_parameters_alone() {
    let data = generate_dataset(&tiny_spec(1), 2).unwrap();
    let params = tiny_params(1);
    let cfg = MetaConfig::default();
    let sample = &data[0];

    assert_eq!(inner_adapt(&params, sample, &cfg, 0.0, 3, false).unwrap(), params);
    assert_eq!(inner_adapt(&params, sample, &cfg, 0.0, 2, true).unwrap(), params);
    assert_eq!(inner_adapt(&params, sample, &cfg, 1.0, 0, false).unwrap(), params);

    let zero_beta = MetaConfig { beta: 0.0, ..cfg.clone() };
    let (stepped, _) = meta_step(&params, &[sample], &zero_beta).unwrap();
    assert_eq!(stepped, params);

    let no_iters = MetaConfig { meta_iterations: 0, ..cfg.clone() };
    let (trained, trace) = meta_train(&params, &data, &no_iters).unwrap();
    assert_eq!(trained, params);
    assert!(trace.is_empty());

    let pc = PretrainConfig { epochs: 2, lr: 0.0, ..Default::default() };
    let (pre, trace) = pretrain(&params, &data, &pc).unwrap();
    assert_eq!(pre, params);
    assert_eq!(trace.len(), 2);
}

#[test]
fn inner_adapt_and_test_time_adapt_agree_bitwise() {
    let data = generate_dataset(&tiny_spec(2), 1).unwrap();
    let params = tiny_params(2);
    let cfg = MetaConfig { alpha: 0.7, tta_steps: 3, ..Default::default() };
    let a = inner_adapt(&params, &data[0], &cfg, cfg.alpha, cfg.tta_steps, false).unwrap();
    let b = test_time_adapt(&params, &data[0], &cfg).unwrap();
    assert_eq!(a.theta, b.theta);
    assert_ne!(a.theta, params.theta);
    assert_eq!(a.arch, params.arch);

    let recorded = inner_adapt(&params, &data[0], &cfg, cfg.alpha, cfg.tta_steps, true).unwrap();
    let diff = recorded.theta.iter().zip(&a.theta).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff:e}");
}

#[test]
fn adaptation_is_per_sample() {
    let data = generate_dataset(&tiny_spec(4), 2).unwrap();
    let params = tiny_params(4);
    let cfg = MetaConfig { alpha: 0.5, ..Default::default() };
    let before = predict_depth(&params, &data[1].views[..3], &data[1].hyps).unwrap();
    let _ = test_time_adapt(&params, &data[0], &cfg).unwrap();
    let after = predict_depth(&params, &data[1].views[..3], &data[1].hyps).unwrap();
    assert_eq!(before, after);
}

#[test]
fn meta_training_is_deterministic() {
    let data = generate_dataset(&tiny_spec(6), 4).unwrap();
    let params = tiny_params(6);
    let cfg = MetaConfig { alpha: 0.5, beta: 0.5, meta_iterations: 3, seed: 9, ..Default::default() };
    let (a, ta) = meta_train(&params, &data, &cfg).unwrap();
    let (b, tb) = meta_train(&params, &data, &cfg).unwrap();
    assert_eq!(a.theta, b.theta);
    assert_eq!(ta, tb);
    assert_ne!(a.theta, params.theta);
    assert_eq!(ta.len(), 3);
}

#[test]
fn batch_accumulation_is_ordered_sum() {
    let data = generate_dataset(&tiny_spec(7), 2).unwrap();
    let params = tiny_params(7);
    let cfg = MetaConfig { alpha: 0.4, beta: 0.3, ..Default::default() };
    let (g0, _) = meta_gradient(&params, &data[0], &cfg).unwrap();
    let (g1, _) = meta_gradient(&params, &data[1], &cfg).unwrap();
    let (stepped, _) = meta_step(&params, &[&data[0], &data[1]], &cfg).unwrap();
    for i in 0..params.theta.len() {
        let expected = params.theta[i] - cfg.beta * (0.0 + g0.data()[i] + g1.data()[i]);
        assert_eq!(stepped.theta[i], expected);
    }
}

#[test]
fn too_few_sources_is_rejected() {
    let spec = SceneSpec { m_sources: 2, n_views: 2, ..tiny_spec(0) };
    let data = generate_dataset(&spec, 1).unwrap();
    let params = tiny_params(0);
    assert!(test_time_adapt(&params, &data[0], &MetaConfig::default()).is_err());
}

#[test]
fn pretraining_fits_one_scene_family() {
    let spec = SceneSpec { seed: 4, layout: Some(Layout::Slanted), ..Default::default() };
    let data = generate_dataset(&spec, 4).unwrap();
    let params = init_params(&Arch::default(), 4).unwrap();
    let (trained, trace) = pretrain(&params, &data, &PretrainConfig::default()).unwrap();
    assert!(trace.last().unwrap() < &(0.5 * trace[0]), "{trace:?}");
    for s in &data {
        let pred = predict_depth(&trained, &s.views[..3], &s.hyps).unwrap();
        let rel = mvstta::eval::rel_error(&pred, &s.gt_depth, &s.valid).unwrap();
        assert!(rel < 5.0, "scene {}: rel {rel}, trace {trace:?}", s.seed);
    }
}
