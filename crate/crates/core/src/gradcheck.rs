//! The full finite-difference suite: every tape operation, the geometric and
//! photometric building blocks, and the end-to-end compositions through the
//! network.

use autodiff::suite::{check_ops, random_tensor, CaseResult, Order};
use autodiff::{check_gradient, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{inverse_warp, VisibilityMask};
use crate::mvsnet::{
    expected_depth, init_params, primary_loss, variance_cost, warp_feature_volumes, Arch, ModelParams, Network,
};
use crate::photoloss::{
    image_gradient, photometric_loss, photometric_loss_from_depth, reproj_error_per_view, ssim_map, topk_reproj,
    PhotoLossConfig,
};
use crate::scenegen::{generate_scene, Layout, SceneSample, SceneSpec};

/// Relative error every check must stay below.
pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Random points per single-operation case.
    pub op_instances: usize,
    /// Random points per second-order case.
    pub second_order_instances: usize,
    /// Random scenes and initializations per end-to-end composition.
    pub composition_instances: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { seed: 0, op_instances: 100, second_order_instances: 20, composition_instances: 100 }
    }
}

pub fn passed(results: &[CaseResult]) -> bool {
    results.iter().all(|r| r.worst < TOLERANCE)
}

fn random_mask(h: usize, w: usize, rng: &mut ChaCha8Rng) -> VisibilityMask {
    VisibilityMask::new(h, w, (0..h * w).map(|_| rng.gen_bool(0.8)).collect()).expect("mask shape")
}

fn unit_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
}

/// Small scene for the compositions: 8x8 pixels, four hypotheses.
fn tiny_scene(seed: u64) -> Result<SceneSample> {
    let spec = SceneSpec { seed, height: 8, width: 8, focal: 9.0, depth_count: 4, ..Default::default() };
    generate_scene(&spec, seed, Layout::ALL[(seed % 4) as usize])
}

fn tiny_params(seed: u64) -> Result<ModelParams> {
    init_params(&Arch::with_width(4), seed)
}

type BlockCase = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>);

fn block_cases() -> Vec<BlockCase> {
    let step = 1e-6;
    vec![
        (
            "variance_cost",
            Box::new(move |rng| {
                let others = [random_tensor(&[2, 3, 2, 2], rng), random_tensor(&[2, 3, 2, 2], rng)];
                let point = random_tensor(&[2, 3, 2, 2], rng);
                check_gradient(
                    |_, x| {
                        let vols = vec![x.clone(), Var::constant(others[0].clone()), x.mul(&Var::constant(others[1].clone()))?];
                        Ok::<_, crate::Error>(variance_cost(&vols)?.square()?.sum()?)
                    },
                    &point,
                    step,
                )
            }),
        ),
        (
            "expected_depth",
            Box::new(move |rng| {
                let hyps = crate::geometry::DepthHypotheses::new(2.0, 4.0, 5)?;
                let point = random_tensor(&[2, 3, 5], rng);
                let gt = Var::constant(Tensor::from_fn(&[2, 3], |_| rng.gen_range(2.0..4.0)));
                check_gradient(
                    |_, x| Ok::<_, crate::Error>(expected_depth(&x.softmax(2)?, &hyps)?.sub(&gt)?.square()?.sum()?),
                    &point,
                    step,
                )
            }),
        ),
        (
            "image_gradient",
            Box::new(move |rng| {
                let w = random_tensor(&[4, 5, 3], rng);
                let point = random_tensor(&[4, 5, 3], rng);
                check_gradient(
                    |_, x| {
                        let (gx, gy) = image_gradient(x)?;
                        Ok::<_, crate::Error>(gx.mul(&Var::constant(w.clone()))?.add(&gy.square()?)?.sum()?)
                    },
                    &point,
                    step,
                )
            }),
        ),
        (
            "reproj_error_per_view",
            Box::new(move |rng| {
                let reference = unit_tensor(&[5, 6, 3], rng);
                let mask = random_mask(5, 6, rng);
                let point = unit_tensor(&[5, 6, 3], rng);
                let cfg = PhotoLossConfig::default();
                check_gradient(
                    |_, x| Ok::<_, crate::Error>(reproj_error_per_view(&reference, x, &mask, &cfg)?.sum()?),
                    &point,
                    step,
                )
            }),
        ),
        (
            "topk_reproj",
            Box::new(move |rng| {
                let masks: Vec<VisibilityMask> = (0..3).map(|_| random_mask(4, 5, rng)).collect();
                let point = unit_tensor(&[3, 4, 5], rng);
                let k = rng.gen_range(1..=3);
                check_gradient(
                    |_, x| {
                        let maps: Vec<Var> = (0..3)
                            .map(|v| {
                                let sel = Tensor::from_fn(&[3, 4, 5], |i| if i / 20 == v { 1.0 } else { 0.0 });
                                x.mul(&Var::constant(sel))?.sum_axis(0)
                            })
                            .collect::<autodiff::Result<_>>()?;
                        Ok::<_, crate::Error>(topk_reproj(&maps, &masks, k)?)
                    },
                    &point,
                    step,
                )
            }),
        ),
        (
            "ssim_map",
            Box::new(move |rng| {
                let reference = unit_tensor(&[8, 9, 3], rng);
                let mask = random_mask(8, 9, rng);
                let point = unit_tensor(&[8, 9, 3], rng);
                let cfg = PhotoLossConfig { ssim_window: 3, ..Default::default() };
                check_gradient(
                    |_, x| Ok::<_, crate::Error>(ssim_map(&reference, x, &mask, &cfg)?.sum()?),
                    &point,
                    step,
                )
            }),
        ),
        (
            "inverse_warp:depth",
            Box::new(move |rng| {
                let scene = tiny_scene(rng.gen_range(0..1000))?;
                let (h, w) = (scene.height(), scene.width());
                let point = Tensor::from_fn(&[h, w], |_| rng.gen_range(2.6..3.4));
                let weights = unit_tensor(&[h, w, 3], rng);
                check_gradient(
                    |_, x| {
                        let (warped, _) = inverse_warp(&scene.views[1], &scene.views[0].camera, x)?;
                        Ok::<_, crate::Error>(warped.mul(&Var::constant(weights.clone()))?.sum()?)
                    },
                    &point,
                    step,
                )
            }),
        ),
        (
            "warp_feature_volumes",
            Box::new(move |rng| {
                let scene = tiny_scene(rng.gen_range(0..1000))?;
                let (h, w) = (scene.height(), scene.width());
                let point = random_tensor(&[h, w, 2], rng);
                let fixed = random_tensor(&[h, w, 2], rng);
                check_gradient(
                    |_, x| {
                        let feats = vec![Var::constant(fixed.clone()), x.clone(), x.square()?];
                        let vols = warp_feature_volumes(&scene.views[..3], &feats, &scene.hyps)?;
                        Ok::<_, crate::Error>(variance_cost(&vols)?.sum()?)
                    },
                    &point,
                    step,
                )
            }),
        ),
        (
            "photometric_loss_from_depth",
            Box::new(move |rng| {
                let scene = tiny_scene(rng.gen_range(0..1000))?;
                let gt = scene.gt_depth.data();
                let point = Tensor::from_fn(scene.gt_depth.shape(), |i| gt[i] * rng.gen_range(0.95..1.05));
                let cfg = PhotoLossConfig { ssim_window: 3, ..Default::default() };
                check_gradient(|_, x| photometric_loss_from_depth(&scene.views, x, &cfg), &point, step)
            }),
        ),
    ]
}

fn composition_cases() -> Vec<BlockCase> {
    let step = 1e-6;
    vec![
        (
            "forward+primary_loss",
            Box::new(move |rng| {
                let seed = rng.gen_range(0..1_000_000);
                let scene = tiny_scene(seed)?;
                let params = tiny_params(seed)?;
                check_gradient(
                    |_, x| {
                        let net = Network::new(&params.arch, x)?;
                        let pred = net.forward(&scene.views[..3], &scene.hyps)?;
                        primary_loss(&pred, &scene.gt_depth, &scene.valid)
                    },
                    &params.tensor(),
                    step,
                )
            }),
        ),
        (
            "forward+photometric_loss",
            Box::new(move |rng| {
                let seed = rng.gen_range(0..1_000_000);
                let scene = tiny_scene(seed)?;
                let params = tiny_params(seed)?;
                let cfg = PhotoLossConfig { ssim_window: 3, ..Default::default() };
                check_gradient(
                    |_, x| {
                        let net = Network::new(&params.arch, x)?;
                        photometric_loss(&net, &scene.views, 3, &scene.hyps, &cfg)
                    },
                    &params.tensor(),
                    step,
                )
            }),
        ),
    ]
}

fn run_cases(cases: Vec<BlockCase>, seed: u64, instances: usize, out: &mut Vec<CaseResult>) -> Result<()> {
    for (name, f) in cases {
        let mut worst: f64 = 0.0;
        for i in 0..instances as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(i));
            worst = worst.max(f(&mut rng)?);
        }
        out.push(CaseResult { name: name.to_string(), instances, worst });
    }
    Ok(())
}

/// Runs everything; inspect with [`passed`].
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<CaseResult>> {
    let mut out = check_ops(cfg.seed, cfg.op_instances, Order::First)?;
    for mut r in check_ops(cfg.seed + 1_000_000, cfg.second_order_instances, Order::Second)? {
        r.name = format!("{} (second order)", r.name);
        out.push(r);
    }
    run_cases(block_cases(), cfg.seed, cfg.op_instances, &mut out)?;
    run_cases(composition_cases(), cfg.seed, cfg.composition_instances, &mut out)?;
    Ok(out)
}

/// One line per case.
pub fn results_csv(results: &[CaseResult]) -> String {
    let mut out = String::from("case,instances,worst_rel_error,pass\n");
    for r in results {
        out.push_str(&format!("{},{},{:e},{}\n", r.name, r.instances, r.worst, r.worst < TOLERANCE));
    }
    out
}
