//! Supervised pretraining, meta-auxiliary training and test-time adaptation.
//!
//! The inner loop adapts on the photometric loss over all `M` sources; the
//! outer objective is the supervised depth loss of the adapted parameters on
//! the reference and its first `N - 1` sources.

use autodiff::{GradMode, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mvsnet::{primary_loss, ModelParams, Network};
use crate::photoloss::{photometric_loss, PhotoLossConfig};
use crate::scenegen::SceneSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner and test-time learning rate.
    pub alpha: f64,
    /// Outer learning rate.
    pub beta: f64,
    pub inner_steps: usize,
    pub tta_steps: usize,
    pub meta_batch: usize,
    pub n_views: usize,
    pub m_sources: usize,
    pub second_order: bool,
    pub meta_iterations: usize,
    /// Rescale the summed meta-gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub photo: PhotoLossConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            beta: 1e-4,
            inner_steps: 1,
            tta_steps: 2,
            meta_batch: 2,
            n_views: 3,
            m_sources: 4,
            second_order: true,
            meta_iterations: 200,
            clip_norm: None,
            seed: 0,
            photo: PhotoLossConfig::default(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return invalid(format!("learning rates must be finite and nonnegative: alpha={}, beta={}", self.alpha, self.beta));
        }
        if self.n_views < 2 || self.m_sources < self.n_views {
            return invalid(format!("need N >= 2 and M > N - 1, got N={} M={}", self.n_views, self.m_sources));
        }
        if self.meta_batch == 0 {
            return invalid("meta_batch must be at least 1");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return invalid(format!("clip_norm must be positive, got {:?}", self.clip_norm));
        }
        Ok(())
    }

    fn check_sample(&self, sample: &SceneSample) -> Result<()> {
        if sample.sources() < self.m_sources {
            return invalid(format!(
                "scene {} has {} sources, config needs M={}",
                sample.seed,
                sample.sources(),
                self.m_sources
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Rescale each mini-batch gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub n_views: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 40, lr: 15.0, clip_norm: Some(0.01), batch_size: 1, n_views: 3, seed: 0 }
    }
}

/// Per-iteration means over the meta-batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaStats {
    pub inner_loss: f64,
    pub outer_loss: f64,
}

fn finite_or(t: &Tensor, what: impl FnOnce() -> String) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

fn supervised_loss(theta: &Var, params: &ModelParams, sample: &SceneSample, n: usize) -> Result<Var> {
    let net = Network::new(&params.arch, theta)?;
    let pred = net.forward(&sample.views[..n], &sample.hyps)?;
    primary_loss(&pred, &sample.gt_depth, &sample.valid)
}

/// Plain gradient descent on the supervised loss; returns the final
/// parameters and the mean training loss of each epoch.
pub fn pretrain(params: &ModelParams, dataset: &[SceneSample], cfg: &PretrainConfig) -> Result<(ModelParams, Vec<f64>)> {
    if dataset.is_empty() {
        return invalid("pretraining needs a nonempty dataset");
    }
    if cfg.batch_size == 0 || cfg.n_views < 2 {
        return invalid("pretraining needs batch_size >= 1 and n_views >= 2");
    }
    if cfg.clip_norm.is_some_and(|c| !(c > 0.0)) {
        return invalid(format!("clip_norm must be positive, got {:?}", cfg.clip_norm));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = params.tensor();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad = Tensor::zeros(theta.shape());
            for &i in chunk {
                let tape = Tape::new();
                let leaf = tape.leaf(theta.clone());
                let loss = supervised_loss(&leaf, params, &dataset[i], cfg.n_views)?;
                if !loss.item().is_finite() {
                    return Err(Error::NonFinite(format!("pretraining loss at epoch {epoch}, scene {}", dataset[i].seed)));
                }
                total += loss.item();
                let g = tape.gradients(&loss, &[&leaf])?.remove(0);
                grad = grad.zip_map(&g, |a, b| a + b);
            }
            let mut scale = cfg.lr / chunk.len() as f64;
            if let Some(limit) = cfg.clip_norm {
                let norm = grad.data().iter().map(|g| g * g).sum::<f64>().sqrt() / chunk.len() as f64;
                if norm > limit {
                    scale *= limit / norm;
                }
            }
            theta = theta.zip_map(&grad, |t, g| t - scale * g);
        }
        trace.push(total / dataset.len() as f64);
    }
    Ok((params.with_theta(theta.into_data())?, trace))
}

/// `steps` gradient steps `φ ← φ − α ∇ inner(φ)` from `theta` on one tape.
///
/// With `record`, the gradients are themselves recorded so the returned
/// variable stays differentiable with respect to `theta` through every step.
/// Also returns the inner loss before the first step.
pub fn adapt<F>(tape: &Tape, theta: &Var, inner: F, alpha: f64, steps: usize, record: bool) -> Result<(Var, Option<f64>)>
where
    F: Fn(&Var) -> Result<Var>,
{
    let mode = if record { GradMode::CreateGraph } else { GradMode::Plain };
    let mut phi = theta.clone();
    let mut first = None;
    for step in 0..steps {
        let loss = inner(&phi)?;
        first.get_or_insert(loss.item());
        let g = tape.grad(&loss, &[&phi], mode)?.remove(0);
        finite_or(g.value(), || format!("inner gradient at adaptation step {step}"))?;
        phi = phi.sub(&g.scale(alpha)?)?;
        if !record {
            phi = tape.leaf(phi.value().clone());
        }
    }
    Ok((phi, first))
}

/// Gradient of `outer(φ(θ))` where `φ` is `steps` inner updates from `theta`.
///
/// First-order mode detaches `φ` and returns `∇_φ outer(φ)`. Also returns the
/// inner loss before adaptation (if any step ran) and the outer loss.
pub fn composed_meta_gradient<F, G>(
    theta: &Tensor,
    inner: F,
    outer: G,
    alpha: f64,
    steps: usize,
    second_order: bool,
) -> Result<(Tensor, Option<f64>, f64)>
where
    F: Fn(&Var) -> Result<Var>,
    G: Fn(&Var) -> Result<Var>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(theta.clone());
    let (mut phi, inner_loss) = adapt(&tape, &leaf, inner, alpha, steps, second_order)?;
    if !second_order {
        phi = tape.leaf(phi.value().clone());
    }
    let loss = outer(&phi)?;
    let wrt = if second_order { &leaf } else { &phi };
    let g = tape.gradients(&loss, &[wrt])?.remove(0);
    finite_or(&g, || "meta-gradient".to_string())?;
    Ok((g, inner_loss, loss.item()))
}

fn photo_objective<'a>(params: &'a ModelParams, sample: &'a SceneSample, cfg: &'a MetaConfig) -> impl Fn(&Var) -> Result<Var> + 'a {
    move |phi: &Var| {
        let net = Network::new(&params.arch, phi)?;
        photometric_loss(&net, &sample.views[..=cfg.m_sources], cfg.n_views, &sample.hyps, &cfg.photo)
    }
}

fn with_scene(e: Error, sample: &SceneSample) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("{msg}, scene {}", sample.seed)),
        other => other,
    }
}

/// `φ ← φ − α ∇ L_photo(φ)` repeated `steps` times over all `M + 1` views.
///
/// `record` only affects what a caller could differentiate afterwards; the
/// returned values are the same either way.
pub fn inner_adapt(
    params: &ModelParams,
    sample: &SceneSample,
    cfg: &MetaConfig,
    alpha: f64,
    steps: usize,
    record: bool,
) -> Result<ModelParams> {
    cfg.check_sample(sample)?;
    let objective = photo_objective(params, sample, cfg);
    let mut theta = params.tensor();
    if record {
        let tape = Tape::new();
        let leaf = tape.leaf(theta);
        let (phi, _) = adapt(&tape, &leaf, &objective, alpha, steps, true).map_err(|e| with_scene(e, sample))?;
        theta = phi.value().clone();
    } else {
        for step in 0..steps {
            let tape = Tape::new();
            let leaf = tape.leaf(theta.clone());
            let (phi, _) = adapt(&tape, &leaf, &objective, alpha, 1, false).map_err(|e| match e {
                Error::NonFinite(_) => {
                    Error::NonFinite(format!("inner gradient at adaptation step {step}, scene {}", sample.seed))
                }
                other => other,
            })?;
            theta = phi.value().clone();
        }
    }
    params.with_theta(theta.into_data())
}

/// Adapts a copy of `params` to one test sample with `tta_steps` updates.
pub fn test_time_adapt(params: &ModelParams, sample: &SceneSample, cfg: &MetaConfig) -> Result<ModelParams> {
    inner_adapt(params, sample, cfg, cfg.alpha, cfg.tta_steps, false)
}

/// Meta-gradient of one sample: `∇_θ L_pri(φ(θ))`, or `∇_φ L_pri(φ)` in first-order mode.
pub fn meta_gradient(params: &ModelParams, sample: &SceneSample, cfg: &MetaConfig) -> Result<(Tensor, MetaStats)> {
    cfg.check_sample(sample)?;
    let objective = photo_objective(params, sample, cfg);
    let outer = |phi: &Var| supervised_loss(phi, params, sample, cfg.n_views);
    let (g, inner, outer_loss) =
        composed_meta_gradient(&params.tensor(), &objective, outer, cfg.alpha, cfg.inner_steps, cfg.second_order)
            .map_err(|e| with_scene(e, sample))?;
    let inner_loss = match inner {
        Some(v) => v,
        None => objective(&Var::constant(params.tensor()))?.item(),
    };
    Ok((g, MetaStats { inner_loss, outer_loss }))
}

/// `θ − β Σ_b g_b`, accumulated in batch order, with the sum clipped to
/// `clip_norm` when set.
pub fn meta_step(params: &ModelParams, batch: &[&SceneSample], cfg: &MetaConfig) -> Result<(ModelParams, MetaStats)> {
    cfg.validate()?;
    if batch.is_empty() {
        return invalid("meta_step needs a nonempty batch");
    }
    let mut total = Tensor::zeros(&[params.theta.len()]);
    let (mut inner, mut outer) = (0.0, 0.0);
    for sample in batch {
        let (g, stats) = meta_gradient(params, sample, cfg)?;
        total = total.zip_map(&g, |a, b| a + b);
        inner += stats.inner_loss;
        outer += stats.outer_loss;
    }
    let mut scale = cfg.beta;
    if let Some(limit) = cfg.clip_norm {
        let norm = total.data().iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > limit {
            scale *= limit / norm;
        }
    }
    let theta: Vec<f64> = params.theta.iter().zip(total.data()).map(|(t, g)| t - scale * g).collect();
    let n = batch.len() as f64;
    Ok((params.with_theta(theta)?, MetaStats { inner_loss: inner / n, outer_loss: outer / n }))
}

/// `meta_iterations` meta-steps on seeded batches drawn without replacement.
pub fn meta_train(params: &ModelParams, dataset: &[SceneSample], cfg: &MetaConfig) -> Result<(ModelParams, Vec<MetaStats>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return invalid("meta-training needs a nonempty dataset");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = params.clone();
    let mut trace = Vec::with_capacity(cfg.meta_iterations);
    let b = cfg.meta_batch.min(dataset.len());
    for _ in 0..cfg.meta_iterations {
        let batch: Vec<&SceneSample> = dataset.choose_multiple(&mut rng, b).collect();
        let (next, stats) = meta_step(&current, &batch, cfg)?;
        current = next;
        trace.push(stats);
    }
    Ok((current, trace))
}
