//! Depth accuracy metrics pooled over pixels.
//!
//! `rel` is the mean absolute relative error in percent. `tau(t)` is the
//! percentage of pixels whose ratio `max(pred/gt, gt/pred)` is strictly below
//! `t`; nonpositive predictions always count as outliers.

use autodiff::Tensor;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::geometry::VisibilityMask;
use crate::metatta::{test_time_adapt, MetaConfig};
use crate::mvsnet::{predict_depth, ModelParams};
use crate::scenegen::SceneSample;

pub const TAU_STRICT: f64 = 1.03;
pub const TAU_LOOSE: f64 = 1.10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rel: f64,
    pub tau_103: f64,
    pub tau_110: f64,
    pub pixel_count: usize,
    /// The resolved configuration that produced the numbers.
    pub config_echo: String,
}

/// Running sums over every valid pixel of every sample seen so far.
#[derive(Clone, Copy, Debug, Default)]
pub struct PixelPool {
    abs_rel: f64,
    strict: usize,
    loose: usize,
    count: usize,
}

fn check_shapes(pred: &Tensor, gt: &Tensor, valid: &VisibilityMask) -> Result<()> {
    let (h, w) = (valid.height(), valid.width());
    if pred.shape() != [h, w] || gt.shape() != [h, w] {
        return invalid(format!(
            "metric shapes disagree: pred {:?}, gt {:?}, mask {h}x{w}",
            pred.shape(),
            gt.shape()
        ));
    }
    Ok(())
}

fn ratio_below(pred: f64, gt: f64, t: f64) -> bool {
    pred > 0.0 && (pred / gt).max(gt / pred) < t
}

impl PixelPool {
    pub fn add(&mut self, pred: &Tensor, gt: &Tensor, valid: &VisibilityMask) -> Result<()> {
        check_shapes(pred, gt, valid)?;
        for (i, &v) in valid.bits().iter().enumerate() {
            if !v {
                continue;
            }
            let (p, g) = (pred.data()[i], gt.data()[i]);
            if !(g > 0.0) {
                return invalid(format!("ground truth depth must be positive on valid pixels, got {g} at {i}"));
            }
            self.abs_rel += (p - g).abs() / g;
            self.strict += ratio_below(p, g, TAU_STRICT) as usize;
            self.loose += ratio_below(p, g, TAU_LOOSE) as usize;
            self.count += 1;
        }
        Ok(())
    }

    pub fn report(&self, config_echo: String) -> Result<MetricsReport> {
        if self.count == 0 {
            return invalid("no valid pixels to evaluate");
        }
        let n = self.count as f64;
        Ok(MetricsReport {
            rel: 100.0 * self.abs_rel / n,
            tau_103: 100.0 * self.strict as f64 / n,
            tau_110: 100.0 * self.loose as f64 / n,
            pixel_count: self.count,
            config_echo,
        })
    }
}

pub fn rel_error(pred: &Tensor, gt: &Tensor, valid: &VisibilityMask) -> Result<f64> {
    let mut pool = PixelPool::default();
    pool.add(pred, gt, valid)?;
    Ok(pool.report(String::new())?.rel)
}

pub fn inlier_ratio(pred: &Tensor, gt: &Tensor, valid: &VisibilityMask, t: f64) -> Result<f64> {
    if !(t > 1.0) {
        return invalid(format!("inlier threshold must exceed 1, got {t}"));
    }
    check_shapes(pred, gt, valid)?;
    let (mut hits, mut n) = (0usize, 0usize);
    for (i, &v) in valid.bits().iter().enumerate() {
        if v {
            hits += ratio_below(pred.data()[i], gt.data()[i], t) as usize;
            n += 1;
        }
    }
    if n == 0 {
        return invalid("no valid pixels to evaluate");
    }
    Ok(100.0 * hits as f64 / n as f64)
}

/// Depth for one sample from the reference and its first `N - 1` sources,
/// after test-time adaptation when `adapt` is set.
pub fn predict_sample(params: &ModelParams, sample: &SceneSample, cfg: &MetaConfig, adapt: bool) -> Result<Tensor> {
    let used = if adapt { test_time_adapt(params, sample, cfg)? } else { params.clone() };
    if sample.views.len() < cfg.n_views {
        return invalid(format!("scene {} has {} views, need N={}", sample.seed, sample.views.len(), cfg.n_views));
    }
    predict_depth(&used, &sample.views[..cfg.n_views], &sample.hyps)
}

pub fn evaluate(params: &ModelParams, test: &[SceneSample], cfg: &MetaConfig, adapt: bool) -> Result<MetricsReport> {
    if test.is_empty() {
        return invalid("evaluation needs a nonempty test set");
    }
    let mut pool = PixelPool::default();
    for sample in test {
        let pred = predict_sample(params, sample, cfg, adapt)?;
        pool.add(&pred, &sample.gt_depth, &sample.valid)?;
    }
    let echo = toml::to_string(cfg).map_err(|e| crate::error::Error::Config(e.to_string()))?;
    pool.report(echo)
}
