//! Self-supervised cross-view photometric consistency: Huber pixel and
//! gradient residuals with per-pixel top-K view selection, plus masked SSIM.

use std::rc::Rc;

use autodiff::{Tensor, Var, PAD};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{inverse_warp, DepthHypotheses, PosedImage, VisibilityMask};
use crate::maps::cached;
use crate::mvsnet::Network;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhotoLossConfig {
    pub huber_delta: f64,
    pub top_k: usize,
    pub ssim_window: usize,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    /// Weight on the SSIM term relative to the reprojection term.
    pub ssim_weight: f64,
}

impl Default for PhotoLossConfig {
    fn default() -> Self {
        Self { huber_delta: 0.1, top_k: 2, ssim_window: 7, ssim_c1: 1e-4, ssim_c2: 9e-4, ssim_weight: 1.0 }
    }
}

impl PhotoLossConfig {
    pub fn validate(&self, sources: usize, height: usize, width: usize) -> Result<()> {
        if !(self.huber_delta > 0.0) {
            return invalid(format!("huber_delta must be positive, got {}", self.huber_delta));
        }
        if self.top_k == 0 || self.top_k > sources {
            return invalid(format!("top_k must be in 1..={sources}, got {}", self.top_k));
        }
        if self.ssim_window % 2 == 0 || self.ssim_window > height.min(width) {
            return invalid(format!("ssim_window {} must be odd and fit {height}x{width}", self.ssim_window));
        }
        if !(self.ssim_c1 > 0.0 && self.ssim_c2 > 0.0) || !(self.ssim_weight >= 0.0) {
            return invalid("ssim stabilizers must be positive and the weight nonnegative");
        }
        Ok(())
    }
}

pub fn huber(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        0.5 * x * x
    } else {
        delta * (x.abs() - 0.5 * delta)
    }
}

fn neighbor_map(h: usize, w: usize, c: usize, dx: usize, dy: usize) -> Rc<[u32]> {
    cached("neighbor", &[h, w, c, dx, dy], || {
        let mut map = Vec::with_capacity(h * w * c);
        for r in 0..h {
            for col in 0..w {
                let (r2, c2) = if r + dy < h && col + dx < w { (r + dy, col + dx) } else { (r, col) };
                for ch in 0..c {
                    map.push(((r2 * w + c2) * c + ch) as u32);
                }
            }
        }
        map
    })
}

/// Forward differences along x and y; the last column (resp. row) is zero.
pub fn image_gradient(img: &Var) -> Result<(Var, Var)> {
    let s = img.shape().to_vec();
    if s.len() != 3 || s[0] < 2 || s[1] < 2 {
        return invalid(format!("image_gradient needs an [H>=2, W>=2, C] image, got {s:?}"));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let gx = img.gather(neighbor_map(h, w, c, 1, 0), &s)?.sub(img)?;
    let gy = img.gather(neighbor_map(h, w, c, 0, 1), &s)?.sub(img)?;
    Ok((gx, gy))
}

fn mask_channels(mask: &VisibilityMask, c: usize) -> Tensor {
    let bits = mask.bits();
    Tensor::from_fn(&[mask.height(), mask.width(), c], |i| if bits[i / c] { 1.0 } else { 0.0 })
}

/// Mask for a forward difference: both the pixel and its neighbor are visible.
fn pair_mask(mask: &VisibilityMask, c: usize, dx: usize, dy: usize) -> Tensor {
    let (h, w) = (mask.height(), mask.width());
    Tensor::from_fn(&[h, w, c], |i| {
        let p = i / c;
        let (r, col) = (p / w, p % w);
        let (r2, c2) = if r + dy < h && col + dx < w { (r + dy, col + dx) } else { (r, col) };
        if mask.get(r, col) && mask.get(r2, c2) {
            1.0
        } else {
            0.0
        }
    })
}

fn check_image_pair(reference: &Tensor, warped: &Var, mask: &VisibilityMask) -> Result<()> {
    let s = reference.shape();
    if warped.shape() != s || s.len() != 3 || [mask.height(), mask.width()] != s[..2] {
        return invalid(format!(
            "reprojection shapes differ: ref {s:?}, warped {:?}, mask {}x{}",
            warped.shape(),
            mask.height(),
            mask.width()
        ));
    }
    Ok(())
}

/// Per-pixel `[H, W]` map of Huber pixel residuals plus L1 gradient residuals.
pub fn reproj_error_per_view(
    reference: &Tensor,
    warped: &Var,
    mask: &VisibilityMask,
    cfg: &PhotoLossConfig,
) -> Result<Var> {
    check_image_pair(reference, warped, mask)?;
    let c = reference.shape()[2];
    let diff = warped.sub(&Var::constant(reference.clone()))?;
    let pixel = diff.mul(&Var::constant(mask_channels(mask, c)))?.huber(cfg.huber_delta)?;
    let (gx, gy) = image_gradient(&diff)?;
    let grad_x = gx.mul(&Var::constant(pair_mask(mask, c, 1, 0)))?.abs()?;
    let grad_y = gy.mul(&Var::constant(pair_mask(mask, c, 0, 1)))?.abs()?;
    Ok(pixel.add(&grad_x)?.add(&grad_y)?.sum_axis(2)?)
}

/// Per pixel, sums the `k` smallest losses among visible views (all visible
/// views if fewer), then normalizes by the pixel count.
pub fn topk_reproj(maps: &[Var], masks: &[VisibilityMask], k: usize) -> Result<Var> {
    if maps.is_empty() || maps.len() != masks.len() {
        return invalid("topk_reproj needs one mask per loss map, at least one view");
    }
    if k == 0 || k > maps.len() {
        return invalid(format!("top-K needs 1 <= K <= {}, got {k}", maps.len()));
    }
    let shape = maps[0].shape().to_vec();
    if maps.iter().any(|m| m.shape() != shape) || masks.iter().any(|m| [m.height(), m.width()] != shape[..]) {
        return invalid("topk_reproj: loss maps and masks must share one [H, W] shape");
    }
    let pixels = maps[0].value().len();
    let mut selected = vec![vec![0.0; pixels]; maps.len()];
    let mut order: Vec<usize> = Vec::with_capacity(maps.len());
    for p in 0..pixels {
        order.clear();
        order.extend((0..maps.len()).filter(|&m| masks[m].bits()[p]));
        order.sort_by(|&a, &b| maps[a].value().data()[p].total_cmp(&maps[b].value().data()[p]).then(a.cmp(&b)));
        for &m in order.iter().take(k) {
            selected[m][p] = 1.0;
        }
    }
    let mut total: Option<Var> = None;
    for (map, sel) in maps.iter().zip(selected) {
        let term = map.mul(&Var::constant(Tensor::new(shape.clone(), sel)?))?;
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    Ok(total.expect("at least one view").sum()?.scale(1.0 / pixels as f64)?)
}

fn box_map(h: usize, w: usize, c: usize, win: usize, horizontal: bool) -> Rc<[u32]> {
    cached("box", &[h, w, c, win, horizontal as usize], || {
        let half = (win / 2) as isize;
        let mut map = Vec::with_capacity(h * w * c * win);
        for r in 0..h as isize {
            for col in 0..w as isize {
                for ch in 0..c {
                    for t in -half..=half {
                        let (r2, c2) = if horizontal { (r, col + t) } else { (r + t, col) };
                        map.push(if r2 < 0 || c2 < 0 || r2 >= h as isize || c2 >= w as isize {
                            PAD
                        } else {
                            ((r2 as usize * w + c2 as usize) * c + ch) as u32
                        });
                    }
                }
            }
        }
        map
    })
}

/// Unnormalized `win x win` box sum over `[H, W, C]`, zero outside the image.
fn box_sum(x: &Var, win: usize) -> Result<Var> {
    let s = x.shape().to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    let across = x.gather(box_map(h, w, c, win, true), &[h, w, c, win])?.sum_axis(3)?;
    Ok(across.gather(box_map(h, w, c, win, false), &[h, w, c, win])?.sum_axis(3)?)
}

fn box_sum_tensor(x: &Tensor, win: usize) -> Result<Tensor> {
    Ok(box_sum(&Var::constant(x.clone()), win)?.value().clone())
}

/// Per-pixel-channel masked SSIM loss `clamp((1 - SSIM) / 2, 0, 1)`, as `[H, W, C]`.
///
/// Window statistics only include masked pixels; the uniform weights are
/// renormalized by the number of masked pixels in each window.
pub fn ssim_map(reference: &Tensor, warped: &Var, mask: &VisibilityMask, cfg: &PhotoLossConfig) -> Result<Var> {
    check_image_pair(reference, warped, mask)?;
    let c = reference.shape()[2];
    let win = cfg.ssim_window;
    let m = mask_channels(mask, c);
    let weight = box_sum_tensor(&m, win)?.map(|v| if v > 0.0 { 1.0 / v } else { 0.0 });
    let weight = Var::constant(weight);
    let mv = Var::constant(m.clone());
    let x = Var::constant(reference.clone());
    let wmean = |v: &Var| -> Result<Var> { box_sum(&v.mul(&mv)?, win)?.mul(&weight).map_err(Into::into) };

    let mu_x = wmean(&x)?;
    let mu_y = wmean(warped)?;
    let var_x = wmean(&x.square()?)?.sub(&mu_x.square()?)?;
    let var_y = wmean(&warped.square()?)?.sub(&mu_y.square()?)?;
    let cov = wmean(&x.mul(warped)?)?.sub(&mu_x.mul(&mu_y)?)?;

    let num = mu_x.mul(&mu_y)?.scale(2.0)?.add_scalar(cfg.ssim_c1)?.mul(&cov.scale(2.0)?.add_scalar(cfg.ssim_c2)?)?;
    let den = mu_x
        .square()?
        .add(&mu_y.square()?)?
        .add_scalar(cfg.ssim_c1)?
        .mul(&var_x.add(&var_y)?.add_scalar(cfg.ssim_c2)?)?;
    let ssim = num.div(&den)?;
    Ok(ssim.neg()?.add_scalar(1.0)?.scale(0.5)?.clamp(0.0, 1.0)?)
}

/// Mean of [`ssim_map`] over every masked (view, pixel, channel) triple.
pub fn ssim_loss(reference: &Tensor, warped: &[Var], masks: &[VisibilityMask], cfg: &PhotoLossConfig) -> Result<Var> {
    if warped.len() != masks.len() {
        return invalid("ssim_loss needs one mask per warped image");
    }
    let c = reference.shape().get(2).copied().unwrap_or(0);
    let mut total = Var::scalar(0.0);
    let mut count = 0usize;
    for (img, mask) in warped.iter().zip(masks) {
        if mask.count() == 0 {
            continue;
        }
        let map = ssim_map(reference, img, mask, cfg)?;
        total = total.add(&map.mul(&Var::constant(mask_channels(mask, c)))?.sum()?)?;
        count += mask.count() * c;
    }
    if count == 0 {
        return Ok(total);
    }
    Ok(total.scale(1.0 / count as f64)?)
}

/// Photometric loss of the reference against its sources warped with `depth`.
///
/// `views[0]` is the reference; every other view is a source.
pub fn photometric_loss_from_depth(views: &[PosedImage], depth: &Var, cfg: &PhotoLossConfig) -> Result<Var> {
    if views.len() < 2 {
        return invalid(format!("photometric loss needs a reference and >=1 source, got {} views", views.len()));
    }
    let reference = &views[0];
    cfg.validate(views.len() - 1, reference.height(), reference.width())?;
    let mut warped = Vec::with_capacity(views.len() - 1);
    let mut masks = Vec::with_capacity(views.len() - 1);
    let mut maps = Vec::with_capacity(views.len() - 1);
    for src in &views[1..] {
        let (img, mask) = inverse_warp(src, &reference.camera, depth)?;
        maps.push(reproj_error_per_view(&reference.image, &img, &mask, cfg)?);
        warped.push(img);
        masks.push(mask);
    }
    let reproj = topk_reproj(&maps, &masks, cfg.top_k)?;
    let ssim = ssim_loss(&reference.image, &warped, &masks, cfg)?;
    Ok(reproj.add(&ssim.scale(cfg.ssim_weight)?)?)
}

/// Predicts depth from the reference and the first `n - 1` sources, then
/// scores it against all sources in `views`.
pub fn photometric_loss(
    net: &Network,
    views: &[PosedImage],
    n: usize,
    hyps: &DepthHypotheses,
    cfg: &PhotoLossConfig,
) -> Result<Var> {
    if n < 2 || n > views.len() {
        return invalid(format!("primary view count {n} must be in 2..={}", views.len()));
    }
    let depth = net.forward(&views[..n], hyps)?;
    photometric_loss_from_depth(views, &depth, cfg)
}
