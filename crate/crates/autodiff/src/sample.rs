//! Differentiable bilinear interpolation built from tape primitives.

use std::rc::Rc;

use crate::error::{AdError, Result};
use crate::tape::Var;
use crate::tensor::{Tensor, PAD};

/// Coordinates this close outside the image still count as in bounds, so
/// round-off in an identity mapping does not drop the border pixels.
pub const EDGE_TOLERANCE: f64 = 1e-9;

/// Result of [`bilinear_sample`].
pub struct Sampled {
    /// `[Q, C]` interpolated values, zero where `in_bounds` is false.
    pub values: Var,
    pub in_bounds: Vec<bool>,
}

/// Samples `grid` (`[H, W, C]`) at the `Q` points `(xs[q], ys[q])`.
///
/// Integer coordinates sit on pixel centers. A point is in bounds when it lies
/// in `[0, W-1] x [0, H-1]` (up to [`EDGE_TOLERANCE`]); the lower corner is clamped to `W-2`/`H-2` so the
/// last row and column are reachable. Out-of-bounds points (including
/// non-finite ones) yield zero with zero gradient. Gradients reach both the
/// grid and the coordinates; the cell choice itself is treated as constant.
pub fn bilinear_sample(grid: &Var, xs: &Var, ys: &Var) -> Result<Sampled> {
    let shape = grid.shape();
    if shape.len() != 3 {
        return Err(AdError::InvalidShape {
            op: "bilinear_sample",
            shape: shape.to_vec(),
            reason: "grid must be [H, W, C]".into(),
        });
    }
    if xs.shape() != ys.shape() || xs.shape().len() != 1 {
        return Err(AdError::ShapeMismatch {
            op: "bilinear_sample",
            lhs: xs.shape().to_vec(),
            rhs: ys.shape().to_vec(),
        });
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let q = xs.shape()[0];
    let (xv, yv) = (xs.value().data(), ys.value().data());

    let mut in_bounds = vec![false; q];
    let mut x0 = vec![0.0; q];
    let mut y0 = vec![0.0; q];
    let mut idx = vec![PAD; q * 4];
    let max_x0 = w.saturating_sub(2) as f64;
    let max_y0 = h.saturating_sub(2) as f64;
    for i in 0..q {
        let (x, y) = (xv[i], yv[i]);
        let ok = x.is_finite()
            && y.is_finite()
            && x >= -EDGE_TOLERANCE
            && y >= -EDGE_TOLERANCE
            && x <= (w - 1) as f64 + EDGE_TOLERANCE
            && y <= (h - 1) as f64 + EDGE_TOLERANCE;
        if !ok {
            continue;
        }
        in_bounds[i] = true;
        let cx = x.floor().clamp(0.0, max_x0);
        let cy = y.floor().clamp(0.0, max_y0);
        x0[i] = cx;
        y0[i] = cy;
        let (cx, cy) = (cx as usize, cy as usize);
        let cx1 = (cx + 1).min(w - 1);
        let cy1 = (cy + 1).min(h - 1);
        for (k, (px, py)) in [(cx, cy), (cx1, cy), (cx, cy1), (cx1, cy1)].into_iter().enumerate() {
            idx[i * 4 + k] = (py * w + px) as u32;
        }
    }

    // Non-finite coordinates are out of bounds; route them through a PAD
    // gather so they become zeros without touching finite entries.
    let sanitize = |v: &Var| -> Result<Var> {
        if v.value().is_finite() {
            return Ok(v.clone());
        }
        let map: Vec<u32> = v
            .value()
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| if a.is_finite() { i as u32 } else { PAD })
            .collect();
        v.gather(Rc::from(map), &[q])
    };
    let xs = sanitize(xs)?;
    let ys = sanitize(ys)?;
    let fx = xs.sub(&Var::constant(Tensor::vector(x0)))?;
    let fy = ys.sub(&Var::constant(Tensor::vector(y0)))?;
    // Corner k of (x0, y0), (x0+1, y0), (x0, y0+1), (x0+1, y0+1) has weight
    // (ax_k + bx_k fx)(ay_k + by_k fy).
    let col = |vals: [f64; 4]| Var::constant(Tensor::from_fn(&[q, 4], |i| vals[i % 4]));
    let wx = fx.broadcast_axis(1, 4)?.mul(&col([-1.0, 1.0, -1.0, 1.0]))?.add(&col([1.0, 0.0, 1.0, 0.0]))?;
    let wy = fy.broadcast_axis(1, 4)?.mul(&col([-1.0, -1.0, 1.0, 1.0]))?.add(&col([1.0, 1.0, 0.0, 0.0]))?;
    let weights = wx.mul(&wy)?;
    let values = grid.reshape(&[h * w, c])?.weighted_gather(&weights, Rc::from(idx))?;
    Ok(Sampled { values, in_bounds })
}
