//! Row-major dense `f64` storage and the raw kernels the tape builds on.

use crate::error::{AdError, Result};

/// Index value in a gather/scatter map that selects an implicit zero.
pub const PAD: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(AdError::InvalidShape {
                op: "tensor",
                shape,
                reason: "extents must be positive".into(),
            });
        }
        if numel(&shape) != data.len() {
            return Err(AdError::InvalidShape {
                op: "tensor",
                shape: shape.clone(),
                reason: format!("expected {} elements, got {}", numel(&shape), data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: Vec::new(), data: vec![v] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        Self { shape: shape.to_vec(), data: (0..numel(shape)).map(f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn sum_axis(&self, axis: usize) -> Self {
        let (outer, n, inner) = split_axis(&self.shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..n {
                let src = &self.data[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Self::from_parts(shape, out)
    }

    pub(crate) fn broadcast_axis(&self, axis: usize, n: usize) -> Self {
        let mut shape = self.shape.clone();
        shape.insert(axis, n);
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let src = &self.data[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(src);
            }
        }
        Self::from_parts(shape, out)
    }

    /// `op(self) · op(rhs)` where `op` transposes when the flag is set.
    pub(crate) fn matmul(&self, rhs: &Self, ta: bool, tb: bool) -> Self {
        let (m, k) = if ta { (self.shape[1], self.shape[0]) } else { (self.shape[0], self.shape[1]) };
        let n = if tb { rhs.shape[0] } else { rhs.shape[1] };
        let (a, b) = (&self.data, &rhs.data);
        let mut out = vec![0.0; m * n];
        match (ta, tb) {
            (false, true) => {
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] = dot(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]);
                    }
                }
            }
            (false, false) if n < 4 => {
                let bt = rhs.transpose();
                return self.matmul(&bt, false, true);
            }
            (false, false) => {
                for i in 0..m {
                    let row = &mut out[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = a[i * k + p];
                        if av != 0.0 {
                            axpy(row, av, &b[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
            (true, false) if n == 1 => {
                for p in 0..k {
                    let bv = b[p];
                    if bv != 0.0 {
                        axpy(&mut out, bv, &a[p * m..(p + 1) * m]);
                    }
                }
            }
            (true, false) => {
                for p in 0..k {
                    let brow = &b[p * n..(p + 1) * n];
                    for i in 0..m {
                        let av = a[p * m + i];
                        if av != 0.0 {
                            axpy(&mut out[i * n..(i + 1) * n], av, brow);
                        }
                    }
                }
            }
            (true, true) => {
                let at = self.transpose();
                return at.matmul(rhs, false, true);
            }
        }
        Self::from_parts(vec![m, n], out)
    }

    pub(crate) fn transpose(&self) -> Self {
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_parts(vec![c, r], out)
    }

    pub(crate) fn gather(&self, map: &[u32], shape: &[usize]) -> Self {
        let data = map
            .iter()
            .map(|&i| if i == PAD { 0.0 } else { self.data[i as usize] })
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub(crate) fn scatter_add(&self, map: &[u32], shape: &[usize]) -> Self {
        let mut out = vec![0.0; numel(shape)];
        for (&i, &v) in map.iter().zip(&self.data) {
            if i != PAD {
                out[i as usize] += v;
            }
        }
        Self::from_parts(shape.to_vec(), out)
    }

    /// `out[q, c] = Σ_k w[q, k] · self[idx[q·K + k], c]` for `self: [R, C]`, `w: [Q, K]`.
    pub(crate) fn weighted_gather(&self, w: &Self, idx: &[u32]) -> Self {
        let (q, k) = (w.shape[0], w.shape[1]);
        let c = self.shape[1];
        let mut out = vec![0.0; q * c];
        for i in 0..q {
            let dst = &mut out[i * c..(i + 1) * c];
            for j in 0..k {
                let r = idx[i * k + j];
                let wt = w.data[i * k + j];
                if r == PAD || wt == 0.0 {
                    continue;
                }
                let src = &self.data[r as usize * c..(r as usize + 1) * c];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
        Self::from_parts(vec![q, c], out)
    }

    /// Adjoint of [`Tensor::weighted_gather`] in the source: `out[idx[q·K + k], c] += w[q, k] · self[q, c]`.
    pub(crate) fn weighted_scatter(&self, w: &Self, idx: &[u32], rows: usize) -> Self {
        let (q, k) = (w.shape[0], w.shape[1]);
        let c = self.shape[1];
        let mut out = vec![0.0; rows * c];
        for i in 0..q {
            let src = &self.data[i * c..(i + 1) * c];
            for j in 0..k {
                let r = idx[i * k + j];
                let wt = w.data[i * k + j];
                if r == PAD || wt == 0.0 {
                    continue;
                }
                let dst = &mut out[r as usize * c..(r as usize + 1) * c];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
        Self::from_parts(vec![rows, c], out)
    }

    /// `out[q, k] = Σ_c g[q, c] · self[idx[q·K + k], c]`.
    pub(crate) fn row_dot(&self, g: &Self, idx: &[u32], k: usize) -> Self {
        let (q, c) = (g.shape[0], g.shape[1]);
        let mut out = vec![0.0; q * k];
        for i in 0..q {
            let gi = &g.data[i * c..(i + 1) * c];
            for j in 0..k {
                let r = idx[i * k + j];
                if r == PAD {
                    continue;
                }
                let src = &self.data[r as usize * c..(r as usize + 1) * c];
                out[i * k + j] = gi.iter().zip(src).map(|(a, b)| a * b).sum();
            }
        }
        Self::from_parts(vec![q, k], out)
    }
}
