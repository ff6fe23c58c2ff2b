use std::rc::Rc;

use crate::error::{AdError, Result};
use crate::tape::{record, Op, Tape, Var};
use crate::tensor::{numel, Tensor, PAD};

fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.value.shape() != b.value.shape() {
        return Err(AdError::ShapeMismatch {
            op,
            lhs: a.value.shape().to_vec(),
            rhs: b.value.shape().to_vec(),
        });
    }
    Ok(())
}

impl Var {
    pub fn constant(value: Tensor) -> Self {
        Var { value: Rc::new(value), node: None }
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Tensor::scalar(v))
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn is_constant(&self) -> bool {
        self.node.is_none()
    }

    pub fn tape(&self) -> Option<Tape> {
        self.node.as_ref().map(|n| n.tape.clone())
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Same value, cut off from the tape.
    pub fn detach(&self) -> Var {
        Var { value: self.value.clone(), node: None }
    }

    fn unary(&self, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value.map(f);
        record(name, op, &[self], out)
    }

    fn binary(&self, name: &'static str, op: Op, rhs: &Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        same_shape(name, self, rhs)?;
        let out = self.value.zip_map(&rhs.value, f);
        record(name, op, &[self, rhs], out)
    }

    pub fn add(&self, rhs: &Var) -> Result<Var> {
        self.binary("add", Op::Add, rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Var) -> Result<Var> {
        self.binary("sub", Op::Sub, rhs, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Var) -> Result<Var> {
        self.binary("mul", Op::Mul, rhs, |a, b| a * b)
    }

    pub fn div(&self, rhs: &Var) -> Result<Var> {
        self.binary("div", Op::Div, rhs, |a, b| a / b)
    }

    pub fn neg(&self) -> Result<Var> {
        self.unary("neg", Op::Neg, |a| -a)
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        self.unary("scale", Op::Scale(c), |a| a * c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var> {
        self.unary("add_scalar", Op::AddScalar, |a| a + c)
    }

    pub fn square(&self) -> Result<Var> {
        self.unary("square", Op::Square, |a| a * a)
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&self) -> Result<Var> {
        self.unary("abs", Op::Abs, f64::abs)
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary("exp", Op::Exp, f64::exp)
    }

    pub fn elu(&self) -> Result<Var> {
        self.unary("elu", Op::Elu, |a| if a > 0.0 { a } else { a.exp_m1() })
    }

    /// Clamp into `[lo, hi]`; gradient passes where the input is inside the closed interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(AdError::InvalidArgument(format!("clamp: empty interval [{lo}, {hi}]")));
        }
        self.unary("clamp", Op::Clamp { lo, hi }, |a| a.clamp(lo, hi))
    }

    /// Elementwise Huber penalty: `x²/2` inside `[-delta, delta]`, linear outside.
    pub fn huber(&self, delta: f64) -> Result<Var> {
        if !(delta > 0.0) {
            return Err(AdError::InvalidArgument(format!("huber: delta must be positive, got {delta}")));
        }
        self.unary("huber", Op::Huber { delta }, |a| huber_value(a, delta))
    }

    pub fn sum(&self) -> Result<Var> {
        record("sum", Op::Sum, &[self], Tensor::scalar(self.value.sum()))
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value.len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        if axis >= self.shape().len() {
            return Err(AdError::InvalidShape {
                op: "sum_axis",
                shape: self.shape().to_vec(),
                reason: format!("axis {axis} out of range"),
            });
        }
        let out = self.value.sum_axis(axis);
        record("sum_axis", Op::SumAxis(axis), &[self], out)
    }

    /// Inserts a new axis of extent `n` at `axis`, repeating the values along it.
    pub fn broadcast_axis(&self, axis: usize, n: usize) -> Result<Var> {
        if axis > self.shape().len() || n == 0 {
            return Err(AdError::InvalidShape {
                op: "broadcast_axis",
                shape: self.shape().to_vec(),
                reason: format!("cannot insert axis {axis} of extent {n}"),
            });
        }
        let out = self.value.broadcast_axis(axis, n);
        record("broadcast_axis", Op::BroadcastAxis(axis), &[self], out)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value.len() {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::from_parts(shape.to_vec(), self.value.data().to_vec());
        record("reshape", Op::Reshape, &[self], out)
    }

    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        self.mm(rhs, false, false)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn matmul_tn(&self, rhs: &Var) -> Result<Var> {
        self.mm(rhs, true, false)
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, rhs: &Var) -> Result<Var> {
        self.mm(rhs, false, true)
    }

    pub(crate) fn mm(&self, rhs: &Var, ta: bool, tb: bool) -> Result<Var> {
        let (a, b) = (self.shape(), rhs.shape());
        let ok = a.len() == 2 && b.len() == 2 && {
            let inner_a = if ta { a[0] } else { a[1] };
            let inner_b = if tb { b[1] } else { b[0] };
            inner_a == inner_b
        };
        if !ok {
            return Err(AdError::ShapeMismatch { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() });
        }
        let out = self.value.matmul(&rhs.value, ta, tb);
        record("matmul", Op::MatMul { ta, tb }, &[self, rhs], out)
    }

    pub fn transpose(&self) -> Result<Var> {
        if self.shape().len() != 2 {
            return Err(AdError::InvalidShape {
                op: "transpose",
                shape: self.shape().to_vec(),
                reason: "expected a matrix".into(),
            });
        }
        let out = self.value.transpose();
        record("transpose", Op::Transpose, &[self], out)
    }

    /// `out[i] = self[map[i]]`, with [`PAD`] entries producing zero.
    ///
    /// The indices are fixed at record time, which is how data-dependent
    /// selections (top-K, neighbor lookups) are expressed.
    pub fn gather(&self, map: Rc<[u32]>, shape: &[usize]) -> Result<Var> {
        check_map("gather", &map, self.value.len(), numel(shape))?;
        let out = self.value.gather(&map, shape);
        record("gather", Op::Gather(map), &[self], out)
    }

    /// Adjoint of [`Var::gather`]: `out[map[i]] += self[i]`.
    pub fn scatter_add(&self, map: Rc<[u32]>, shape: &[usize]) -> Result<Var> {
        check_map("scatter_add", &map, numel(shape), self.value.len())?;
        let out = self.value.scatter_add(&map, shape);
        record("scatter_add", Op::ScatterAdd(map), &[self], out)
    }

    /// Sparse row mixing: `out[q, c] = Σ_k w[q, k] · self[idx[q·K + k], c]`.
    ///
    /// `self` is `[R, C]`, `weights` is `[Q, K]`; [`PAD`] rows contribute zero.
    /// Both the source and the weights are differentiable.
    pub fn weighted_gather(&self, weights: &Var, idx: Rc<[u32]>) -> Result<Var> {
        let (src, w) = (self.shape(), weights.shape());
        if src.len() != 2 || w.len() != 2 {
            return Err(AdError::ShapeMismatch { op: "weighted_gather", lhs: src.to_vec(), rhs: w.to_vec() });
        }
        check_map("weighted_gather", &idx, src[0], w[0] * w[1])?;
        let out = self.value.weighted_gather(&weights.value, &idx);
        record("weighted_gather", Op::WeightedGather(idx), &[self, weights], out)
    }

    /// Adjoint of [`Var::weighted_gather`] in its source: `out[idx[q·K + k], c] += w[q, k] · self[q, c]`,
    /// producing `[rows, C]`.
    pub fn weighted_scatter(&self, weights: &Var, idx: Rc<[u32]>, rows: usize) -> Result<Var> {
        let (v, w) = (self.shape(), weights.shape());
        if v.len() != 2 || w.len() != 2 || v[0] != w[0] {
            return Err(AdError::ShapeMismatch { op: "weighted_scatter", lhs: v.to_vec(), rhs: w.to_vec() });
        }
        check_map("weighted_scatter", &idx, rows, w[0] * w[1])?;
        let out = self.value.weighted_scatter(&weights.value, &idx, rows);
        record("weighted_scatter", Op::WeightedScatter(idx), &[self, weights], out)
    }

    /// `out[q, k] = Σ_c g[q, c] · self[idx[q·K + k], c]`, the weight adjoint of
    /// [`Var::weighted_gather`]. `K` is `idx.len() / Q`.
    pub fn row_dot(&self, g: &Var, idx: Rc<[u32]>) -> Result<Var> {
        let (src, gs) = (self.shape(), g.shape());
        if src.len() != 2 || gs.len() != 2 || src[1] != gs[1] || gs[0] == 0 || idx.len() % gs[0] != 0 {
            return Err(AdError::ShapeMismatch { op: "row_dot", lhs: src.to_vec(), rhs: gs.to_vec() });
        }
        check_map("row_dot", &idx, src[0], idx.len())?;
        let k = idx.len() / gs[0];
        let out = self.value.row_dot(&g.value, &idx, k);
        record("row_dot", Op::RowDot(idx), &[self, g], out)
    }

    /// Softmax along `axis`. The per-slice maximum is subtracted as a constant.
    pub fn softmax(&self, axis: usize) -> Result<Var> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(AdError::InvalidShape {
                op: "softmax",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let n = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let outer = numel(&shape[..axis]);
        let x = self.value.data();
        let mut max = vec![f64::NEG_INFINITY; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    let v = x[(o * n + k) * inner + i];
                    let m = &mut max[o * inner + i];
                    if v > *m {
                        *m = v;
                    }
                }
            }
        }
        let mut reduced = shape.clone();
        reduced.remove(axis);
        let shift = Var::constant(Tensor::from_parts(reduced, max)).broadcast_axis(axis, n)?;
        let e = self.sub(&shift)?.exp()?;
        let total = e.sum_axis(axis)?.broadcast_axis(axis, n)?;
        e.div(&total)
    }
}

pub(crate) fn huber_value(a: f64, delta: f64) -> f64 {
    let m = a.abs();
    if m <= delta {
        0.5 * a * a
    } else {
        delta * (m - 0.5 * delta)
    }
}

fn check_map(op: &'static str, map: &[u32], src_len: usize, out_len: usize) -> Result<()> {
    if map.len() != out_len {
        return Err(AdError::InvalidArgument(format!(
            "{op}: index map has {} entries for {out_len} outputs",
            map.len()
        )));
    }
    if let Some(bad) = map.iter().find(|&&i| i != PAD && i as usize >= src_len) {
        return Err(AdError::InvalidArgument(format!(
            "{op}: index {bad} out of range for source of length {src_len}"
        )));
    }
    Ok(())
}
