//! Standard finite-difference suite: one small scalar function per recorded
//! operation, checked at many random points.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::check::check_gradient;
use crate::error::Result;
use crate::sample::bilinear_sample;
use crate::tape::{GradMode, Tape, Var};
use crate::tensor::{Tensor, PAD};

pub type CaseFn = Box<dyn Fn(&Var, &Tensor) -> Result<Var>>;

/// A scalar function of `x` with shape `shape`. The second argument is a
/// fixed random companion tensor of the same shape.
pub struct OpCase {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub f: CaseFn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    /// Tape gradient against central differences of the function.
    First,
    /// Differentiated gradient-vector product against central differences
    /// of the gradient, exercising backprop through backprop.
    Second,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub instances: usize,
    /// Largest relative error over all instances and coordinates.
    pub worst: f64,
}

/// Uniform entries in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn op_cases() -> Vec<OpCase> {
    let list: Vec<(&'static str, Vec<usize>, CaseFn)> = {
        let c = |t: &Tensor| Var::constant(t.clone());
        vec![
            ("add", vec![3, 4], Box::new(move |x, t| x.add(&c(t))?.mul(x)?.sum())),
            ("sub", vec![3, 4], Box::new(move |x, t| c(t).sub(x)?.square()?.sum())),
            ("mul", vec![3, 4], Box::new(move |x, t| x.mul(x)?.mul(&c(t))?.sum())),
            ("div", vec![3, 4], Box::new(move |x, t| c(t).div(&x.square()?.add_scalar(1.5)?)?.sum())),
            ("neg/scale", vec![5], Box::new(|x, _| x.neg()?.scale(2.5)?.mul(x)?.sum())),
            ("abs", vec![6], Box::new(move |x, t| x.abs()?.mul(&c(t))?.sum())),
            ("exp", vec![6], Box::new(move |x, t| x.exp()?.mul(&c(t))?.sum())),
            ("elu", vec![8], Box::new(move |x, t| x.elu()?.mul(&c(t))?.sum())),
            ("clamp", vec![8], Box::new(move |x, t| x.clamp(-0.4, 0.6)?.mul(&c(t))?.sum())),
            ("huber", vec![8], Box::new(move |x, t| x.huber(0.3)?.mul(&c(t))?.sum())),
            ("mean", vec![2, 5], Box::new(|x, _| x.square()?.mean())),
            ("sum_axis", vec![2, 3, 4], Box::new(|x, _| x.sum_axis(1)?.square()?.sum())),
            ("broadcast_axis", vec![3, 2], Box::new(move |x, _| x.broadcast_axis(1, 4)?.exp()?.sum())),
            ("reshape", vec![2, 6], Box::new(|x, _| x.reshape(&[3, 4])?.sum_axis(0)?.square()?.sum())),
            (
                "matmul",
                vec![3, 4],
                Box::new(move |x, t| x.matmul(&c(t).transpose()?)?.square()?.sum()),
            ),
            ("matmul_tn", vec![3, 4], Box::new(move |x, t| x.matmul_tn(&c(t))?.square()?.sum())),
            ("matmul_tn_rhs", vec![3, 4], Box::new(move |x, t| c(t).matmul_tn(&x.exp()?)?.square()?.sum())),
            ("matmul_nt", vec![3, 4], Box::new(move |x, t| x.matmul_nt(&c(t))?.square()?.sum())),
            ("matmul_nt_rhs", vec![3, 4], Box::new(move |x, t| c(t).matmul_nt(&x)?.square()?.sum())),
            (
                "matmul_tn_column",
                vec![3, 4],
                Box::new(|x, _| x.matmul_tn(&x.sum_axis(1)?.reshape(&[3, 1])?)?.square()?.sum()),
            ),
            (
                "matmul_wide",
                vec![3, 4],
                Box::new(move |x, t| x.matmul(&c(t).transpose()?.matmul(&c(t))?)?.square()?.sum()),
            ),
            ("transpose", vec![3, 4], Box::new(move |x, t| x.transpose()?.matmul(&c(t))?.square()?.sum())),
            (
                "gather",
                vec![6],
                Box::new(|x, _| {
                    let map: Rc<[u32]> = Rc::from(vec![5, 0, PAD, 2, 2, 1, 4]);
                    x.gather(map, &[7])?.square()?.sum()
                }),
            ),
            (
                "scatter_add",
                vec![6],
                Box::new(|x, _| {
                    let map: Rc<[u32]> = Rc::from(vec![1, 1, PAD, 0, 3, 2]);
                    x.scatter_add(map, &[4])?.square()?.sum()
                }),
            ),
            (
                "weighted_gather",
                vec![4, 3],
                Box::new(move |x, t| {
                    let idx: Rc<[u32]> = Rc::from(vec![3, 0, PAD, 1, 2, 2, 0, 3, 1, 1, PAD, 0]);
                    let w = x.add(&c(t))?.reshape(&[6, 2])?;
                    x.weighted_gather(&w, idx)?.square()?.sum()
                }),
            ),
            (
                "weighted_scatter",
                vec![6, 2],
                Box::new(move |x, t| {
                    let idx: Rc<[u32]> = Rc::from(vec![1, 0, 3, PAD, 2, 2, 0, 1, 3, 3, PAD, 0]);
                    let w = x.scale(0.7)?.add(&c(t))?;
                    x.weighted_scatter(&w, idx, 4)?.square()?.sum()
                }),
            ),
            (
                "row_dot",
                vec![4, 3],
                Box::new(move |x, t| {
                    let idx: Rc<[u32]> = Rc::from(vec![2, 0, PAD, 3, 1, 1, 0, 2]);
                    x.row_dot(&x.mul(&c(t))?, idx)?.square()?.sum()
                }),
            ),
            ("softmax", vec![3, 5], Box::new(move |x, t| x.softmax(1)?.mul(&c(t))?.sum())),
            (
                "bilinear_sample:grid",
                vec![4, 5, 2],
                Box::new(|x, _| {
                    let xs = Var::constant(Tensor::vector(vec![0.3, 2.7, 3.9, 1.0, -0.5]));
                    let ys = Var::constant(Tensor::vector(vec![0.1, 1.4, 2.95, 3.0, 1.0]));
                    bilinear_sample(x, &xs, &ys)?.values.square()?.sum()
                }),
            ),
            (
                "bilinear_sample:coords",
                vec![6],
                Box::new(move |x, _| {
                    let grid = Var::constant(Tensor::from_fn(&[5, 6, 3], |i| ((i * 37) % 11) as f64 / 11.0));
                    let xs = x.scale(0.4)?.add_scalar(2.3)?;
                    let ys = x.scale(-0.3)?.add_scalar(1.6)?;
                    bilinear_sample(&grid, &xs, &ys)?.values.square()?.sum()
                }),
            ),
        ]
    };
    list.into_iter().map(|(name, shape, f)| OpCase { name, shape, f }).collect()
}

/// Runs every case at `instances` seeded random points starting from `first_seed`.
pub fn check_ops(first_seed: u64, instances: usize, order: Order) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for case in op_cases() {
        let mut worst: f64 = 0.0;
        for i in 0..instances as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(first_seed + i);
            let point = random_tensor(&case.shape, &mut rng);
            let companion = random_tensor(&case.shape, &mut rng);
            let err = match order {
                Order::First => check_gradient(|_, x| (case.f)(x, &companion), &point, 1e-6)?,
                Order::Second => {
                    let dir = random_tensor(&case.shape, &mut rng);
                    let hvp = |tape: &Tape, x: &Var| -> Result<Var> {
                        let y = (case.f)(x, &companion)?;
                        let g = tape.grad(&y, &[x], GradMode::CreateGraph)?.remove(0);
                        g.mul(&Var::constant(dir.clone()))?.sum()
                    };
                    check_gradient(hvp, &point, 1e-5)?
                }
            };
            worst = worst.max(err);
        }
        out.push(CaseResult { name: case.name.to_string(), instances, worst });
    }
    Ok(out)
}
