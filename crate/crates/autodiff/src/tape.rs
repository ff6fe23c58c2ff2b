//! The recording graph and reverse-mode sweep.
//!
//! Every vector-Jacobian product is written in terms of [`Var`] operations. In
//! [`GradMode::Plain`] the sweep feeds those operations detached constants, so
//! nothing is recorded and the result is an ordinary gradient. In
//! [`GradMode::CreateGraph`] the same code runs on live variables, which
//! appends the backward pass to the tape and makes the returned gradients
//! differentiable in turn.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{AdError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    Square,
    Abs,
    Exp,
    Elu,
    Clamp { lo: f64, hi: f64 },
    Huber { delta: f64 },
    Sum,
    SumAxis(usize),
    BroadcastAxis(usize),
    Reshape,
    MatMul { ta: bool, tb: bool },
    Transpose,
    Gather(Rc<[u32]>),
    ScatterAdd(Rc<[u32]>),
    WeightedGather(Rc<[u32]>),
    WeightedScatter(Rc<[u32]>),
    RowDot(Rc<[u32]>),
}

#[derive(Clone)]
pub(crate) struct Input {
    pub(crate) value: Rc<Tensor>,
    pub(crate) id: Option<usize>,
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Input>,
    pub(crate) out: Rc<Tensor>,
}

/// Append-only operation log. Cloning yields another handle to the same log.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

/// A tensor value, optionally tied to the node of a [`Tape`] that produced it.
#[derive(Clone)]
pub struct Var {
    pub(crate) value: Rc<Tensor>,
    pub(crate) node: Option<NodeRef>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("node", &self.node.as_ref().map(|n| n.id))
            .finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Gradients are plain values; nothing is appended to the tape.
    Plain,
    /// The backward pass is itself recorded so it can be differentiated.
    CreateGraph,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    /// Registers `value` as a differentiation root.
    pub fn leaf(&self, value: Tensor) -> Var {
        let value = Rc::new(value);
        let id = self.push(Node { op: Op::Leaf, inputs: Vec::new(), out: value.clone() });
        Var { value, node: Some(NodeRef { tape: self.clone(), id }) }
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    fn owns(&self, v: &Var) -> Option<usize> {
        match &v.node {
            Some(n) if n.tape.same(self) => Some(n.id),
            _ => None,
        }
    }

    /// Gradients of the single-element `loss` with respect to each of `wrt`.
    ///
    /// Variables the loss does not depend on receive zeros. In
    /// [`GradMode::CreateGraph`] the results live on this tape.
    pub fn grad(&self, loss: &Var, wrt: &[&Var], mode: GradMode) -> Result<Vec<Var>> {
        if loss.value.len() != 1 {
            return Err(AdError::NotScalar(loss.value.shape().to_vec()));
        }
        for w in wrt.iter().chain(std::iter::once(&loss)) {
            if let Some(n) = &w.node {
                if !n.tape.same(self) {
                    return Err(AdError::ForeignTape("backward"));
                }
            }
        }
        let zeros = |w: &Var| Var::constant(Tensor::zeros(w.value.shape()));
        let Some(root) = self.owns(loss) else {
            return Ok(wrt.iter().map(|w| zeros(w)).collect());
        };

        let n = root + 1;
        let mut needs = vec![false; n];
        for w in wrt {
            if let Some(id) = self.owns(w) {
                if id < n {
                    needs[id] = true;
                }
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..n {
                if !needs[i] {
                    needs[i] = nodes[i].inputs.iter().any(|inp| inp.id.is_some_and(|j| needs[j]));
                }
            }
        }

        let wanted: Vec<bool> = {
            let mut w = vec![false; n];
            for v in wrt {
                if let Some(id) = self.owns(v) {
                    if id < n {
                        w[id] = true;
                    }
                }
            }
            w
        };

        let mut grads: Vec<Option<Var>> = vec![None; n];
        grads[root] = Some(Var::constant(Tensor::ones(loss.value.shape())));
        let mut results: Vec<Option<Var>> = vec![None; n];

        for i in (0..n).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if wanted[i] {
                results[i] = Some(g.clone());
            }
            let (op, inputs, out) = {
                let nodes = self.nodes.borrow();
                let node = &nodes[i];
                (node.op.clone(), node.inputs.clone(), node.out.clone())
            };
            if matches!(op, Op::Leaf) {
                continue;
            }
            let live = |value: &Rc<Tensor>, id: Option<usize>| Var {
                value: value.clone(),
                node: match mode {
                    GradMode::CreateGraph => id.map(|id| NodeRef { tape: self.clone(), id }),
                    GradMode::Plain => None,
                },
            };
            let in_vars: Vec<Var> = inputs.iter().map(|inp| live(&inp.value, inp.id)).collect();
            let out_var = live(&out, Some(i));
            let need_in: Vec<bool> =
                inputs.iter().map(|inp| inp.id.is_some_and(|j| needs[j])).collect();
            let contribs = vjp(&op, &in_vars, &out_var, &g, &need_in)?;
            for ((inp, c), &needed) in inputs.iter().zip(contribs).zip(&need_in) {
                let (Some(j), Some(c), true) = (inp.id, c, needed) else { continue };
                grads[j] = Some(match grads[j].take() {
                    Some(acc) => acc.add(&c)?,
                    None => c,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match self.owns(w) {
                Some(id) if id < n => results[id].clone().unwrap_or_else(|| zeros(w)),
                _ => zeros(w),
            })
            .collect())
    }

    /// Plain-mode convenience returning raw tensors.
    pub fn gradients(&self, loss: &Var, wrt: &[&Var]) -> Result<Vec<Tensor>> {
        Ok(self
            .grad(loss, wrt, GradMode::Plain)?
            .into_iter()
            .map(|v| v.value.as_ref().clone())
            .collect())
    }

    /// Forward value of node `id`; used by tests checking that backward leaves values intact.
    pub fn node_value(&self, id: usize) -> Option<Tensor> {
        self.nodes.borrow().get(id).map(|n| n.out.as_ref().clone())
    }
}

fn vjp(op: &Op, x: &[Var], out: &Var, g: &Var, need: &[bool]) -> Result<Vec<Option<Var>>> {
    let one = |v: Result<Var>| -> Result<Vec<Option<Var>>> { Ok(vec![Some(v?)]) };
    match op {
        Op::Leaf => Ok(Vec::new()),
        Op::Add => Ok(vec![Some(g.clone()), Some(g.clone())]),
        Op::Sub => Ok(vec![Some(g.clone()), if need[1] { Some(g.neg()?) } else { None }]),
        Op::Mul => Ok(vec![
            if need[0] { Some(g.mul(&x[1])?) } else { None },
            if need[1] { Some(g.mul(&x[0])?) } else { None },
        ]),
        Op::Div => Ok(vec![
            if need[0] { Some(g.div(&x[1])?) } else { None },
            if need[1] { Some(g.mul(out)?.div(&x[1])?.neg()?) } else { None },
        ]),
        Op::Neg => one(g.neg()),
        Op::Scale(c) => one(g.scale(*c)),
        Op::AddScalar => Ok(vec![Some(g.clone())]),
        Op::Square => one(g.mul(&x[0])?.scale(2.0)),
        Op::Abs => {
            let sign = x[0].value.map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
            one(g.mul(&Var::constant(sign)))
        }
        Op::Exp => one(g.mul(out)),
        Op::Elu => {
            // d/dx elu = 1 for x > 0, elu(x) + 1 otherwise.
            let pos = x[0].value.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let neg = pos.map(|p| 1.0 - p);
            let deriv = out.add_scalar(1.0)?.mul(&Var::constant(neg))?.add(&Var::constant(pos))?;
            one(g.mul(&deriv))
        }
        Op::Clamp { lo, hi } => {
            let inside = x[0].value.map(|v| if v >= *lo && v <= *hi { 1.0 } else { 0.0 });
            one(g.mul(&Var::constant(inside)))
        }
        Op::Huber { delta } => one(g.mul(&x[0].clamp(-delta, *delta)?)),
        Op::Sum => {
            let shape = x[0].value.shape().to_vec();
            let n = x[0].value.len();
            one(g.reshape(&[])?.broadcast_axis(0, n)?.reshape(&shape))
        }
        Op::SumAxis(axis) => {
            let n = x[0].value.shape()[*axis];
            one(g.broadcast_axis(*axis, n))
        }
        Op::BroadcastAxis(axis) => one(g.sum_axis(*axis)),
        Op::Reshape => one(g.reshape(x[0].value.shape())),
        Op::MatMul { ta, tb } => {
            let (a, b) = (&x[0], &x[1]);
            let (da, db) = match (ta, tb) {
                (false, false) => (g.mm(b, false, true), a.mm(g, true, false)),
                (true, false) => (b.mm(g, false, true), a.mm(g, false, false)),
                (false, true) => (g.mm(b, false, false), g.mm(a, true, false)),
                (true, true) => (b.mm(g, true, true), g.mm(a, true, true)),
            };
            Ok(vec![if need[0] { Some(da?) } else { None }, if need[1] { Some(db?) } else { None }])
        }
        Op::Transpose => one(g.transpose()),
        Op::Gather(map) => one(g.scatter_add(map.clone(), x[0].value.shape())),
        Op::ScatterAdd(map) => one(g.gather(map.clone(), x[0].value.shape())),
        Op::WeightedGather(idx) => {
            let rows = x[0].value.shape()[0];
            Ok(vec![
                if need[0] { Some(g.weighted_scatter(&x[1], idx.clone(), rows)?) } else { None },
                if need[1] { Some(x[0].row_dot(g, idx.clone())?) } else { None },
            ])
        }
        Op::WeightedScatter(idx) => Ok(vec![
            if need[0] { Some(g.weighted_gather(&x[1], idx.clone())?) } else { None },
            if need[1] { Some(g.row_dot(&x[0], idx.clone())?) } else { None },
        ]),
        Op::RowDot(idx) => {
            let rows = x[0].value.shape()[0];
            Ok(vec![
                if need[0] { Some(x[1].weighted_scatter(g, idx.clone(), rows)?) } else { None },
                if need[1] { Some(x[0].weighted_gather(g, idx.clone())?) } else { None },
            ])
        }
    }
}

/// Records `out` as the result of `op` on `inputs`. Returns a constant when no
/// input lives on a tape.
pub(crate) fn record(name: &'static str, op: Op, inputs: &[&Var], out: Tensor) -> Result<Var> {
    let mut tape: Option<&Tape> = None;
    for v in inputs {
        if let Some(n) = &v.node {
            match tape {
                None => tape = Some(&n.tape),
                Some(t) if t.same(&n.tape) => {}
                Some(_) => return Err(AdError::ForeignTape(name)),
            }
        }
    }
    let out = Rc::new(out);
    let Some(tape) = tape else {
        return Ok(Var { value: out, node: None });
    };
    let node = Node {
        op,
        inputs: inputs
            .iter()
            .map(|v| Input { value: v.value.clone(), id: v.node.as_ref().map(|n| n.id) })
            .collect(),
        out: out.clone(),
    };
    let id = tape.push(node);
    Ok(Var { value: out, node: Some(NodeRef { tape: tape.clone(), id }) })
}
