//! Reverse-mode automatic differentiation over [`Tensor`] operations.
//!
//! A [`Tape`] records an append-only DAG of eagerly evaluated operations;
//! [`backward`] replays it once in reverse to produce exact first-order
//! gradients with respect to any set of leaves (model parameters and network
//! inputs alike). The engine is deliberately first-order only: second-order
//! quantities are obtained elsewhere by finite differences of these
//! gradients, so no tape-of-tape machinery exists here.
//!
//! Scalars are tensors of shape `[1]`. A tape is single-use per backward
//! pass: a second `backward` without [`Tape::reset`] panics.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    /// Broadcast-add a rank-1 vector to every row of a rank-2 matrix.
    AddRow(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Clamp01(usize),
    LogSoftmaxRows(usize),
    /// Mean negative picked log-probability: -(1/n) sum_i input[i, labels[i]].
    NllMean(usize, Vec<usize>),
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// True when a gradient must flow through this node (it is a
    /// requires-grad leaf or has such a leaf upstream).
    needs_grad: bool,
}

/// Recording tape. Nodes only ever reference earlier nodes, so the vector is
/// topologically ordered by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clear all nodes and re-arm the tape for another backward pass.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.consumed.set(false);
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        assert!(value.is_finite(), "leaf value must be finite");
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self, id }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }
}

/// Handle to a node on a tape. Cheap to copy; the value lives in the tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars belong to different tapes"
        );
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = self.value().add(&other.value());
        let needs = self.tape.needs(self.id) || self.tape.needs(other.id);
        self.tape.push(v, Op::Add(self.id, other.id), needs)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = self.value().sub(&other.value());
        let needs = self.tape.needs(self.id) || self.tape.needs(other.id);
        self.tape.push(v, Op::Sub(self.id, other.id), needs)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = self.value().hadamard(&other.value());
        let needs = self.tape.needs(self.id) || self.tape.needs(other.id);
        self.tape.push(v, Op::Mul(self.id, other.id), needs)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().scale(c);
        let needs = self.tape.needs(self.id);
        self.tape.push(v, Op::Scale(self.id, c), needs)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = self.value().matmul(&other.value());
        let needs = self.tape.needs(self.id) || self.tape.needs(other.id);
        self.tape.push(v, Op::Matmul(self.id, other.id), needs)
    }

    /// Add a rank-1 vector to every row of a rank-2 matrix (bias add, or a
    /// universal perturbation applied to a whole batch).
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self.same_tape(&row);
        let m = self.value();
        let r = row.value();
        assert_eq!(r.rank(), 1, "add_row vector must be rank 1");
        assert_eq!(
            m.ncols(),
            r.len(),
            "add_row width mismatch: {:?} vs {:?}",
            m.shape(),
            r.shape()
        );
        let cols = m.ncols();
        let data: Vec<f64> = m
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| x + r.data()[idx % cols])
            .collect();
        let v = Tensor::from_vec(m.shape(), data);
        let needs = self.tape.needs(self.id) || self.tape.needs(row.id);
        self.tape.push(v, Op::AddRow(self.id, row.id), needs)
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        let needs = self.tape.needs(self.id);
        self.tape.push(v, Op::Relu(self.id), needs)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(stable_sigmoid);
        let needs = self.tape.needs(self.id);
        self.tape.push(v, Op::Sigmoid(self.id), needs)
    }

    /// Clip into [0, 1]. The subgradient at the boundaries is zero, matching
    /// the relu convention.
    pub fn clamp01(self) -> Var<'t> {
        let v = self.value().clamp01();
        let needs = self.tape.needs(self.id);
        self.tape.push(v, Op::Clamp01(self.id), needs)
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(self) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "log_softmax_rows needs rank 2");
        let (n, c) = (x.nrows(), x.ncols());
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &x.data()[i * c..(i + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let v = Tensor::from_vec(&[n, c], out);
        let needs = self.tape.needs(self.id);
        self.tape.push(v, Op::LogSoftmaxRows(self.id), needs)
    }

    /// Scalar sum of all entries.
    pub fn sum(self) -> Var<'t> {
        let v = Tensor::from_vec(&[1], vec![self.value().sum()]);
        let needs = self.tape.needs(self.id);
        self.tape.push(v, Op::Sum(self.id), needs)
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean cross-entropy of `logits` (n x c) against integer `labels`, fused as
/// log-softmax plus negative log-likelihood for stability.
pub fn cross_entropy_mean<'t>(logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    let shape = logits.shape();
    assert_eq!(shape.len(), 2, "cross_entropy_mean needs rank-2 logits");
    let (n, c) = (shape[0], shape[1]);
    assert_eq!(labels.len(), n, "label count must match logit rows");
    assert!(
        labels.iter().all(|&y| y < c),
        "label out of range [0, {c})"
    );
    let lsm = logits.log_softmax_rows();
    let picked_mean = {
        let v = lsm.value();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| v.get2(i, y))
            .sum();
        Tensor::from_vec(&[1], vec![-total / n as f64])
    };
    let needs = lsm.tape.needs(lsm.id);
    lsm.tape
        .push(picked_mean, Op::NllMean(lsm.id, labels.to_vec()), needs)
}

/// Gradients keyed by leaf node. Leaves created with `requires_grad = false`
/// never appear; requested requires-grad leaves always do (zeros when no
/// gradient reaches them).
#[derive(Debug)]
pub struct GradMap {
    grads: HashMap<usize, Tensor>,
}

impl GradMap {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Reverse pass: exact gradients of a scalar `loss` with respect to each
/// requested leaf. Panics if the loss is not scalar, a leaf lives on another
/// tape, or the tape has already been consumed.
pub fn backward(loss: Var<'_>, leaves: &[Var<'_>]) -> GradMap {
    for l in leaves {
        loss.same_tape(l);
    }
    assert!(
        !loss.tape.consumed.get(),
        "tape already consumed by a previous backward; call reset()"
    );
    loss.tape.consumed.set(true);

    let nodes = loss.tape.nodes.borrow();
    assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");

    let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
    if nodes[loss.id].needs_grad {
        grads[loss.id] = Some(Tensor::from_vec(&[1], vec![1.0]));
    }

    for id in (0..=loss.id).rev() {
        let g = match grads[id].take() {
            Some(g) => g,
            None => continue,
        };
        let node = &nodes[id];
        match &node.op {
            Op::Leaf => {
                // Re-store: leaves keep their accumulated gradient.
                grads[id] = Some(g);
            }
            Op::Add(a, b) => {
                accumulate(&mut grads, &nodes, *a, g.clone());
                accumulate(&mut grads, &nodes, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads, &nodes, *a, g.clone());
                accumulate(&mut grads, &nodes, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                accumulate(&mut grads, &nodes, *a, g.hadamard(bv));
                accumulate(&mut grads, &nodes, *b, g.hadamard(av));
            }
            Op::Scale(a, c) => {
                accumulate(&mut grads, &nodes, *a, g.scale(*c));
            }
            Op::Matmul(a, b) => {
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                accumulate(&mut grads, &nodes, *a, g.matmul(&bv.transpose()));
                accumulate(&mut grads, &nodes, *b, av.transpose().matmul(&g));
            }
            Op::AddRow(a, b) => {
                let cols = nodes[*b].value.len();
                let mut col_sum = vec![0.0; cols];
                for (idx, &gv) in g.data().iter().enumerate() {
                    col_sum[idx % cols] += gv;
                }
                accumulate(&mut grads, &nodes, *a, g.clone());
                accumulate(
                    &mut grads,
                    &nodes,
                    *b,
                    Tensor::from_vec(&[cols], col_sum),
                );
            }
            Op::Relu(a) => {
                let av = &nodes[*a].value;
                let masked = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect(),
                );
                accumulate(&mut grads, &nodes, *a, masked);
            }
            Op::Sigmoid(a) => {
                let s = &node.value;
                let d = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(s.data())
                        .map(|(&gv, &sv)| gv * sv * (1.0 - sv))
                        .collect(),
                );
                accumulate(&mut grads, &nodes, *a, d);
            }
            Op::Clamp01(a) => {
                let av = &nodes[*a].value;
                let masked = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .map(|(&gv, &x)| if x > 0.0 && x < 1.0 { gv } else { 0.0 })
                        .collect(),
                );
                accumulate(&mut grads, &nodes, *a, masked);
            }
            Op::LogSoftmaxRows(a) => {
                // dx = g - softmax(x) * rowsum(g)
                let y = &node.value;
                let (n, c) = (y.nrows(), y.ncols());
                let mut out = vec![0.0; n * c];
                for i in 0..n {
                    let grow = &g.data()[i * c..(i + 1) * c];
                    let yrow = &y.data()[i * c..(i + 1) * c];
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..c {
                        out[i * c + j] = grow[j] - yrow[j].exp() * gsum;
                    }
                }
                accumulate(&mut grads, &nodes, *a, Tensor::from_vec(&[n, c], out));
            }
            Op::NllMean(a, labels) => {
                let gs = g.scalar();
                let av = &nodes[*a].value;
                let (n, c) = (av.nrows(), av.ncols());
                let mut out = vec![0.0; n * c];
                let w = -gs / n as f64;
                for (i, &y) in labels.iter().enumerate() {
                    out[i * c + y] = w;
                }
                accumulate(&mut grads, &nodes, *a, Tensor::from_vec(&[n, c], out));
            }
            Op::Sum(a) => {
                let gs = g.scalar();
                let shape = nodes[*a].value.shape().to_vec();
                accumulate(&mut grads, &nodes, *a, Tensor::filled(&shape, gs));
            }
        }
    }

    let mut map = HashMap::new();
    for leaf in leaves {
        let node = &nodes[leaf.id];
        assert!(
            matches!(node.op, Op::Leaf),
            "backward target {} is not a leaf",
            leaf.id
        );
        if !node.needs_grad {
            continue;
        }
        let g = grads[leaf.id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
        map.insert(leaf.id, g);
    }
    GradMap { grads: map }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].needs_grad {
        return;
    }
    grads[id] = Some(match grads[id].take() {
        Some(existing) => existing.add(&g),
        None => g,
    });
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_leaf: usize,
    pub worst_coord: usize,
    pub coords_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely: |a - b| / max(|a|, |b|, 1).
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compare reverse-mode gradients of a scalar-valued builder against central
/// finite differences, coordinate by coordinate. The step is
/// `1e-6 * (1 + |entry|)` per coordinate.
pub fn grad_check<F>(build: F, points: &[Tensor], tolerance: f64) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let eval = |pts: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = pts.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        build(&tape, &vars).value().scalar()
    };

    // Analytic gradients in one reverse pass.
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = points.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = build(&tape, &vars);
    assert_eq!(loss.shape(), vec![1], "grad_check needs a scalar function");
    let grads = backward(loss, &vars);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_leaf: 0,
        worst_coord: 0,
        coords_checked: 0,
        tolerance,
        passed: true,
    };

    for (li, point) in points.iter().enumerate() {
        let analytic = grads.get(&vars[li]).expect("leaf gradient present");
        for ci in 0..point.len() {
            let x = point.data()[ci];
            let h = 1e-6 * (1.0 + x.abs());
            let mut plus = points.to_vec();
            let mut pdata = plus[li].data().to_vec();
            pdata[ci] = x + h;
            plus[li] = Tensor::from_vec(point.shape(), pdata);
            let mut minus = points.to_vec();
            let mut mdata = minus[li].data().to_vec();
            mdata[ci] = x - h;
            minus[li] = Tensor::from_vec(point.shape(), mdata);

            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = rel_error(analytic.data()[ci], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_leaf = li;
                report.worst_coord = ci;
            }
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    report
}
