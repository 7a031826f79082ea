//! Eager reverse-mode tape.
//!
//! Every op evaluates immediately and appends one node holding its output and
//! whatever it needs for the backward pass. Node ids are handed out in
//! creation order, so inputs always precede the nodes that consume them and a
//! single reverse sweep visits each node once.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::Csr;
use crate::tensor::{matmul_a_bt_into, matmul_at_b_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for ops implemented outside the tape (the lattice filter).
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;

    /// Gradients for each input, given the upstream gradient of the output.
    /// Entries for inputs with `needs[i] == false` may be `None`.
    fn backward(&self, inputs: &[&Tensor], grad_out: &[f64], needs: &[bool]) -> Result<Vec<Option<Vec<f64>>>>;

    /// Fingerprint of any discrete structure chosen in the forward pass
    /// (e.g. simplex assignment). Finite-difference checks use it to reject
    /// perturbations that cross a discontinuity.
    fn signature(&self) -> Option<u64> {
        None
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    SoftmaxRows(Var),
    NllLoss { logits: Var, rows: Vec<usize>, labels: Vec<usize>, probs: Vec<f64> },
    Dropout { input: Var, keep: Vec<f64> },
    ConcatCols(Var, Var),
    SliceCols { input: Var, start: usize },
    Sum(Var),
    PairDistance { emb: Var, pairs: Arc<Vec<(usize, usize)>> },
    PairwiseDistance(Var),
    EdgeSoftmax { logits: Var, csr: Arc<Csr> },
    EdgePairSum { target: Var, source: Var, csr: Arc<Csr> },
    Spmm { weights: Var, x: Var, csr: Arc<Csr> },
    HomogeneousNormalize(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRowBias(a, b) | ConcatCols(a, b) => {
                vec![*a, *b]
            }
            Transpose(a)
            | Scale(a, _)
            | Elu(a)
            | LeakyRelu(a, _)
            | SoftmaxRows(a)
            | Sum(a)
            | PairwiseDistance(a)
            | HomogeneousNormalize(a) => vec![*a],
            NllLoss { logits, .. } => vec![*logits],
            Dropout { input, .. } | SliceCols { input, .. } => vec![*input],
            PairDistance { emb, .. } => vec![*emb],
            EdgeSoftmax { logits, .. } => vec![*logits],
            EdgePairSum { target, source, .. } => vec![*target, *source],
            Spmm { weights, x, .. } => vec![*weights, *x],
            Custom { inputs, .. } => inputs.clone(),
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            MatMul(..) => "matmul",
            Transpose(..) => "transpose",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Scale(..) => "scale",
            AddRowBias(..) => "add_row_bias",
            Elu(..) => "elu",
            LeakyRelu(..) => "leaky_relu",
            SoftmaxRows(..) => "softmax_rows",
            NllLoss { .. } => "nll_loss",
            Dropout { .. } => "dropout",
            ConcatCols(..) => "concat_cols",
            SliceCols { .. } => "slice_cols",
            Sum(..) => "sum",
            PairDistance { .. } => "pair_distance",
            PairwiseDistance(..) => "pairwise_distance",
            EdgeSoftmax { .. } => "edge_softmax",
            EdgePairSum { .. } => "edge_pair_sum",
            Spmm { .. } => "spmm",
            HomogeneousNormalize(..) => "homogeneous_normalize",
            Custom { op, .. } => op.name(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// Recorded computation. One tape per forward/backward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
    matmul_grad_fault: Option<f64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: true, matmul_grad_fault: None }
    }

    /// Turns the per-op NaN/Inf check on or off (on by default).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Test hook: scales the gradient that matmul passes to its right operand.
    /// Only used to prove that the gradient checker catches a broken backward.
    #[doc(hidden)]
    pub fn inject_matmul_grad_fault(&mut self, factor: Option<f64>) {
        self.matmul_grad_fault = factor;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf input. Parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    /// Combined fingerprint of the discrete choices made by custom ops.
    pub fn structure_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            if let Op::Custom { op, .. } = &node.op {
                if let Some(s) = op.signature() {
                    h = (h ^ s).wrapping_mul(0x1000_0000_01b3);
                }
            }
        }
        h
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    pub(crate) fn push_custom(&mut self, value: Tensor, inputs: Vec<Var>, op: Box<dyn CustomOp>) -> Result<Var> {
        self.push(value, Op::Custom { inputs, op })
    }

    /// Reverse sweep from a scalar `loss`. Gradients of earlier calls are
    /// discarded; fan-out contributions are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.node_backward(id, &g)?;
            for (var, gi) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
            grads[id] = Some(g);
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        for (id, g) in grads.into_iter().enumerate() {
            if self.nodes[id].requires_grad {
                self.nodes[id].grad = g;
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradients flowing from node `id` into its inputs.
    fn node_backward(&self, id: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[id];
        let out = &node.value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_a_bt_into(g, bv.data(), &mut ga, m, k, n);
                    res.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_at_b_into(av.data(), g, &mut gb, m, k, n);
                    if let Some(f) = self.matmul_grad_fault {
                        gb.iter_mut().for_each(|x| *x *= f);
                    }
                    res.push((*b, gb));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                let gt = Tensor::from_rows(r, c, g.to_vec()).transpose();
                res.push((*a, gt.into_data()));
            }
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                if self.needs(*a) {
                    res.push((*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()));
                }
                if self.needs(*b) {
                    res.push((*b, g.iter().zip(av).map(|(x, y)| x * y).collect()));
                }
            }
            Op::Scale(a, c) => res.push((*a, g.iter().map(|x| x * c).collect())),
            Op::AddRowBias(a, bias) => {
                res.push((*a, g.to_vec()));
                if self.needs(*bias) {
                    let c = out.cols();
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                    }
                    res.push((*bias, gb));
                }
            }
            Op::Elu(a) => {
                let x = self.val(*a).data();
                let gi =
                    g.iter().zip(x.iter().zip(out.data())).map(|(gv, (&xv, &yv))| if xv > 0.0 { *gv } else { gv * (yv + 1.0) }).collect();
                res.push((*a, gi));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.val(*a).data();
                let gi = g.iter().zip(x).map(|(gv, &xv)| if xv > 0.0 { *gv } else { gv * slope }).collect();
                res.push((*a, gi));
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut gi = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(c).zip(out.data().chunks(c)).zip(gi.chunks_mut(c)) {
                    let dotp: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dotp);
                    }
                }
                res.push((*a, gi));
            }
            Op::NllLoss { logits, rows, labels, probs } => {
                let c = self.val(*logits).cols();
                let scale = g[0] / rows.len() as f64;
                let mut gi = vec![0.0; self.val(*logits).len()];
                for (k, (&r, &lab)) in rows.iter().zip(labels).enumerate() {
                    let p = &probs[k * c..(k + 1) * c];
                    let dst = &mut gi[r * c..(r + 1) * c];
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d = scale * (p[j] - if j == lab { 1.0 } else { 0.0 });
                    }
                }
                res.push((*logits, gi));
            }
            Op::Dropout { input, keep } => {
                res.push((*input, g.iter().zip(keep).map(|(x, k)| x * k).collect()));
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (self.val(*a).cols(), self.val(*b).cols());
                let rows = out.rows();
                let mut ga = Vec::with_capacity(rows * p);
                let mut gb = Vec::with_capacity(rows * q);
                for row in g.chunks(p + q).take(rows) {
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                res.push((*a, ga));
                res.push((*b, gb));
            }
            Op::SliceCols { input, start } => {
                let src = self.val(*input);
                let (c, w) = (src.cols(), out.cols());
                let mut gi = vec![0.0; src.len()];
                for (r, row) in g.chunks(w.max(1)).enumerate().take(out.rows()) {
                    gi[r * c + start..r * c + start + w].copy_from_slice(row);
                }
                res.push((*input, gi));
            }
            Op::Sum(a) => res.push((*a, vec![g[0]; self.val(*a).len()])),
            Op::PairDistance { emb, pairs } => {
                let e = self.val(*emb);
                let d = e.cols();
                let mut gi = vec![0.0; e.len()];
                for (k, &(i, j)) in pairs.iter().enumerate() {
                    let dist = out.data()[k];
                    if dist < DIST_EPS {
                        continue;
                    }
                    let s = g[k] / dist;
                    for c in 0..d {
                        let diff = e.get(i, c) - e.get(j, c);
                        gi[i * d + c] += s * diff;
                        gi[j * d + c] -= s * diff;
                    }
                }
                res.push((*emb, gi));
            }
            Op::PairwiseDistance(emb) => {
                let e = self.val(*emb);
                let (n, d) = (e.rows(), e.cols());
                let mut gi = vec![0.0; e.len()];
                for i in 0..n {
                    for j in 0..n {
                        let dist = out.data()[i * n + j];
                        if dist < DIST_EPS {
                            continue;
                        }
                        let s = g[i * n + j] / dist;
                        for c in 0..d {
                            let diff = e.get(i, c) - e.get(j, c);
                            gi[i * d + c] += s * diff;
                            gi[j * d + c] -= s * diff;
                        }
                    }
                }
                res.push((*emb, gi));
            }
            Op::EdgeSoftmax { logits, csr } => {
                let y = out.data();
                let mut gi = vec![0.0; y.len()];
                for i in 0..csr.num_nodes() {
                    let r = csr.row_range(i);
                    let dotp: f64 = r.clone().map(|e| g[e] * y[e]).sum();
                    for e in r {
                        gi[e] = y[e] * (g[e] - dotp);
                    }
                }
                res.push((*logits, gi));
            }
            Op::EdgePairSum { target, source, csr } => {
                let n = csr.num_nodes();
                let mut gt = vec![0.0; n];
                let mut gs = vec![0.0; n];
                for i in 0..n {
                    for e in csr.row_range(i) {
                        gt[i] += g[e];
                        gs[csr.col_idx()[e]] += g[e];
                    }
                }
                res.push((*target, gt));
                res.push((*source, gs));
            }
            Op::Spmm { weights, x, csr } => {
                let xv = self.val(*x);
                let w = self.val(*weights).data();
                let f = xv.cols();
                if self.needs(*weights) {
                    let mut gw = vec![0.0; w.len()];
                    for i in 0..csr.num_nodes() {
                        let gr = &g[i * f..(i + 1) * f];
                        for e in csr.row_range(i) {
                            let xr = xv.row(csr.col_idx()[e]);
                            gw[e] = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        }
                    }
                    res.push((*weights, gw));
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; xv.len()];
                    for i in 0..csr.num_nodes() {
                        let gr = &g[i * f..(i + 1) * f];
                        for e in csr.row_range(i) {
                            let j = csr.col_idx()[e];
                            let dst = &mut gx[j * f..(j + 1) * f];
                            dst.iter_mut().zip(gr).for_each(|(d, gv)| *d += w[e] * gv);
                        }
                    }
                    res.push((*x, gx));
                }
            }
            Op::HomogeneousNormalize(a) => {
                let src = self.val(*a);
                let c = out.cols();
                let mut gi = vec![0.0; src.len()];
                for r in 0..out.rows() {
                    let row = src.row(r);
                    let den = row[c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dst = &mut gi[r * (c + 1)..(r + 1) * (c + 1)];
                    let mut gden = 0.0;
                    for k in 0..c {
                        dst[k] = gr[k] / den;
                        gden -= gr[k] * row[k] / (den * den);
                    }
                    dst[c] = gden;
                }
                res.push((*a, gi));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| self.val(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.needs(*v)).collect();
                let gs = op.backward(&ins, g, &needs)?;
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        res.push((*v, gi));
                    }
                }
            }
        }
        Ok(res)
    }
}

/// Distances below this get the zero subgradient.
pub(crate) const DIST_EPS: f64 = 1e-12;
