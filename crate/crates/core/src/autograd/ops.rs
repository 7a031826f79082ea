//! Forward definitions of the differentiable ops.

use std::sync::Arc;

use rand::Rng;

use super::tape::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Csr;
use crate::tensor::Tensor;

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect())?;
        self.push(out, Op::Scale(a, c))
    }

    /// Adds a `1 x C` bias row to every row of `a`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.len() != x.cols() {
            return Err(shape_err("add_row_bias", format!("{} columns vs bias of {}", x.cols(), b.len())));
        }
        let mut out = x.clone();
        let c = x.cols();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            row.iter_mut().zip(b.data()).for_each(|(o, bv)| *o += bv);
        }
        self.push(out, Op::AddRowBias(a, bias))
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { v.exp_m1() }).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Elu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { v * slope }).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::LeakyRelu(a, slope))
    }

    /// Row-wise softmax. Masked-out entries (`mask[k] == false`) are exactly zero.
    pub fn softmax_rows(&mut self, logits: Var, mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(logits);
        let (r, c) = (x.rows(), x.cols());
        if let Some(m) = mask {
            if m.len() != x.len() {
                return Err(shape_err("softmax_rows", format!("mask of {} for {} logits", m.len(), x.len())));
            }
        }
        let keep = |k: usize| mask.is_none_or(|m| m[k]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = x.row(i);
            let max = (0..c).filter(|&j| keep(i * c + j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::EmptySoftmaxRow { row: i });
            }
            let mut total = 0.0;
            for j in 0..c {
                if keep(i * c + j) {
                    let e = (row[j] - max).exp();
                    out[i * c + j] = e;
                    total += e;
                }
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= total);
        }
        self.push(Tensor::from_rows(r, c, out), Op::SoftmaxRows(logits))
    }

    /// Mean cross-entropy of `logits` against `labels` over rows with `mask[i]`.
    pub fn nll_loss(&mut self, logits: Var, labels: &[i64], mask: &[bool]) -> Result<Var> {
        let x = self.value(logits);
        let (r, c) = (x.rows(), x.cols());
        if labels.len() != r || mask.len() != r {
            return Err(shape_err("nll_loss", format!("{r} rows, {} labels, {} mask entries", labels.len(), mask.len())));
        }
        let mut rows = Vec::new();
        let mut labs = Vec::new();
        let mut probs = Vec::new();
        let mut loss = 0.0;
        for i in (0..r).filter(|&i| mask[i]) {
            let label = labels[i];
            if label < 0 || label as usize >= c {
                return Err(Error::LabelOutOfRange { label, classes: c });
            }
            let row = x.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label as usize];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
            rows.push(i);
            labs.push(label as usize);
        }
        if rows.is_empty() {
            return Err(Error::EmptyMask);
        }
        let out = Tensor::scalar(loss / rows.len() as f64);
        self.push(out, Op::NllLoss { logits, rows, labels: labs, probs })
    }

    /// Inverted dropout. Identity when `p == 0` or outside training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let src = self.value(x);
        let keep: Vec<f64> = (0..src.len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale }).collect();
        let data = src.data().iter().zip(&keep).map(|(v, k)| v * k).collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        self.push(out, Op::Dropout { input: x, keep })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_cols(self.value(b))?;
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let c = self.value(a).cols();
        if start > end || end > c {
            return Err(shape_err("slice_cols", format!("{start}..{end} of {c} columns")));
        }
        let out = self.value(a).slice_cols(start, end);
        self.push(out, Op::SliceCols { input: a, start })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Euclidean distance between the rows of `emb` named by each pair, as a `P x 1` column.
    pub fn pair_distance(&mut self, emb: Var, pairs: Arc<Vec<(usize, usize)>>) -> Result<Var> {
        let e = self.value(emb);
        let n = e.rows();
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n || j >= n) {
            return Err(shape_err("pair_distance", format!("pair ({i}, {j}) out of range for {n} rows")));
        }
        let data = pairs.iter().map(|&(i, j)| row_distance(e.row(i), e.row(j))).collect();
        let out = Tensor::from_rows(pairs.len(), 1, data);
        self.push(out, Op::PairDistance { emb, pairs })
    }

    /// Dense `N x N` matrix of row-to-row Euclidean distances.
    pub fn pairwise_distance(&mut self, emb: Var) -> Result<Var> {
        let e = self.value(emb);
        let n = e.rows();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = row_distance(e.row(i), e.row(j));
            }
        }
        self.push(Tensor::from_rows(n, n, data), Op::PairwiseDistance(emb))
    }

    /// Softmax of per-edge logits within each CSR row.
    pub fn edge_softmax(&mut self, logits: Var, csr: &Arc<Csr>) -> Result<Var> {
        let x = self.value(logits);
        if x.len() != csr.num_edges() {
            return Err(shape_err("edge_softmax", format!("{} logits for {} edges", x.len(), csr.num_edges())));
        }
        let v = x.data();
        let mut out = vec![0.0; v.len()];
        for i in 0..csr.num_nodes() {
            let r = csr.row_range(i);
            if r.is_empty() {
                return Err(Error::IsolatedNode(i));
            }
            let max = r.clone().map(|e| v[e]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for e in r.clone() {
                out[e] = (v[e] - max).exp();
                total += out[e];
            }
            r.for_each(|e| out[e] /= total);
        }
        let out = Tensor::from_rows(v.len(), 1, out);
        self.push(out, Op::EdgeSoftmax { logits, csr: Arc::clone(csr) })
    }

    /// Per-edge `target[i] + source[j]` for every edge `(i, j)`; both inputs are `N x 1`.
    pub fn edge_pair_sum(&mut self, target: Var, source: Var, csr: &Arc<Csr>) -> Result<Var> {
        let (t, s) = (self.value(target), self.value(source));
        let n = csr.num_nodes();
        if t.len() != n || s.len() != n {
            return Err(shape_err("edge_pair_sum", format!("scores of {} and {} for {n} nodes", t.len(), s.len())));
        }
        let mut out = vec![0.0; csr.num_edges()];
        for i in 0..n {
            for e in csr.row_range(i) {
                out[e] = t.data()[i] + s.data()[csr.col_idx()[e]];
            }
        }
        let out = Tensor::from_rows(out.len(), 1, out);
        self.push(out, Op::EdgePairSum { target, source, csr: Arc::clone(csr) })
    }

    /// `out_i = sum_{e=(i,j)} w_e * x_j`.
    pub fn spmm(&mut self, weights: Var, x: Var, csr: &Arc<Csr>) -> Result<Var> {
        let (w, xv) = (self.value(weights), self.value(x));
        if w.len() != csr.num_edges() || xv.rows() != csr.num_nodes() {
            return Err(shape_err(
                "spmm",
                format!("{} weights / {} rows for {} edges, {} nodes", w.len(), xv.rows(), csr.num_edges(), csr.num_nodes()),
            ));
        }
        let f = xv.cols();
        let mut out = vec![0.0; csr.num_nodes() * f];
        for i in 0..csr.num_nodes() {
            let dst = &mut out[i * f..(i + 1) * f];
            for e in csr.row_range(i) {
                let we = w.data()[e];
                dst.iter_mut().zip(xv.row(csr.col_idx()[e])).for_each(|(d, v)| *d += we * v);
            }
        }
        let out = Tensor::from_rows(csr.num_nodes(), f, out);
        self.push(out, Op::Spmm { weights, x, csr: Arc::clone(csr) })
    }

    /// Divides the first `C` columns of an `N x (C+1)` matrix by its last column.
    pub fn homogeneous_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let (r, c1) = (x.rows(), x.cols());
        if c1 == 0 {
            return Err(shape_err("homogeneous_normalize", "no homogeneous column".into()));
        }
        let c = c1 - 1;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = x.row(i);
            let den = row[c];
            if den.abs() < eps || !den.is_finite() {
                return Err(Error::DegenerateNormalizer { node: i, value: den, eps });
            }
            out.extend(row[..c].iter().map(|v| v / den));
        }
        self.push(Tensor::from_rows(r, c, out), Op::HomogeneousNormalize(a))
    }
}

pub(crate) fn row_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
