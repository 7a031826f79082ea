//! Euclidean-distance attention and the two aggregation pathways.
//!
//! Node `i` is embedded at `p_i = Phi W h_i` and attends to node `j` with
//! logit `-lambda |p_i - p_j|`. Structural aggregation normalizes over graph
//! neighbors; global aggregation normalizes over all nodes, either exactly in
//! `O(N^2)` or through the lattice filter with an appended homogeneous channel
//! whose filtered value is the softmax denominator.

use std::sync::Arc;

use rand::RngCore;
use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Csr;
use crate::lattice::LatticeFilter;
use crate::tensor::Tensor;

/// Homogeneous denominators below this are reported as errors.
pub const NORMALIZER_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
    Identity,
}

pub fn activate(tape: &mut Tape, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Elu => tape.elu(x),
        Activation::Identity => Ok(x),
    }
}

/// `N x D` embedding `projected * Phi`, where `projected = H W` is `N x F'`
/// and `Phi` is stored `F' x D`.
pub fn node_embedding(tape: &mut Tape, projected: Var, phi: Var) -> Result<Var> {
    tape.matmul(projected, phi)
}

/// `e_ij = -lambda |emb_i - emb_j|` for each pair, as a `P x 1` column.
pub fn euclidean_logits(tape: &mut Tape, emb: Var, pairs: Arc<Vec<(usize, usize)>>, lambda: f64) -> Result<Var> {
    let d = tape.pair_distance(emb, pairs)?;
    tape.scale(d, -lambda)
}

/// Per-edge attention coefficients, softmax-normalized within each node's neighborhood.
pub fn structural_attention(tape: &mut Tape, csr: &Arc<Csr>, emb: Var, lambda: f64) -> Result<Var> {
    if tape.value(emb).rows() != csr.num_nodes() {
        return Err(Error::Shape {
            op: "structural_attention",
            detail: format!("{} embeddings for {} nodes", tape.value(emb).rows(), csr.num_nodes()),
        });
    }
    let logits = euclidean_logits(tape, emb, Arc::new(csr.pairs()), lambda)?;
    tape.edge_softmax(logits, csr)
}

/// `sigma(sum_{j in N(i)} alpha_ij W h_j)`, with optional dropout on the coefficients.
pub fn structural_aggregate(
    tape: &mut Tape,
    csr: &Arc<Csr>,
    emb: Var,
    projected: Var,
    lambda: f64,
    act: Activation,
    coef_dropout: Option<(f64, &mut dyn RngCore)>,
) -> Result<Var> {
    let mut alpha = structural_attention(tape, csr, emb, lambda)?;
    if let Some((p, rng)) = coef_dropout {
        alpha = tape.dropout(alpha, p, true, rng)?;
    }
    let agg = tape.spmm(alpha, projected, csr)?;
    activate(tape, agg, act)
}

/// Exact global aggregation through a dense `N x N` softmax. Differentiable;
/// quadratic in time and memory.
pub fn global_aggregate_exact(tape: &mut Tape, emb: Var, projected: Var, lambda: f64, act: Activation) -> Result<Var> {
    let d = tape.pairwise_distance(emb)?;
    let logits = tape.scale(d, -lambda)?;
    let alpha = tape.softmax_rows(logits, None)?;
    let agg = tape.matmul(alpha, projected)?;
    activate(tape, agg, act)
}

/// Global aggregation through the lattice filter: filter `[W h | 1]` at the
/// embeddings, then divide by the filtered homogeneous channel.
pub fn global_aggregate_lattice(
    tape: &mut Tape,
    emb: Var,
    projected: Var,
    lambda: f64,
    filter: &LatticeFilter,
    act: Activation,
) -> Result<Var> {
    let n = tape.value(projected).rows();
    let ones = tape.constant(Tensor::filled(n, 1, 1.0));
    let augmented = tape.concat_cols(projected, ones)?;
    let filtered = tape.lattice_filter(emb, augmented, lambda, filter)?;
    let agg = tape.homogeneous_normalize(filtered, NORMALIZER_EPS)?;
    activate(tape, agg, act)
}

/// `out_i = sum_j exp(-lambda |p_i - p_j|) f_j`, evaluated exactly in `O(N^2)`
/// time and `O(N)` extra memory.
pub fn exact_filter(positions: &Tensor, features: &Tensor, lambda: f64) -> Result<Tensor> {
    let (n, c) = (positions.rows(), features.cols());
    if features.rows() != n {
        return Err(Error::Shape { op: "exact_filter", detail: format!("{} features for {n} positions", features.rows()) });
    }
    let mut out = vec![0.0; n * c];
    out.par_chunks_mut(c.max(1)).enumerate().for_each(|(i, row)| {
        let pi = positions.row(i);
        for j in 0..n {
            let d = distance(pi, positions.row(j));
            let w = (-lambda * d).exp();
            row.iter_mut().zip(features.row(j)).for_each(|(o, f)| *o += w * f);
        }
    });
    Ok(Tensor::from_rows(n, c, out))
}

/// Pre-activation exact global aggregation: the softmax-weighted mean of
/// `features` under Euclidean-distance attention.
pub fn exact_global_aggregate(positions: &Tensor, features: &Tensor, lambda: f64) -> Result<Tensor> {
    let n = positions.rows();
    let augmented = features.concat_cols(&Tensor::filled(n, 1, 1.0))?;
    normalize_homogeneous(&exact_filter(positions, &augmented, lambda)?)
}

/// Pre-activation lattice global aggregation (no tape).
pub fn lattice_global_aggregate(positions: &Tensor, features: &Tensor, lambda: f64, filter: &LatticeFilter) -> Result<Tensor> {
    let n = positions.rows();
    let augmented = features.concat_cols(&Tensor::filled(n, 1, 1.0))?;
    let (out, _) = filter.forward(positions, &augmented, lambda)?;
    normalize_homogeneous(&out)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn normalize_homogeneous(x: &Tensor) -> Result<Tensor> {
    let c = x.cols() - 1;
    let mut out = Vec::with_capacity(x.rows() * c);
    for i in 0..x.rows() {
        let row = x.row(i);
        if row[c].abs() < NORMALIZER_EPS {
            return Err(Error::DegenerateNormalizer { node: i, value: row[c], eps: NORMALIZER_EPS });
        }
        out.extend(row[..c].iter().map(|v| v / row[c]));
    }
    Ok(Tensor::from_rows(x.rows(), c, out))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        1.0
    } else if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_rows(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn logits_of_coincident_and_345_embeddings() {
        let mut tape = Tape::new();
        let emb = tape.constant(Tensor::from_rows(3, 4, vec![0.0, 0.0, 0.0, 0.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let pairs = Arc::new(vec![(0, 1), (1, 0), (0, 2)]);
        let l1 = euclidean_logits(&mut tape, emb, pairs.clone(), 1.0).unwrap();
        assert_eq!(tape.value(l1).data(), &[-5.0, -5.0, 0.0]);
        let l10 = euclidean_logits(&mut tape, emb, pairs, 10.0).unwrap();
        for (a, b) in tape.value(l10).data().iter().zip(tape.value(l1).data()) {
            assert!((a - 10.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn lone_self_loop_passes_projection_through() {
        let csr = Arc::new(Csr::from_edges(1, &[], true, true).unwrap());
        let mut tape = Tape::new();
        let emb = tape.constant(Tensor::from_rows(1, 2, vec![0.3, -0.1]));
        let proj = tape.constant(Tensor::from_rows(1, 3, vec![0.5, -2.0, 1.0]));
        let out = structural_aggregate(&mut tape, &csr, emb, proj, 1.0, Activation::Elu, None).unwrap();
        let expect = [0.5, (-2.0f64).exp_m1(), 1.0];
        for (a, b) in tape.value(out).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_self_loop_is_an_error() {
        let csr = Arc::new(Csr::from_edges(2, &[(0, 1)], false, false).unwrap());
        let mut tape = Tape::new();
        let emb = tape.constant(Tensor::zeros(2, 2));
        let proj = tape.constant(Tensor::zeros(2, 2));
        let err = structural_aggregate(&mut tape, &csr, emb, proj, 1.0, Activation::Identity, None).unwrap_err();
        assert!(matches!(err, Error::IsolatedNode(0)));
    }

    #[test]
    fn identical_embeddings_give_uniform_attention() {
        let csr = Arc::new(Csr::from_edges(4, &[(1, 0), (2, 0), (3, 0)], true, true).unwrap());
        let mut tape = Tape::new();
        let emb = tape.constant(Tensor::filled(4, 3, 0.7));
        let alpha = structural_attention(&mut tape, &csr, emb, 1.0).unwrap();
        for e in csr.row_range(0) {
            assert!((tape.value(alpha).data()[e] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn two_point_closed_form() {
        let pos = Tensor::from_rows(2, 2, vec![0.0, 0.0, 0.6, 0.8]);
        let f = Tensor::from_rows(2, 2, vec![1.0, 2.0, -3.0, 5.0]);
        let lambda = 1.3;
        let out = exact_global_aggregate(&pos, &f, lambda).unwrap();
        let w = (-lambda * 1.0f64).exp();
        for c in 0..2 {
            let expect = (f.get(0, c) + w * f.get(1, c)) / (1.0 + w);
            assert!((out.get(0, c) - expect).abs() < 1e-14);
        }

        let mut tape = Tape::new();
        let e = tape.constant(pos);
        let p = tape.constant(f);
        let dense = global_aggregate_exact(&mut tape, e, p, lambda, Activation::Identity).unwrap();
        for (a, b) in tape.value(dense).data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn small_lambda_tends_to_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pos = random(&mut rng, 12, 4);
        let f = random(&mut rng, 12, 3);
        let out = exact_global_aggregate(&pos, &f, 1e-9).unwrap();
        for c in 0..3 {
            let mean: f64 = (0..12).map(|i| f.get(i, c)).sum::<f64>() / 12.0;
            for i in 0..12 {
                assert!((out.get(i, c) - mean).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn single_node_global_is_identity() {
        let pos = Tensor::from_rows(1, 4, vec![0.2, 0.1, -0.4, 2.0]);
        let f = Tensor::from_rows(1, 3, vec![1.0, -1.0, 0.5]);
        let exact = exact_global_aggregate(&pos, &f, 10.0).unwrap();
        assert_eq!(exact.data(), f.data());
        let lattice = lattice_global_aggregate(&pos, &f, 10.0, &LatticeFilter::for_dim(4)).unwrap();
        for (a, b) in lattice.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_edge_cases() {
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-15);
    }
}
