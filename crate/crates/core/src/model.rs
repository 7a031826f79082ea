//! Layers and models: PH-GCN (structural plus global pathway), GAT-EDA
//! (structural Euclidean attention only), and the GAT and GCN baselines.

use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{activate, global_aggregate_exact, global_aggregate_lattice, node_embedding, structural_aggregate, Activation};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{Csr, Graph};
use crate::lattice::LatticeFilter;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Negative slope of the LeakyReLU on GAT attention logits.
pub const GAT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    PhGcn,
    GatEda,
    Gat,
    Gcn,
}

/// How per-head (and per-pathway) outputs are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Merge {
    Concat,
    /// Average of the pre-activation outputs.
    Mean,
}

/// Which evaluator the PH-GCN global pathway uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalMode {
    Lattice,
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayerConfig {
    pub kind: LayerKind,
    pub in_dim: usize,
    /// Per-head output width `F'`.
    pub out_dim: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub lambda_struct: f64,
    pub lambda_global: f64,
    /// Dropout on the layer input.
    pub dropout: f64,
    /// Dropout on normalized structural attention coefficients.
    pub attn_dropout: f64,
    pub activation: Activation,
    pub merge: Merge,
    pub global: GlobalMode,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self {
            kind: LayerKind::PhGcn,
            in_dim: 1,
            out_dim: 8,
            heads: 1,
            embed_dim: 4,
            lambda_struct: 1.0,
            lambda_global: 10.0,
            dropout: 0.0,
            attn_dropout: 0.0,
            activation: Activation::Elu,
            merge: Merge::Concat,
            global: GlobalMode::Lattice,
        }
    }
}

impl LayerConfig {
    fn pathways(&self) -> usize {
        if self.kind == LayerKind::PhGcn {
            2
        } else {
            1
        }
    }

    pub fn output_width(&self) -> usize {
        match self.merge {
            Merge::Concat => self.pathways() * self.heads * self.out_dim,
            Merge::Mean => self.out_dim,
        }
    }

    fn uses_embedding(&self) -> bool {
        matches!(self.kind, LayerKind::PhGcn | LayerKind::GatEda)
    }

    fn validate(&self, index: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("layer {index}: {msg}")));
        if self.heads == 0 || self.in_dim == 0 || self.out_dim == 0 {
            return bad("heads, in_dim and out_dim must be positive".into());
        }
        if self.uses_embedding() && self.embed_dim == 0 {
            return bad("embedding dimension must be positive".into());
        }
        for (name, l) in [("lambda_struct", self.lambda_struct), ("lambda_global", self.lambda_global)] {
            if !(l > 0.0 && l.is_finite()) {
                return bad(format!("{name} = {l} must be positive"));
            }
        }
        for (name, p) in [("dropout", self.dropout), ("attn_dropout", self.attn_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: Vec<LayerConfig>,
    pub num_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// `depth` layers of `kind`: hidden layers concatenate `heads` heads of
    /// width `hidden` under ELU; the last layer is a single head emitting
    /// `num_classes` raw logits (pathways averaged for PH-GCN).
    pub fn stack(kind: LayerKind, depth: usize, in_dim: usize, hidden: usize, heads: usize, num_classes: usize, seed: u64) -> Self {
        let base = LayerConfig { kind, ..LayerConfig::default() };
        let mut layers = Vec::with_capacity(depth);
        let mut width = in_dim;
        for l in 0..depth {
            let last = l + 1 == depth;
            let layer = if last {
                LayerConfig {
                    in_dim: width,
                    out_dim: num_classes,
                    heads: 1,
                    activation: Activation::Identity,
                    merge: Merge::Mean,
                    ..base.clone()
                }
            } else {
                LayerConfig { in_dim: width, out_dim: hidden, heads, ..base.clone() }
            };
            width = layer.output_width();
            layers.push(layer);
        }
        Self { layers, num_classes, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate(i)?;
            if i > 0 && l.in_dim != self.layers[i - 1].output_width() {
                return Err(Error::Config(format!(
                    "layer {i} expects {} inputs but layer {} emits {}",
                    l.in_dim,
                    i - 1,
                    self.layers[i - 1].output_width()
                )));
            }
        }
        let last = self.layers.last().expect("non-empty").output_width();
        if last != self.num_classes {
            return Err(Error::Config(format!("final layer emits {last} values for {} classes", self.num_classes)));
        }
        Ok(())
    }

    /// Applies the same dropout rates to every layer.
    pub fn with_dropout(mut self, input: f64, attention: f64) -> Self {
        for l in &mut self.layers {
            l.dropout = input;
            l.attn_dropout = attention;
        }
        self
    }
}

#[derive(Clone, Debug)]
struct HeadIds {
    weight: ParamId,
    embedding: Option<ParamId>,
    attention: Option<(ParamId, ParamId)>,
}

/// Parameters and configuration of a stacked graph network.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    heads: Vec<Vec<HeadIds>>,
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_rows(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect())
}

/// Variables produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    /// Parameter variables, in parameter-store order.
    pub params: Vec<Var>,
    /// Node embeddings `N x D` per layer and head, where the layer has them.
    pub embeddings: Vec<Vec<Option<Var>>>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut heads = Vec::with_capacity(config.layers.len());
        for (l, lc) in config.layers.iter().enumerate() {
            let mut layer = Vec::with_capacity(lc.heads);
            for h in 0..lc.heads {
                let prefix = format!("layer{l}.head{h}");
                let (f, fp) = (lc.in_dim, lc.out_dim);
                let weight = params.add(format!("{prefix}.weight"), glorot(f, fp, f, fp, &mut rng));
                let embedding = lc.uses_embedding().then(|| {
                    let d = lc.embed_dim;
                    params.add(format!("{prefix}.embedding"), glorot(fp, d, fp, d, &mut rng))
                });
                let attention = (lc.kind == LayerKind::Gat).then(|| {
                    let dst = params.add(format!("{prefix}.attention_dst"), glorot(fp, 1, 2 * fp, 1, &mut rng));
                    let src = params.add(format!("{prefix}.attention_src"), glorot(fp, 1, 2 * fp, 1, &mut rng));
                    (dst, src)
                });
                layer.push(HeadIds { weight, embedding, attention });
            }
            heads.push(layer);
        }
        Ok(Self { config, params, heads })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces the parameter values with those of `store` (same names and shapes).
    pub fn load_params(&mut self, store: &ParamStore) -> Result<()> {
        self.params.copy_values_from(store)
    }

    /// Registers the parameters on `tape` and runs every layer.
    ///
    /// Dropout is active only when `training` is set; `rng` drives the masks.
    pub fn forward(&self, tape: &mut Tape, graph: &Graph, training: bool, rng: &mut dyn RngCore) -> Result<Forward> {
        let params = self.params.register(tape);
        let x = tape.constant(graph.features.clone());
        let (logits, embeddings) = self.forward_vars(tape, &params, &graph.adjacency, x, training, rng)?;
        Ok(Forward { logits, params, embeddings })
    }

    /// Forward pass over already-registered parameter variables.
    pub fn forward_vars(
        &self,
        tape: &mut Tape,
        params: &[Var],
        csr: &Arc<Csr>,
        features: Var,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<(Var, Vec<Vec<Option<Var>>>)> {
        if params.len() != self.params.len() {
            return Err(Error::Shape {
                op: "model_forward",
                detail: format!("{} parameter variables for {} parameters", params.len(), self.params.len()),
            });
        }
        let (n, f) = (tape.value(features).rows(), tape.value(features).cols());
        if n != csr.num_nodes() || f != self.config.layers[0].in_dim {
            return Err(Error::Shape {
                op: "model_forward",
                detail: format!("features [{n}, {f}] for {} nodes and {} inputs", csr.num_nodes(), self.config.layers[0].in_dim),
            });
        }
        let mut x = features;
        let mut all_emb = Vec::with_capacity(self.heads.len());
        for (lc, ids) in self.config.layers.iter().zip(&self.heads) {
            let (out, emb) = layer_forward(tape, lc, ids, params, csr, x, training, rng)?;
            all_emb.push(emb);
            x = out;
        }
        Ok((x, all_emb))
    }

    /// Logits in evaluation mode (no dropout), on a fresh tape.
    pub fn predict(&self, graph: &Graph) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward(&mut tape, graph, false, &mut rng)?;
        Ok(tape.value(fwd.logits).clone())
    }

    /// Node embeddings `N x D` of every head in `layer`, in evaluation mode.
    pub fn embeddings(&self, graph: &Graph, layer: usize) -> Result<Vec<Tensor>> {
        let lc = self.config.layers.get(layer).ok_or_else(|| Error::Config(format!("model has no layer {layer}")))?;
        if !lc.uses_embedding() {
            return Err(Error::Config(format!("layer {layer} has no node embeddings")));
        }
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward(&mut tape, graph, false, &mut rng)?;
        Ok(fwd.embeddings[layer].iter().flatten().map(|v| tape.value(*v).clone()).collect())
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_forward(
    tape: &mut Tape,
    lc: &LayerConfig,
    ids: &[HeadIds],
    params: &[Var],
    csr: &Arc<Csr>,
    input: Var,
    training: bool,
    rng: &mut dyn RngCore,
) -> Result<(Var, Vec<Option<Var>>)> {
    let x = tape.dropout(input, lc.dropout, training, rng)?;
    let mut parts = Vec::with_capacity(lc.heads * lc.pathways());
    let mut embeddings = Vec::with_capacity(lc.heads);
    let filter = (lc.kind == LayerKind::PhGcn && lc.global == GlobalMode::Lattice).then(|| LatticeFilter::for_dim(lc.embed_dim));
    let coef_p = if training { lc.attn_dropout } else { 0.0 };
    for head in ids {
        let projected = tape.matmul(x, params[head.weight.0])?;
        let mut emb = None;
        match lc.kind {
            LayerKind::PhGcn | LayerKind::GatEda => {
                let phi = params[head.embedding.expect("embedding head").0];
                let e = node_embedding(tape, projected, phi)?;
                emb = Some(e);
                let dropout = (coef_p > 0.0).then_some((coef_p, &mut *rng as &mut dyn RngCore));
                parts.push(structural_aggregate(tape, csr, e, projected, lc.lambda_struct, Activation::Identity, dropout)?);
                if lc.kind == LayerKind::PhGcn {
                    let g = match &filter {
                        Some(filter) => global_aggregate_lattice(tape, e, projected, lc.lambda_global, filter, Activation::Identity)?,
                        None => global_aggregate_exact(tape, e, projected, lc.lambda_global, Activation::Identity)?,
                    };
                    parts.push(g);
                }
            }
            LayerKind::Gat => {
                let (a_dst, a_src) = head.attention.expect("attention head");
                let s_dst = tape.matmul(projected, params[a_dst.0])?;
                let s_src = tape.matmul(projected, params[a_src.0])?;
                let raw = tape.edge_pair_sum(s_dst, s_src, csr)?;
                let logits = tape.leaky_relu(raw, GAT_LEAKY_SLOPE)?;
                let mut alpha = tape.edge_softmax(logits, csr)?;
                alpha = tape.dropout(alpha, coef_p, training, rng)?;
                parts.push(tape.spmm(alpha, projected, csr)?);
            }
            LayerKind::Gcn => {
                let w = tape.constant(gcn_weights(csr));
                parts.push(tape.spmm(w, projected, csr)?);
            }
        }
        embeddings.push(emb);
    }
    let merged = match lc.merge {
        Merge::Concat => {
            let mut acc = parts[0];
            for &p in &parts[1..] {
                acc = tape.concat_cols(acc, p)?;
            }
            acc
        }
        Merge::Mean => {
            let mut acc = parts[0];
            for &p in &parts[1..] {
                acc = tape.add(acc, p)?;
            }
            if parts.len() > 1 {
                acc = tape.scale(acc, 1.0 / parts.len() as f64)?;
            }
            acc
        }
    };
    Ok((activate(tape, merged, lc.activation)?, embeddings))
}

/// Per-edge `1 / sqrt(deg_i deg_j)` with degrees counting the self-loop.
pub fn gcn_weights(csr: &Csr) -> Tensor {
    let deg: Vec<f64> = (0..csr.num_nodes()).map(|i| csr.degree(i) as f64).collect();
    let mut w = Vec::with_capacity(csr.num_edges());
    for i in 0..csr.num_nodes() {
        for &j in csr.neighbors(i) {
            w.push(1.0 / (deg[i] * deg[j]).sqrt());
        }
    }
    Tensor::from_rows(w.len(), 1, w)
}

/// Fraction of rows in `mask` whose arg-max column equals the label.
pub fn accuracy(logits: &Tensor, labels: &[i64], mask: &[bool]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for i in (0..logits.rows()).filter(|&i| mask[i] && labels[i] >= 0) {
        let row = logits.row(i);
        let best = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b }).0;
        hit += usize::from(best as i64 == labels[i]);
        total += 1;
    }
    if total == 0 {
        f64::NAN
    } else {
        hit as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_graph(n: usize, f: usize, seed: u64) -> Graph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let edges: Vec<(usize, usize)> = (0..2 * n).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect();
        let feats = Tensor::from_rows(n, f, (0..n * f).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let labels = (0..n).map(|i| (i % 3) as i64).collect();
        Graph::new(&edges, feats, labels, true).unwrap()
    }

    #[test]
    fn widths_follow_head_and_pathway_counts() {
        for (kind, heads, want) in
            [(LayerKind::PhGcn, 1, 16), (LayerKind::PhGcn, 3, 48), (LayerKind::GatEda, 3, 24), (LayerKind::Gat, 2, 16)]
        {
            let lc = LayerConfig { kind, heads, out_dim: 8, ..LayerConfig::default() };
            assert_eq!(lc.output_width(), want);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::stack(LayerKind::PhGcn, 2, 5, 4, 2, 3, 0);
        c.validate().unwrap();
        assert_eq!(c.layers[1].in_dim, 16);
        c.layers[1].in_dim = 15;
        assert!(c.validate().is_err());
        let empty = ModelConfig { layers: vec![], num_classes: 3, seed: 0 };
        assert!(matches!(Model::new(empty), Err(Error::Config(_))));
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let g = small_graph(20, 5, 1);
        for kind in [LayerKind::PhGcn, LayerKind::GatEda, LayerKind::Gat, LayerKind::Gcn] {
            let m = Model::new(ModelConfig::stack(kind, 2, 5, 4, 2, 3, 7)).unwrap();
            let a = m.predict(&g).unwrap();
            assert_eq!(a.shape(), &[20, 3]);
            let b = Model::new(ModelConfig::stack(kind, 2, 5, 4, 2, 3, 7)).unwrap().predict(&g).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn gcn_weights_single_node() {
        let csr = Csr::from_edges(1, &[], true, true).unwrap();
        assert_eq!(gcn_weights(&csr).data(), &[1.0]);
    }

    #[test]
    fn accuracy_counts_masked_rows() {
        let logits = Tensor::from_rows(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        assert_eq!(accuracy(&logits, &[0, 0, 1], &[true, true, false]), 0.5);
        assert!(accuracy(&logits, &[0, 0, 1], &[false; 3]).is_nan());
    }
}
