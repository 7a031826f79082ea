//! Finite-difference checks of every differentiable operation, the attention
//! pathways and whole models.

use std::fmt::Write as _;
use std::sync::Arc;

use anyhow::Result;
use phgcn_core::attention::{global_aggregate_exact, global_aggregate_lattice, structural_aggregate, Activation};
use phgcn_core::autograd::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use phgcn_core::autograd::{Tape, Var};
use phgcn_core::graph::{Csr, Graph};
use phgcn_core::lattice::LatticeFilter;
use phgcn_core::model::{LayerKind, Model, ModelConfig};
use phgcn_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gradient of a matmul's right operand is scaled by this under `--corrupt`.
pub const CORRUPTION_FACTOR: f64 = 1.01;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance && self.checked > 0
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<28} {:>12} {:>10} {:>8} {:>8}  status\n", "check", "max_rel_err", "tolerance", "checked", "skipped");
        for r in &self.results {
            let status = if r.passed() { "ok" } else { "FAIL" };
            writeln!(s, "{:<28} {:>12.3e} {:>10.0e} {:>8} {:>8}  {status}", r.name, r.max_rel_err, r.tolerance, r.checked, r.skipped)
                .expect("writing to a String cannot fail");
        }
        s
    }
}

struct Suite {
    rng: ChaCha8Rng,
    corrupt: bool,
    opts: GradCheckOptions,
    results: Vec<CheckResult>,
}

type Loss<'a> = Box<dyn Fn(&mut Tape, &[Var]) -> phgcn_core::Result<Var> + 'a>;

impl Suite {
    fn random(&mut self, r: usize, c: usize) -> Tensor {
        Tensor::from_rows(r, c, (0..r * c).map(|_| self.rng.gen_range(-1.0..1.0)).collect())
    }

    fn positive(&mut self, r: usize, c: usize) -> Tensor {
        Tensor::from_rows(r, c, (0..r * c).map(|_| self.rng.gen_range(0.5..2.0)).collect())
    }

    fn run(&mut self, name: &str, tolerance: f64, inputs: Vec<Tensor>, f: Loss<'_>) -> Result<()> {
        let corrupt = self.corrupt;
        let report: GradCheckReport = check_gradients(
            &inputs,
            |tape, vars| {
                if corrupt {
                    tape.inject_matmul_grad_fault(Some(CORRUPTION_FACTOR));
                }
                f(tape, vars)
            },
            &self.opts,
        )?;
        self.results.push(CheckResult {
            name: name.to_string(),
            max_rel_err: report.worst(),
            tolerance,
            checked: report.checked,
            skipped: report.skipped,
        });
        Ok(())
    }

    /// Checks an op with a tensor output by reducing it to the scalar
    /// `w^T (out p)` for fixed random `p` and `w`.
    fn run_tensor_op(
        &mut self,
        name: &str,
        tolerance: f64,
        inputs: Vec<Tensor>,
        out_shape: (usize, usize),
        op: impl Fn(&mut Tape, &[Var]) -> phgcn_core::Result<Var> + 'static,
    ) -> Result<()> {
        let probe = self.random(out_shape.1, 1);
        let weight = self.random(out_shape.0, 1);
        self.run(
            name,
            tolerance,
            inputs,
            Box::new(move |tape, vars| {
                let out = op(tape, vars)?;
                let p = tape.constant(probe.clone());
                let w = tape.constant(weight.clone());
                let col = tape.matmul(out, p)?;
                let weighted = tape.mul(col, w)?;
                tape.sum(weighted)
            }),
        )
    }
}

fn random_csr(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Arc<Csr> {
    let edges: Vec<(usize, usize)> = (0..m).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect();
    Arc::new(Csr::from_edges(n, &edges, true, true).expect("edges are in range"))
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, f: usize, classes: i64) -> Graph {
    let edges: Vec<(usize, usize)> = (0..2 * n).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect();
    let feats = Tensor::from_rows(n, f, (0..n * f).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let labels = (0..n).map(|i| (i as i64) % classes).collect();
    Graph::new(&edges, feats, labels, true).expect("edges are in range")
}

/// Runs all checks. `corrupt` scales one backward rule to prove the checks bite.
pub fn run_suite(seed: u64, corrupt: bool) -> Result<SuiteReport> {
    let mut s = Suite { rng: ChaCha8Rng::seed_from_u64(seed), corrupt, opts: GradCheckOptions::default(), results: Vec::new() };
    const OP_TOL: f64 = 1e-4;

    let (a, b) = (s.random(4, 3), s.random(3, 5));
    s.run_tensor_op("matmul", OP_TOL, vec![a, b], (4, 5), |t, v| t.matmul(v[0], v[1]))?;
    let a = s.random(4, 3);
    s.run_tensor_op("transpose", OP_TOL, vec![a], (3, 4), |t, v| t.transpose(v[0]))?;
    let (a, b) = (s.random(4, 3), s.random(4, 3));
    s.run_tensor_op("add", OP_TOL, vec![a.clone(), b.clone()], (4, 3), |t, v| t.add(v[0], v[1]))?;
    s.run_tensor_op("sub", OP_TOL, vec![a.clone(), b.clone()], (4, 3), |t, v| t.sub(v[0], v[1]))?;
    s.run_tensor_op("mul", OP_TOL, vec![a.clone(), b], (4, 3), |t, v| t.mul(v[0], v[1]))?;
    s.run_tensor_op("scale", OP_TOL, vec![a.clone()], (4, 3), |t, v| t.scale(v[0], -2.5))?;
    let bias = s.random(1, 3);
    s.run_tensor_op("add_row_bias", OP_TOL, vec![a.clone(), bias], (4, 3), |t, v| t.add_row_bias(v[0], v[1]))?;
    s.run_tensor_op("elu", OP_TOL, vec![a.clone()], (4, 3), |t, v| t.elu(v[0]))?;
    s.run_tensor_op("leaky_relu", OP_TOL, vec![a.clone()], (4, 3), |t, v| t.leaky_relu(v[0], 0.2))?;
    s.run_tensor_op("softmax_rows", OP_TOL, vec![a.clone()], (4, 3), |t, v| t.softmax_rows(v[0], None))?;
    let mask = vec![true, false, true, true, false, true, true, true, false, true, true, true];
    s.run_tensor_op("softmax_rows_masked", OP_TOL, vec![a.clone()], (4, 3), move |t, v| t.softmax_rows(v[0], Some(&mask)))?;
    s.run(
        "nll_loss",
        OP_TOL,
        vec![a.clone()],
        Box::new(|t, v| {
            let p = t.constant(Tensor::identity(3));
            let logits = t.matmul(v[0], p)?;
            t.nll_loss(logits, &[0, 2, 1, 1], &[true, true, false, true])
        }),
    )?;
    s.run_tensor_op("dropout", OP_TOL, vec![a.clone()], (4, 3), |t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        t.dropout(v[0], 0.4, true, &mut rng)
    })?;
    let c = s.random(4, 2);
    s.run_tensor_op("concat_cols", OP_TOL, vec![a.clone(), c], (4, 5), |t, v| t.concat_cols(v[0], v[1]))?;
    s.run_tensor_op("slice_cols", OP_TOL, vec![a.clone()], (4, 2), |t, v| t.slice_cols(v[0], 1, 3))?;
    s.run_tensor_op("sum", OP_TOL, vec![a], (1, 1), |t, v| t.sum(v[0]))?;

    let emb = s.random(6, 3);
    let pairs = Arc::new(vec![(0, 1), (2, 5), (4, 3), (1, 0), (5, 2)]);
    s.run_tensor_op("pair_distance", OP_TOL, vec![emb.clone()], (5, 1), move |t, v| t.pair_distance(v[0], Arc::clone(&pairs)))?;
    s.run_tensor_op("pairwise_distance", OP_TOL, vec![emb], (6, 6), |t, v| t.pairwise_distance(v[0]))?;

    let csr = random_csr(&mut s.rng, 8, 14);
    let e = csr.num_edges();
    let logits = s.random(e, 1);
    let c2 = Arc::clone(&csr);
    s.run_tensor_op("edge_softmax", OP_TOL, vec![logits], (e, 1), move |t, v| t.edge_softmax(v[0], &c2))?;
    let (tg, sc) = (s.random(8, 1), s.random(8, 1));
    let c2 = Arc::clone(&csr);
    s.run_tensor_op("edge_pair_sum", OP_TOL, vec![tg, sc], (e, 1), move |t, v| t.edge_pair_sum(v[0], v[1], &c2))?;
    let (w, x) = (s.random(e, 1), s.random(8, 3));
    let c2 = Arc::clone(&csr);
    s.run_tensor_op("spmm", OP_TOL, vec![w, x], (8, 3), move |t, v| t.spmm(v[0], v[1], &c2))?;
    let h = s.random(5, 3).concat_cols(&s.positive(5, 1))?;
    s.run_tensor_op("homogeneous_normalize", OP_TOL, vec![h], (5, 3), |t, v| t.homogeneous_normalize(v[0], 1e-12))?;

    let filter = LatticeFilter::for_dim(4);
    let (pos, feat) = (s.random(12, 4), s.random(12, 3));
    let f2 = filter.clone();
    let fixed_pos = pos.clone();
    s.run_tensor_op("lattice_filter_features", 1e-5, vec![feat.clone()], (12, 3), move |t, v| {
        let p = t.constant(fixed_pos.clone());
        t.lattice_filter(p, v[0], 2.0, &f2)
    })?;
    let f2 = filter.clone();
    s.run_tensor_op("lattice_filter_positions", 1e-3, vec![pos.clone()], (12, 3), move |t, v| {
        let x = t.constant(feat.clone());
        t.lattice_filter(v[0], x, 2.0, &f2)
    })?;

    let (emb, proj) = (s.random(8, 4), s.random(8, 3));
    let c2 = Arc::clone(&csr);
    s.run_tensor_op("structural_aggregate", OP_TOL, vec![emb.clone(), proj.clone()], (8, 3), move |t, v| {
        structural_aggregate(t, &c2, v[0], v[1], 1.0, Activation::Elu, None)
    })?;
    s.run_tensor_op("global_aggregate_exact", OP_TOL, vec![emb.clone(), proj.clone()], (8, 3), |t, v| {
        global_aggregate_exact(t, v[0], v[1], 2.0, Activation::Elu)
    })?;
    s.run_tensor_op("global_aggregate_lattice", 1e-3, vec![emb, proj], (8, 3), move |t, v| {
        global_aggregate_lattice(t, v[0], v[1], 2.0, &filter, Activation::Elu)
    })?;

    for (name, kind) in [
        ("model_ph_gcn", LayerKind::PhGcn),
        ("model_gat_eda", LayerKind::GatEda),
        ("model_gat", LayerKind::Gat),
        ("model_gcn", LayerKind::Gcn),
    ] {
        let graph = random_graph(&mut s.rng, 30, 5, 3);
        let mut cfg = ModelConfig::stack(kind, 2, 5, 4, 2, 3, seed);
        for l in &mut cfg.layers {
            l.lambda_global = 2.0;
        }
        let model = Model::new(cfg)?;
        let values: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
        let mask = vec![true; graph.num_nodes()];
        s.run(
            name,
            1e-3,
            values,
            Box::new(move |tape, vars| {
                let x = tape.constant(graph.features.clone());
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let (logits, _) = model.forward_vars(tape, vars, &graph.adjacency, x, false, &mut rng)?;
                tape.nll_loss(logits, &graph.labels, &mask)
            }),
        )?;
    }
    Ok(SuiteReport { results: s.results })
}
