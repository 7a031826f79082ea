//! Training loops: full-batch transductive training with early stopping on
//! validation loss, and the inductive motif-chain task.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use phgcn_core::autograd::{Adam, Tape};
use phgcn_core::graph::{gen_motif_chain, load_graph, split_nodes, Element, Graph, LoadOptions, MotifGraph, MotifSpec};
use phgcn_core::model::{accuracy, Model, ModelConfig};
use phgcn_core::params::ParamStore;
use phgcn_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::TrainConfig;
use crate::metrics::{write_csv, MetricsRecord};

pub const CHECKPOINT_PARAMS: &str = "model.bin";
pub const CHECKPOINT_CONFIG: &str = "model.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Dropout and graph sampling draw from their own streams so that changing
/// one does not shift the other.
const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const MAX_EVAL_RESAMPLES: usize = 1000;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Mean negative log-likelihood of the labeled rows selected by `mask`.
pub fn nll(logits: &Tensor, labels: &[i64], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in (0..logits.rows()).filter(|&i| mask[i] && labels[i] >= 0) {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[labels[i] as usize];
        count += 1;
    }
    if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    }
}

/// One optimizer step on `graph`'s training mask; returns the loss before the update.
fn train_step(model: &mut Model, adam: &mut Adam, graph: &Graph, rng: &mut ChaCha8Rng, iteration: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, graph, true, rng)?;
    let loss = tape.nll_loss(fwd.logits, &graph.labels, &graph.masks.train)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        bail!("training diverged: loss is {value} at iteration {iteration}");
    }
    tape.backward(loss)?;
    model.params_mut().collect_grads(&mut tape, &fwd.params);
    adam.step(model.params_mut())?;
    Ok(value)
}

fn elapsed_ms(start: Instant, deterministic: bool) -> u64 {
    if deterministic {
        0
    } else {
        start.elapsed().as_millis() as u64
    }
}

pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub best_iteration: usize,
    pub best_val_loss: f64,
    /// Test accuracy of the parameters with the lowest validation loss.
    pub test_accuracy: f64,
    /// The model holding those parameters.
    pub model: Model,
}

#[derive(Serialize)]
struct TrainSummary {
    iterations: usize,
    best_iteration: usize,
    best_val_loss: f64,
    test_accuracy: f64,
}

/// Full-batch training on a graph whose masks are already set.
pub fn train_on_graph(cfg: &TrainConfig, graph: &Graph) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !graph.masks.val.iter().zip(&graph.labels).any(|(&m, &l)| m && l >= 0) {
        bail!("the validation mask selects no labeled node");
    }
    let model_cfg = cfg.model.build(graph.num_features(), graph.num_classes(), cfg.seed)?;
    let mut model = Model::new(model_cfg)?;
    let mut adam = Adam::new(cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut rng = stream(cfg.seed, TRAIN_STREAM);
    let start = Instant::now();

    let mut records = Vec::new();
    let mut best: Option<(usize, f64, f64, ParamStore)> = None;
    for t in 0..cfg.max_iterations {
        let logits = model.predict(graph)?;
        let val_loss = nll(&logits, &graph.labels, &graph.masks.val);
        if !val_loss.is_finite() {
            bail!("training diverged: validation loss is {val_loss} at iteration {t}");
        }
        let val_accuracy = accuracy(&logits, &graph.labels, &graph.masks.val);
        let test_now = accuracy(&logits, &graph.labels, &graph.masks.test);
        if best.as_ref().is_none_or(|b| val_loss < b.1) {
            best = Some((t, val_loss, test_now, model.params().clone()));
        }
        let train_loss = train_step(&mut model, &mut adam, graph, &mut rng, t)?;
        let (best_t, _, best_test, _) = best.as_ref().expect("set above");
        records.push(MetricsRecord {
            iteration: t,
            train_loss,
            val_loss,
            val_accuracy,
            test_accuracy: *best_test,
            wall_ms: elapsed_ms(start, cfg.deterministic),
        });
        if t - best_t >= cfg.patience {
            break;
        }
    }
    let Some((best_iteration, best_val_loss, test_accuracy, params)) = best else {
        bail!("max_iterations is 0; nothing was trained");
    };
    model.load_params(&params)?;
    Ok(TrainOutcome { records, best_iteration, best_val_loss, test_accuracy, model })
}

/// Loads the configured graph and draws the per-class 60/20/20 split from the seed.
pub fn load_training_graph(cfg: &TrainConfig) -> Result<Graph> {
    let (Some(nodes), Some(edges)) = (&cfg.data.nodes, &cfg.data.edges) else {
        bail!("training needs both a node file and an edge file");
    };
    let mut graph = load_graph(nodes, edges, LoadOptions { symmetrize: !cfg.data.directed })?;
    graph.masks = split_nodes(&graph.labels, cfg.seed)?;
    Ok(graph)
}

pub fn run_train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let graph = load_training_graph(cfg)?;
    let outcome = train_on_graph(cfg, &graph)?;
    if let Some(out) = &cfg.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write_csv(&out.join(METRICS_FILE), &outcome.records)?;
        save_checkpoint(out, &outcome.model)?;
        let summary = TrainSummary {
            iterations: outcome.records.len(),
            best_iteration: outcome.best_iteration,
            best_val_loss: outcome.best_val_loss,
            test_accuracy: outcome.test_accuracy,
        };
        fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(outcome)
}

pub fn save_checkpoint(dir: &Path, model: &Model) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CHECKPOINT_CONFIG), serde_json::to_string_pretty(model.config())?)?;
    model.params().save(dir.join(CHECKPOINT_PARAMS))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let path = dir.join(CHECKPOINT_CONFIG);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let config: ModelConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut model = Model::new(config)?;
    let params = ParamStore::load(dir.join(CHECKPOINT_PARAMS))?;
    model.load_params(&params)?;
    Ok(model)
}

pub struct MotifOutcome {
    /// One row per evaluation, starting with the untrained model at iteration 0.
    pub records: Vec<MetricsRecord>,
    pub model: Model,
}

/// A chain containing both motifs, with one red node picked from each.
fn eval_chain(spec: &MotifSpec, length: usize, rng: &mut ChaCha8Rng) -> Result<(MotifGraph, [usize; 2])> {
    for _ in 0..MAX_EVAL_RESAMPLES {
        let g = gen_motif_chain(spec, length, rng)?;
        let pick = |kind: Element, rng: &mut ChaCha8Rng| {
            let reds: Vec<usize> = g.red_nodes.iter().filter(|r| r.1 == kind).map(|r| r.0).collect();
            reds.choose(rng).copied()
        };
        if let (Some(a), Some(b)) = (pick(Element::Motif1, rng), pick(Element::Motif2, rng)) {
            return Ok((g, [a, b]));
        }
    }
    bail!("could not sample a chain holding both motifs in {MAX_EVAL_RESAMPLES} attempts");
}

/// Mean loss and accuracy over `graphs` fresh chains, two red nodes each
/// (one per motif, so exactly one of them is labeled 1).
pub fn evaluate_motif(model: &Model, spec: &MotifSpec, length: usize, graphs: usize, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let (mut loss, mut hits) = (0.0, 0.0);
    for _ in 0..graphs {
        let (g, picked) = eval_chain(spec, length, rng)?;
        let logits = model.predict(&g.graph)?;
        let mut mask = vec![false; g.graph.num_nodes()];
        for &i in &picked {
            mask[i] = true;
        }
        loss += nll(&logits, &g.graph.labels, &mask);
        hits += accuracy(&logits, &g.graph.labels, &mask);
    }
    Ok((loss / graphs as f64, hits / graphs as f64))
}

pub fn run_motif(cfg: &TrainConfig) -> Result<MotifOutcome> {
    cfg.validate()?;
    let spec = MotifSpec::default();
    let model_cfg = cfg.model.build(spec.feature_dim(), 2, cfg.seed)?;
    let mut model = Model::new(model_cfg)?;
    let mut adam = Adam::new(cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut train_rng = stream(cfg.seed, TRAIN_STREAM);
    let mut eval_rng = stream(cfg.seed, EVAL_STREAM);
    let settings = &cfg.motif;
    let start = Instant::now();

    let mut records = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    let mut pending: Vec<f64> = Vec::new();
    for t in 0..=cfg.max_iterations {
        if t > 0 {
            let g = gen_motif_chain(&spec, settings.length, &mut train_rng)?;
            pending.push(train_step(&mut model, &mut adam, &g.graph, &mut train_rng, t)?);
        }
        if t % settings.eval_every != 0 && t != cfg.max_iterations {
            continue;
        }
        let (val_loss, val_accuracy) = evaluate_motif(&model, &spec, settings.length, settings.eval_graphs, &mut eval_rng)?;
        if best.is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, val_accuracy));
        }
        let train_loss = if pending.is_empty() {
            // Before the first step: loss of the untrained model on a training chain.
            let g = gen_motif_chain(&spec, settings.length, &mut train_rng)?;
            nll(&model.predict(&g.graph)?, &g.graph.labels, &g.graph.masks.train)
        } else {
            pending.drain(..).sum::<f64>() / (t - records.last().map_or(0, |r: &MetricsRecord| r.iteration)) as f64
        };
        records.push(MetricsRecord {
            iteration: t,
            train_loss,
            val_loss,
            val_accuracy,
            test_accuracy: best.expect("set above").1,
            wall_ms: elapsed_ms(start, cfg.deterministic),
        });
    }
    if let Some(out) = &cfg.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write_csv(&out.join(METRICS_FILE), &records)?;
        save_checkpoint(out, &model)?;
    }
    Ok(MotifOutcome { records, model })
}
