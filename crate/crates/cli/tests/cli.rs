use std::fs;
use std::path::Path;
use std::process::Command;

use phgcn_cli::bench::{run_bench, to_csv, BenchOptions, BENCH_HEADER};
use phgcn_cli::config::{ModelSpec, TrainConfig};
use phgcn_cli::embeddings::{dump_embeddings, embedding_file_name};
use phgcn_cli::metrics::read_csv;
use phgcn_cli::train::{load_checkpoint, run_motif, run_train, save_checkpoint, train_on_graph, METRICS_FILE, SUMMARY_FILE};
use phgcn_core::graph::{split_nodes, write_graph, Graph};
use phgcn_core::model::{accuracy, LayerKind, Model, ModelConfig};
use phgcn_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn phgcn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_phgcn"))
}

/// Two classes of 15 nodes each, separable on the first feature, with
/// mostly within-class edges.
fn separable_graph(seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 30;
    let labels: Vec<i64> = (0..n).map(|i| (i % 2) as i64).collect();
    let feats = Tensor::from_rows(
        n,
        3,
        (0..n).flat_map(|i| [if i % 2 == 0 { -1.0 } else { 1.0 }, rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)]).collect(),
    );
    let edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 2) % n)).collect();
    let mut g = Graph::new(&edges, feats, labels, true).unwrap();
    g.masks = split_nodes(&g.labels, seed).unwrap();
    g
}

fn small_config() -> TrainConfig {
    TrainConfig {
        model: ModelSpec { hidden: 4, heads: 2, dropout: 0.0, attn_dropout: 0.0, lambda_global: 2.0, ..ModelSpec::default() },
        max_iterations: 60,
        lr: 0.01,
        ..TrainConfig::default()
    }
}

fn write_dataset(dir: &Path, g: &Graph) {
    write_graph(g, dir.join("nodes.tsv"), dir.join("edges.tsv")).unwrap();
}

#[test]
fn zero_learning_rate_keeps_the_loss_constant() {
    let g = separable_graph(1);
    let cfg = TrainConfig { lr: 0.0, weight_decay: 0.0, max_iterations: 10, ..small_config() };
    let out = train_on_graph(&cfg, &g).unwrap();
    let first = out.records[0];
    for r in &out.records {
        assert_eq!(r.train_loss, first.train_loss);
        assert_eq!(r.val_loss, first.val_loss);
    }
}

#[test]
fn separable_graph_is_fit_perfectly() {
    let g = separable_graph(2);
    for kind in [LayerKind::PhGcn, LayerKind::Gat, LayerKind::Gcn] {
        let mut cfg = small_config();
        cfg.model.kind = kind;
        cfg.max_iterations = 300;
        cfg.patience = 300;
        let out = train_on_graph(&cfg, &g).unwrap();
        let logits = out.model.predict(&g).unwrap();
        assert_eq!(accuracy(&logits, &g.labels, &g.masks.train), 1.0, "{kind:?}");
    }
}

#[test]
fn reported_test_accuracy_is_taken_at_the_best_validation_loss() {
    let g = separable_graph(3);
    let mut cfg = small_config();
    cfg.model.dropout = 0.5;
    cfg.max_iterations = 200;
    cfg.patience = 15;
    let out = train_on_graph(&cfg, &g).unwrap();
    let recs = &out.records;
    assert!(recs.windows(2).all(|w| w[1].iteration == w[0].iteration + 1));
    let best = recs.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss)).unwrap();
    assert_eq!(best.iteration, out.best_iteration);
    assert_eq!(out.test_accuracy, recs.last().unwrap().test_accuracy);
    // The column only moves when the validation loss sets a new minimum.
    let mut running = f64::INFINITY;
    for w in recs.windows(2) {
        running = running.min(w[0].val_loss);
        if w[1].val_loss >= running {
            assert_eq!(w[1].test_accuracy, w[0].test_accuracy);
        }
    }
    // The returned model holds the best-validation parameters.
    let logits = out.model.predict(&g).unwrap();
    assert_eq!(accuracy(&logits, &g.labels, &g.masks.test), out.test_accuracy);
    assert!(recs.last().unwrap().iteration - out.best_iteration <= cfg.patience);
}

#[test]
fn divergence_is_reported_as_an_error() {
    let mut g = separable_graph(4);
    g.features.data_mut().iter_mut().for_each(|v| *v *= 1e300);
    assert!(train_on_graph(&small_config(), &g).is_err());
}

#[test]
fn train_writes_metrics_checkpoint_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &separable_graph(5));
    let mut cfg = small_config();
    cfg.data.nodes = Some(dir.path().join("nodes.tsv"));
    cfg.data.edges = Some(dir.path().join("edges.tsv"));
    cfg.out = Some(dir.path().join("run"));
    let out = run_train(&cfg).unwrap();
    let run = dir.path().join("run");
    assert_eq!(read_csv(&run.join(METRICS_FILE)).unwrap().len(), out.records.len());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary["best_iteration"], out.best_iteration);
    let restored = load_checkpoint(&run).unwrap();
    assert_eq!(restored.params().iter().count(), out.model.params().iter().count());
}

#[test]
fn same_seed_gives_byte_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &separable_graph(6));
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = phgcn()
            .args(["train", "--deterministic", "--seed", "9", "--iterations", "25", "--heads", "2", "--hidden", "4"])
            .arg("--nodes")
            .arg(dir.path().join("nodes.tsv"))
            .arg("--edges")
            .arg(dir.path().join("edges.tsv"))
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        fs::read(out.join(METRICS_FILE)).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("iteration,train_loss,val_loss,val_accuracy,test_accuracy,wall_ms\n"));
    assert!(text.lines().skip(1).all(|l| l.ends_with(",0")));
}

#[test]
fn command_line_flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &separable_graph(7));
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"max_iterations": 5, "patience": 50, "model": {"heads": 2, "hidden": 4}}"#).unwrap();
    let out = dir.path().join("run");
    let status = phgcn()
        .args(["train", "--deterministic", "--iterations", "3"])
        .arg("--config")
        .arg(&config)
        .arg("--nodes")
        .arg(dir.path().join("nodes.tsv"))
        .arg("--edges")
        .arg(dir.path().join("edges.tsv"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(read_csv(&out.join(METRICS_FILE)).unwrap().len(), 3);
    let model: ModelConfig = serde_json::from_str(&fs::read_to_string(out.join("model.json")).unwrap()).unwrap();
    assert_eq!(model.layers[0].heads, 2);

    fs::write(&config, r#"{"patience": 0}"#).unwrap();
    let status = phgcn().args(["train"]).arg("--config").arg(&config).status().unwrap();
    assert!(!status.success());
}

#[test]
fn untrained_motif_model_is_at_chance() {
    // A single random init can carry a small bias, so chance is judged on
    // the average over inits.
    let mut cfg = TrainConfig::motif_defaults();
    cfg.max_iterations = 0;
    cfg.motif.eval_graphs = 400;
    let mut accs = Vec::new();
    for kind in [LayerKind::PhGcn, LayerKind::Gat] {
        for seed in 0..6 {
            cfg.model.kind = kind;
            cfg.seed = seed;
            let out = run_motif(&cfg).unwrap();
            assert_eq!(out.records.len(), 1);
            accs.push(out.records[0].val_accuracy);
        }
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.5).abs() <= 0.1, "mean untrained accuracy {mean}");
}

#[test]
fn motif_runs_are_deterministic_and_evaluate_on_schedule() {
    let mut cfg = TrainConfig::motif_defaults();
    cfg.max_iterations = 50;
    cfg.motif.eval_every = 20;
    cfg.motif.eval_graphs = 10;
    cfg.deterministic = true;
    let a = run_motif(&cfg).unwrap().records;
    let b = run_motif(&cfg).unwrap().records;
    assert_eq!(a.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![0, 20, 40, 50]);
    assert_eq!(a.iter().map(|r| r.csv_row()).collect::<Vec<_>>(), b.iter().map(|r| r.csv_row()).collect::<Vec<_>>());
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_backward() {
    let ok = phgcn().arg("gradcheck").output().unwrap();
    assert!(ok.status.success());
    let report = String::from_utf8(ok.stdout).unwrap();
    for op in ["matmul", "edge_softmax", "spmm", "lattice_filter_positions", "model_ph_gcn"] {
        assert!(report.lines().any(|l| l.starts_with(op)), "no line for {op}");
    }
    let bad = phgcn().args(["gradcheck", "--corrupt"]).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8(bad.stdout).unwrap().contains("FAIL"));
}

#[test]
fn bench_emits_one_row_per_size() {
    let rows = run_bench(&BenchOptions { sizes: vec![1000], repeats: 1, ..BenchOptions::default() }).unwrap();
    assert_eq!(rows.len(), 1);
    let csv = to_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], BENCH_HEADER);
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields[0], "1000");
    assert!(fields[1].parse::<f64>().unwrap() > 0.0 && fields[2].parse::<f64>().unwrap() > 0.0);
    assert_eq!(fields[3], "1");

    let out = phgcn().args(["bench", "--sizes", "50,120,300", "--repeats", "1"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let sizes: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(sizes, ["50", "120", "300"]);
    assert!(!phgcn().args(["bench", "--sizes", "300,50"]).status().unwrap().success());
}

#[test]
fn dumped_embeddings_match_the_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 251;
    let edges: Vec<(usize, usize)> = (0..500).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect();
    let feats = Tensor::from_rows(n, 6, (0..n * 6).map(|_| rng.gen_range(0.0..1.0)).collect());
    let labels = (0..n).map(|_| rng.gen_range(0..5)).collect();
    let g = Graph::new(&edges, feats, labels, true).unwrap();
    let mut cfg = ModelConfig::stack(LayerKind::PhGcn, 2, 6, 8, 2, 5, 1);
    for l in &mut cfg.layers {
        l.embed_dim = 2;
    }
    let model = Model::new(cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&dir.path().join("ckpt"), &model).unwrap();
    write_dataset(dir.path(), &g);

    let status = phgcn()
        .args(["dump-embeddings", "--layer", "0"])
        .arg("--checkpoint")
        .arg(dir.path().join("ckpt"))
        .arg("--nodes")
        .arg(dir.path().join("nodes.tsv"))
        .arg("--edges")
        .arg(dir.path().join("edges.tsv"))
        .arg("--out")
        .arg(dir.path().join("emb"))
        .status()
        .unwrap();
    assert!(status.success());

    let expected = model.embeddings(&g, 0).unwrap();
    assert_eq!(expected.len(), 2);
    for (h, emb) in expected.iter().enumerate() {
        let text = fs::read_to_string(dir.path().join("emb").join(embedding_file_name(0, h))).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("node_id,label,x0,x1"));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 251);
        for (i, row) in rows.iter().enumerate() {
            let f: Vec<&str> = row.split(',').collect();
            assert_eq!(f[0], g.node_ids[i]);
            assert_eq!(f[1].parse::<i64>().unwrap(), g.labels[i]);
            let coords: Vec<f64> = f[2..].iter().map(|v| v.parse().unwrap()).collect();
            assert!(coords.iter().all(|v| v.is_finite()));
            assert_eq!(coords, emb.row(i));
        }
    }
}

#[test]
fn dump_embeddings_rejects_mismatched_inputs() {
    let model = Model::new(ModelConfig::stack(LayerKind::PhGcn, 2, 6, 4, 2, 2, 0)).unwrap();
    let g = separable_graph(9);
    let dir = tempfile::tempdir().unwrap();
    assert!(dump_embeddings(&model, &g, 0, dir.path()).is_err());
    let gat = Model::new(ModelConfig::stack(LayerKind::Gat, 2, 3, 4, 2, 2, 0)).unwrap();
    assert!(dump_embeddings(&gat, &g, 0, dir.path()).is_err());
}

#[test]
fn calibration_reproduces_the_shipped_table() {
    use phgcn_cli::calibrate::run_calibration;
    use phgcn_core::lattice::calibration::CalibrationTable;
    let fresh = run_calibration(&[4], None).unwrap();
    let shipped = CalibrationTable::shipped().get(4).unwrap();
    let got = fresh.get(4).unwrap();
    assert_eq!((got.scale, got.decay), (shipped.scale, shipped.decay));
    assert!((got.median_cosine - shipped.median_cosine).abs() < 1e-12);
}
