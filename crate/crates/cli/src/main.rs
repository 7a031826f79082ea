use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use phgcn_cli::bench::{run_bench, to_csv, BenchOptions};
use phgcn_cli::calibrate::run_calibration;
use phgcn_cli::config::TrainConfig;
use phgcn_cli::embeddings::dump_embeddings;
use phgcn_cli::env_threads;
use phgcn_cli::gradcheck::run_suite;
use phgcn_cli::train::{load_checkpoint, run_motif, run_train};
use phgcn_core::graph::{load_graph, LoadOptions};
use phgcn_core::model::{GlobalMode, LayerKind};

#[derive(Parser)]
#[command(name = "phgcn", version, about = "Graph networks with lattice-filtered global attention")]
struct Cli {
    /// JSON config file; flags given on the command line override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write 0 for wall-clock times so repeated runs are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full-batch node classification on a TSV graph.
    Train {
        #[arg(long)]
        nodes: Option<PathBuf>,
        #[arg(long)]
        edges: Option<PathBuf>,
        /// Do not add reverse edges.
        #[arg(long)]
        directed: bool,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        optim: OptimArgs,
    },
    /// Inductive dominant-motif task on freshly sampled chain graphs.
    Motif {
        /// Elements per chain.
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        eval_graphs: Option<usize>,
        #[arg(long)]
        eval_every: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        optim: OptimArgs,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Times lattice against exact global aggregation.
    Bench {
        /// Comma-separated, strictly ascending node counts.
        #[arg(long, value_delimiter = ',', default_values_t = [1000usize, 2000, 4000, 8000])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 10.0)]
        lambda: f64,
        /// Worker threads for the timed region (default single-threaded).
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Skip the exact evaluator above this many nodes.
        #[arg(long)]
        exact_limit: Option<usize>,
    },
    /// Writes per-head node embeddings of a trained checkpoint as CSV.
    DumpEmbeddings {
        /// Directory holding model.json and model.bin.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        nodes: PathBuf,
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        directed: bool,
        #[arg(long, default_value_t = 0)]
        layer: usize,
    },
    /// Refits the lattice kernel scale and decay against the exact evaluator.
    Calibrate {
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 4, 5, 6, 7, 8])]
        dims: Vec<usize>,
        /// Random instances per dimension.
        #[arg(long)]
        instances: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    PhGcn,
    GatEda,
    Gat,
    Gcn,
}

impl From<KindArg> for LayerKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::PhGcn => LayerKind::PhGcn,
            KindArg::GatEda => LayerKind::GatEda,
            KindArg::Gat => LayerKind::Gat,
            KindArg::Gcn => LayerKind::Gcn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GlobalArg {
    Lattice,
    Exact,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[arg(long)]
    layers: Option<usize>,
    /// Width of each hidden head.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    lambda_struct: Option<f64>,
    #[arg(long)]
    lambda_global: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    attn_dropout: Option<f64>,
    /// Evaluator for the PH-GCN global pathway.
    #[arg(long, value_enum)]
    global: Option<GlobalArg>,
}

#[derive(Args)]
struct OptimArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

fn apply_model(cfg: &mut TrainConfig, m: &ModelArgs) {
    let spec = &mut cfg.model;
    if let Some(k) = m.kind {
        spec.kind = k.into();
    }
    if let Some(g) = m.global {
        spec.global = match g {
            GlobalArg::Lattice => GlobalMode::Lattice,
            GlobalArg::Exact => GlobalMode::Exact,
        };
    }
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = m.$field { spec.$field = v; } )* };
    }
    set!(layers, hidden, heads, embed_dim, lambda_struct, lambda_global, dropout, attn_dropout);
}

fn apply_optim(cfg: &mut TrainConfig, o: &OptimArgs) {
    if let Some(v) = o.lr {
        cfg.lr = v;
    }
    if let Some(v) = o.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = o.iterations {
        cfg.max_iterations = v;
    }
    if let Some(v) = o.patience {
        cfg.patience = v;
    }
}

fn base_config(cli: &Cli, defaults: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::load(path, defaults)?,
        None => defaults,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    cfg.deterministic |= cli.deterministic;
    Ok(cfg)
}

fn write_or_print(out: Option<&PathBuf>, file: &str, text: &str) -> Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(file);
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let cap = env_threads();
    if let Some(n) = cap {
        // Ignore the error if a pool already exists; the cap then does not apply.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Train { nodes, edges, directed, model, optim } => {
            let mut cfg = base_config(&cli, TrainConfig::default())?;
            if nodes.is_some() {
                cfg.data.nodes = nodes.clone();
            }
            if edges.is_some() {
                cfg.data.edges = edges.clone();
            }
            cfg.data.directed |= *directed;
            apply_model(&mut cfg, model);
            apply_optim(&mut cfg, optim);
            let outcome = run_train(&cfg)?;
            println!(
                "stopped after {} iterations; best validation loss {:.4} at iteration {}; test accuracy {:.4}",
                outcome.records.len(),
                outcome.best_val_loss,
                outcome.best_iteration,
                outcome.test_accuracy
            );
        }
        Command::Motif { length, eval_graphs, eval_every, model, optim } => {
            let mut cfg = base_config(&cli, TrainConfig::motif_defaults())?;
            if let Some(v) = length {
                cfg.motif.length = *v;
            }
            if let Some(v) = eval_graphs {
                cfg.motif.eval_graphs = *v;
            }
            if let Some(v) = eval_every {
                cfg.motif.eval_every = *v;
            }
            apply_model(&mut cfg, model);
            apply_optim(&mut cfg, optim);
            let outcome = run_motif(&cfg)?;
            for r in &outcome.records {
                println!("iteration {:>6}  eval loss {:.4}  eval accuracy {:.3}", r.iteration, r.val_loss, r.val_accuracy);
            }
        }
        Command::Gradcheck { corrupt } => {
            let report = run_suite(cli.seed.unwrap_or(0), *corrupt)?;
            print!("{}", report.render());
            if !report.passed() {
                eprintln!("gradient check failed");
                return Ok(false);
            }
            println!("all gradient checks passed");
        }
        Command::Bench { sizes, dim, channels, lambda, threads, repeats, exact_limit } => {
            let threads = cap.map_or(*threads, |c| (*threads).min(c));
            let opts = BenchOptions {
                sizes: sizes.clone(),
                dim: *dim,
                channels: *channels,
                lambda: *lambda,
                threads,
                repeats: *repeats,
                seed: cli.seed.unwrap_or(0),
                exact_limit: *exact_limit,
            };
            write_or_print(cli.out.as_ref(), "bench.csv", &to_csv(&run_bench(&opts)?))?;
        }
        Command::DumpEmbeddings { checkpoint, nodes, edges, directed, layer } => {
            let model = load_checkpoint(checkpoint)?;
            let graph = load_graph(nodes, edges, LoadOptions { symmetrize: !directed })?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            for path in dump_embeddings(&model, &graph, *layer, &out)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Calibrate { dims, instances } => {
            let table = run_calibration(dims, *instances)?;
            let json = serde_json::to_string_pretty(&table)? + "\n";
            write_or_print(cli.out.as_ref(), "lattice_calibration.json", &json)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
