use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use phgcn_core::graph::Graph;
use phgcn_core::model::Model;

pub fn embedding_file_name(layer: usize, head: usize) -> String {
    format!("embeddings_layer{layer}_head{head}.csv")
}

/// Writes one CSV per head of `layer`: `node_id,label,x0,...,x{D-1}`.
/// Coordinates use Rust's shortest round-trip formatting, so reading them
/// back gives the exact in-memory values.
pub fn dump_embeddings(model: &Model, graph: &Graph, layer: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let expected = model.config().layers[0].in_dim;
    if graph.num_features() != expected {
        bail!("checkpoint expects {expected} input features but the graph has {}", graph.num_features());
    }
    let heads = model.embeddings(graph, layer)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::with_capacity(heads.len());
    for (h, emb) in heads.iter().enumerate() {
        let mut s = String::from("node_id,label");
        for k in 0..emb.cols() {
            write!(s, ",x{k}").expect("writing to a String cannot fail");
        }
        s.push('\n');
        for i in 0..emb.rows() {
            write!(s, "{},{}", graph.node_ids[i], graph.labels[i]).expect("writing to a String cannot fail");
            for v in emb.row(i) {
                write!(s, ",{v}").expect("writing to a String cannot fail");
            }
            s.push('\n');
        }
        let path = out.join(embedding_file_name(layer, h));
        fs::write(&path, s).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}
