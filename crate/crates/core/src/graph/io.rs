//! TSV ingestion and serialization.
//!
//! Nodes file: one node per line, `id<TAB>label<TAB>f_1 ... f_F` (features
//! tab-separated; `-1` label = unlabeled). Edges file: `src<TAB>dst` ids.
//! Blank lines and lines starting with `#` are ignored.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    /// Add the reverse of every edge (undirected treatment).
    pub symmetrize: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { symmetrize: true }
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r'))).filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

pub fn load_graph(nodes_path: impl AsRef<Path>, edges_path: impl AsRef<Path>, opts: LoadOptions) -> Result<Graph> {
    let nodes_path = nodes_path.as_ref();
    let edges_path = edges_path.as_ref();
    let nodes_text = fs::read_to_string(nodes_path)?;
    let edges_text = fs::read_to_string(edges_path)?;
    let npath = nodes_path.display().to_string();
    let epath = edges_path.display().to_string();
    let parse_err = |path: &str, line: usize, msg: String| Error::Parse { path: path.to_string(), line, msg };

    let mut ids = Vec::new();
    let mut index = HashMap::new();
    let mut labels = Vec::new();
    let mut features = Vec::new();
    let mut width = None;
    for (line_no, line) in data_lines(&nodes_text) {
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default().trim();
        let label = fields.next().ok_or_else(|| parse_err(&npath, line_no, "missing label column".into()))?;
        let label: i64 = label.trim().parse().map_err(|_| parse_err(&npath, line_no, format!("label `{label}` is not an integer")))?;
        if label < -1 {
            return Err(parse_err(&npath, line_no, format!("label {label} is below -1")));
        }
        let start = features.len();
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| parse_err(&npath, line_no, format!("feature `{f}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(&npath, line_no, format!("feature `{f}` is not finite")));
            }
            features.push(v);
        }
        let f = features.len() - start;
        match width {
            None => width = Some(f),
            Some(w) if w != f => {
                return Err(parse_err(&npath, line_no, format!("expected {w} features, found {f}")));
            }
            _ => {}
        }
        if index.insert(id.to_string(), ids.len()).is_some() {
            return Err(parse_err(&npath, line_no, format!("duplicate node id `{id}`")));
        }
        ids.push(id.to_string());
        labels.push(label);
    }

    let mut edges = Vec::new();
    for (line_no, line) in data_lines(&edges_text) {
        let mut fields = line.split('\t').map(str::trim);
        let (Some(src), Some(dst), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err(&epath, line_no, "expected `src<TAB>dst`".into()));
        };
        let lookup = |id: &str| index.get(id).copied().ok_or_else(|| parse_err(&epath, line_no, format!("unknown node id `{id}`")));
        edges.push((lookup(src)?, lookup(dst)?));
    }

    let n = ids.len();
    let features = Tensor::from_rows(n, width.unwrap_or(0), features);
    let mut graph = Graph::new(&edges, features, labels, opts.symmetrize)?;
    graph.node_ids = ids;
    Ok(graph)
}

/// Writes `graph` in the format `load_graph` reads. Every stored edge except
/// self-loops is written, so reloading reproduces the same adjacency.
pub fn write_graph(graph: &Graph, nodes_path: impl AsRef<Path>, edges_path: impl AsRef<Path>) -> Result<()> {
    let mut nodes = String::new();
    for i in 0..graph.num_nodes() {
        write!(nodes, "{}\t{}", graph.node_ids[i], graph.labels[i]).expect("write to string");
        for v in graph.features.row(i) {
            write!(nodes, "\t{v}").expect("write to string");
        }
        nodes.push('\n');
    }
    let mut edges = String::new();
    let csr = &graph.adjacency;
    for dst in 0..csr.num_nodes() {
        for &src in csr.neighbors(dst) {
            if src != dst {
                writeln!(edges, "{}\t{}", graph.node_ids[src], graph.node_ids[dst]).expect("write to string");
            }
        }
    }
    fs::write(nodes_path, nodes)?;
    fs::write(edges_path, edges)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_small_graph() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "n.tsv", "# id label feats\na\t0\t1\t0\nb\t1\t0\t1\nc\t-1\t0.5\t0.5\n");
        let e = write(dir.path(), "e.tsv", "a\tb\n");
        let g = load_graph(&n, &e, LoadOptions::default()).unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.num_features(), 2);
        assert_eq!(g.num_classes(), 2);
        assert_eq!(g.input_edges, 1);
        assert!(g.adjacency.has_edge(0, 1) && g.adjacency.has_edge(1, 0));
        assert!((0..3).all(|i| g.adjacency.has_edge(i, i)));
        assert_eq!(g.labels, vec![0, 1, -1]);
    }

    #[test]
    fn empty_edge_file_gives_isolated_self_looped_nodes() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "n.tsv", "0\t0\t1\n1\t0\t2\n");
        let e = write(dir.path(), "e.tsv", "");
        let g = load_graph(&n, &e, LoadOptions::default()).unwrap();
        assert_eq!(g.adjacency.num_edges(), 2);
        assert_eq!(g.adjacency.neighbors(1), &[1]);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "n.tsv", "0\t0\t1\n1\tx\t2\n");
        let e = write(dir.path(), "e.tsv", "");
        match load_graph(&n, &e, LoadOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }

        let n = write(dir.path(), "n2.tsv", "0\t0\t1\n1\t0\t2\t3\n");
        assert!(matches!(load_graph(&n, &e, LoadOptions::default()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn dangling_edge_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "n.tsv", "0\t0\t1\n1\t0\t2\n");
        let e = write(dir.path(), "e.tsv", "0\t1\n\n1\t7\n");
        match load_graph(&n, &e, LoadOptions::default()) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains('7'));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn directed_flag_keeps_direction() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "n.tsv", "0\t0\t1\n1\t0\t2\n");
        let e = write(dir.path(), "e.tsv", "0\t1\n");
        let g = load_graph(&n, &e, LoadOptions { symmetrize: false }).unwrap();
        assert!(g.adjacency.has_edge(1, 0));
        assert!(!g.adjacency.has_edge(0, 1));
    }
}
