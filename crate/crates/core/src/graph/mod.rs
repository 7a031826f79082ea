//! Graph data model: CSR adjacency, node features, labels and split masks.

mod io;
mod motif;
mod split;

use std::ops::Range;
use std::sync::Arc;

pub use io::{load_graph, write_graph, LoadOptions};
pub use motif::{build_motif_chain, gen_motif_chain, Element, MotifGraph, MotifSpec, MotifTopology, Role};
pub use split::{split_nodes, MIN_CLASS_SIZE};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compressed sparse rows. Row `i` lists the nodes whose messages node `i`
/// aggregates (edge `src -> dst` is stored in row `dst`), sorted and unique.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Csr {
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl Csr {
    /// Builds the adjacency from directed `(src, dst)` pairs, optionally adding
    /// reverse edges and a self-loop on every node. Duplicates collapse.
    pub fn from_edges(n: usize, edges: &[(usize, usize)], symmetrize: bool, self_loops: bool) -> Result<Self> {
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(edges.len() * 2 + n);
        for &(src, dst) in edges {
            if src >= n || dst >= n {
                return Err(Error::Config(format!("edge ({src}, {dst}) out of range for {n} nodes")));
            }
            pairs.push((dst, src));
            if symmetrize {
                pairs.push((src, dst));
            }
        }
        if self_loops {
            pairs.extend((0..n).map(|i| (i, i)));
        }
        pairs.sort_unstable();
        pairs.dedup();
        let mut row_ptr = vec![0; n + 1];
        for &(r, _) in &pairs {
            row_ptr[r + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx = pairs.into_iter().map(|(_, c)| c).collect();
        Ok(Self { row_ptr, col_idx })
    }

    pub fn num_nodes(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn row_range(&self, i: usize) -> Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_range(i)]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    /// `(row, col)` for every stored edge, in storage order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.num_nodes()).flat_map(|i| self.neighbors(i).iter().map(move |&j| (i, j))).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Masks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Masks {
    pub fn empty(n: usize) -> Self {
        Self { train: vec![false; n], val: vec![false; n], test: vec![false; n] }
    }
}

#[derive(Clone, Debug)]
pub struct Graph {
    pub adjacency: Arc<Csr>,
    pub features: Tensor,
    /// Class per node; `-1` marks unlabeled nodes.
    pub labels: Vec<i64>,
    pub masks: Masks,
    /// External node identifiers, in row order.
    pub node_ids: Vec<String>,
    /// Edge lines read from input, before symmetrization and self-loops.
    pub input_edges: usize,
}

impl Graph {
    pub fn new(edges: &[(usize, usize)], features: Tensor, labels: Vec<i64>, symmetrize: bool) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::Config(format!("{} labels for {n} nodes", labels.len())));
        }
        let adjacency = Arc::new(Csr::from_edges(n, edges, symmetrize, true)?);
        Ok(Self {
            adjacency,
            features,
            labels,
            masks: Masks::empty(n),
            node_ids: (0..n).map(|i| i.to_string()).collect(),
            input_edges: edges.len(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    /// `max(label) + 1`, or 0 when nothing is labeled.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize)
    }
}
