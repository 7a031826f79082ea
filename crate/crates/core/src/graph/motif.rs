//! Synthetic motif-chain graphs for the inductive "dominant motif" task.
//!
//! A chain is a sequence of elements (motif 1, motif 2 or a single spacer
//! node) joined by bridge edges between consecutive ports. Red nodes are
//! labeled 1 when their motif occurs strictly more often than the other one.

use rand::Rng;

use super::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Upper bound on rejection sampling of tied chains.
const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Red,
    A,
    B,
    Spacer,
}

impl Role {
    fn index(self) -> usize {
        match self {
            Role::Red => 0,
            Role::A => 1,
            Role::B => 2,
            Role::Spacer => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Element {
    Motif1,
    Motif2,
    Spacer,
}

#[derive(Clone, Debug)]
pub struct MotifTopology {
    pub roles: Vec<Role>,
    pub edges: Vec<(usize, usize)>,
    /// Node that carries the bridge edges to neighboring elements.
    pub port: usize,
}

impl MotifTopology {
    fn red_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.roles.iter().enumerate().filter(|(_, r)| **r == Role::Red).map(|(i, _)| i)
    }
}

#[derive(Clone, Debug)]
pub struct MotifSpec {
    pub motif_1: MotifTopology,
    pub motif_2: MotifTopology,
    /// Feature vector per role, indexed Red, A, B, Spacer.
    pub role_features: [Vec<f64>; 4],
}

impl Default for MotifSpec {
    /// Triangle `{r, a, a}` and 4-cycle `{r, b, b, b}`; one-hot role features of width 4.
    fn default() -> Self {
        let one_hot = |k: usize| (0..4).map(|i| if i == k { 1.0 } else { 0.0 }).collect::<Vec<_>>();
        Self {
            motif_1: MotifTopology { roles: vec![Role::Red, Role::A, Role::A], edges: vec![(0, 1), (1, 2), (2, 0)], port: 1 },
            motif_2: MotifTopology {
                roles: vec![Role::Red, Role::B, Role::B, Role::B],
                edges: vec![(0, 1), (1, 2), (2, 3), (3, 0)],
                port: 2,
            },
            role_features: [one_hot(0), one_hot(1), one_hot(2), one_hot(3)],
        }
    }
}

impl MotifSpec {
    pub fn feature_dim(&self) -> usize {
        self.role_features[0].len()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("motif_1", &self.motif_1), ("motif_2", &self.motif_2)] {
            if m.red_nodes().next().is_none() {
                return Err(Error::Config(format!("{name} has no red node")));
            }
            if m.port >= m.roles.len() || m.edges.iter().any(|&(a, b)| a >= m.roles.len() || b >= m.roles.len()) {
                return Err(Error::Config(format!("{name} references a node it does not have")));
            }
        }
        let w = self.feature_dim();
        if self.role_features.iter().any(|f| f.len() != w) {
            return Err(Error::Config("role feature vectors differ in width".into()));
        }
        if isomorphic(&self.motif_1, &self.motif_2) {
            return Err(Error::Config("motif_1 and motif_2 are isomorphic".into()));
        }
        Ok(())
    }

    fn topology(&self, e: Element) -> MotifTopology {
        match e {
            Element::Motif1 => self.motif_1.clone(),
            Element::Motif2 => self.motif_2.clone(),
            Element::Spacer => MotifTopology { roles: vec![Role::Spacer], edges: vec![], port: 0 },
        }
    }
}

fn adjacency(t: &MotifTopology) -> Vec<Vec<bool>> {
    let n = t.roles.len();
    let mut adj = vec![vec![false; n]; n];
    for &(a, b) in &t.edges {
        adj[a][b] = true;
        adj[b][a] = true;
    }
    adj
}

/// Undirected graph isomorphism by brute force; motifs are a handful of nodes.
fn isomorphic(x: &MotifTopology, y: &MotifTopology) -> bool {
    let (ax, ay) = (adjacency(x), adjacency(y));
    let n = ax.len();
    if n != ay.len() {
        return false;
    }
    let count = |a: &Vec<Vec<bool>>| a.iter().flatten().filter(|&&e| e).count();
    if count(&ax) != count(&ay) {
        return false;
    }
    fn search(perm: &mut Vec<usize>, used: &mut Vec<bool>, ax: &[Vec<bool>], ay: &[Vec<bool>]) -> bool {
        let k = perm.len();
        if k == ax.len() {
            return true;
        }
        for cand in 0..ax.len() {
            if used[cand] {
                continue;
            }
            if (0..k).all(|i| ax[k][i] == ay[cand][perm[i]]) && ax[k][k] == ay[cand][cand] {
                used[cand] = true;
                perm.push(cand);
                if search(perm, used, ax, ay) {
                    return true;
                }
                perm.pop();
                used[cand] = false;
            }
        }
        false
    }
    search(&mut Vec::new(), &mut vec![false; n], &ax, &ay)
}

#[derive(Clone, Debug)]
pub struct MotifGraph {
    /// Red nodes are labeled (and in the train mask); all others are `-1`.
    pub graph: Graph,
    pub elements: Vec<Element>,
    /// `(node, element kind)` for every red node.
    pub red_nodes: Vec<(usize, Element)>,
}

impl MotifGraph {
    pub fn count(&self, e: Element) -> usize {
        self.elements.iter().filter(|&&x| x == e).count()
    }
}

/// Builds the chain for a fixed element sequence. Tied motif counts give every
/// red node label 0 (no motif is strictly dominant).
pub fn build_motif_chain(spec: &MotifSpec, elements: &[Element]) -> Result<MotifGraph> {
    spec.validate()?;
    if elements.is_empty() {
        return Err(Error::Config("motif chain needs at least one element".into()));
    }
    let c1 = elements.iter().filter(|&&e| e == Element::Motif1).count();
    let c2 = elements.iter().filter(|&&e| e == Element::Motif2).count();
    let dominant = match c1.cmp(&c2) {
        std::cmp::Ordering::Greater => Some(Element::Motif1),
        std::cmp::Ordering::Less => Some(Element::Motif2),
        std::cmp::Ordering::Equal => None,
    };

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut edges = Vec::new();
    let mut red_nodes = Vec::new();
    let mut prev_port: Option<usize> = None;
    for &e in elements {
        let topo = spec.topology(e);
        let base = labels.len();
        for (k, &role) in topo.roles.iter().enumerate() {
            features.extend_from_slice(&spec.role_features[role.index()]);
            if role == Role::Red {
                labels.push(i64::from(dominant == Some(e)));
                red_nodes.push((base + k, e));
            } else {
                labels.push(-1);
            }
        }
        edges.extend(topo.edges.iter().map(|&(a, b)| (base + a, base + b)));
        if let Some(p) = prev_port {
            edges.push((p, base + topo.port));
        }
        prev_port = Some(base + topo.port);
    }
    let n = labels.len();
    let features = Tensor::from_rows(n, spec.feature_dim(), features);
    let mut graph = Graph::new(&edges, features, labels, true)?;
    for &(i, _) in &red_nodes {
        graph.masks.train[i] = true;
    }
    Ok(MotifGraph { graph, elements: elements.to_vec(), red_nodes })
}

/// Samples `length` elements uniformly from {motif 1, motif 2, spacer},
/// rejecting chains where the two motif counts tie.
pub fn gen_motif_chain<R: Rng + ?Sized>(spec: &MotifSpec, length: usize, rng: &mut R) -> Result<MotifGraph> {
    if length < 2 {
        return Err(Error::Config(format!("motif chain length {length} < 2")));
    }
    for _ in 0..MAX_ATTEMPTS {
        let elements: Vec<Element> = (0..length)
            .map(|_| match rng.gen_range(0..3) {
                0 => Element::Motif1,
                1 => Element::Motif2,
                _ => Element::Spacer,
            })
            .collect();
        let c1 = elements.iter().filter(|&&e| e == Element::Motif1).count();
        let c2 = elements.iter().filter(|&&e| e == Element::Motif2).count();
        if c1 != c2 {
            return build_motif_chain(spec, &elements);
        }
    }
    Err(Error::ResampleExhausted(MAX_ATTEMPTS))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn unanimous_chain_labels_every_red_node_one() {
        let g = build_motif_chain(&MotifSpec::default(), &[Element::Motif1; 10]).unwrap();
        assert_eq!(g.red_nodes.len(), 10);
        assert!(g.red_nodes.iter().all(|&(i, _)| g.graph.labels[i] == 1));
        assert_eq!(g.graph.num_nodes(), 30);
    }

    #[test]
    fn majority_motif_wins() {
        let mut elems = vec![Element::Motif2; 6];
        elems.extend([Element::Motif1; 4]);
        let g = build_motif_chain(&MotifSpec::default(), &elems).unwrap();
        for &(i, kind) in &g.red_nodes {
            let want = i64::from(kind == Element::Motif2);
            assert_eq!(g.graph.labels[i], want);
        }
    }

    #[test]
    fn ties_are_resampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let g = gen_motif_chain(&MotifSpec::default(), 10, &mut rng).unwrap();
            assert_ne!(g.count(Element::Motif1), g.count(Element::Motif2));
            assert_eq!(g.elements.len(), 10);
        }
    }

    #[test]
    fn structure_and_features() {
        let spec = MotifSpec::default();
        let g = build_motif_chain(&spec, &[Element::Motif1, Element::Spacer, Element::Motif2]).unwrap();
        let adj = &g.graph.adjacency;
        assert_eq!(g.graph.num_nodes(), 8);
        assert!((0..8).all(|i| adj.has_edge(i, i)));
        // triangle port (1) -> spacer (3) -> 4-cycle port (4 + 2)
        assert!(adj.has_edge(1, 3) && adj.has_edge(3, 1));
        assert!(adj.has_edge(3, 6));
        assert_eq!(g.graph.features.row(3), spec.role_features[3].as_slice());
        assert_eq!(g.graph.features.row(4), spec.role_features[0].as_slice());
        assert_eq!(g.graph.labels[5], -1);
    }

    #[test]
    fn isomorphic_motifs_are_rejected() {
        let mut spec = MotifSpec {
            motif_2: MotifTopology { roles: vec![Role::Red, Role::B, Role::B], edges: vec![(1, 0), (2, 1), (0, 2)], port: 0 },
            ..MotifSpec::default()
        };
        assert!(spec.validate().is_err());
        spec.motif_2.roles = vec![Role::B; 3];
        spec.motif_2.edges = vec![(0, 1), (1, 2)];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn short_chain_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(gen_motif_chain(&MotifSpec::default(), 1, &mut rng).is_err());
    }
}
