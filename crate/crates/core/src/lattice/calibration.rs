//! Fitting the lattice scale and blur decay against the exact filter.
//!
//! The exact kernel `exp(-lambda |p - q|)` depends on `lambda * p` only, and so
//! does the lattice filter once the elevation scale is `lambda * c_D`. One pair
//! `(c_D, decay)` per dimension therefore serves every `lambda`. The fitted
//! pairs ship in `data/lattice_calibration.json`.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::filter::{BlurKernel, LatticeFilter};
use crate::attention::{cosine_similarity, exact_global_aggregate, lattice_global_aggregate};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SHIPPED: &str = include_str!("../../data/lattice_calibration.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub dim: usize,
    /// Elevation scale per unit of decay rate.
    pub scale: f64,
    /// Blur kernel decay per lattice step.
    pub decay: f64,
    /// Mean squared error of normalized outputs on the fitting instances.
    pub mse: f64,
    /// Median per-node cosine similarity on the fitting instances.
    pub median_cosine: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub entries: Vec<Calibration>,
}

impl CalibrationTable {
    pub fn shipped() -> &'static CalibrationTable {
        static TABLE: OnceLock<CalibrationTable> = OnceLock::new();
        TABLE.get_or_init(|| serde_json::from_str(SHIPPED).expect("shipped calibration table parses"))
    }

    pub fn get(&self, dim: usize) -> Option<&Calibration> {
        self.entries.iter().find(|c| c.dim == dim)
    }

    pub fn insert(&mut self, c: Calibration) {
        self.entries.retain(|e| e.dim != c.dim);
        self.entries.push(c);
        self.entries.sort_by_key(|e| e.dim);
    }
}

/// Shipped pair for `dim`, or a generic guess when `dim` was never fitted.
pub fn calibrated(dim: usize) -> Calibration {
    CalibrationTable::shipped().get(dim).cloned().unwrap_or_else(|| Calibration {
        dim,
        scale: (dim as f64 / (dim as f64 + 1.0)).sqrt(),
        decay: 1.0,
        mse: f64::NAN,
        median_cosine: f64::NAN,
    })
}

/// Gaussian clusters with well separated centers and standard normal features.
#[derive(Clone, Debug)]
pub struct ClusterSpec {
    pub points: usize,
    pub dim: usize,
    pub channels: usize,
    pub clusters: usize,
    pub std: f64,
    pub min_separation: f64,
}

impl ClusterSpec {
    pub fn new(points: usize, dim: usize) -> Self {
        Self { points, dim, channels: 8, clusters: 5, std: 0.1, min_separation: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct ClusteredInstance {
    pub positions: Tensor,
    pub features: Tensor,
    pub assignment: Vec<usize>,
}

pub fn clustered_instance<R: Rng + ?Sized>(spec: &ClusterSpec, rng: &mut R) -> Result<ClusteredInstance> {
    if spec.points == 0 || spec.dim == 0 || spec.clusters == 0 {
        return Err(Error::Config("clustered instance needs points, dimensions and clusters".into()));
    }
    let noise = Normal::new(0.0, spec.std).map_err(|e| Error::Config(e.to_string()))?;
    // Box wide enough that rejection sampling of centers terminates quickly.
    let half = spec.min_separation * (spec.clusters as f64).powf(1.0 / spec.dim as f64).max(1.0);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.clusters);
    let mut attempts = 0;
    while centers.len() < spec.clusters {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::ResampleExhausted(100_000));
        }
        let c: Vec<f64> = (0..spec.dim).map(|_| rng.gen_range(-half..half)).collect();
        let far = centers.iter().all(|o| o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= spec.min_separation);
        if far {
            centers.push(c);
        }
    }
    let mut positions = Vec::with_capacity(spec.points * spec.dim);
    let mut assignment = Vec::with_capacity(spec.points);
    for i in 0..spec.points {
        let k = i % spec.clusters;
        assignment.push(k);
        positions.extend(centers[k].iter().map(|c| c + noise.sample(rng)));
    }
    let features = (0..spec.points * spec.channels).map(|_| StandardNormal.sample(rng)).collect();
    Ok(ClusteredInstance {
        positions: Tensor::from_rows(spec.points, spec.dim, positions),
        features: Tensor::from_rows(spec.points, spec.channels, features),
        assignment,
    })
}

/// Error statistics of the lattice aggregation against the exact one.
#[derive(Clone, Copy, Debug)]
pub struct Agreement {
    pub mse: f64,
    pub median_cosine: f64,
    pub min_cosine: f64,
}

/// Compares normalized (softmax-weighted) aggregations, node by node.
pub fn agreement(filter: &LatticeFilter, instances: &[ClusteredInstance], lambda: f64) -> Result<Agreement> {
    let mut cosines = Vec::new();
    let (mut sq, mut count) = (0.0, 0usize);
    for inst in instances {
        let exact = exact_global_aggregate(&inst.positions, &inst.features, lambda)?;
        let approx = lattice_global_aggregate(&inst.positions, &inst.features, lambda, filter)?;
        for i in 0..exact.rows() {
            cosines.push(cosine_similarity(exact.row(i), approx.row(i)));
        }
        sq += exact.data().iter().zip(approx.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += exact.len();
    }
    cosines.sort_by(f64::total_cmp);
    Ok(Agreement {
        mse: sq / count.max(1) as f64,
        median_cosine: median_sorted(&cosines),
        min_cosine: cosines.first().copied().unwrap_or(f64::NAN),
    })
}

pub fn median_sorted(v: &[f64]) -> f64 {
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

#[derive(Clone, Debug)]
pub struct CalibrationOptions {
    pub instances: usize,
    pub cluster: ClusterSpec,
    /// Decay rates the fit is averaged over.
    pub lambdas: Vec<f64>,
    pub scales: Vec<f64>,
    pub decays: Vec<f64>,
    /// Rounds of grid refinement around the best pair.
    pub refinements: usize,
}

impl CalibrationOptions {
    pub fn new(dim: usize) -> Self {
        Self {
            instances: 8,
            cluster: ClusterSpec::new(200, dim),
            lambdas: vec![10.0],
            scales: (0..20).map(|k| 0.05 * 1.25f64.powi(k)).collect(),
            decays: (1..=12).map(|k| 0.25 * k as f64).collect(),
            refinements: 2,
        }
    }
}

fn score(scale: f64, decay: f64, insts: &[ClusteredInstance], lambdas: &[f64]) -> Result<Agreement> {
    let filter = LatticeFilter::new(BlurKernel::exponential(decay)?, scale)?;
    let mut total = Agreement { mse: 0.0, median_cosine: 0.0, min_cosine: f64::INFINITY };
    for &l in lambdas {
        let a = agreement(&filter, insts, l)?;
        total.mse += a.mse / lambdas.len() as f64;
        total.median_cosine += a.median_cosine / lambdas.len() as f64;
        total.min_cosine = total.min_cosine.min(a.min_cosine);
    }
    Ok(total)
}

/// Least-squares grid search for `(scale, decay)` at dimension `cluster.dim`.
pub fn calibrate<R: Rng + ?Sized>(opts: &CalibrationOptions, rng: &mut R) -> Result<Calibration> {
    if opts.scales.is_empty() || opts.decays.is_empty() || opts.lambdas.is_empty() {
        return Err(Error::Config("calibration grid is empty".into()));
    }
    let insts = (0..opts.instances).map(|_| clustered_instance(&opts.cluster, rng)).collect::<Result<Vec<_>>>()?;

    let mut best: Option<(f64, f64, Agreement)> = None;
    let consider = |s: f64, k: f64, best: &mut Option<(f64, f64, Agreement)>| -> Result<()> {
        let a = score(s, k, &insts, &opts.lambdas)?;
        if best.as_ref().is_none_or(|b| a.mse < b.2.mse) {
            *best = Some((s, k, a));
        }
        Ok(())
    };
    for &s in &opts.scales {
        for &k in &opts.decays {
            consider(s, k, &mut best)?;
        }
    }
    let mut s_step = ratio_step(&opts.scales);
    let mut k_step = ratio_step(&opts.decays);
    for _ in 0..opts.refinements {
        let (s0, k0, _) = best.expect("grid is non-empty");
        s_step = s_step.sqrt();
        k_step = k_step.sqrt();
        for i in -2i32..=2 {
            for j in -2i32..=2 {
                consider(s0 * s_step.powi(i), k0 * k_step.powi(j), &mut best)?;
            }
        }
    }
    let (scale, decay, a) = best.expect("grid is non-empty");
    Ok(Calibration { dim: opts.cluster.dim, scale, decay, mse: a.mse, median_cosine: a.median_cosine })
}

/// Geometric spacing of a sorted grid, used as the first refinement step.
fn ratio_step(grid: &[f64]) -> f64 {
    if grid.len() < 2 {
        return 1.5;
    }
    (grid[grid.len() - 1] / grid[0]).abs().powf(1.0 / (grid.len() - 1) as f64).max(1.01)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn shipped_table_parses_and_falls_back() {
        let t = CalibrationTable::shipped();
        assert!(t.entries.iter().all(|c| c.scale > 0.0 && c.decay > 0.0));
        let c = calibrated(97);
        assert_eq!(c.dim, 97);
        assert!(c.scale > 0.0 && c.decay == 1.0);
    }

    #[test]
    fn clusters_are_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ClusterSpec::new(60, 4);
        let inst = clustered_instance(&spec, &mut rng).unwrap();
        assert_eq!(inst.positions.shape(), &[60, 4]);
        assert_eq!(inst.features.shape(), &[60, 8]);
        let mut centroids = vec![vec![0.0; 4]; spec.clusters];
        let mut counts = vec![0.0; spec.clusters];
        for (i, &k) in inst.assignment.iter().enumerate() {
            counts[k] += 1.0;
            centroids[k].iter_mut().zip(inst.positions.row(i)).for_each(|(c, p)| *c += p);
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|x| *x /= n);
        }
        for a in 0..spec.clusters {
            for b in a + 1..spec.clusters {
                let d: f64 = centroids[a].iter().zip(&centroids[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                assert!(d > 0.7, "centroids {a} and {b} only {d} apart");
            }
        }
    }

    #[test]
    fn table_insert_replaces_dimension() {
        let mut t = CalibrationTable::default();
        let c = Calibration { dim: 3, scale: 1.0, decay: 1.0, mse: 0.0, median_cosine: 1.0 };
        t.insert(c.clone());
        t.insert(Calibration { scale: 2.0, ..c });
        assert_eq!(t.entries.len(), 1);
        assert_eq!(t.get(3).unwrap().scale, 2.0);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median_sorted(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(median_sorted(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert!(median_sorted(&[]).is_nan());
    }
}
