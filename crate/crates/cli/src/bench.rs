//! Wall-clock comparison of lattice and exact global aggregation.

use std::fmt::Write as _;
use std::time::Instant;

use anyhow::{bail, Result};
use phgcn_core::attention::{exact_global_aggregate, lattice_global_aggregate};
use phgcn_core::lattice::LatticeFilter;
use phgcn_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const BENCH_HEADER: &str = "size,lattice_ms,exact_ms,threads";

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub sizes: Vec<usize>,
    pub dim: usize,
    pub channels: usize,
    pub lambda: f64,
    /// Worker threads for the timed region.
    pub threads: usize,
    /// Each timing is the minimum over this many runs.
    pub repeats: usize,
    pub seed: u64,
    /// Skip the quadratic path above this size (reported as NaN).
    pub exact_limit: Option<usize>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { sizes: vec![1000, 2000, 4000, 8000], dim: 4, channels: 8, lambda: 10.0, threads: 1, repeats: 3, seed: 0, exact_limit: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub lattice_ms: f64,
    pub exact_ms: f64,
    pub threads: usize,
}

fn normal_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_rows(r, c, (0..r * c).map(|_| StandardNormal.sample(rng)).collect())
}

fn best_of<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        std::hint::black_box(f()?);
        best = best.min(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(best)
}

/// Times both evaluators at every size on standard-normal positions and features.
pub fn run_bench(opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    if opts.sizes.windows(2).any(|w| w[0] >= w[1]) {
        bail!("benchmark sizes must be strictly ascending");
    }
    if opts.threads == 0 {
        bail!("thread count must be positive");
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.threads).build()?;
    let filter = LatticeFilter::for_dim(opts.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    pool.install(|| {
        opts.sizes
            .iter()
            .map(|&n| {
                let pos = normal_tensor(&mut rng, n, opts.dim);
                let feat = normal_tensor(&mut rng, n, opts.channels);
                let lattice_ms = best_of(opts.repeats, || Ok(lattice_global_aggregate(&pos, &feat, opts.lambda, &filter)?))?;
                let exact_ms = if opts.exact_limit.is_none_or(|l| n <= l) {
                    best_of(opts.repeats, || Ok(exact_global_aggregate(&pos, &feat, opts.lambda)?))?
                } else {
                    f64::NAN
                };
                Ok(BenchRow { size: n, lattice_ms, exact_ms, threads: opts.threads })
            })
            .collect()
    })
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{:.3},{:.3},{}", r.size, r.lattice_ms, r.exact_ms, r.threads).expect("writing to a String cannot fail");
    }
    s
}
