//! Library side of the `phgcn` command: configuration, training loops,
//! gradient checks, benchmarks and embedding export.

pub mod bench;
pub mod calibrate;
pub mod config;
pub mod embeddings;
pub mod gradcheck;
pub mod metrics;
pub mod train;

/// Environment variable capping internal parallelism.
pub const THREADS_ENV: &str = "PHGCN_THREADS";

/// Thread count requested through [`THREADS_ENV`], if set to a positive integer.
pub fn env_threads() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}
