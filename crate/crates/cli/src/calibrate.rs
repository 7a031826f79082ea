use anyhow::Result;
use phgcn_core::lattice::calibration::{calibrate, CalibrationOptions, CalibrationTable};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Base of the per-dimension calibration seed (`base + dim`).
pub const CALIBRATION_SEED_BASE: u64 = 2024;

/// Fits the lattice kernel for each dimension against the exact evaluator.
pub fn run_calibration(dims: &[usize], instances: Option<usize>) -> Result<CalibrationTable> {
    let mut table = CalibrationTable { entries: Vec::new() };
    for &dim in dims {
        let mut opts = CalibrationOptions::new(dim);
        if let Some(k) = instances {
            opts.instances = k;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(CALIBRATION_SEED_BASE + dim as u64);
        table.insert(calibrate(&opts, &mut rng)?);
    }
    Ok(table)
}
