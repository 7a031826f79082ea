//! Central finite-difference checks of tape gradients.
//!
//! The checker rebuilds the whole computation for every perturbed coordinate,
//! so it only depends on the forward pass being correct.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error, so near-zero gradients are
    /// judged on absolute error instead.
    pub floor: f64,
    /// Check at most this many coordinates per input (evenly strided).
    pub max_coords: Option<usize>,
    /// Skip coordinates whose perturbation changes the tape's structure
    /// signature (crossing a simplex boundary, for instance).
    pub reject_structure_changes: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-4, max_coords: None, reject_structure_changes: true }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Max relative error per input, in input order.
    pub max_rel_err: Vec<f64>,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar produced by `f` against central
/// differences, for every input tensor.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok((v.data()[0], tape.structure_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let base_sig = tape.structure_signature();
    let analytic: Vec<Vec<f64>> =
        vars.iter().zip(inputs).map(|(v, t)| tape.grad(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)).collect();

    let mut report = GradCheckReport::default();
    let mut values = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = opts.max_coords.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        let mut worst: f64 = 0.0;
        for idx in (0..n).step_by(stride) {
            let orig = values[k].data()[idx];
            values[k].data_mut()[idx] = orig + opts.step;
            let (plus, sig_p) = eval(&values)?;
            values[k].data_mut()[idx] = orig - opts.step;
            let (minus, sig_m) = eval(&values)?;
            values[k].data_mut()[idx] = orig;
            if opts.reject_structure_changes && (sig_p != base_sig || sig_m != base_sig) {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            worst = worst.max(relative_error(analytic[k][idx], numeric, opts.floor));
            report.checked += 1;
        }
        report.max_rel_err.push(worst);
    }
    Ok(report)
}
