//! Central finite-difference verification of analytic gradients.
//!
//! Runs at 64-bit only: the truncation and rounding errors of central
//! differences leave no headroom at 32-bit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One coordinate whose analytic and numeric gradients disagree.
#[derive(Debug, Clone)]
pub struct GradCheckFailure {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub tolerance: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Relative error denominators are floored here: below this magnitude the
/// comparison is effectively absolute, which is the honest noise floor of
/// central differences on losses of order one.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// Compares the tape's analytic gradients of `f` against central finite
/// differences with an absolute step, over up to `max_coords_per_input`
/// sampled coordinates of every input.
///
/// `f` must be deterministic; it is evaluated twice at the base point and a
/// bitwise difference is reported as [`TensorError::NonDeterministic`].
pub fn grad_check<F>(
    f: &F,
    inputs: &[Tensor<f64>],
    step: f64,
    tolerance: f64,
    max_coords_per_input: usize,
    seed: u64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    if step <= 0.0 || tolerance <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            detail: format!("step {} and tolerance {} must be positive", step, tolerance),
        });
    }
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
            .collect();
        let out = f(&mut tape, &vars)?;
        let t = tape.value(out);
        if t.numel() != 1 {
            return Err(TensorError::InvalidLoss(format!(
                "grad_check function returned shape {:?}, expected scalar",
                t.shape()
            )));
        }
        Ok(t.item())
    };

    let base = eval(inputs)?;
    let base2 = eval(inputs)?;
    if base.to_bits() != base2.to_bits() {
        return Err(TensorError::NonDeterministic(format!(
            "two evaluations at the base point differ: {base:?} vs {base2:?}"
        )));
    }

    // Analytic gradients from one backward pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        tolerance,
        failures: Vec::new(),
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let numel = input.numel();
        let coords: Vec<usize> = if numel <= max_coords_per_input {
            (0..numel).collect()
        } else {
            let mut all: Vec<usize> = (0..numel).collect();
            all.shuffle(&mut rng);
            let mut picked = all[..max_coords_per_input].to_vec();
            picked.sort_unstable();
            picked
        };
        for &c in &coords {
            let orig = work[ii].data()[c];
            work[ii].data_mut()[c] = orig + step;
            let plus = eval(&work)?;
            work[ii].data_mut()[c] = orig - step;
            let minus = eval(&work)?;
            work[ii].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[ii][c];
            let denom = a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            let rel_err = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel_err > report.max_rel_err {
                report.max_rel_err = rel_err;
            }
            if rel_err > tolerance {
                report.failures.push(GradCheckFailure {
                    input: ii,
                    coord: c,
                    analytic: a,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    Ok(report)
}
