//! Central finite-difference checks for tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|autodiff − fd| / max(1, |autodiff|)` seen.
    pub max_error: f64,
    pub checked: usize,
    /// `(input index, coordinate, autodiff, finite difference)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of `loss_fn` with central differences.
///
/// `loss_fn` receives a fresh tape and one leaf per entry of `inputs` and must
/// return a one-element loss. When an input has more than `max_coords`
/// entries, an evenly spaced subset of coordinates is checked.
pub fn check_gradients<F>(inputs: &[Tensor], loss_fn: F, step: f64, max_coords: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        tape.scalar(loss)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad()))
        .collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ii, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).expect("leaf requires grad").to_vec();
        let numel = analytic.len();
        let coords: Vec<usize> = if numel <= max_coords {
            (0..numel).collect()
        } else {
            (0..max_coords).map(|j| j * numel / max_coords).collect()
        };
        for c in coords {
            let orig = work[ii].data()[c];
            work[ii].data_mut()[c] = orig + step;
            let plus = eval(&work)?;
            work[ii].data_mut()[c] = orig - step;
            let minus = eval(&work)?;
            work[ii].data_mut()[c] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let ad = analytic[c];
            let err = (ad - fd).abs() / ad.abs().max(1.0);
            report.checked += 1;
            if err > report.max_error || report.worst.is_none() {
                report.max_error = report.max_error.max(err);
                report.worst = Some((ii, c, ad, fd));
            }
        }
    }
    Ok(report)
}
