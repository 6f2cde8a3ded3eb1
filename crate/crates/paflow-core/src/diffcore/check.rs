//! Scalar-program evaluation with gradients, and finite-difference checking.

use ndarray::Array2;

use super::{Tape, TapeError, TensorId};
use crate::num::Real;

/// A program maps tracked input leaves to a single 1x1 output node.
pub trait Program<S: Real>: Fn(&mut Tape<S>, &[TensorId]) -> Result<TensorId, TapeError> {}
impl<S: Real, F> Program<S> for F where F: Fn(&mut Tape<S>, &[TensorId]) -> Result<TensorId, TapeError> {}

/// Adjoints for the selected inputs, shaped like their primal values.
#[derive(Debug, Clone)]
pub struct GradientReport<S> {
    pub adjoints: Vec<Array2<S>>,
}

/// Run `program` on `inputs` and return the scalar output together with the
/// exact reverse-mode adjoints of the inputs selected by `wrt` (indices into
/// `inputs`). Re-running with identical inputs reproduces identical values:
/// the tape holds no hidden state.
pub fn evaluate_with_gradient<S: Real>(
    program: &impl Program<S>,
    inputs: &[Array2<S>],
    wrt: &[usize],
) -> Result<(S, GradientReport<S>), TapeError> {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let out = program(&mut tape, &ids)?;
    let (rows, cols) = tape.value(out).dim();
    if (rows, cols) != (1, 1) {
        return Err(TapeError::NonScalarOutput { rows, cols });
    }
    let grads = tape.backward(out)?;
    let adjoints = wrt.iter().map(|&k| grads.wrt(&tape, ids[k])).collect();
    Ok((tape.scalar_value(out), GradientReport { adjoints }))
}

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport<S> {
    pub passed: bool,
    pub worst_rel_err: S,
    /// (input index, row, col) of the worst coordinate.
    pub worst_coord: (usize, usize, usize),
    pub analytic_at_worst: S,
    pub numeric_at_worst: S,
}

/// Compare every adjoint component of every input against central finite
/// differences with the given step.
pub fn check_gradient<S: Real>(
    program: &impl Program<S>,
    inputs: &[Array2<S>],
    step: S,
    tol: S,
) -> Result<GradCheckReport<S>, TapeError> {
    if step <= S::zero() {
        return Err(TapeError::BadStep(step.to_f64x()));
    }
    let wrt: Vec<usize> = (0..inputs.len()).collect();
    let (_, report) = evaluate_with_gradient(program, inputs, &wrt)?;

    let mut worst = GradCheckReport {
        passed: true,
        worst_rel_err: S::zero(),
        worst_coord: (0, 0, 0),
        analytic_at_worst: S::zero(),
        numeric_at_worst: S::zero(),
    };
    let mut probe = inputs.to_vec();
    for (k, adj) in report.adjoints.iter().enumerate() {
        for ((r, c), &analytic) in adj.indexed_iter() {
            let orig = probe[k][(r, c)];
            probe[k][(r, c)] = orig + step;
            let fp = eval_scalar(program, &probe)?;
            probe[k][(r, c)] = orig - step;
            let fm = eval_scalar(program, &probe)?;
            probe[k][(r, c)] = orig;
            let numeric = (fp - fm) / (S::of(2.0) * step);
            // Relative error with an absolute floor: central differences
            // cannot resolve relative error below the cancellation noise,
            // so coordinates with near-zero gradients are compared against
            // floor * tol in absolute terms.
            let rel = (analytic - numeric).abs()
                / analytic.abs().max(numeric.abs()).max(S::of(1e-3));
            if rel > worst.worst_rel_err {
                worst.worst_rel_err = rel;
                worst.worst_coord = (k, r, c);
                worst.analytic_at_worst = analytic;
                worst.numeric_at_worst = numeric;
            }
        }
    }
    worst.passed = worst.worst_rel_err <= tol;
    Ok(worst)
}

fn eval_scalar<S: Real>(program: &impl Program<S>, inputs: &[Array2<S>]) -> Result<S, TapeError> {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let out = program(&mut tape, &ids)?;
    Ok(tape.scalar_value(out))
}
