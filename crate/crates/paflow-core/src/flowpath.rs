//! Conditional probability paths and their target vector fields.
//!
//! Coordinates follow the variance-preserving Gaussian path
//! x_t = √ᾱ_{1−t}·x₁ + √(1−ᾱ_{1−t})·ε, whose conditional field is
//! u = (√ᾱ_{1−t})'/(1−ᾱ_{1−t}) · (x₁ − √ᾱ_{1−t}·x).
//! Types follow the categorical mix c = ᾱ_{1−t}·a₁ + (1−ᾱ_{1−t})/K with
//! field u = ᾱ'_{1−t}·(a₁ − a₀), a₀ the uniform row.
//!
//! The coordinate field's bracket is oriented (x₁ − √ᾱ·x): integrating it
//! from the prior converges onto x₁, which is the defining property of the
//! path; the ODE endpoint test below pins that orientation.

use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

use crate::num::{standard_gumbel, standard_normal, Real};
use crate::schedule::{ScheduleError, VarianceSchedule};

/// Floor applied to probabilities before logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// A training-time corruption of a reference ligand at flow time t.
#[derive(Debug, Clone)]
pub struct PathSample<S> {
    /// Corrupted coordinates x_t.
    pub x_t: Array2<S>,
    /// One-hot types a_t drawn from c_t.
    pub a_t: Array2<S>,
    /// Mixed type probabilities c_t.
    pub c_t: Array2<S>,
    pub t: S,
}

/// VP interpolation at an explicit signal level.
pub fn vp_interpolate<S: Real>(x1: &Array2<S>, alpha_bar: S, noise: &Array2<S>) -> Array2<S> {
    let signal = alpha_bar.sqrt();
    let sigma = (S::one() - alpha_bar).max(S::zero()).sqrt();
    x1.mapv(|v| v * signal) + noise.mapv(|v| v * sigma)
}

/// x_t = √ᾱ_{1−t}·x₁ + √(1−ᾱ_{1−t})·ε.
pub fn corrupt_coordinates<S: Real>(
    x1: &Array2<S>,
    t: S,
    sched: &VarianceSchedule<S>,
    noise: &Array2<S>,
) -> Result<Array2<S>, FlowError> {
    if x1.dim() != noise.dim() {
        return Err(FlowError::Shape(format!("x1 {:?} vs noise {:?}", x1.dim(), noise.dim())));
    }
    Ok(vp_interpolate(x1, sched.alpha_bar_rev(t)?, noise))
}

/// Categorical mix at an explicit signal level: c = ᾱ·a₁ + (1−ᾱ)/K.
pub fn mix_with_alpha<S: Real>(a1: &Array2<S>, alpha_bar: S) -> Array2<S> {
    let k = S::of_usize(a1.ncols());
    a1.mapv(|v| v * alpha_bar + (S::one() - alpha_bar) / k)
}

/// c(a₁, t) rows under the type schedule.
pub fn mix_types<S: Real>(
    a1: &Array2<S>,
    t: S,
    sched: &VarianceSchedule<S>,
) -> Result<Array2<S>, FlowError> {
    Ok(mix_with_alpha(a1, sched.alpha_bar_rev(t)?))
}

/// Gumbel-max draw per row: one_hot(argmax_k (g_k + log c_k)). Zero
/// probabilities are floored before the log so degenerate rows stay valid.
pub fn gumbel_sample_types<S: Real, R: Rng + ?Sized>(c: &Array2<S>, rng: &mut R) -> Array2<S> {
    let floor = S::of(PROB_FLOOR);
    let mut out = Array2::zeros(c.raw_dim());
    for (i, row) in c.rows().into_iter().enumerate() {
        let mut best = 0usize;
        let mut best_score = S::neg_infinity();
        for (k, &p) in row.iter().enumerate() {
            let score = standard_gumbel::<S, _>(rng) + p.max(floor).ln();
            if score > best_score {
                best_score = score;
                best = k;
            }
        }
        out[(i, best)] = S::one();
    }
    out
}

/// Conditional coordinate field u = (√ᾱ_{1−t})'/(1−ᾱ_{1−t}) · (x₁ − √ᾱ_{1−t}·x).
pub fn target_vf_coords<S: Real>(
    x: &Array2<S>,
    x1: &Array2<S>,
    t: S,
    sched: &VarianceSchedule<S>,
) -> Result<Array2<S>, FlowError> {
    if x.dim() != x1.dim() {
        return Err(FlowError::Shape(format!("x {:?} vs x1 {:?}", x.dim(), x1.dim())));
    }
    let signal = sched.alpha_bar_rev(t)?.sqrt();
    let coef = sched.d_sqrt_alpha_bar_rev(t)? / sched.one_minus_alpha_bar_rev(t)?;
    Ok((x1 - &x.mapv(|v| v * signal)).mapv(|v| v * coef))
}

/// Type field at an explicit rate: u = rate · (a₁ − a₀), a₀ uniform.
pub fn type_field_with_rate<S: Real>(a1: &Array2<S>, rate: S) -> Array2<S> {
    let k = S::of_usize(a1.ncols());
    a1.mapv(|v| rate * (v - S::one() / k))
}

/// u = ᾱ'_{1−t}·(a₁ − a₀). Accepts one-hot reference rows or predicted
/// simplex rows; every output row sums to zero.
pub fn target_vf_types<S: Real>(
    a1: &Array2<S>,
    sched: &VarianceSchedule<S>,
    t: S,
) -> Result<Array2<S>, FlowError> {
    Ok(type_field_with_rate(a1, sched.d_alpha_bar_rev(t)?))
}

/// Mean squared error over all coordinate entries.
pub fn loss_coords<S: Real>(x1: &Array2<S>, x_hat1: &Array2<S>) -> S {
    let n = S::of_usize(x1.len());
    x1.iter().zip(x_hat1.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum::<S>() / n
}

/// KL divergence Σ_k c log(c/ĉ) averaged over atoms, probabilities floored.
pub fn loss_types<S: Real>(c_true: &Array2<S>, c_pred: &Array2<S>) -> S {
    let floor = S::of(PROB_FLOOR);
    let n = S::of_usize(c_true.nrows());
    c_true
        .iter()
        .zip(c_pred.iter())
        .map(|(&p, &q)| {
            let p = p.max(floor);
            let q = q.max(floor);
            p * (p / q).ln()
        })
        .sum::<S>()
        / n
}

/// Squared error on the affinity score.
pub fn loss_affinity<S: Real>(y: S, y_hat: S) -> S {
    (y - y_hat) * (y - y_hat)
}

/// Training-time corruption: draw ε, build x_t, mix c_t, draw a_t.
pub fn sample_path<S: Real, R: Rng + ?Sized>(
    x1: &Array2<S>,
    a1: &Array2<S>,
    t: S,
    coord_sched: &VarianceSchedule<S>,
    type_sched: &VarianceSchedule<S>,
    rng: &mut R,
) -> Result<PathSample<S>, FlowError> {
    let noise = Array2::from_shape_fn(x1.raw_dim(), |_| standard_normal::<S, _>(rng));
    let x_t = corrupt_coordinates(x1, t, coord_sched, &noise)?;
    let c_t = mix_types(a1, t, type_sched)?;
    let a_t = gumbel_sample_types(&c_t, rng);
    Ok(PathSample { x_t, a_t, c_t, t })
}
