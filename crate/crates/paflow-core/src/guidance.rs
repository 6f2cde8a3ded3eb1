//! Predictor guidance of the coordinate vector field.
//!
//! The guided field is ṽ = v_x + γ · (ᾱ'_{1−t} / 2ᾱ_{1−t}) · ∇log p(y=1|m_t).
//! The coefficient is the common value of the drift and diffusion factors of
//! the guided Gaussian-path field (they coincide for the VP path, which
//! [`guidance_coefficient_dual`] exposes for verification), and the
//! log-likelihood of a strong binder is −(ŷ − 1)² up to an additive
//! constant that vanishes under the gradient.

use ndarray::Array2;
use thiserror::Error;

use crate::num::Real;
use crate::schedule::{ScheduleError, VarianceSchedule};

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("shape mismatch: field {field:?} vs gradient {grad:?}")]
    Shape { field: (usize, usize), grad: (usize, usize) },
    #[error("guidance scale must be nonnegative, got {0}")]
    NegativeGamma(f64),
}

/// Guidance strength and switch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub gamma: f64,
    pub enabled: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { gamma: 350.0, enabled: true }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        if self.gamma < 0.0 {
            return Err(GuidanceError::NegativeGamma(self.gamma));
        }
        Ok(())
    }

    /// Effective scale: zero when disabled.
    pub fn effective_gamma(&self) -> f64 {
        if self.enabled {
            self.gamma
        } else {
            0.0
        }
    }
}

/// ᾱ'_{1−t} / (2 ᾱ_{1−t}).
pub fn guidance_coefficient<S: Real>(
    sched: &VarianceSchedule<S>,
    t: S,
) -> Result<S, GuidanceError> {
    let a = sched.alpha_bar_rev(t)?.max(sched.clamp_eps());
    Ok(sched.d_alpha_bar_rev(t)? / (S::of(2.0) * a))
}

/// The drift factor a_t = μ'/μ and the gradient factor
/// b_t = (μ'σ − μσ')·σ/μ of the guided Gaussian-path field, with
/// μ = √ᾱ_{1−t} and σ = √(1−ᾱ_{1−t}), computed independently. For the VP
/// path the two collapse to the same value; the diagnostic exists so tests
/// can assert that identity numerically.
pub fn guidance_coefficient_dual<S: Real>(
    sched: &VarianceSchedule<S>,
    t: S,
) -> Result<(S, S), GuidanceError> {
    let alpha = sched.alpha_bar_rev(t)?.max(sched.clamp_eps());
    let d_alpha = sched.d_alpha_bar_rev(t)?;
    let mu = alpha.sqrt();
    let d_mu = d_alpha / (S::of(2.0) * mu);
    let a_t = d_mu / mu;

    let sigma = (S::one() - alpha).max(sched.clamp_eps()).sqrt();
    let d_sigma = -d_alpha / (S::of(2.0) * sigma);
    let b_t = (d_mu * sigma - mu * d_sigma) * sigma / mu;
    Ok((a_t, b_t))
}

/// ṽ = v_x + γ · coefficient · ∇log p.
pub fn guided_coordinate_field<S: Real>(
    v_x: &Array2<S>,
    grad_logp: &Array2<S>,
    sched: &VarianceSchedule<S>,
    t: S,
    gamma: S,
) -> Result<Array2<S>, GuidanceError> {
    if v_x.dim() != grad_logp.dim() {
        return Err(GuidanceError::Shape { field: v_x.dim(), grad: grad_logp.dim() });
    }
    let scale = gamma * guidance_coefficient(sched, t)?;
    Ok(v_x + &grad_logp.mapv(|g| g * scale))
}

/// log p(y=1|m_t) up to its normalizing constant: −(ŷ − 1)².
pub fn log_likelihood<S: Real>(y_hat: S) -> S {
    -(y_hat - S::one()) * (y_hat - S::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    type Sched = VarianceSchedule<f64>;

    #[test]
    fn exponential_table_gives_constant_half() {
        // alpha_bar(s) = e^{-s} has alpha'_{1-t} = alpha_{1-t}, so the
        // coefficient is 1/2 everywhere, up to table discretization.
        let n = 1000;
        let table: Vec<f64> = (0..=n).map(|i| (-(i as f64) / n as f64).exp()).collect();
        let sched = Sched::from_alpha_bar_table(table).unwrap();
        for t in [0.05, 0.31, 0.5, 0.77, 0.93] {
            let c = guidance_coefficient(&sched, t).unwrap();
            assert!((c - 0.5).abs() < 1e-3, "coefficient {c} at t={t}");
        }
    }

    #[test]
    fn flat_schedule_has_zero_coefficient() {
        let sched = Sched::from_alpha_bar_table(vec![0.5; 11]).unwrap();
        assert_eq!(guidance_coefficient(&sched, 0.4).unwrap(), 0.0);
    }

    #[test]
    fn dual_forms_agree_on_default_schedules() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for sched in [Sched::default_coordinate(), Sched::default_type()] {
            for _ in 0..100 {
                let t: f64 = rng.gen_range(0.001..0.999);
                let (a, b) = guidance_coefficient_dual(&sched, t).unwrap();
                assert!((a - b).abs() < 1e-10, "a={a}, b={b} at t={t}");
                let c = guidance_coefficient(&sched, t).unwrap();
                assert!((a - c).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_gamma_reproduces_unguided_field_bitwise() {
        let sched = Sched::default_coordinate();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let v: Array2<f64> = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-2.0..2.0));
        let g: Array2<f64> = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-2.0..2.0));
        let tilde = guided_coordinate_field(&v, &g, &sched, 0.37, 0.0).unwrap();
        assert_eq!(tilde, v);
    }

    #[test]
    fn zero_gradient_reproduces_unguided_field() {
        let sched = Sched::default_coordinate();
        let v = array![[1.0, -2.0, 0.5]];
        let g = Array2::zeros((1, 3));
        let tilde = guided_coordinate_field(&v, &g, &sched, 0.2, 350.0).unwrap();
        assert_eq!(tilde, v);
    }

    #[test]
    fn guided_field_matches_componentwise_formula() {
        let sched = Sched::default_type();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t: f64 = rng.gen_range(0.01..0.99);
            let gamma: f64 = rng.gen_range(0.0..400.0);
            let v: Array2<f64> = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-2.0..2.0));
            let g: Array2<f64> = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-2.0..2.0));
            let tilde = guided_coordinate_field(&v, &g, &sched, t, gamma).unwrap();
            let coef = guidance_coefficient(&sched, t).unwrap();
            for ((a, b), c) in tilde.iter().zip(v.iter()).zip(g.iter()) {
                assert!((a - (b + gamma * coef * c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_likelihood_values() {
        assert_eq!(log_likelihood(1.0f64), 0.0);
        assert_eq!(log_likelihood(0.0f64), -1.0);
        assert!((log_likelihood(0.75f64) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(GuidanceConfig { gamma: -1.0, enabled: true }.validate().is_err());
        let off = GuidanceConfig { gamma: 350.0, enabled: false };
        assert_eq!(off.effective_gamma(), 0.0);
        assert_eq!(GuidanceConfig::default().effective_gamma(), 350.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let sched = Sched::default_coordinate();
        let v = Array2::<f64>::zeros((2, 3));
        let g = Array2::<f64>::zeros((3, 3));
        assert!(matches!(
            guided_coordinate_field(&v, &g, &sched, 0.5, 1.0),
            Err(GuidanceError::Shape { .. })
        ));
    }
}
