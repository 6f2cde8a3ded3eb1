//! Variance schedules for the coordinate and type probability paths.
//!
//! A schedule is a discretized table of the cumulative signal level ᾱ over
//! diffusion time s ∈ [0, 1], with piecewise-linear interpolation between
//! nodes. Generation runs in flow time t = 1 − s, so the accessors most
//! callers want are the reversed-time ones: ᾱ_{1−t}, its time derivative
//! d/dt ᾱ_{1−t}, and d/dt √ᾱ_{1−t}.
//!
//! Two families are provided:
//! - sigmoid: β ramps from `beta_lo` to `beta_hi` along a logistic in
//!   u ∈ [−6, 6]; ᾱ is the cumulative product of (1 − β).
//! - cosine: ᾱ(s) = cos²(((s + s₀)/(1 + s₀))·π/2), normalized to ᾱ(0) = 1.

use thiserror::Error;

use crate::num::Real;

/// Table resolution shared by both default schedules.
pub const DEFAULT_GRID_SIZE: usize = 1000;
/// Sigmoid β at diffusion time 0 (coordinate schedule default).
pub const DEFAULT_BETA_LO: f64 = 1e-7;
/// Sigmoid β at diffusion time 1 (coordinate schedule default).
pub const DEFAULT_BETA_HI: f64 = 2e-3;
/// Cosine offset (type schedule default).
pub const DEFAULT_COSINE_OFFSET: f64 = 0.01;
/// Floor applied to ᾱ and to 1 − ᾱ wherever either appears in a denominator.
pub const DEFAULT_CLAMP_EPS: f64 = 1e-5;
/// Multiplier on the sigmoid β ramp so that ᾱ(1) ≤ 1e-3 and the t = 0 state
/// is standard Gaussian to good approximation. With the literal β limits the
/// table bottoms out near 0.37, which breaks the prior boundary; the literal
/// behaviour stays available through [`VarianceSchedule::sigmoid`] with
/// `beta_scale = 1`.
pub const BOUNDARY_BETA_SCALE: f64 = 7.0;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("grid size must be at least 2, got {0}")]
    GridTooSmall(usize),
    #[error("beta bounds must satisfy 0 < lo <= hi < 1, got lo={lo}, hi={hi}")]
    BadBetaBounds { lo: f64, hi: f64 },
    #[error("scaled beta {beta} at index {index} outside (0, 1)")]
    BadBeta { index: usize, beta: f64 },
    #[error("cosine offset must lie in (0, 1), got {0}")]
    BadOffset(f64),
    #[error("alpha-bar {value} at index {index} outside (0, 1] before clamping")]
    AlphaBarOutOfRange { index: usize, value: f64 },
    #[error("alpha-bar table needs at least 2 entries, got {0}")]
    TableTooShort(usize),
    #[error("schedule time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
}

/// Functional family the table was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Sigmoid,
    Cosine,
    /// Table supplied verbatim (testing and experiments).
    Custom,
}

/// Discretized ᾱ table with interpolated reversed-time accessors.
#[derive(Debug, Clone)]
pub struct VarianceSchedule<S> {
    kind: ScheduleKind,
    alpha_bar: Vec<S>,
    clamp_eps: S,
}

impl<S: Real> VarianceSchedule<S> {
    /// Sigmoid β schedule. β_i = scale·(lo + (hi−lo)·logistic(u_i)) with u_i
    /// linear on [−6, 6] over the grid, ᾱ_i the running product of (1−β_i),
    /// ᾱ_0 = 1.
    pub fn sigmoid(
        grid_size: usize,
        beta_lo: f64,
        beta_hi: f64,
        beta_scale: f64,
    ) -> Result<Self, ScheduleError> {
        if grid_size < 2 {
            return Err(ScheduleError::GridTooSmall(grid_size));
        }
        if !(beta_lo > 0.0 && beta_lo <= beta_hi && beta_hi < 1.0) {
            return Err(ScheduleError::BadBetaBounds { lo: beta_lo, hi: beta_hi });
        }
        let n = grid_size;
        let mut table = Vec::with_capacity(n + 1);
        table.push(1.0);
        let mut prod = 1.0f64;
        for i in 1..=n {
            let u = -6.0 + 12.0 * (i - 1) as f64 / (n - 1) as f64;
            let beta = beta_scale * (beta_lo + (beta_hi - beta_lo) * logistic(u));
            if !(beta > 0.0 && beta < 1.0) {
                return Err(ScheduleError::BadBeta { index: i, beta });
            }
            prod *= 1.0 - beta;
            table.push(prod);
        }
        Self::from_raw(ScheduleKind::Sigmoid, table, DEFAULT_CLAMP_EPS)
    }

    /// Cosine ᾱ schedule with offset `s_offset`.
    pub fn cosine(grid_size: usize, s_offset: f64) -> Result<Self, ScheduleError> {
        if grid_size < 2 {
            return Err(ScheduleError::GridTooSmall(grid_size));
        }
        if !(s_offset > 0.0 && s_offset < 1.0) {
            return Err(ScheduleError::BadOffset(s_offset));
        }
        let n = grid_size;
        let f = |s: f64| {
            let phi = (s + s_offset) / (1.0 + s_offset) * std::f64::consts::FRAC_PI_2;
            phi.cos().powi(2)
        };
        let f0 = f(0.0);
        let table: Vec<f64> = (0..=n).map(|i| f(i as f64 / n as f64) / f0).collect();
        Self::from_raw(ScheduleKind::Cosine, table, DEFAULT_CLAMP_EPS)
    }

    /// Coordinate-path default: sigmoid with the β limits scaled so the
    /// prior boundary ᾱ(1) falls below 1e-3.
    pub fn default_coordinate() -> Self {
        Self::sigmoid(DEFAULT_GRID_SIZE, DEFAULT_BETA_LO, DEFAULT_BETA_HI, BOUNDARY_BETA_SCALE)
            .expect("default coordinate schedule parameters are valid")
    }

    /// Coordinate-path schedule with the literal β limits (no boundary scale).
    pub fn paper_exact_coordinate() -> Self {
        Self::sigmoid(DEFAULT_GRID_SIZE, DEFAULT_BETA_LO, DEFAULT_BETA_HI, 1.0)
            .expect("literal coordinate schedule parameters are valid")
    }

    /// Type-path default: cosine with offset 0.01.
    pub fn default_type() -> Self {
        Self::cosine(DEFAULT_GRID_SIZE, DEFAULT_COSINE_OFFSET)
            .expect("default type schedule parameters are valid")
    }

    /// Build from an explicit ᾱ table over uniformly spaced diffusion times.
    /// Entries must lie in (0, 1]; monotonicity is not required, which
    /// permits synthetic tables (flat, linear) in tests.
    pub fn from_alpha_bar_table(table: Vec<S>) -> Result<Self, ScheduleError> {
        if table.len() < 2 {
            return Err(ScheduleError::TableTooShort(table.len()));
        }
        for (i, &v) in table.iter().enumerate() {
            let v = v.to_f64x();
            if !(v > 0.0 && v <= 1.0) {
                return Err(ScheduleError::AlphaBarOutOfRange { index: i, value: v });
            }
        }
        Ok(Self { kind: ScheduleKind::Custom, alpha_bar: table, clamp_eps: S::of(DEFAULT_CLAMP_EPS) })
    }

    fn from_raw(kind: ScheduleKind, raw: Vec<f64>, clamp_eps: f64) -> Result<Self, ScheduleError> {
        for (i, &v) in raw.iter().enumerate() {
            if !(v > 0.0 && v <= 1.0) {
                return Err(ScheduleError::AlphaBarOutOfRange { index: i, value: v });
            }
        }
        // Clamp to the floor. A straight max() would flatten the saturated
        // tail into ties, so the suffix below the floor is replaced by a
        // linear ramp down to the floor, keeping the table strictly
        // decreasing with the final entry exactly at clamp_eps.
        let mut table = raw;
        if let Some(first_sat) = table.iter().position(|&v| v < clamp_eps) {
            let hi = if first_sat == 0 { 1.0 } else { table[first_sat - 1] };
            let len = table.len() - first_sat;
            for (j, v) in table[first_sat..].iter_mut().enumerate() {
                let frac = (j + 1) as f64 / len as f64;
                *v = hi + (clamp_eps - hi) * frac;
            }
        }
        Ok(Self { kind, alpha_bar: table.into_iter().map(S::of).collect(), clamp_eps: S::of(clamp_eps) })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn grid_size(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn clamp_eps(&self) -> S {
        self.clamp_eps
    }

    pub fn alpha_bar_table(&self) -> &[S] {
        &self.alpha_bar
    }

    /// ᾱ at diffusion time s, piecewise-linear between table nodes.
    pub fn alpha_bar_at(&self, s: S) -> Result<S, ScheduleError> {
        self.check_time(s)?;
        let n = self.grid_size();
        let pos = s * S::of_usize(n);
        let i = pos.floor().to_usize().expect("interpolation index fits usize");
        if i >= n {
            return Ok(self.alpha_bar[n]);
        }
        let frac = pos - S::of_usize(i);
        Ok(self.alpha_bar[i] + (self.alpha_bar[i + 1] - self.alpha_bar[i]) * frac)
    }

    /// ᾱ_{1−t}: signal level seen from flow time t.
    pub fn alpha_bar_rev(&self, t: S) -> Result<S, ScheduleError> {
        self.check_time(t)?;
        self.alpha_bar_at(S::one() - t)
    }

    /// 1 − ᾱ_{1−t}, floored at `clamp_eps` so reciprocals stay finite at the
    /// data boundary where ᾱ → 1.
    pub fn one_minus_alpha_bar_rev(&self, t: S) -> Result<S, ScheduleError> {
        Ok((S::one() - self.alpha_bar_rev(t)?).max(self.clamp_eps))
    }

    /// d/dt ᾱ_{1−t}: the negated table slope at s = 1 − t. Strictly positive
    /// in the interior for the built (decreasing) schedules.
    pub fn d_alpha_bar_rev(&self, t: S) -> Result<S, ScheduleError> {
        self.check_time(t)?;
        let n = self.grid_size();
        let s = S::one() - t;
        let pos = s * S::of_usize(n);
        let mut i = pos.floor().to_usize().expect("interpolation index fits usize");
        if i >= n {
            i = n - 1;
        }
        let slope_s = (self.alpha_bar[i + 1] - self.alpha_bar[i]) * S::of_usize(n);
        Ok(-slope_s)
    }

    /// d/dt √ᾱ_{1−t} = (d/dt ᾱ_{1−t}) / (2 √ᾱ_{1−t}).
    pub fn d_sqrt_alpha_bar_rev(&self, t: S) -> Result<S, ScheduleError> {
        let a = self.alpha_bar_rev(t)?.max(self.clamp_eps);
        Ok(self.d_alpha_bar_rev(t)? / (S::of(2.0) * a.sqrt()))
    }

    fn check_time(&self, t: S) -> Result<(), ScheduleError> {
        if t < S::zero() || t > S::one() || !t.is_finite() {
            return Err(ScheduleError::TimeOutOfRange(t.to_f64x()));
        }
        Ok(())
    }
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}
