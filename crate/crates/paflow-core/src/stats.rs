//! Small statistics helpers shared by the evaluation harness and the test
//! suites: uniform random rotations, Pearson correlation with significance,
//! a one-sample Kolmogorov-Smirnov test against the standard normal, and a
//! Welch z comparison of two sample means. All f64; these never sit on a
//! differentiation path.

use ndarray::Array2;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Uniform random 3x3 rotation matrix (Shoemake quaternion method).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Array2<f64> {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    let u3: f64 = rng.gen();
    let two_pi = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = [
        a * (two_pi * u2).sin(),
        a * (two_pi * u2).cos(),
        b * (two_pi * u3).sin(),
        b * (two_pi * u3).cos(),
    ];
    let (x, y, z, w) = (q[0], q[1], q[2], q[3]);
    ndarray::array![
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Pearson correlation and its two-sided p-value under the t distribution
/// with n − 2 degrees of freedom.
pub fn pearson(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    let r = sxy / (sxx * syy).sqrt();
    let r = r.clamp(-0.999_999_999, 0.999_999_999);
    let t = r * ((n - 2.0) / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 2.0).expect("n > 2");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    (r, p)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

/// One-sample Kolmogorov-Smirnov test against the standard normal.
/// Returns (D, p) with the asymptotic Kolmogorov p-value.
pub fn ks_test_standard_normal(samples: &[f64]) -> (f64, f64) {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let cdf = normal_cdf(x);
        let hi = (i as f64 + 1.0) / n - cdf;
        let lo = cdf - i as f64 / n;
        d = d.max(hi).max(lo);
    }
    let lambda = d * (n.sqrt() + 0.12 + 0.11 / n.sqrt());
    (d, kolmogorov_q(lambda))
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-8 {
        return 1.0;
    }
    let mut q = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64 * lambda).powi(2)).exp();
        q += sign * term;
        sign = -sign;
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * q).clamp(0.0, 1.0)
}

/// Welch z statistic for mean(a) − mean(b); with the large samples used
/// here the normal approximation of the t distribution is adequate.
pub fn welch_z(a: &[f64], b: &[f64]) -> f64 {
    let se = (variance(a) / a.len() as f64 + variance(b) / b.len() as f64).sqrt();
    (mean(a) - mean(b)) / se
}

/// One-sided 95% z threshold.
pub const Z_95: f64 = 1.645;

/// Fisher-Yates shuffle driven by the caller's rng, so shuffle order is
/// part of the replayable stream.
pub fn shuffle<T, R: Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn rotation_is_orthogonal() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            let should_be_eye = r.dot(&r.t());
            for i in 0..3 {
                for j in 0..3 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((should_be_eye[(i, j)] - want).abs() < 1e-12);
                }
            }
            // det = +1: proper rotation.
            let det = r[(0, 0)] * (r[(1, 1)] * r[(2, 2)] - r[(1, 2)] * r[(2, 1)])
                - r[(0, 1)] * (r[(1, 0)] * r[(2, 2)] - r[(1, 2)] * r[(2, 0)])
                + r[(0, 2)] * (r[(1, 0)] * r[(2, 1)] - r[(1, 1)] * r[(2, 0)]);
            assert!((det - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pearson_detects_linear_relation() {
        let xs: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 3.0).collect();
        let (r, p) = pearson(&xs, &ys);
        assert!(r > 0.999);
        assert!(p < 1e-10);
    }

    #[test]
    fn pearson_on_noise_is_insignificant() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..500).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = (0..500).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, p) = pearson(&xs, &ys);
        assert!(p > 0.01);
    }

    #[test]
    fn ks_accepts_standard_normal_draws() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let samples: Vec<f64> =
            (0..10_000).map(|_| crate::num::standard_normal::<f64, _>(&mut rng)).collect();
        let (_, p) = ks_test_standard_normal(&samples);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn ks_rejects_shifted_distribution() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let samples: Vec<f64> =
            (0..10_000).map(|_| crate::num::standard_normal::<f64, _>(&mut rng) + 0.2).collect();
        let (_, p) = ks_test_standard_normal(&samples);
        assert!(p < 0.01, "p = {p}");
    }

    #[test]
    fn welch_separates_shifted_means() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let a: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..1.0) + 0.2).collect();
        let b: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert!(welch_z(&a, &b) > Z_95);
    }
}
