//! Pocket descriptor extraction and the learnable atom-count predictor.

mod descriptors;
mod model;

pub use descriptors::{
    pocket_descriptors, DescriptorError, PocketDescriptors, CLEARANCE, DEFAULT_GRID_STEP,
    ENCLOSE_DIST, ENCLOSE_MIN_ATOMS, SPACE_SIZE_TOP,
};
pub use model::{
    noise_benefit_probe, predict_atom_count, predict_normalized, train_sizer, validation_r2,
    NoiseProbe, SizerError, SizerParams, SizerTrainConfig, SizerTraining,
};

use crate::geomdata::ComplexRecord;
use crate::num::Real;

/// Descriptor-labelled dataset for the predictor: one (descriptors, N_M)
/// pair per complex.
pub fn descriptor_dataset<S: Real>(
    records: &[ComplexRecord<S>],
    grid_step: f64,
) -> Result<Vec<(PocketDescriptors<S>, usize)>, DescriptorError> {
    records
        .iter()
        .map(|rec| Ok((pocket_descriptors(&rec.pocket, grid_step)?, rec.ligand_ref.n_atoms())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rigged_params(raw_output: f64) -> SizerParams<f64> {
        let mut p = SizerParams::<f64>::init((8, 8, 8), 0);
        for w in p.flatten_mut() {
            w.fill(0.0);
        }
        // Zero weights everywhere: the network output equals the final bias.
        p.weights[7].fill(raw_output);
        p.n_min = 4;
        p.n_max = 40;
        p
    }

    fn some_descriptors() -> PocketDescriptors<f64> {
        PocketDescriptors { n_p: 60, volume: 300.0, area: 200.0, space_size: 11.0, degenerate: false }
    }

    #[test]
    fn raw_zero_hits_lower_bound() {
        let p = rigged_params(0.0);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        assert_eq!(predict_atom_count(&p, &some_descriptors(), 0.0, &mut rng), 4);
    }

    #[test]
    fn raw_one_hits_upper_bound() {
        let p = rigged_params(1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        assert_eq!(predict_atom_count(&p, &some_descriptors(), 0.0, &mut rng), 40);
    }

    #[test]
    fn clamps_to_at_least_one_atom() {
        let p = rigged_params(-5.0);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        assert_eq!(predict_atom_count(&p, &some_descriptors(), 0.0, &mut rng), 1);
    }

    #[test]
    fn zero_delta_is_deterministic() {
        let p = rigged_params(0.5);
        let d = some_descriptors();
        let outputs: Vec<usize> = (0..20)
            .map(|seed| {
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                predict_atom_count(&p, &d, 0.0, &mut rng)
            })
            .collect();
        assert!(outputs.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn noise_std_matches_delta() {
        let p = rigged_params(0.5);
        let d = some_descriptors();
        let samples: Vec<f64> = (0..10_000u64)
            .map(|seed| {
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                predict_normalized(&p, &d, 0.01, &mut rng)
            })
            .collect();
        let std = crate::stats::variance(&samples).sqrt();
        assert!((std - 0.01).abs() / 0.01 < 0.05, "sample std {std}");
    }

    #[test]
    fn refuses_constant_labels() {
        let d = some_descriptors();
        let data = vec![(d, 10), (d, 10), (d, 10)];
        assert!(matches!(
            train_sizer(&data, &SizerTrainConfig::default()),
            Err(SizerError::ConstantLabels(10))
        ));
        assert!(matches!(
            train_sizer(&data[..1], &SizerTrainConfig::default()),
            Err(SizerError::TooFewSamples(1))
        ));
    }

    #[test]
    fn learns_labels_linear_in_volume() {
        // Labels exactly linear in V, zero noise: validation R² > 0.99.
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let data: Vec<(PocketDescriptors<f64>, usize)> = (0..400)
            .map(|_| {
                let v: f64 = rand::Rng::gen_range(&mut rng, 50.0..1200.0);
                let d = PocketDescriptors {
                    n_p: 80,
                    volume: v,
                    area: 150.0,
                    space_size: 12.0,
                    degenerate: false,
                };
                let n = (4.0 + v / 40.0).round() as usize;
                (d, n)
            })
            .collect();
        let config = SizerTrainConfig {
            hidden: (32, 64, 32),
            epochs: 300,
            batch_size: 64,
            seed: 1,
            ..SizerTrainConfig::default()
        };
        let (params, history) = train_sizer(&data, &config).unwrap();
        let r2 = validation_r2(&params, &data);
        assert!(r2 > 0.99, "R² = {r2}");
        assert!(history.val_loss.last().unwrap() < &history.val_loss[0]);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let data: Vec<(PocketDescriptors<f64>, usize)> = (0..50)
            .map(|_| {
                let v: f64 = rand::Rng::gen_range(&mut rng, 50.0..800.0);
                let d = PocketDescriptors {
                    n_p: 70,
                    volume: v,
                    area: 100.0,
                    space_size: 9.0,
                    degenerate: false,
                };
                (d, 4 + (v / 50.0) as usize)
            })
            .collect();
        let config = SizerTrainConfig {
            hidden: (8, 16, 8),
            epochs: 5,
            batch_size: 16,
            seed: 3,
            ..SizerTrainConfig::default()
        };
        let (a, _) = train_sizer(&data, &config).unwrap();
        let (b, _) = train_sizer(&data, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_probe_quadratic_matches_taylor() {
        // f(n) = n² at n = 0, δ = 0.1: gain = δ² = 0.01 = ½·2·0.01.
        let probe = noise_benefit_probe(|n| n * n, 0.0, 0.1, 1_000_000, 11);
        assert!((probe.taylor_gain - 0.01).abs() < 1e-9);
        assert!(
            (probe.mc_gain - probe.taylor_gain).abs() < 3.0 * probe.mc_std_err,
            "gain {} vs taylor {} (se {})",
            probe.mc_gain,
            probe.taylor_gain,
            probe.mc_std_err
        );
    }

    #[test]
    fn noise_probe_linear_has_no_gain() {
        let probe = noise_benefit_probe(|n| 3.0 * n - 1.0, 0.5, 0.1, 1_000_000, 13);
        assert!(probe.taylor_gain.abs() < 1e-9);
        assert!(probe.mc_gain.abs() < 3.0 * probe.mc_std_err);
    }

    #[test]
    fn noise_probe_concave_case_loses() {
        let probe = noise_benefit_probe(|n| -n * n, 0.0, 0.1, 1_000_000, 17);
        assert!((probe.taylor_gain + 0.01).abs() < 1e-9);
        assert!((probe.mc_gain - probe.taylor_gain).abs() < 3.0 * probe.mc_std_err);
        assert!(probe.mc_gain < 0.0);
    }
}
