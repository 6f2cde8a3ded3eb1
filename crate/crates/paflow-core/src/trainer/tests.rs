use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::*;
use crate::geomdata::generate_synthetic_dataset;
use crate::num::standard_normal;
use crate::stats::random_rotation;

fn tiny_config(max_steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        egnn: EgnnConfig::desk_test(),
        max_steps,
        eval_every: 10,
        batch_size: 2,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_weights_reduce_total_to_coordinate_loss() {
    let (fs, records) = generate_synthetic_dataset::<f64>(2, 1);
    let mut params = EgnnParams::init(EgnnConfig::desk_test(), fs, 1);
    let mut opt = Adam::new(&params.flatten(), 5e-4);
    let schedules = Schedules::default();
    let config =
        TrainConfig { lambda_type: 0.0, omega_affinity: 0.0, ..tiny_config(1, 1) };
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let losses =
        train_step(&mut params, &mut opt, &records, &schedules, &config, &mut rng).unwrap();
    assert_eq!(losses.total, losses.coords);
}

#[test]
fn loss_decomposition_is_exact() {
    let (fs, records) = generate_synthetic_dataset::<f64>(3, 3);
    let mut params = EgnnParams::init(EgnnConfig::desk_test(), fs, 2);
    let mut opt = Adam::new(&params.flatten(), 5e-4);
    let schedules = Schedules::default();
    let config = tiny_config(1, 3);
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let losses =
        train_step(&mut params, &mut opt, &records, &schedules, &config, &mut rng).unwrap();
    let recomposed =
        losses.coords + config.lambda_type * losses.types + config.omega_affinity * losses.affinity;
    assert!((losses.total - recomposed).abs() < 1e-12);
}

#[test]
fn same_seed_gives_bitwise_identical_parameters() {
    let (fs, records) = generate_synthetic_dataset::<f64>(4, 5);
    let schedules = Schedules::default();
    let config = tiny_config(3, 7);
    let run = || {
        let mut params = EgnnParams::init(EgnnConfig::desk_test(), fs, 7);
        let mut opt =
            Adam::with_betas(&params.flatten(), config.learning_rate, config.beta1, config.beta2);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..3 {
            train_step(&mut params, &mut opt, &records, &schedules, &config, &mut rng).unwrap();
        }
        params
    };
    assert_eq!(run(), run());
}

#[test]
fn overfits_one_record() {
    let (fs, records) = generate_synthetic_dataset::<f64>(1, 11);
    let mut params = EgnnParams::init(EgnnConfig::desk_test(), fs, 11);
    let config = TrainConfig { learning_rate: 2e-3, ..tiny_config(1, 11) };
    let mut opt =
        Adam::with_betas(&params.flatten(), config.learning_rate, config.beta1, config.beta2);
    let schedules = Schedules::default();
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let mut first = None;
    let mut losses_seen = Vec::new();
    for _ in 0..200 {
        let losses =
            train_step(&mut params, &mut opt, &records, &schedules, &config, &mut rng).unwrap();
        first.get_or_insert(losses.total);
        losses_seen.push(losses.total);
    }
    // Per-step loss is noisy in t, so compare averages of the first and
    // last quarters.
    let early: f64 = losses_seen[..50].iter().sum::<f64>() / 50.0;
    let late: f64 = losses_seen[150..].iter().sum::<f64>() / 50.0;
    assert!(late <= 0.5 * early, "early {early}, late {late}");
}

#[test]
fn gradient_clip_bounds_global_norm() {
    let mut grads = vec![
        Array2::from_elem((4, 4), 3.0f64),
        Array2::from_elem((2, 8), -2.5f64),
    ];
    let pre = clip_global_norm(&mut grads, 8.0);
    assert!(pre > 8.0);
    let post: f64 =
        grads.iter().map(|g| g.iter().map(|&x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    assert!(post <= 8.0 + 1e-9);
    // Below the bound nothing changes.
    let mut small = vec![Array2::from_elem((2, 2), 0.1f64)];
    let before = small[0].clone();
    clip_global_norm(&mut small, 8.0);
    assert_eq!(small[0], before);
}

#[test]
fn losses_are_rotation_invariant() {
    let (fs, records) = generate_synthetic_dataset::<f64>(1, 13);
    let record = &records[0];
    let params = EgnnParams::init(EgnnConfig::desk_test(), fs, 13);
    let schedules = Schedules::default();
    let config = tiny_config(1, 13);
    let mut rng = ChaCha12Rng::seed_from_u64(14);

    let t = 0.45;
    let noise = Array2::from_shape_fn(record.ligand_ref.coords.raw_dim(), |_| {
        standard_normal::<f64, _>(&mut rng)
    });
    let c = crate::flowpath::mix_types(&record.ligand_ref.types_onehot, t, &schedules.types)
        .unwrap();
    let a_t = crate::flowpath::gumbel_sample_types(&c, &mut rng);
    let base = record_losses(&params, record, t, &noise, &a_t, &schedules, &config).unwrap();

    for _ in 0..3 {
        let rot = random_rotation(&mut rng);
        let rotate = |m: &Array2<f64>| m.dot(&rot.t());
        let mut rec_r = record.clone();
        rec_r.pocket.coords = rotate(&rec_r.pocket.coords);
        rec_r.ligand_ref.coords = rotate(&rec_r.ligand_ref.coords);
        let noise_r = rotate(&noise);
        let rotated =
            record_losses(&params, &rec_r, t, &noise_r, &a_t, &schedules, &config).unwrap();
        assert!((base.coords - rotated.coords).abs() < 1e-9, "L_x changed under rotation");
        assert!((base.types - rotated.types).abs() < 1e-9, "L_a changed under rotation");
        assert!((base.affinity - rotated.affinity).abs() < 1e-9, "L_y changed under rotation");
    }
}

#[test]
fn empty_dataset_is_a_configuration_error() {
    let schedules = Schedules::default();
    let config = tiny_config(1, 0);
    let out = train::<f64>(&[], FeatureSpec::default(), &schedules, &config, None);
    assert!(matches!(out, Err(TrainError::EmptyDataset)));
}

#[test]
fn training_reduces_validation_loss() {
    let (fs, records) = generate_synthetic_dataset::<f64>(24, 17);
    let schedules = Schedules::default();
    let config = TrainConfig { learning_rate: 1e-3, ..tiny_config(120, 17) };
    let outcome = train(&records, fs, &schedules, &config, None).unwrap();
    let vals = &outcome.history.validations;
    assert!(vals.len() >= 2);
    let first = vals[0].1;
    let last = vals.last().unwrap().1;
    assert!(last < first, "validation loss did not improve: {first} -> {last}");
}

#[test]
fn checkpoint_roundtrip_is_byte_identical() {
    let (fs, records) = generate_synthetic_dataset::<f64>(6, 19);
    let schedules = Schedules::default();
    let config = tiny_config(5, 19);
    let outcome = train(&records, fs, &schedules, &config, None).unwrap();

    let dir = std::env::temp_dir().join("paflow-trainer-tests");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("roundtrip.ckpt");
    save_checkpoint(&path, &outcome.checkpoint).unwrap();
    let loaded = load_checkpoint::<f64>(&path).unwrap();
    let path2 = dir.join("roundtrip2.ckpt");
    save_checkpoint(&path2, &loaded).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    assert_eq!(loaded.egnn, outcome.checkpoint.egnn);
    assert_eq!(loaded.step, outcome.checkpoint.step);
    assert_eq!(loaded.config_echo, outcome.checkpoint.config_echo);
}

#[test]
fn wrong_version_names_both_versions() {
    let (fs, _) = generate_synthetic_dataset::<f64>(1, 23);
    let params = EgnnParams::<f64>::init(EgnnConfig::desk_test(), fs, 0);
    let ckpt = Checkpoint {
        egnn: params,
        sizer: None,
        optimizer: None,
        train_state: None,
        step: 0,
        config_echo: String::new(),
    };
    let mut bytes = checkpoint::checkpoint_bytes(&ckpt);
    bytes[10..14].copy_from_slice(&9u32.to_le_bytes());
    match checkpoint::checkpoint_from_bytes::<f64>(&bytes).unwrap_err() {
        CheckpointError::Version { expected, got } => {
            assert_eq!(expected, 1);
            assert_eq!(got, 9);
        }
        other => panic!("expected version error, got {other}"),
    }
}

#[test]
fn truncated_checkpoint_is_an_explicit_error() {
    let (fs, _) = generate_synthetic_dataset::<f64>(1, 29);
    let params = EgnnParams::<f64>::init(EgnnConfig::desk_test(), fs, 0);
    let ckpt = Checkpoint {
        egnn: params,
        sizer: None,
        optimizer: None,
        train_state: None,
        step: 3,
        config_echo: "x = 1".into(),
    };
    let bytes = checkpoint::checkpoint_bytes(&ckpt);
    let cut = &bytes[..bytes.len() / 2];
    assert!(matches!(
        checkpoint::checkpoint_from_bytes::<f64>(cut).unwrap_err(),
        CheckpointError::Truncated { .. }
    ));
}

#[test]
fn resume_replays_the_uninterrupted_run() {
    let (fs, records) = generate_synthetic_dataset::<f64>(10, 31);
    let schedules = Schedules::default();

    let full_config = tiny_config(20, 31);
    let full = train(&records, fs, &schedules, &full_config, None).unwrap();

    let half_config = tiny_config(10, 31);
    let half = train(&records, fs, &schedules, &half_config, None).unwrap();
    let resumed =
        train(&records, fs, &schedules, &full_config, Some(half.checkpoint)).unwrap();

    let mut stitched = half.history.steps.clone();
    stitched.extend(resumed.history.steps.iter().cloned());
    assert_eq!(stitched.len(), full.history.steps.len());
    for (a, b) in stitched.iter().zip(full.history.steps.iter()) {
        assert_eq!(a, b, "loss history diverged after resume");
    }
    assert_eq!(resumed.checkpoint.egnn, full.checkpoint.egnn);
}
