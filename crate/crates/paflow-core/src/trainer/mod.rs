//! Joint training of the equivariant network on coordinates, types, and
//! affinity, with checkpoint persistence.
//!
//! Each step draws t ~ U(0,1) per record, shifts the complex to the protein
//! CoM frame, corrupts the reference ligand along both probability paths,
//! runs the network, and minimizes L = L_x + λ·L_a + ω·L_y with Adam under
//! a global gradient-norm clip. A single ChaCha stream drives every random
//! choice (t, noise, type draws, epoch shuffles), and the checkpoint stores
//! that stream's exact position, so a resumed run replays the uninterrupted
//! one bit for bit.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, TrainState};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::diffcore::{Tape, TapeError, TensorId};
use crate::egnn::{
    forward_on_tape, log_likelihood_on_tape, EgnnConfig, EgnnError, EgnnParamIds, EgnnParams,
};
use crate::flowpath::{self, FlowError, PROB_FLOOR};
use crate::geomdata::{shift_to_protein_com, ComplexRecord, FeatureSpec, GeomError};
use crate::num::Real;
use crate::schedule::{ScheduleError, VarianceSchedule};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at record {record_index}: {source}")]
    NanLoss { record_index: usize, source: TapeError },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Egnn(#[from] EgnnError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Coordinate and type schedules used for corruption and sampling.
#[derive(Debug, Clone)]
pub struct Schedules<S> {
    pub coord: VarianceSchedule<S>,
    pub types: VarianceSchedule<S>,
}

impl<S: Real> Default for Schedules<S> {
    fn default() -> Self {
        Self {
            coord: VarianceSchedule::default_coordinate(),
            types: VarianceSchedule::default_type(),
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub egnn: EgnnConfig,
    /// Type loss weight λ.
    pub lambda_type: f64,
    /// Affinity loss weight ω.
    pub omega_affinity: f64,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_min: f64,
    /// Evaluations without improvement before the learning rate decays.
    pub plateau_patience: usize,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub max_steps: usize,
    /// Validation cadence in steps.
    pub eval_every: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            egnn: EgnnConfig::default(),
            lambda_type: 100.0,
            omega_affinity: 1.0,
            learning_rate: 5e-4,
            lr_decay: 0.95,
            lr_min: 1e-6,
            plateau_patience: 15,
            batch_size: 4,
            grad_clip_norm: 8.0,
            beta1: 0.95,
            beta2: 0.999,
            max_steps: 1000,
            eval_every: 50,
            val_fraction: 0.05,
            seed: 0,
        }
    }
}

/// Scalar losses of one step (batch means).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub coords: f64,
    pub types: f64,
    pub affinity: f64,
    pub total: f64,
}

/// Loss history of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepLosses>,
    /// (step index, validation loss).
    pub validations: Vec<(usize, f64)>,
}

/// Adam with bias correction. Moment tensors align with the parameter
/// flatten order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub m: Vec<Array2<S>>,
    pub v: Vec<Array2<S>>,
}

impl<S: Real> Adam<S> {
    pub fn new(params: &[&Array2<S>], lr: f64) -> Self {
        Self::with_betas(params, lr, 0.95, 0.999)
    }

    pub fn with_betas(params: &[&Array2<S>], lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step_count: 0,
            m: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut Vec<&mut Array2<S>>, grads: &[Array2<S>]) {
        self.step_count += 1;
        let b1 = S::of(self.beta1);
        let b2 = S::of(self.beta2);
        let lr = S::of(self.lr);
        let eps = S::of(self.eps);
        let c1 = S::one() - S::of(self.beta1.powi(self.step_count as i32));
        let c2 = S::one() - S::of(self.beta2.powi(self.step_count as i32));
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(&mut **p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }

    pub fn decay_lr(&mut self, factor: f64, floor: f64) {
        self.lr = (self.lr * factor).max(floor);
    }
}

/// Scale gradients so their global L2 norm does not exceed `max_norm`.
pub fn clip_global_norm<S: Real>(grads: &mut [Array2<S>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|&x| (x * x).to_f64x()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = S::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

/// Loss tape for one CoM-shifted record at a fixed corruption. Exposed so
/// invariance tests can pin t, ε, and a_t while transforming the complex.
#[allow(clippy::too_many_arguments)]
fn loss_on_tape<S: Real>(
    tape: &mut Tape<S>,
    param_ids: &EgnnParamIds,
    params: &EgnnParams<S>,
    pocket: &crate::geomdata::PocketCloud<S>,
    x1: &Array2<S>,
    a1: &Array2<S>,
    affinity: S,
    sample: &flowpath::PathSample<S>,
    type_alpha: S,
    lambda: S,
    omega: S,
) -> Result<(TensorId, StepLosses), TrainError> {
    let coords = tape.constant(sample.x_t.clone());
    let out = forward_on_tape(tape, param_ids, params, pocket, coords, &sample.a_t, sample.t)?;

    // L_x: mean squared error against the clean coordinates.
    let x1_id = tape.constant(x1.clone());
    let dx = tape.sub(out.x_hat1, x1_id)?;
    let sq = tape.mul(dx, dx)?;
    let loss_x = tape.mean_all(sq)?;

    // L_a: KL(c(a1) || c(â1)) with both mixes at the same signal level,
    // averaged over atoms.
    let k = S::of_usize(a1.ncols());
    let c_true = flowpath::mix_with_alpha(a1, type_alpha);
    let floor = S::of(PROB_FLOOR);
    let c_pred_scaled = tape.scale(out.a_hat1, type_alpha)?;
    let c_pred = tape.add_scalar(c_pred_scaled, (S::one() - type_alpha) / k)?;
    let c_pred_safe = tape.clamp(c_pred, floor, S::of(2.0))?;
    let ln_pred = tape.ln(c_pred_safe)?;
    let c_true_floored = c_true.mapv(|p| p.max(floor));
    let ln_true = tape.constant(c_true_floored.mapv(|p| p.ln()));
    let c_true_id = tape.constant(c_true_floored);
    let diff = tape.sub(ln_true, ln_pred)?;
    let weighted = tape.mul(c_true_id, diff)?;
    let kl_sum = tape.sum_all(weighted)?;
    let loss_a = tape.scale(kl_sum, S::one() / S::of_usize(a1.nrows()))?;

    // L_y: squared affinity error.
    let dy = tape.add_scalar(out.y_hat, -affinity)?;
    let loss_y = tape.mul(dy, dy)?;

    let la_scaled = tape.scale(loss_a, lambda)?;
    let ly_scaled = tape.scale(loss_y, omega)?;
    let partial = tape.add(loss_x, la_scaled)?;
    let total = tape.add(partial, ly_scaled)?;

    let losses = StepLosses {
        coords: tape.scalar_value(loss_x).to_f64x(),
        types: tape.scalar_value(loss_a).to_f64x(),
        affinity: tape.scalar_value(loss_y).to_f64x(),
        total: tape.scalar_value(total).to_f64x(),
    };
    Ok((total, losses))
}

/// Losses of one record under an explicit corruption; used by tests that
/// need the randomness pinned while the complex is transformed.
pub fn record_losses<S: Real>(
    params: &EgnnParams<S>,
    record: &ComplexRecord<S>,
    t: S,
    noise: &Array2<S>,
    a_t: &Array2<S>,
    schedules: &Schedules<S>,
    config: &TrainConfig,
) -> Result<StepLosses, TrainError> {
    let mut pocket = record.pocket.clone();
    let mut x1 = record.ligand_ref.coords.clone();
    shift_to_protein_com(&mut pocket, &mut x1)?;
    let x_t = flowpath::corrupt_coordinates(&x1, t, &schedules.coord, noise)?;
    let type_alpha = schedules.types.alpha_bar_rev(t)?;
    let c_t = flowpath::mix_with_alpha(&record.ligand_ref.types_onehot, type_alpha);
    let sample = flowpath::PathSample { x_t, a_t: a_t.clone(), c_t, t };

    let mut tape = Tape::new();
    let ids = EgnnParamIds::register(&mut tape, params, false);
    let (_, losses) = loss_on_tape(
        &mut tape,
        &ids,
        params,
        &pocket,
        &x1,
        &record.ligand_ref.types_onehot,
        record.affinity,
        &sample,
        type_alpha,
        S::of(config.lambda_type),
        S::of(config.omega_affinity),
    )?;
    Ok(losses)
}

/// One optimization step over a batch: corrupt, forward, accumulate mean
/// gradients, clip, Adam update. Returns the batch-mean losses.
pub fn train_step<S: Real>(
    params: &mut EgnnParams<S>,
    opt: &mut Adam<S>,
    batch: &[ComplexRecord<S>],
    schedules: &Schedules<S>,
    config: &TrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<StepLosses, TrainError> {
    let mut grad_accum: Vec<Array2<S>> =
        params.flatten().iter().map(|p| Array2::zeros(p.raw_dim())).collect();
    let mut mean = StepLosses { coords: 0.0, types: 0.0, affinity: 0.0, total: 0.0 };
    let scale = S::of(1.0 / batch.len() as f64);

    for (record_index, record) in batch.iter().enumerate() {
        let t = S::of(rng.gen_range(0.0..1.0));
        let mut pocket = record.pocket.clone();
        let mut x1 = record.ligand_ref.coords.clone();
        shift_to_protein_com(&mut pocket, &mut x1)?;
        let sample = flowpath::sample_path(
            &x1,
            &record.ligand_ref.types_onehot,
            t,
            &schedules.coord,
            &schedules.types,
            rng,
        )?;
        let type_alpha = schedules.types.alpha_bar_rev(t)?;

        let mut tape = Tape::new();
        let ids = EgnnParamIds::register(&mut tape, params, true);
        let built = loss_on_tape(
            &mut tape,
            &ids,
            params,
            &pocket,
            &x1,
            &record.ligand_ref.types_onehot,
            record.affinity,
            &sample,
            type_alpha,
            S::of(config.lambda_type),
            S::of(config.omega_affinity),
        );
        let (total, losses) = match built {
            Ok(v) => v,
            Err(TrainError::Tape(e @ TapeError::NonFinite { .. })) => {
                return Err(TrainError::NanLoss { record_index, source: e })
            }
            Err(TrainError::Egnn(EgnnError::Tape(e @ TapeError::NonFinite { .. }))) => {
                return Err(TrainError::NanLoss { record_index, source: e })
            }
            Err(e) => return Err(e),
        };
        let grads = tape.backward(total)?;
        for (acc, &id) in grad_accum.iter_mut().zip(ids.ids()) {
            let g = grads.wrt(&tape, id);
            ndarray::Zip::from(acc).and(&g).for_each(|a, &gv| *a += gv * scale);
        }
        mean.coords += losses.coords / batch.len() as f64;
        mean.types += losses.types / batch.len() as f64;
        mean.affinity += losses.affinity / batch.len() as f64;
        mean.total += losses.total / batch.len() as f64;
    }

    clip_global_norm(&mut grad_accum, config.grad_clip_norm);
    opt.step(&mut params.flatten_mut(), &grad_accum);
    Ok(mean)
}

/// Flow times at which validation evaluates every record.
const VALIDATION_T_GRID: [f64; 4] = [0.125, 0.375, 0.625, 0.875];

/// Mean validation loss over a fixed stratified t-grid with corruption
/// noise seeded from the run seed alone: every evaluation sees the same
/// corrupted inputs, so successive values are comparable for plateau
/// detection, and nothing disturbs the training stream.
pub fn validation_loss<S: Real>(
    params: &EgnnParams<S>,
    records: &[ComplexRecord<S>],
    schedules: &Schedules<S>,
    config: &TrainConfig,
) -> Result<f64, TrainError> {
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0x7a11_da7e);
    let mut total = 0.0;
    for record in records {
        for &t in &VALIDATION_T_GRID {
            let t = S::of(t);
            let noise = Array2::from_shape_fn(record.ligand_ref.coords.raw_dim(), |_| {
                crate::num::standard_normal::<S, _>(&mut rng)
            });
            let c = flowpath::mix_types(&record.ligand_ref.types_onehot, t, &schedules.types)?;
            let a_t = flowpath::gumbel_sample_types(&c, &mut rng);
            let losses = record_losses(params, record, t, &noise, &a_t, schedules, config)?;
            total += losses.total;
        }
    }
    Ok(total / (records.len() * VALIDATION_T_GRID.len()) as f64)
}

/// Outcome of a training run.
pub struct TrainOutcome<S> {
    pub checkpoint: Checkpoint<S>,
    pub history: TrainHistory,
}

/// Train for `config.max_steps` steps (fresh or resumed). The dataset is
/// split into train/validation by a seeded shuffle; batches cycle through
/// seeded epoch permutations; the learning rate decays on validation
/// plateaus.
pub fn train<S: Real>(
    dataset: &[ComplexRecord<S>],
    features: FeatureSpec,
    schedules: &Schedules<S>,
    config: &TrainConfig,
    resume: Option<Checkpoint<S>>,
) -> Result<TrainOutcome<S>, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    // Validation split from a dedicated stream: identical for fresh and
    // resumed runs with the same seed.
    let mut split_rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0x5117_51de);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    crate::stats::shuffle(&mut order, &mut split_rng);
    let n_val = ((dataset.len() as f64 * config.val_fraction).round() as usize)
        .min(dataset.len().saturating_sub(1));
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_set: Vec<&ComplexRecord<S>> = train_idx.iter().map(|&i| &dataset[i]).collect();
    let val_set: Vec<ComplexRecord<S>> = val_idx.iter().map(|&i| dataset[i].clone()).collect();

    let (mut params, mut opt, mut rng, mut state, start_step) = match resume {
        Some(ckpt) => {
            let params = ckpt.egnn;
            let state = ckpt.train_state.ok_or(CheckpointError::MissingSection("trainstate"))?;
            let opt = ckpt.optimizer.ok_or(CheckpointError::MissingSection("optimizer"))?;
            let mut rng = ChaCha12Rng::from_seed(state.rng_seed);
            rng.set_word_pos(state.rng_word_pos);
            let step = ckpt.step as usize;
            (params, opt, rng, state, step)
        }
        None => {
            let params = EgnnParams::init(config.egnn, features, config.seed);
            let opt = Adam::with_betas(
                &params.flatten(),
                config.learning_rate,
                config.beta1,
                config.beta2,
            );
            let rng = ChaCha12Rng::seed_from_u64(config.seed);
            let state = TrainState {
                rng_seed: rng.get_seed(),
                rng_word_pos: 0,
                best_val: f64::INFINITY,
                stall: 0,
                epoch_order: Vec::new(),
                epoch_pos: 0,
            };
            (params, opt, rng, state, 0)
        }
    };

    let mut history = TrainHistory::default();
    let mut epoch_order: Vec<usize> = state.epoch_order.iter().map(|&i| i as usize).collect();
    let mut epoch_pos = state.epoch_pos as usize;

    for step in start_step..config.max_steps {
        // Assemble the batch from the current epoch permutation.
        let mut batch: Vec<ComplexRecord<S>> = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if epoch_pos >= epoch_order.len() {
                epoch_order = (0..train_set.len()).collect();
                crate::stats::shuffle(&mut epoch_order, &mut rng);
                epoch_pos = 0;
            }
            batch.push(train_set[epoch_order[epoch_pos]].clone());
            epoch_pos += 1;
        }

        let losses = train_step(&mut params, &mut opt, &batch, schedules, config, &mut rng)?;
        history.steps.push(losses);

        if config.eval_every > 0 && (step + 1) % config.eval_every == 0 {
            let val = if val_set.is_empty() {
                losses.total
            } else {
                validation_loss(&params, &val_set, schedules, config)?
            };
            history.validations.push((step + 1, val));
            if val < state.best_val - 1e-12 {
                state.best_val = val;
                state.stall = 0;
            } else {
                state.stall += 1;
                if state.stall as usize >= config.plateau_patience {
                    opt.decay_lr(config.lr_decay, config.lr_min);
                    state.stall = 0;
                }
            }
        }
    }

    state.rng_word_pos = rng.get_word_pos();
    state.epoch_order = epoch_order.iter().map(|&i| i as u32).collect();
    state.epoch_pos = epoch_pos as u32;

    let checkpoint = Checkpoint {
        egnn: params,
        sizer: None,
        optimizer: Some(opt),
        train_state: Some(state),
        step: config.max_steps as u64,
        config_echo: format!("{config:?}"),
    };
    Ok(TrainOutcome { checkpoint, history })
}

#[cfg(test)]
mod tests;
