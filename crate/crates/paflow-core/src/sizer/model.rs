//! Learnable atom-count predictor.
//!
//! A 4-layer perceptron with shifted-softplus activations maps standardized
//! (N_P, V, A, S) to a normalized atom count in roughly [0, 1]; a small
//! Gaussian τ is added before denormalization:
//!
//! ```text
//! n̂ = mlp(standardize([N_P, V, A, S])) + τ,   τ ~ N(0, δ²)
//! N̂ = clamp(round(n̂·(n_max − n_min) + n_min), 1, n_max)
//! ```
//!
//! Training minimizes squared error on labels normalized by the training-set
//! extrema, with Adam and an exponential plateau decay.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use super::PocketDescriptors;
use crate::diffcore::{Tape, TapeError, TensorId};
use crate::num::{standard_normal, Real};

#[derive(Debug, Error)]
pub enum SizerError {
    #[error("training needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("labels are constant ({0} atoms everywhere): normalization is degenerate")]
    ConstantLabels(usize),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Weights and the frozen data statistics the predictor needs at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct SizerParams<S> {
    pub hidden: (usize, usize, usize),
    /// w1, b1, w2, b2, w3, b3, w4, b4.
    pub weights: Vec<Array2<S>>,
    pub input_mean: [S; 4],
    pub input_std: [S; 4],
    pub n_min: usize,
    pub n_max: usize,
    /// Default noise std δ used when the caller does not override it.
    pub delta: f64,
}

impl<S: Real> SizerParams<S> {
    /// Seeded init with unit statistics; training overwrites the statistics.
    pub fn init(hidden: (usize, usize, usize), seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let dims = [4, hidden.0, hidden.1, hidden.2, 1];
        let mut weights = Vec::with_capacity(8);
        for w in dims.windows(2) {
            let std = 1.0 / (w[0] as f64).sqrt();
            weights.push(Array2::from_shape_fn((w[0], w[1]), |_| {
                S::of(standard_normal::<f64, _>(&mut rng) * std)
            }));
            weights.push(Array2::zeros((1, w[1])));
        }
        Self {
            hidden,
            weights,
            input_mean: [S::zero(); 4],
            input_std: [S::one(); 4],
            n_min: 1,
            n_max: 2,
            delta: 0.01,
        }
    }

    pub fn flatten(&self) -> Vec<&Array2<S>> {
        self.weights.iter().collect()
    }

    pub fn flatten_mut(&mut self) -> Vec<&mut Array2<S>> {
        self.weights.iter_mut().collect()
    }

    fn standardize(&self, d: &PocketDescriptors<S>) -> Array2<S> {
        let v = d.as_vector();
        Array2::from_shape_fn((1, 4), |(_, j)| (v[j] - self.input_mean[j]) / self.input_std[j])
    }
}

/// MLP forward on the tape; `input` is Bx4 standardized descriptors.
/// Dropout masks, when given, multiply the three hidden activations.
fn mlp_on_tape<S: Real>(
    tape: &mut Tape<S>,
    weight_ids: &[TensorId],
    input: TensorId,
    dropout: Option<&[TensorId; 3]>,
) -> Result<TensorId, TapeError> {
    let mut h = input;
    for layer in 0..4 {
        let a = tape.matmul(h, weight_ids[2 * layer])?;
        h = tape.add_row(a, weight_ids[2 * layer + 1])?;
        if layer < 3 {
            h = tape.shifted_softplus(h)?;
            if let Some(masks) = dropout {
                h = tape.mul(h, masks[layer])?;
            }
        }
    }
    Ok(h)
}

/// Normalized prediction n̂ = mlp(z) + τ before denormalization; τ uses the
/// supplied rng and scales with δ, so δ = 0 is exactly deterministic.
pub fn predict_normalized<S: Real, R: Rng + ?Sized>(
    params: &SizerParams<S>,
    descriptors: &PocketDescriptors<S>,
    delta: f64,
    rng: &mut R,
) -> S {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.weights.iter().map(|w| tape.constant(w.clone())).collect();
    let z = tape.constant(params.standardize(descriptors));
    let out = mlp_on_tape(&mut tape, &ids, z, None).expect("sizer forward is well-shaped");
    let tau = standard_normal::<S, _>(rng) * S::of(delta);
    tape.scalar_value(out) + tau
}

/// Final predicted atom count.
pub fn predict_atom_count<S: Real, R: Rng + ?Sized>(
    params: &SizerParams<S>,
    descriptors: &PocketDescriptors<S>,
    delta: f64,
    rng: &mut R,
) -> usize {
    let normalized = predict_normalized(params, descriptors, delta, rng);
    let span = S::of_usize(params.n_max - params.n_min);
    let raw = normalized * span + S::of_usize(params.n_min);
    let rounded = raw.round().to_f64x() as i64;
    rounded.clamp(1, params.n_max as i64) as usize
}

/// Training configuration; defaults follow the predictor's training recipe
/// (Adam 5e-4, betas (0.95, 0.999), batch 256, decay 0.8 after 5 stalled
/// evaluations, floor 1e-5).
#[derive(Debug, Clone)]
pub struct SizerTrainConfig {
    pub hidden: (usize, usize, usize),
    pub dropout: f64,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_min: f64,
    pub plateau_patience: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SizerTrainConfig {
    fn default() -> Self {
        Self {
            hidden: (128, 256, 128),
            dropout: 0.0,
            learning_rate: 5e-4,
            lr_decay: 0.8,
            lr_min: 1e-5,
            plateau_patience: 5,
            batch_size: 256,
            epochs: 400,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Loss curves recorded during training.
#[derive(Debug, Clone, Default)]
pub struct SizerTraining {
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation loss per epoch.
    pub val_loss: Vec<f64>,
}

/// Fit the predictor on (descriptors, atom count) pairs.
pub fn train_sizer<S: Real>(
    dataset: &[(PocketDescriptors<S>, usize)],
    config: &SizerTrainConfig,
) -> Result<(SizerParams<S>, SizerTraining), SizerError> {
    if dataset.len() < 2 {
        return Err(SizerError::TooFewSamples(dataset.len()));
    }
    let n_min = dataset.iter().map(|(_, n)| *n).min().expect("non-empty");
    let n_max = dataset.iter().map(|(_, n)| *n).max().expect("non-empty");
    if n_min == n_max {
        return Err(SizerError::ConstantLabels(n_min));
    }

    let mut params = SizerParams::<S>::init(config.hidden, config.seed);
    params.n_min = n_min;
    params.n_max = n_max;

    // Validation split by seeded shuffle.
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0x5eed_517e);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    shuffle(&mut order, &mut rng);
    let n_val = ((dataset.len() as f64 * config.val_fraction).round() as usize)
        .clamp(1, dataset.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);

    // Standardization statistics from the training split.
    let mut mean = [0.0f64; 4];
    let mut var = [0.0f64; 4];
    for &i in train_idx {
        let v = dataset[i].0.as_vector();
        for (j, m) in mean.iter_mut().enumerate() {
            *m += v[j].to_f64x();
        }
    }
    for m in &mut mean {
        *m /= train_idx.len() as f64;
    }
    for &i in train_idx {
        let v = dataset[i].0.as_vector();
        for (j, s) in var.iter_mut().enumerate() {
            *s += (v[j].to_f64x() - mean[j]).powi(2);
        }
    }
    for s in &mut var {
        *s = (*s / train_idx.len() as f64).sqrt().max(1e-9);
    }
    params.input_mean = mean.map(S::of);
    params.input_std = var.map(S::of);

    let span = (n_max - n_min) as f64;
    let standardized: Vec<[S; 4]> = dataset
        .iter()
        .map(|(d, _)| {
            let v = d.as_vector();
            [
                (v[0] - params.input_mean[0]) / params.input_std[0],
                (v[1] - params.input_mean[1]) / params.input_std[1],
                (v[2] - params.input_mean[2]) / params.input_std[2],
                (v[3] - params.input_mean[3]) / params.input_std[3],
            ]
        })
        .collect();
    let labels: Vec<S> =
        dataset.iter().map(|(_, n)| S::of((*n - n_min) as f64 / span)).collect();

    let batch_arrays = |idx: &[usize]| -> (Array2<S>, Array2<S>) {
        let x = Array2::from_shape_fn((idx.len(), 4), |(r, c)| standardized[idx[r]][c]);
        let y = Array2::from_shape_fn((idx.len(), 1), |(r, _)| labels[idx[r]]);
        (x, y)
    };

    let mut opt = crate::trainer::Adam::new(&params.flatten(), config.learning_rate);
    let mut train_order: Vec<usize> = train_idx.to_vec();
    let mut history = SizerTraining::default();
    let mut best_val = f64::INFINITY;
    let mut stall = 0usize;
    let (val_x, val_y) = batch_arrays(val_idx);

    for _epoch in 0..config.epochs {
        shuffle(&mut train_order, &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in train_order.chunks(config.batch_size) {
            let (x, y) = batch_arrays(chunk);
            let loss = sizer_step(&mut params, &mut opt, &x, &y, config.dropout, &mut rng)?;
            epoch_loss += loss;
            batches += 1;
        }
        history.train_loss.push(epoch_loss / batches.max(1) as f64);

        let val = sizer_loss(&params, &val_x, &val_y)?;
        history.val_loss.push(val);
        if val < best_val - 1e-12 {
            best_val = val;
            stall = 0;
        } else {
            stall += 1;
            if stall >= config.plateau_patience {
                opt.decay_lr(config.lr_decay, config.lr_min);
                stall = 0;
            }
        }
    }
    Ok((params, history))
}

fn sizer_step<S: Real>(
    params: &mut SizerParams<S>,
    opt: &mut crate::trainer::Adam<S>,
    x: &Array2<S>,
    y: &Array2<S>,
    dropout: f64,
    rng: &mut ChaCha12Rng,
) -> Result<f64, SizerError> {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.weights.iter().map(|w| tape.var(w.clone())).collect();
    let xin = tape.constant(x.clone());
    let masks = if dropout > 0.0 {
        let dims = [params.hidden.0, params.hidden.1, params.hidden.2];
        let keep = 1.0 - dropout;
        let mut made = Vec::with_capacity(3);
        for d in dims {
            let m = Array2::from_shape_fn((x.nrows(), d), |_| {
                if rng.gen_bool(keep) {
                    S::of(1.0 / keep)
                } else {
                    S::zero()
                }
            });
            made.push(tape.constant(m));
        }
        Some([made[0], made[1], made[2]])
    } else {
        None
    };
    let pred = mlp_on_tape(&mut tape, &ids, xin, masks.as_ref())?;
    let target = tape.constant(y.clone());
    let err = tape.sub(pred, target)?;
    let sq = tape.mul(err, err)?;
    let loss = tape.mean_all(sq)?;
    let loss_value = tape.scalar_value(loss).to_f64x();
    let grads = tape.backward(loss)?;
    let grad_arrays: Vec<Array2<S>> = ids.iter().map(|&id| grads.wrt(&tape, id)).collect();
    opt.step(&mut params.flatten_mut(), &grad_arrays);
    Ok(loss_value)
}

fn sizer_loss<S: Real>(
    params: &SizerParams<S>,
    x: &Array2<S>,
    y: &Array2<S>,
) -> Result<f64, SizerError> {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.weights.iter().map(|w| tape.constant(w.clone())).collect();
    let xin = tape.constant(x.clone());
    let pred = mlp_on_tape(&mut tape, &ids, xin, None)?;
    let target = tape.constant(y.clone());
    let err = tape.sub(pred, target)?;
    let sq = tape.mul(err, err)?;
    let loss = tape.mean_all(sq)?;
    Ok(tape.scalar_value(loss).to_f64x())
}

/// R² of the (noiseless) predictor on a labelled evaluation set, computed
/// on the normalized label scale.
pub fn validation_r2<S: Real>(
    params: &SizerParams<S>,
    dataset: &[(PocketDescriptors<S>, usize)],
) -> f64 {
    let span = (params.n_max - params.n_min) as f64;
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let preds: Vec<f64> = dataset
        .iter()
        .map(|(d, _)| predict_normalized(params, d, 0.0, &mut rng).to_f64x())
        .collect();
    let ys: Vec<f64> = dataset.iter().map(|(_, n)| (*n - params.n_min) as f64 / span).collect();
    let mean_y = crate::stats::mean(&ys);
    let ss_res: f64 = preds.iter().zip(&ys).map(|(p, y)| (p - y).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - mean_y).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

use crate::stats::shuffle;

/// Monte-Carlo check of the second-order noise-benefit law: the expected
/// gain E[f(n+τ)] − f(n) against its Taylor prediction ½ f''(n) δ².
#[derive(Debug, Clone, Copy)]
pub struct NoiseProbe {
    pub mc_gain: f64,
    pub mc_std_err: f64,
    pub taylor_gain: f64,
}

pub fn noise_benefit_probe(
    f: impl Fn(f64) -> f64,
    n: f64,
    delta: f64,
    samples: usize,
    seed: u64,
) -> NoiseProbe {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let base = f(n);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let tau = delta * standard_normal::<f64, _>(&mut rng);
        let gain = f(n + tau) - base;
        sum += gain;
        sum_sq += gain * gain;
    }
    let mc_gain = sum / samples as f64;
    let var = (sum_sq / samples as f64 - mc_gain * mc_gain).max(0.0);
    let mc_std_err = (var / samples as f64).sqrt();
    // Second derivative by central differences.
    let h = 1e-4;
    let f2 = (f(n + h) - 2.0 * base + f(n - h)) / (h * h);
    NoiseProbe { mc_gain, mc_std_err, taylor_gain: 0.5 * f2 * delta * delta }
}
