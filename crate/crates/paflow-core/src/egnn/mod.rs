//! SE(3)-equivariant graph network predicting (x̂₁, â₁, ŷ) from the current
//! complex state.
//!
//! Feature messages are invariant (they see distances, embeddings, and edge
//! features only) and aggregate under per-node attention; coordinates update
//! along relative vectors gated by an invariant scalar, with protein rows
//! masked so only ligand atoms move:
//!
//! ```text
//! h'_i = h_i + Σ_j α_ij · f_h(d_ij, h_i, h_j, e_ij)
//! x'_i = x_i + Σ_j (x_i − x_j) · f_x(d_ij, h'_i, h'_j, e_ij) · l_mask_i
//! ```
//!
//! The knn graph is rebuilt from each layer's input coordinates. The whole
//! forward runs on the differentiation tape, so affinity gradients with
//! respect to ligand coordinates and training gradients with respect to the
//! weights come from the same recorded program.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::diffcore::{Tape, TapeError, TensorId};
use crate::geomdata::{
    build_knn_graph, rbf_centers, rbf_sigma, ComplexGraph, FeatureSpec, GeomError, LigandState,
    PocketCloud, N_EDGE_TYPES, N_RBF,
};
use crate::num::{standard_normal, Real};

#[derive(Debug, Error)]
pub enum EgnnError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Network hyperparameters. Defaults are the shipped full-size model;
/// tests run a much smaller configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgnnConfig {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    /// Neighbors per node in the knn graph.
    pub k: usize,
    /// Coordinate gate clip bound, per edge.
    pub gate_clip: f64,
}

impl Default for EgnnConfig {
    fn default() -> Self {
        Self { hidden: 128, heads: 16, layers: 9, k: 32, gate_clip: 10.0 }
    }
}

impl EgnnConfig {
    /// Small widths for unit tests and smoke training.
    pub fn desk_test() -> Self {
        Self { hidden: 16, heads: 2, layers: 2, k: 8, gate_clip: 10.0 }
    }

    fn edge_input_dim(&self) -> usize {
        2 * self.hidden + N_RBF * N_EDGE_TYPES + 1
    }
}

/// Per-layer weights: message network, attention network, coordinate gate.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<S> {
    pub msg_w1: Array2<S>,
    pub msg_b1: Array2<S>,
    pub msg_w2: Array2<S>,
    pub msg_b2: Array2<S>,
    pub att_w1: Array2<S>,
    pub att_b1: Array2<S>,
    pub att_w2: Array2<S>,
    pub att_b2: Array2<S>,
    pub gate_w1: Array2<S>,
    pub gate_b1: Array2<S>,
    pub gate_w2: Array2<S>,
    pub gate_b2: Array2<S>,
}

/// All weights of the network: input embedders, equivariant layers, the
/// type head, and the affinity head.
#[derive(Debug, Clone, PartialEq)]
pub struct EgnnParams<S> {
    pub config: EgnnConfig,
    pub features: FeatureSpec,
    pub embed_p_w: Array2<S>,
    pub embed_p_b: Array2<S>,
    pub embed_l_w: Array2<S>,
    pub embed_l_b: Array2<S>,
    pub layers: Vec<LayerParams<S>>,
    pub type_w1: Array2<S>,
    pub type_b1: Array2<S>,
    pub type_w2: Array2<S>,
    pub type_b2: Array2<S>,
    pub aff_w1: Array2<S>,
    pub aff_b1: Array2<S>,
    pub aff_w2: Array2<S>,
    pub aff_b2: Array2<S>,
}

impl<S: Real> EgnnParams<S> {
    /// Seeded Gaussian init, std 1/sqrt(fan_in); the final gate layer starts
    /// small so early coordinate updates stay gentle.
    pub fn init(config: EgnnConfig, features: FeatureSpec, seed: u64) -> Self {
        assert!(config.hidden % config.heads == 0, "heads must divide hidden width");
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let d = config.hidden;
        let e_in = config.edge_input_dim();
        let k = features.n_ligand_types;
        let mut mat = |rows: usize, cols: usize, scale: f64| -> Array2<S> {
            let std = scale / (rows as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| {
                S::of(standard_normal::<f64, _>(&mut rng) * std)
            })
        };
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                msg_w1: mat(e_in, d, 1.0),
                msg_b1: Array2::zeros((1, d)),
                msg_w2: mat(d, d, 1.0),
                msg_b2: Array2::zeros((1, d)),
                att_w1: mat(e_in, d, 1.0),
                att_b1: Array2::zeros((1, d)),
                att_w2: mat(d, config.heads, 1.0),
                att_b2: Array2::zeros((1, config.heads)),
                gate_w1: mat(e_in, d, 1.0),
                gate_b1: Array2::zeros((1, d)),
                gate_w2: mat(d, 1, 0.1),
                gate_b2: Array2::zeros((1, 1)),
            })
            .collect();
        Self {
            config,
            features,
            embed_p_w: mat(features.pocket_dim(), d, 1.0),
            embed_p_b: Array2::zeros((1, d)),
            embed_l_w: mat(k + 1, d, 1.0),
            embed_l_b: Array2::zeros((1, d)),
            layers,
            type_w1: mat(d, d, 1.0),
            type_b1: Array2::zeros((1, d)),
            type_w2: mat(d, k, 1.0),
            type_b2: Array2::zeros((1, k)),
            aff_w1: mat(d, d, 1.0),
            aff_b1: Array2::zeros((1, d)),
            aff_w2: mat(d, 1, 1.0),
            aff_b2: Array2::zeros((1, 1)),
        }
    }

    /// Flat view over every weight array, in a fixed serialization order.
    pub fn flatten(&self) -> Vec<&Array2<S>> {
        let mut out = vec![&self.embed_p_w, &self.embed_p_b, &self.embed_l_w, &self.embed_l_b];
        for l in &self.layers {
            out.extend([
                &l.msg_w1, &l.msg_b1, &l.msg_w2, &l.msg_b2, &l.att_w1, &l.att_b1, &l.att_w2,
                &l.att_b2, &l.gate_w1, &l.gate_b1, &l.gate_w2, &l.gate_b2,
            ]);
        }
        out.extend([
            &self.type_w1, &self.type_b1, &self.type_w2, &self.type_b2, &self.aff_w1,
            &self.aff_b1, &self.aff_w2, &self.aff_b2,
        ]);
        out
    }

    pub fn flatten_mut(&mut self) -> Vec<&mut Array2<S>> {
        let mut out = vec![
            &mut self.embed_p_w,
            &mut self.embed_p_b,
            &mut self.embed_l_w,
            &mut self.embed_l_b,
        ];
        for l in &mut self.layers {
            out.extend([
                &mut l.msg_w1,
                &mut l.msg_b1,
                &mut l.msg_w2,
                &mut l.msg_b2,
                &mut l.att_w1,
                &mut l.att_b1,
                &mut l.att_w2,
                &mut l.att_b2,
                &mut l.gate_w1,
                &mut l.gate_b1,
                &mut l.gate_w2,
                &mut l.gate_b2,
            ]);
        }
        out.extend([
            &mut self.type_w1,
            &mut self.type_b1,
            &mut self.type_w2,
            &mut self.type_b2,
            &mut self.aff_w1,
            &mut self.aff_b1,
            &mut self.aff_w2,
            &mut self.aff_b2,
        ]);
        out
    }

    pub fn n_scalars(&self) -> usize {
        self.flatten().iter().map(|a| a.len()).sum()
    }
}

/// Tape handles for every weight array, aligned with `EgnnParams::flatten`.
pub struct EgnnParamIds {
    ids: Vec<TensorId>,
}

impl EgnnParamIds {
    /// Register all weights on the tape. Trainable leaves receive adjoints;
    /// frozen ones are constants the backward pass skips.
    pub fn register<S: Real>(tape: &mut Tape<S>, params: &EgnnParams<S>, trainable: bool) -> Self {
        let ids = params
            .flatten()
            .into_iter()
            .map(|a| if trainable { tape.var(a.clone()) } else { tape.constant(a.clone()) })
            .collect();
        Self { ids }
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }

    fn embed(&self) -> (TensorId, TensorId, TensorId, TensorId) {
        (self.ids[0], self.ids[1], self.ids[2], self.ids[3])
    }

    fn layer(&self, l: usize) -> &[TensorId] {
        &self.ids[4 + 12 * l..4 + 12 * (l + 1)]
    }

    fn heads_of(&self, n_layers: usize) -> &[TensorId] {
        &self.ids[4 + 12 * n_layers..]
    }
}

/// Network outputs at one complex state.
#[derive(Debug, Clone)]
pub struct EgnnOutput<S> {
    /// Predicted clean coordinates, ligand rows only.
    pub x_hat1: Array2<S>,
    /// Predicted type distribution per ligand atom, rows on the simplex.
    pub a_hat1: Array2<S>,
    /// Predicted binding affinity in [0, 1].
    pub y_hat: S,
    /// Final ligand embeddings h^L.
    pub h_final: Array2<S>,
}

/// Tape node handles for the forward outputs.
pub struct EgnnTapeOutput {
    pub x_hat1: TensorId,
    pub a_hat1: TensorId,
    pub y_hat: TensorId,
    pub h_final: TensorId,
}

/// One equivariant layer on the tape with a fixed graph.
#[allow(clippy::too_many_arguments)]
fn layer_on_tape<S: Real>(
    tape: &mut Tape<S>,
    h: TensorId,
    x: TensorId,
    graph: &ComplexGraph<S>,
    layer: &[TensorId],
    mask: TensorId,
    gate_clip: S,
) -> Result<(TensorId, TensorId), EgnnError> {
    let [msg_w1, msg_b1, msg_w2, msg_b2, att_w1, att_b1, att_w2, att_b2, gate_w1, gate_b1, gate_w2, gate_b2] =
        layer
    else {
        return Err(EgnnError::Contract("layer parameter slice has wrong length".into()));
    };
    let n = graph.n_nodes();

    let xs = tape.gather(x, graph.src.clone())?;
    let xd = tape.gather(x, graph.dst.clone())?;
    let diff = tape.sub(xd, xs)?;
    let dist = tape.row_norms(diff)?;
    let ef = tape.edge_features(
        dist,
        graph.edge_type.clone(),
        rbf_centers::<S>(),
        rbf_sigma::<S>(),
        N_EDGE_TYPES,
    )?;

    let two_layer = |tape: &mut Tape<S>, inp: TensorId, w1, b1, w2, b2| -> Result<TensorId, TapeError> {
        let a = tape.matmul(inp, w1)?;
        let a = tape.add_row(a, b1)?;
        let a = tape.relu(a)?;
        let a = tape.matmul(a, w2)?;
        tape.add_row(a, b2)
    };

    let hs = tape.gather(h, graph.src.clone())?;
    let hd = tape.gather(h, graph.dst.clone())?;
    let edge_in = tape.concat_cols(&[hd, hs, ef, dist])?;
    let values = two_layer(tape, edge_in, *msg_w1, *msg_b1, *msg_w2, *msg_b2)?;
    let logits = two_layer(tape, edge_in, *att_w1, *att_b1, *att_w2, *att_b2)?;
    let alpha = tape.segment_softmax(logits, graph.seg_starts.clone())?;
    let weighted = tape.mul_head_broadcast(values, alpha)?;
    let agg = tape.segment_sum(weighted, graph.dst.clone(), n)?;
    let h_next = tape.add(h, agg)?;

    let hs2 = tape.gather(h_next, graph.src.clone())?;
    let hd2 = tape.gather(h_next, graph.dst.clone())?;
    let gate_in = tape.concat_cols(&[hd2, hs2, ef, dist])?;
    let gate_raw = two_layer(tape, gate_in, *gate_w1, *gate_b1, *gate_w2, *gate_b2)?;
    let gate = tape.clamp(gate_raw, -gate_clip, gate_clip)?;
    let delta = tape.mul_col_broadcast(diff, gate)?;
    let dx = tape.segment_sum(delta, graph.dst.clone(), n)?;
    let dx_masked = tape.mul_col_broadcast(dx, mask)?;
    let x_next = tape.add(x, dx_masked)?;

    Ok((h_next, x_next))
}

/// One layer applied to concrete values with a fixed graph; the test
/// surface for the layer contract.
pub fn layer_forward<S: Real>(
    h: &Array2<S>,
    x: &Array2<S>,
    graph: &ComplexGraph<S>,
    params: &EgnnParams<S>,
    layer_index: usize,
) -> Result<(Array2<S>, Array2<S>), EgnnError> {
    if h.nrows() != graph.n_nodes() || x.nrows() != graph.n_nodes() {
        return Err(EgnnError::Contract(format!(
            "node count mismatch: h has {}, x has {}, graph has {}",
            h.nrows(),
            x.nrows(),
            graph.n_nodes()
        )));
    }
    if h.ncols() != params.config.hidden {
        return Err(EgnnError::Contract(format!(
            "hidden width mismatch: h has {}, config says {}",
            h.ncols(),
            params.config.hidden
        )));
    }
    let mut tape = Tape::new();
    let ids = EgnnParamIds::register(&mut tape, params, false);
    let h_id = tape.constant(h.clone());
    let x_id = tape.constant(x.clone());
    let mask = tape.constant(mask_column::<S>(&graph.ligand_mask));
    let (h2, x2) = layer_on_tape(
        &mut tape,
        h_id,
        x_id,
        graph,
        ids.layer(layer_index),
        mask,
        S::of(params.config.gate_clip),
    )?;
    Ok((tape.value(h2).clone(), tape.value(x2).clone()))
}

fn mask_column<S: Real>(ligand_mask: &[bool]) -> Array2<S> {
    Array2::from_shape_fn((ligand_mask.len(), 1), |(i, _)| {
        if ligand_mask[i] {
            S::one()
        } else {
            S::zero()
        }
    })
}

/// Ligand node input features: one-hot types with the flow time appended.
pub fn ligand_input_features<S: Real>(types_onehot: &Array2<S>, t: S) -> Array2<S> {
    let (n, k) = types_onehot.dim();
    Array2::from_shape_fn((n, k + 1), |(i, j)| if j < k { types_onehot[(i, j)] } else { t })
}

/// Full forward on an existing tape. The ligand coordinate node is supplied
/// by the caller, which is how gradients with respect to coordinates or a
/// training loss on top of the outputs share one recording.
pub fn forward_on_tape<S: Real>(
    tape: &mut Tape<S>,
    param_ids: &EgnnParamIds,
    params: &EgnnParams<S>,
    pocket: &PocketCloud<S>,
    ligand_coords: TensorId,
    types_onehot: &Array2<S>,
    t: S,
) -> Result<EgnnTapeOutput, EgnnError> {
    let cfg = &params.config;
    let n_p = pocket.n_atoms();
    let n_m = tape.value(ligand_coords).nrows();
    if tape.value(ligand_coords).ncols() != 3 {
        return Err(EgnnError::Contract("ligand coordinates must be Nx3".into()));
    }
    if pocket.features.ncols() != params.features.pocket_dim() {
        return Err(EgnnError::Contract(format!(
            "pocket feature width {} does not match layout {}",
            pocket.features.ncols(),
            params.features.pocket_dim()
        )));
    }
    if types_onehot.ncols() != params.features.n_ligand_types {
        return Err(EgnnError::Contract(format!(
            "ligand type width {} does not match alphabet {}",
            types_onehot.ncols(),
            params.features.n_ligand_types
        )));
    }
    if types_onehot.nrows() != n_m {
        return Err(EgnnError::Contract("ligand types and coordinates disagree on atom count".into()));
    }

    let (embed_p_w, embed_p_b, embed_l_w, embed_l_b) = param_ids.embed();
    let pf = tape.constant(pocket.features.clone());
    let h_p = tape.matmul(pf, embed_p_w)?;
    let h_p = tape.add_row(h_p, embed_p_b)?;
    let lf = tape.constant(ligand_input_features(types_onehot, t));
    let h_l = tape.matmul(lf, embed_l_w)?;
    let h_l = tape.add_row(h_l, embed_l_b)?;
    let mut h = tape.concat_rows(&[h_p, h_l])?;

    let pc = tape.constant(pocket.coords.clone());
    let mut x = tape.concat_rows(&[pc, ligand_coords])?;

    let n = n_p + n_m;
    let ligand_mask: Vec<bool> = (0..n).map(|i| i >= n_p).collect();
    let mask = tape.constant(mask_column::<S>(&ligand_mask));

    for l in 0..cfg.layers {
        // Rebuild the graph from this layer's input coordinates.
        let lig_now = tape.value(x).slice(ndarray::s![n_p.., ..]).to_owned();
        let graph = build_knn_graph(pocket, &lig_now, cfg.k)?;
        let (h2, x2) =
            layer_on_tape(tape, h, x, &graph, param_ids.layer(l), mask, S::of(cfg.gate_clip))?;
        h = h2;
        x = x2;
    }

    let heads = param_ids.heads_of(cfg.layers);
    let [type_w1, type_b1, type_w2, type_b2, aff_w1, aff_b1, aff_w2, aff_b2] = heads else {
        return Err(EgnnError::Contract("head parameter slice has wrong length".into()));
    };
    let lig_idx: Vec<usize> = (n_p..n).collect();
    let h_lig = tape.gather(h, lig_idx.clone())?;

    let th = tape.matmul(h_lig, *type_w1)?;
    let th = tape.add_row(th, *type_b1)?;
    let th = tape.relu(th)?;
    let logits = tape.matmul(th, *type_w2)?;
    let logits = tape.add_row(logits, *type_b2)?;
    let a_hat1 = tape.softmax_rows(logits)?;

    let ah = tape.matmul(h_lig, *aff_w1)?;
    let ah = tape.add_row(ah, *aff_b1)?;
    let ah = tape.shifted_softplus(ah)?;
    let scores = tape.matmul(ah, *aff_w2)?;
    let scores = tape.add_row(scores, *aff_b2)?;
    let per_atom = tape.logistic(scores)?;
    let y_hat = tape.mean_all(per_atom)?;

    let x_hat1 = tape.gather(x, lig_idx)?;

    Ok(EgnnTapeOutput { x_hat1, a_hat1, y_hat, h_final: h_lig })
}

/// Plain forward: run the tape and extract values. Deterministic; the same
/// inputs always produce bit-identical outputs.
pub fn forward<S: Real>(
    params: &EgnnParams<S>,
    pocket: &PocketCloud<S>,
    ligand: &LigandState<S>,
    t: S,
) -> Result<EgnnOutput<S>, EgnnError> {
    let mut tape = Tape::new();
    let ids = EgnnParamIds::register(&mut tape, params, false);
    let coords = tape.constant(ligand.coords.clone());
    let out = forward_on_tape(&mut tape, &ids, params, pocket, coords, &ligand.types_onehot, t)?;
    Ok(EgnnOutput {
        x_hat1: tape.value(out.x_hat1).clone(),
        a_hat1: tape.value(out.a_hat1).clone(),
        y_hat: tape.scalar_value(out.y_hat),
        h_final: tape.value(out.h_final).clone(),
    })
}

/// Gradient of log p(y=1|m_t) = −(ŷ − 1)² with respect to the ligand
/// coordinates, via reverse mode through the full forward.
pub fn affinity_gradient<S: Real>(
    params: &EgnnParams<S>,
    pocket: &PocketCloud<S>,
    ligand: &LigandState<S>,
    t: S,
) -> Result<Array2<S>, EgnnError> {
    let mut tape = Tape::new();
    let ids = EgnnParamIds::register(&mut tape, params, false);
    let coords = tape.var(ligand.coords.clone());
    let out = forward_on_tape(&mut tape, &ids, params, pocket, coords, &ligand.types_onehot, t)?;
    let ll = log_likelihood_on_tape(&mut tape, out.y_hat)?;
    let grads = tape.backward(ll)?;
    Ok(grads.wrt(&tape, coords))
}

/// −(ŷ − 1)² on the tape.
pub fn log_likelihood_on_tape<S: Real>(
    tape: &mut Tape<S>,
    y_hat: TensorId,
) -> Result<TensorId, TapeError> {
    let d = tape.add_scalar(y_hat, -S::one())?;
    let sq = tape.mul(d, d)?;
    tape.neg(sq)
}
