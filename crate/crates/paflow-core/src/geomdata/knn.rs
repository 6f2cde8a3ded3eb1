//! k-nearest-neighbor graph over the combined protein + ligand point cloud.
//!
//! Node order is protein atoms first, ligand atoms after. Edges are directed
//! src → dst and grouped contiguously by dst in ascending node order, which
//! is what the per-node attention softmax downstream expects.

use ndarray::Array2;

use super::{rbf_expand, GeomError, PocketCloud, N_EDGE_TYPES, N_RBF};
use crate::num::Real;

/// Neighbor count used when nothing else is configured.
pub const DEFAULT_KNN: usize = 32;

/// Directed knn graph with per-edge RBF x edge-type features.
#[derive(Debug, Clone)]
pub struct ComplexGraph<S> {
    /// Message source per edge.
    pub src: Vec<usize>,
    /// Message destination per edge; non-decreasing.
    pub dst: Vec<usize>,
    /// Edge range per dst node: edges of node i are seg_starts[i]..seg_starts[i+1].
    pub seg_starts: Vec<usize>,
    /// Euclidean distance per edge.
    pub dist: Vec<S>,
    /// Direction class per edge: 0 p-p, 1 l-l, 2 p-to-l, 3 l-to-p.
    pub edge_type: Vec<usize>,
    /// E x (N_RBF * N_EDGE_TYPES) features: the RBF block sits at the edge-type offset.
    pub edge_features: Array2<S>,
    /// True exactly for ligand nodes.
    pub ligand_mask: Vec<bool>,
}

impl<S: Real> ComplexGraph<S> {
    pub fn n_nodes(&self) -> usize {
        self.ligand_mask.len()
    }

    pub fn n_edges(&self) -> usize {
        self.src.len()
    }
}

fn edge_type_of(src_is_ligand: bool, dst_is_ligand: bool) -> usize {
    match (src_is_ligand, dst_is_ligand) {
        (false, false) => 0,
        (true, true) => 1,
        (false, true) => 2,
        (true, false) => 3,
    }
}

/// Build the knn graph for the current coordinates. Every node connects to
/// its k nearest other nodes (all others when fewer exist); distance ties
/// break toward the lower node index.
pub fn build_knn_graph<S: Real>(
    pocket: &PocketCloud<S>,
    ligand_coords: &Array2<S>,
    k: usize,
) -> Result<ComplexGraph<S>, GeomError> {
    if k == 0 {
        return Err(GeomError::KTooSmall);
    }
    if pocket.n_atoms() == 0 {
        return Err(GeomError::EmptyPocket);
    }
    if ligand_coords.nrows() == 0 {
        return Err(GeomError::EmptyLigand);
    }
    let n_p = pocket.n_atoms();
    let n = n_p + ligand_coords.nrows();
    let coord = |i: usize| -> [S; 3] {
        let row = if i < n_p { pocket.coords.row(i) } else { ligand_coords.row(i - n_p) };
        [row[0], row[1], row[2]]
    };
    for i in 0..n {
        if coord(i).iter().any(|v| !v.is_finite()) {
            return Err(GeomError::NonFiniteCoordinate(i));
        }
    }

    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut dist = Vec::new();
    let mut edge_type = Vec::new();
    let mut seg_starts = vec![0usize];
    let mut candidates: Vec<(S, usize)> = Vec::with_capacity(n - 1);

    for i in 0..n {
        let xi = coord(i);
        candidates.clear();
        for j in 0..n {
            if j == i {
                continue;
            }
            let xj = coord(j);
            let d2 = (0..3).map(|a| (xi[a] - xj[a]) * (xi[a] - xj[a])).sum::<S>();
            candidates.push((d2, j));
        }
        candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distance").then(a.1.cmp(&b.1)));
        let take = k.min(candidates.len());
        for &(d2, j) in &candidates[..take] {
            src.push(j);
            dst.push(i);
            dist.push(d2.sqrt());
            edge_type.push(edge_type_of(j >= n_p, i >= n_p));
        }
        seg_starts.push(src.len());
    }

    let mut edge_features = Array2::zeros((src.len(), N_RBF * N_EDGE_TYPES));
    for (e, (&d, &ty)) in dist.iter().zip(edge_type.iter()).enumerate() {
        let base = ty * N_RBF;
        for (m, v) in rbf_expand(d).into_iter().enumerate() {
            edge_features[(e, base + m)] = v;
        }
    }

    let mut ligand_mask = vec![false; n];
    for flag in ligand_mask.iter_mut().skip(n_p) {
        *flag = true;
    }

    Ok(ComplexGraph { src, dst, seg_starts, dist, edge_type, edge_features, ligand_mask })
}
