//! Data model for pockets, ligands, and protein-ligand complexes.
//!
//! A pocket is a fixed point cloud with one-hot feature rows (element,
//! residue class, backbone flag). A ligand is an evolving state: coordinates
//! x_t, one-hot types a_t, and running type-probability rows c_t. Complexes
//! pair a pocket with a reference ligand at t = 1 and a normalized binding
//! affinity.

mod io;
mod knn;
mod synth;

pub use io::{read_complexes, write_complexes, ComplexIoError, FORMAT_VERSION};
pub use knn::{build_knn_graph, ComplexGraph, DEFAULT_KNN};
pub use synth::{generate_synthetic_dataset, SynthParams};

use ndarray::Array2;
use thiserror::Error;

use crate::num::Real;

/// Radial-basis expansion size for edge features.
pub const N_RBF: usize = 20;
/// Upper end of the RBF center range in Angstrom.
pub const RBF_MAX_DIST: f64 = 10.0;
/// Edge-direction classes: protein-protein, ligand-ligand, protein-to-ligand,
/// ligand-to-protein.
pub const N_EDGE_TYPES: usize = 4;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("pocket must contain at least one atom")]
    EmptyPocket,
    #[error("ligand must contain at least one atom")]
    EmptyLigand,
    #[error("k must be at least 1")]
    KTooSmall,
    #[error("non-finite coordinate at node {0}")]
    NonFiniteCoordinate(usize),
}

/// One-hot feature layout shared by a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSpec {
    /// Element classes in the pocket one-hot block.
    pub n_elements: usize,
    /// Residue classes in the pocket one-hot block.
    pub n_residue_classes: usize,
    /// Ligand type alphabet size K.
    pub n_ligand_types: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self { n_elements: 6, n_residue_classes: 8, n_ligand_types: 8 }
    }
}

impl FeatureSpec {
    /// Width of a pocket feature row: element + residue one-hots + backbone flag.
    pub fn pocket_dim(&self) -> usize {
        self.n_elements + self.n_residue_classes + 1
    }

    /// Build a pocket feature row from indices.
    pub fn pocket_row<S: Real>(&self, element: usize, residue: usize, backbone: bool) -> Vec<S> {
        let mut row = vec![S::zero(); self.pocket_dim()];
        row[element] = S::one();
        row[self.n_elements + residue] = S::one();
        if backbone {
            row[self.n_elements + self.n_residue_classes] = S::one();
        }
        row
    }

    /// Pack a pocket feature row into a single label index for the file format.
    pub fn encode_pocket_label(&self, element: usize, residue: usize, backbone: bool) -> usize {
        element + self.n_elements * (residue + self.n_residue_classes * usize::from(backbone))
    }

    /// Inverse of [`FeatureSpec::encode_pocket_label`].
    pub fn decode_pocket_label(&self, label: usize) -> Option<(usize, usize, bool)> {
        let element = label % self.n_elements;
        let rest = label / self.n_elements;
        let residue = rest % self.n_residue_classes;
        let backbone = rest / self.n_residue_classes;
        if backbone > 1 {
            return None;
        }
        Some((element, residue, backbone == 1))
    }
}

/// Fixed protein atoms with one-hot feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PocketCloud<S> {
    /// N_P x 3 coordinates in Angstrom.
    pub coords: Array2<S>,
    /// N_P x N_f one-hot feature rows.
    pub features: Array2<S>,
}

impl<S: Real> PocketCloud<S> {
    pub fn n_atoms(&self) -> usize {
        self.coords.nrows()
    }

    /// Mean protein coordinate.
    pub fn center_of_mass(&self) -> [S; 3] {
        let n = S::of_usize(self.n_atoms());
        let mut com = [S::zero(); 3];
        for row in self.coords.rows() {
            for (c, v) in com.iter_mut().zip(row.iter()) {
                *c += *v;
            }
        }
        com.map(|c| c / n)
    }
}

/// Evolving ligand: coordinates, sampled one-hot types, and the running
/// type-probability rows, all at flow time t.
#[derive(Debug, Clone, PartialEq)]
pub struct LigandState<S> {
    /// N_M x 3 coordinates in Angstrom (x_t).
    pub coords: Array2<S>,
    /// N_M x K one-hot rows (a_t).
    pub types_onehot: Array2<S>,
    /// N_M x K simplex rows (c_t).
    pub type_probs: Array2<S>,
    /// Flow time in [0, 1].
    pub t: S,
}

impl<S: Real> LigandState<S> {
    pub fn n_atoms(&self) -> usize {
        self.coords.nrows()
    }

    pub fn n_types(&self) -> usize {
        self.types_onehot.ncols()
    }

    /// Reference state at t = 1: type probabilities collapse onto the one-hots.
    pub fn reference(coords: Array2<S>, types_onehot: Array2<S>) -> Self {
        let type_probs = types_onehot.clone();
        Self { coords, types_onehot, type_probs, t: S::one() }
    }

    /// Type label per atom (argmax of the one-hot row).
    pub fn labels(&self) -> Vec<usize> {
        self.types_onehot
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite one-hot"))
                    .map(|(i, _)| i)
                    .expect("non-empty row")
            })
            .collect()
    }
}

/// A pocket with its ground-truth ligand and normalized binding affinity.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexRecord<S> {
    pub pocket: PocketCloud<S>,
    /// Ground truth at t = 1.
    pub ligand_ref: LigandState<S>,
    /// Normalized affinity in [0, 1]; 1 means strong binding.
    pub affinity: S,
}

/// Translate the complex so the protein center of mass sits at the origin.
/// The ligand moves by the same translation. Returns the applied offset;
/// subtract it from shifted coordinates to restore the original frame.
pub fn shift_to_protein_com<S: Real>(
    pocket: &mut PocketCloud<S>,
    ligand_coords: &mut Array2<S>,
) -> Result<[S; 3], GeomError> {
    if pocket.n_atoms() == 0 {
        return Err(GeomError::EmptyPocket);
    }
    let com = pocket.center_of_mass();
    for mut row in pocket.coords.rows_mut() {
        for (v, c) in row.iter_mut().zip(com.iter()) {
            *v -= *c;
        }
    }
    for mut row in ligand_coords.rows_mut() {
        for (v, c) in row.iter_mut().zip(com.iter()) {
            *v -= *c;
        }
    }
    Ok(com.map(|c| -c))
}

/// RBF centers: `N_RBF` points uniformly spaced on [0, RBF_MAX_DIST].
pub fn rbf_centers<S: Real>() -> Vec<S> {
    (0..N_RBF).map(|m| S::of(RBF_MAX_DIST * m as f64 / (N_RBF - 1) as f64)).collect()
}

/// RBF width: the spacing between adjacent centers.
pub fn rbf_sigma<S: Real>() -> S {
    S::of(RBF_MAX_DIST / (N_RBF - 1) as f64)
}

/// Gaussian bumps exp(−(d − μ_m)² / 2σ²) over the center grid.
pub fn rbf_expand<S: Real>(d: S) -> Vec<S> {
    let sigma = rbf_sigma::<S>();
    rbf_centers::<S>()
        .into_iter()
        .map(|mu| {
            let z = (d - mu) / sigma;
            (-(z * z) / S::of(2.0)).exp()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn com_shift_centers_protein_and_translates_ligand() {
        let mut pocket = PocketCloud::<f64> {
            coords: array![[1.0, 2.0, 3.0]],
            features: array![[1.0]],
        };
        let mut lig = array![[1.0, 2.0, 3.0]];
        let offset = shift_to_protein_com(&mut pocket, &mut lig).unwrap();
        assert_eq!(pocket.coords, array![[0.0, 0.0, 0.0]]);
        assert_eq!(lig, array![[0.0, 0.0, 0.0]]);
        assert_eq!(offset, [-1.0, -2.0, -3.0]);
    }

    #[test]
    fn com_shift_is_identity_when_already_centered() {
        let mut pocket = PocketCloud::<f64> {
            coords: array![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
            features: array![[1.0], [1.0]],
        };
        let before = pocket.coords.clone();
        let mut lig = array![[0.5, 0.5, 0.5]];
        let lig_before = lig.clone();
        let offset = shift_to_protein_com(&mut pocket, &mut lig).unwrap();
        assert_eq!(pocket.coords, before);
        assert_eq!(lig, lig_before);
        assert_eq!(offset, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn com_shift_random_pocket_recenters_below_1e9() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let coords = Array2::from_shape_fn((50, 3), |_| rng.gen_range(-20.0..20.0));
        let mut pocket = PocketCloud::<f64> { coords, features: Array2::zeros((50, 1)) };
        let mut lig = Array2::from_shape_fn((7, 3), |_| rng.gen_range(-5.0..5.0));
        shift_to_protein_com(&mut pocket, &mut lig).unwrap();
        for &c in &pocket.center_of_mass() {
            assert!(c.abs() < 1e-9, "residual CoM component {c}");
        }
    }

    #[test]
    fn rbf_peaks_at_centers() {
        let v = rbf_expand::<f64>(0.0);
        assert_eq!(v[0], 1.0);
        let v = rbf_expand::<f64>(10.0);
        assert_eq!(v[N_RBF - 1], 1.0);
    }

    #[test]
    fn rbf_matches_direct_formula_at_midrange() {
        let v = rbf_expand::<f64>(5.0);
        let sigma = 10.0 / 19.0;
        for (m, &got) in v.iter().enumerate() {
            let mu = 10.0 * m as f64 / 19.0;
            let want = (-((5.0 - mu) / sigma).powi(2) / 2.0).exp();
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn pocket_label_roundtrip() {
        let fs = FeatureSpec::default();
        for e in 0..fs.n_elements {
            for r in 0..fs.n_residue_classes {
                for b in [false, true] {
                    let label = fs.encode_pocket_label(e, r, b);
                    assert_eq!(fs.decode_pocket_label(label), Some((e, r, b)));
                }
            }
        }
        let max = fs.encode_pocket_label(fs.n_elements - 1, fs.n_residue_classes - 1, true);
        assert_eq!(fs.decode_pocket_label(max + 1), None);
    }
}
