//! Synthetic pocket-ligand complexes for desk-scale training and testing.
//!
//! Each pocket is a thickened spherical shell; the ligand sits inside the
//! cavity with its atom count tied to the cavity volume, so the size
//! predictor has real signal to learn. The affinity label is a logistic
//! surrogate of the contact fraction: ligand atoms close to several pocket
//! atoms count as contacts, which gives the affinity head a geometric,
//! coordinate-dependent target.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::{ComplexRecord, FeatureSpec, LigandState, PocketCloud};
use crate::num::{standard_normal, Real};

/// Generator knobs. Defaults are the shipped desk-scale dataset.
#[derive(Debug, Clone)]
pub struct SynthParams {
    pub features: FeatureSpec,
    /// Shell radius range in Angstrom.
    pub radius_range: (f64, f64),
    /// Shell thickness in Angstrom (radial jitter is +/- half of this).
    pub shell_thickness: f64,
    /// Pocket atom count bounds.
    pub pocket_atoms: (usize, usize),
    /// Ligand atoms per cubic Angstrom of cavity volume.
    pub kappa: f64,
    /// Std of the Gaussian atom-count jitter.
    pub eta_std: f64,
    /// Ligand atom count bounds.
    pub ligand_atoms: (usize, usize),
    /// Pocket centers are drawn uniformly from this cube half-width.
    pub center_extent: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            features: FeatureSpec::default(),
            radius_range: (4.0, 9.0),
            shell_thickness: 1.0,
            pocket_atoms: (40, 120),
            kappa: 0.024,
            eta_std: 1.0,
            ligand_atoms: (4, 40),
            center_extent: 15.0,
        }
    }
}

/// Contact rule for the affinity surrogate: a ligand atom is a contact when
/// at least `CONTACT_MIN_NEIGHBORS` pocket atoms lie within `CONTACT_DIST`.
pub const CONTACT_DIST: f64 = 3.5;
pub const CONTACT_MIN_NEIGHBORS: usize = 3;

/// Deterministic synthetic dataset: the same seed yields byte-identical
/// records. Coordinates and affinities are quantized to 9 significant
/// digits at creation so the text format round-trips exactly.
pub fn generate_synthetic_dataset<S: Real>(
    n_complexes: usize,
    seed: u64,
) -> (FeatureSpec, Vec<ComplexRecord<S>>) {
    generate_with_params(n_complexes, seed, &SynthParams::default())
}

pub fn generate_with_params<S: Real>(
    n_complexes: usize,
    seed: u64,
    params: &SynthParams,
) -> (FeatureSpec, Vec<ComplexRecord<S>>) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let records = (0..n_complexes).map(|_| generate_record(&mut rng, params)).collect();
    (params.features, records)
}

/// Analytic cavity volume for a shell of radius r under the descriptor
/// proxy's 2 Angstrom clearance.
pub fn shell_cavity_volume(radius: f64) -> f64 {
    let inner = (radius - 2.0).max(0.5);
    4.0 / 3.0 * std::f64::consts::PI * inner.powi(3)
}

fn generate_record<S: Real>(rng: &mut ChaCha12Rng, p: &SynthParams) -> ComplexRecord<S> {
    let fs = &p.features;
    let radius = rng.gen_range(p.radius_range.0..p.radius_range.1);
    let center = [
        rng.gen_range(-p.center_extent..p.center_extent),
        rng.gen_range(-p.center_extent..p.center_extent),
        rng.gen_range(-p.center_extent..p.center_extent),
    ];

    // Pocket size grows with the shell surface, plus noise.
    let (np_lo, np_hi) = p.pocket_atoms;
    let span = (np_hi - np_lo) as f64;
    let r2 = (p.radius_range.0 * p.radius_range.0, p.radius_range.1 * p.radius_range.1);
    let raw_np = np_lo as f64
        + (radius * radius - r2.0) / (r2.1 - r2.0) * span
        + 5.0 * standard_normal::<f64, _>(rng);
    let n_p = (raw_np.round() as i64).clamp(np_lo as i64, np_hi as i64) as usize;

    let mut pocket_coords = Array2::zeros((n_p, 3));
    let mut pocket_features = Array2::zeros((n_p, fs.pocket_dim()));
    for i in 0..n_p {
        let dir = unit_vector(rng);
        let rho = radius + rng.gen_range(-0.5..0.5) * p.shell_thickness;
        for a in 0..3 {
            pocket_coords[(i, a)] = q9(center[a] + rho * dir[a]);
        }
        let element = rng.gen_range(0..fs.n_elements);
        let residue = rng.gen_range(0..fs.n_residue_classes);
        let backbone = rng.gen_bool(0.3);
        for (j, v) in fs.pocket_row::<f64>(element, residue, backbone).into_iter().enumerate() {
            pocket_features[(i, j)] = v;
        }
    }

    // Ligand size follows the cavity volume.
    let v_true = shell_cavity_volume(radius);
    let eta = p.eta_std * standard_normal::<f64, _>(rng);
    let (nm_lo, nm_hi) = p.ligand_atoms;
    let n_m =
        ((p.kappa * v_true + eta).round() as i64).clamp(nm_lo as i64, nm_hi as i64) as usize;

    // Ligand atoms uniform in the cavity ball.
    let inner_radius = (radius - 2.5).max(0.8);
    let mut ligand_coords = Array2::zeros((n_m, 3));
    for i in 0..n_m {
        let dir = unit_vector(rng);
        let rho = inner_radius * rng.gen_range(0.0f64..1.0).cbrt();
        for a in 0..3 {
            ligand_coords[(i, a)] = q9(center[a] + rho * dir[a]);
        }
    }

    // Pocket-dependent type distribution over the K labels.
    let logits: Vec<f64> = (0..fs.n_ligand_types).map(|_| standard_normal::<f64, _>(rng)).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut types_onehot = Array2::zeros((n_m, fs.n_ligand_types));
    for i in 0..n_m {
        let mut u = rng.gen_range(0.0..1.0) * total;
        let mut label = fs.n_ligand_types - 1;
        for (k, w) in weights.iter().enumerate() {
            if u < *w {
                label = k;
                break;
            }
            u -= w;
        }
        types_onehot[(i, label)] = 1.0;
    }

    // Affinity surrogate from the contact fraction.
    let mut contacts = 0usize;
    for i in 0..n_m {
        let mut close = 0usize;
        for jp in 0..n_p {
            let d2: f64 = (0..3)
                .map(|a| (ligand_coords[(i, a)] - pocket_coords[(jp, a)]).powi(2))
                .sum();
            if d2 <= CONTACT_DIST * CONTACT_DIST {
                close += 1;
                if close >= CONTACT_MIN_NEIGHBORS {
                    break;
                }
            }
        }
        if close >= CONTACT_MIN_NEIGHBORS {
            contacts += 1;
        }
    }
    let frac = contacts as f64 / n_m as f64;
    let affinity = q9(1.0 / (1.0 + (-6.0 * (frac - 0.35)).exp()));

    let to_s = |m: &Array2<f64>| m.mapv(S::of);
    ComplexRecord {
        pocket: PocketCloud { coords: to_s(&pocket_coords), features: to_s(&pocket_features) },
        ligand_ref: LigandState::reference(to_s(&ligand_coords), to_s(&types_onehot)),
        affinity: S::of(affinity),
    }
}

fn unit_vector(rng: &mut ChaCha12Rng) -> [f64; 3] {
    loop {
        let v = [
            standard_normal::<f64, _>(rng),
            standard_normal::<f64, _>(rng),
            standard_normal::<f64, _>(rng),
        ];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-9 {
            return [v[0] / norm, v[1] / norm, v[2] / norm];
        }
    }
}

/// Quantize to 9 significant digits, matching the file format's precision.
pub fn q9(x: f64) -> f64 {
    format!("{x:.8e}").parse().expect("formatted float parses back")
}
