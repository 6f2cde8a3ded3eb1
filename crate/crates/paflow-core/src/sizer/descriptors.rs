//! Pocket descriptors (N_P, V, A, S) for the atom-count predictor.
//!
//! S is the median of the 10 largest pairwise atom distances. V and A come
//! from a grid cavity proxy: a cell counts as cavity when it lies inside the
//! pocket's enclosing hull (tested against a 26-direction support polytope),
//! keeps at least `CLEARANCE` to every atom, and has at least
//! `ENCLOSE_MIN_ATOMS` atoms within `ENCLOSE_DIST`. The grid lives in a
//! canonical frame (centroid origin, covariance eigenbasis, symmetric cell
//! lattice), so V and A are invariant under rigid motions of the input up to
//! floating-point jitter, not merely up to a cell.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::geomdata::PocketCloud;
use crate::num::Real;

/// Minimum distance from a cavity cell to every atom center, in Angstrom.
pub const CLEARANCE: f64 = 2.0;
/// Enclosure test radius in Angstrom.
pub const ENCLOSE_DIST: f64 = 6.0;
/// Minimum atoms within `ENCLOSE_DIST` for a cell to count as enclosed.
pub const ENCLOSE_MIN_ATOMS: usize = 4;
/// Default grid resolution in Angstrom.
pub const DEFAULT_GRID_STEP: f64 = 0.5;
/// Number of largest pairwise distances entering the space-size median.
pub const SPACE_SIZE_TOP: usize = 10;

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("grid step must be positive, got {0}")]
    BadGridStep(f64),
    #[error("pocket must contain at least one atom")]
    EmptyPocket,
}

/// Input vector of the atom-count predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PocketDescriptors<S> {
    /// Pocket atom count N_P.
    pub n_p: usize,
    /// Cavity volume proxy in cubic Angstrom.
    pub volume: S,
    /// Cavity surface proxy in square Angstrom.
    pub area: S,
    /// Median of the 10 largest pairwise distances, Angstrom.
    pub space_size: S,
    /// Set when the pocket was too small for the cavity proxy (single atom).
    pub degenerate: bool,
}

impl<S: Real> PocketDescriptors<S> {
    /// Descriptor vector in predictor input order.
    pub fn as_vector(&self) -> [S; 4] {
        [S::of_usize(self.n_p), self.volume, self.area, self.space_size]
    }
}

/// Compute (N_P, V, A, S) for a pocket at the given grid resolution.
pub fn pocket_descriptors<S: Real>(
    pocket: &PocketCloud<S>,
    grid_step: f64,
) -> Result<PocketDescriptors<S>, DescriptorError> {
    if !(grid_step > 0.0) {
        return Err(DescriptorError::BadGridStep(grid_step));
    }
    let n_p = pocket.n_atoms();
    if n_p == 0 {
        return Err(DescriptorError::EmptyPocket);
    }
    if n_p == 1 {
        return Ok(PocketDescriptors {
            n_p,
            volume: S::zero(),
            area: S::zero(),
            space_size: S::zero(),
            degenerate: true,
        });
    }

    let pts: Vec<[f64; 3]> = pocket
        .coords
        .rows()
        .into_iter()
        .map(|r| [r[0].to_f64x(), r[1].to_f64x(), r[2].to_f64x()])
        .collect();

    let space_size = space_size_of(&pts);
    let (volume, area) = cavity_grid(&pts, grid_step);

    Ok(PocketDescriptors {
        n_p,
        volume: S::of(volume),
        area: S::of(area),
        space_size: S::of(space_size),
        degenerate: false,
    })
}

fn space_size_of(pts: &[[f64; 3]]) -> f64 {
    let mut dists = Vec::with_capacity(pts.len() * (pts.len() - 1) / 2);
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            let d2: f64 = (0..3).map(|a| (pts[i][a] - pts[j][a]).powi(2)).sum();
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(|a, b| b.partial_cmp(a).expect("finite distance"));
    dists.truncate(SPACE_SIZE_TOP);
    crate::stats::median(&dists)
}

/// Cavity scan in the canonical frame. Returns (volume, area).
fn cavity_grid(pts: &[[f64; 3]], step: f64) -> (f64, f64) {
    let canon = canonical_coords(pts);

    // Support polytope of the hull over 26 lattice directions.
    let dirs = support_directions();
    let supports: Vec<f64> = dirs
        .iter()
        .map(|u| {
            canon
                .iter()
                .map(|p| u[0] * p[0] + u[1] * p[1] + u[2] * p[2])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();

    // Atom bins at the enclosure radius so both distance tests only visit
    // the 27 neighboring bins.
    let bin = ENCLOSE_DIST;
    let mut bins: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in canon.iter().enumerate() {
        let key = ((p[0] / bin).floor() as i64, (p[1] / bin).floor() as i64, (p[2] / bin).floor() as i64);
        bins.entry(key).or_default().push(i);
    }

    let mut half = [0i64; 3];
    for a in 0..3 {
        let extent = canon.iter().map(|p| p[a].abs()).fold(0.0, f64::max);
        half[a] = ((extent + step) / step).ceil() as i64;
    }

    let clearance2 = CLEARANCE * CLEARANCE;
    let enclose2 = ENCLOSE_DIST * ENCLOSE_DIST;
    let mut cavity: HashSet<(i64, i64, i64)> = HashSet::new();

    for ix in -half[0]..half[0] {
        for iy in -half[1]..half[1] {
            for iz in -half[2]..half[2] {
                let p = [
                    (ix as f64 + 0.5) * step,
                    (iy as f64 + 0.5) * step,
                    (iz as f64 + 0.5) * step,
                ];
                // Inside the support polytope?
                if dirs
                    .iter()
                    .zip(&supports)
                    .any(|(u, &h)| u[0] * p[0] + u[1] * p[1] + u[2] * p[2] > h)
                {
                    continue;
                }
                // Distance conditions against nearby atoms.
                let kx = (p[0] / bin).floor() as i64;
                let ky = (p[1] / bin).floor() as i64;
                let kz = (p[2] / bin).floor() as i64;
                let mut enclosed = 0usize;
                let mut clear = true;
                'bins: for dx in -1..=1 {
                    for dy in -1..=1 {
                        for dz in -1..=1 {
                            let Some(list) = bins.get(&(kx + dx, ky + dy, kz + dz)) else {
                                continue;
                            };
                            for &i in list {
                                let q = &canon[i];
                                let d2: f64 =
                                    (0..3).map(|a| (p[a] - q[a]).powi(2)).sum();
                                if d2 < clearance2 {
                                    clear = false;
                                    break 'bins;
                                }
                                if d2 <= enclose2 {
                                    enclosed += 1;
                                }
                            }
                        }
                    }
                }
                if clear && enclosed >= ENCLOSE_MIN_ATOMS {
                    cavity.insert((ix, iy, iz));
                }
            }
        }
    }

    let volume = cavity.len() as f64 * step.powi(3);
    let mut faces = 0usize;
    for &(x, y, z) in &cavity {
        for (dx, dy, dz) in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)] {
            if !cavity.contains(&(x + dx, y + dy, z + dz)) {
                faces += 1;
            }
        }
    }
    let area = faces as f64 * step.powi(2);
    (volume, area)
}

/// Coordinates relative to the centroid, expressed in the covariance
/// eigenbasis. Rotating or translating the input rotates the eigenbasis
/// identically, so these coordinates are rigid-motion invariant up to
/// floating-point error (axis signs and near-degenerate eigen directions
/// may differ, but the symmetric cell lattice and cubic cells make the
/// cavity counts insensitive to sign flips and axis order).
fn canonical_coords(pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let n = pts.len() as f64;
    let mut c = [0.0f64; 3];
    for p in pts {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    for v in &mut c {
        *v /= n;
    }
    let mut cov = [[0.0f64; 3]; 3];
    for p in pts {
        let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j] / n;
            }
        }
    }
    let basis = jacobi_eigenvectors(cov);
    pts.iter()
        .map(|p| {
            let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
            [
                basis[0][0] * d[0] + basis[0][1] * d[1] + basis[0][2] * d[2],
                basis[1][0] * d[0] + basis[1][1] * d[1] + basis[1][2] * d[2],
                basis[2][0] * d[0] + basis[2][1] * d[1] + basis[2][2] * d[2],
            ]
        })
        .collect()
}

/// Eigenvectors of a symmetric 3x3 matrix by cyclic Jacobi rotations,
/// rows ordered by descending eigenvalue.
fn jacobi_eigenvectors(mut a: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut v = [[0.0f64; 3]; 3];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..64 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        if off < 1e-30 {
            break;
        }
        for p in 0..2 {
            for q in (p + 1)..3 {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cos = 1.0 / (t * t + 1.0).sqrt();
                let sin = t * cos;
                for k in 0..3 {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = cos * akp - sin * akq;
                    a[k][q] = sin * akp + cos * akq;
                }
                for k in 0..3 {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = cos * apk - sin * aqk;
                    a[q][k] = sin * apk + cos * aqk;
                }
                for row in &mut v {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = cos * vp - sin * vq;
                    row[q] = sin * vp + cos * vq;
                }
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).expect("finite eigenvalues"));
    let mut basis = [[0.0f64; 3]; 3];
    for (row, &col) in order.iter().enumerate() {
        for k in 0..3 {
            basis[row][k] = v[k][col];
        }
    }
    basis
}

fn support_directions() -> Vec<[f64; 3]> {
    let mut dirs = Vec::with_capacity(26);
    for x in -1i32..=1 {
        for y in -1i32..=1 {
            for z in -1i32..=1 {
                if (x, y, z) == (0, 0, 0) {
                    continue;
                }
                let v = [x as f64, y as f64, z as f64];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                dirs.push([v[0] / n, v[1] / n, v[2] / n]);
            }
        }
    }
    dirs
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn pocket_of(coords: Array2<f64>) -> PocketCloud<f64> {
        let n = coords.nrows();
        PocketCloud { coords, features: Array2::zeros((n, 1)) }
    }

    /// Deterministic near-uniform shell via a Fibonacci lattice.
    fn fibonacci_shell(n: usize, radius: f64, center: [f64; 3]) -> PocketCloud<f64> {
        let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
        let coords = Array2::from_shape_fn((n, 3), |(i, a)| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = std::f64::consts::TAU * (i as f64 / golden);
            let p = [r * phi.cos(), r * phi.sin(), z];
            center[a] + radius * p[a]
        });
        pocket_of(coords)
    }

    #[test]
    fn two_atoms_space_size_is_their_distance() {
        let pocket = pocket_of(array![[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]]);
        let d = pocket_descriptors(&pocket, 0.5).unwrap();
        assert_eq!(d.space_size, 5.0);
        assert_eq!(d.n_p, 2);
        assert!(!d.degenerate);
    }

    #[test]
    fn tetrahedron_space_size_is_edge_length() {
        // Regular tetrahedron with edge 4: all six pairwise distances equal.
        // Vertices at (±e, ±e, ±e) with an even number of minus signs have
        // edge length 2e√2.
        let e = 4.0 / (2.0 * 2.0f64.sqrt());
        let pocket = pocket_of(array![
            [e, e, e],
            [e, -e, -e],
            [-e, e, -e],
            [-e, -e, e],
        ]);
        let d = pocket_descriptors(&pocket, 0.5).unwrap();
        assert!((d.space_size - 4.0).abs() < 1e-12, "S = {}", d.space_size);
    }

    #[test]
    fn single_atom_is_degenerate() {
        let pocket = pocket_of(array![[1.0, 2.0, 3.0]]);
        let d = pocket_descriptors(&pocket, 0.5).unwrap();
        assert!(d.degenerate);
        assert_eq!(d.volume, 0.0);
        assert_eq!(d.area, 0.0);
        assert_eq!(d.space_size, 0.0);
        assert_eq!(d.n_p, 1);
    }

    #[test]
    fn rejects_nonpositive_grid_step() {
        let pocket = pocket_of(array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(matches!(pocket_descriptors(&pocket, 0.0), Err(DescriptorError::BadGridStep(_))));
    }

    #[test]
    fn shell_volume_matches_inner_ball() {
        let pocket = fibonacci_shell(400, 6.0, [0.0, 0.0, 0.0]);
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 4.0f64.powi(3);
        let coarse = pocket_descriptors(&pocket, 0.5).unwrap();
        assert!(
            (coarse.volume - analytic).abs() / analytic < 0.25,
            "coarse V = {}, analytic = {analytic}",
            coarse.volume
        );
        // Fine-grid reference computation.
        let fine = pocket_descriptors(&pocket, 0.1).unwrap();
        assert!(
            (fine.volume - analytic).abs() / analytic < 0.25,
            "fine V = {}, analytic = {analytic}",
            fine.volume
        );
        assert!((coarse.volume - fine.volume).abs() / fine.volume < 0.25);
    }

    #[test]
    fn descriptors_are_rigid_motion_invariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let pocket = fibonacci_shell(150, 5.0, [3.0, -2.0, 7.0]);
        let base = pocket_descriptors(&pocket, 0.5).unwrap();
        for _ in 0..5 {
            let rot = crate::stats::random_rotation(&mut rng);
            let shift = [
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-20.0..20.0),
            ];
            let moved = Array2::from_shape_fn(pocket.coords.raw_dim(), |(i, a)| {
                (0..3).map(|b| rot[(a, b)] * pocket.coords[(i, b)]).sum::<f64>() + shift[a]
            });
            let d = pocket_descriptors(&pocket_of(moved), 0.5).unwrap();
            assert_eq!(d.n_p, base.n_p);
            assert!((d.space_size - base.space_size).abs() < 1e-9);
            // Canonical-frame grid: V and A move by far less than one cell.
            assert!((d.volume - base.volume).abs() <= 0.5f64.powi(3) + 1e-9, "dV = {}", (d.volume - base.volume).abs());
            assert!((d.area - base.area).abs() <= 0.5f64.powi(2) + 1e-9, "dA = {}", (d.area - base.area).abs());
        }
    }

    #[test]
    fn outside_of_the_shell_is_not_cavity() {
        // The hull test must exclude the exterior: a shell's cavity volume
        // cannot exceed the enclosing ball of its clearance-shrunk radius.
        let pocket = fibonacci_shell(300, 6.0, [0.0, 0.0, 0.0]);
        let d = pocket_descriptors(&pocket, 0.5).unwrap();
        let bound = 4.0 / 3.0 * std::f64::consts::PI * 4.3f64.powi(3);
        assert!(d.volume < bound, "V = {} exceeds inner bound {bound}", d.volume);
    }
}
