use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::*;

fn scalar(v: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), v)
}

#[test]
fn square_has_analytic_gradient() {
    // f(x) = x² at x = 3 → value 9, gradient 6.
    let prog = |t: &mut Tape<f64>, ids: &[TensorId]| t.mul(ids[0], ids[0]);
    let (value, grad) = evaluate_with_gradient(&prog, &[scalar(3.0)], &[0]).unwrap();
    assert_eq!(value, 9.0);
    assert_eq!(grad.adjoints[0][(0, 0)], 6.0);
}

#[test]
fn product_plus_sine() {
    // f(x, y) = x·y + sin(x) at (0, 5) → gradient (6, 0).
    let prog = |t: &mut Tape<f64>, ids: &[TensorId]| {
        let xy = t.mul(ids[0], ids[1])?;
        let sx = t.sin(ids[0])?;
        t.add(xy, sx)
    };
    let (value, grad) = evaluate_with_gradient(&prog, &[scalar(0.0), scalar(5.0)], &[0, 1]).unwrap();
    assert_eq!(value, 0.0);
    assert_eq!(grad.adjoints[0][(0, 0)], 6.0);
    assert_eq!(grad.adjoints[1][(0, 0)], 0.0);
}

/// A three-layer composition over the full nonlinearity set.
fn three_layer(t: &mut Tape<f64>, ids: &[TensorId]) -> Result<TensorId, TapeError> {
    let h1 = t.matmul(ids[0], ids[1])?;
    let h1 = t.add_row(h1, ids[2])?;
    let h1 = t.relu(h1)?;
    let h2 = t.matmul(h1, ids[3])?;
    let h2 = t.shifted_softplus(h2)?;
    let sm = t.softmax_rows(h2)?;
    let h3 = t.logistic(sm)?;
    let n = t.row_norms(h3)?;
    t.mean_all(n)
}

#[test]
fn random_composition_matches_finite_differences() {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let mut checked = 0;
    while checked < 5 {
        let x: Array2<f64> = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let w1: Array2<f64> = Array2::from_shape_fn((3, 6), |_| rng.gen_range(-0.7..0.7));
        let b1: Array2<f64> = Array2::from_shape_fn((1, 6), |_| rng.gen_range(-0.3..0.3));
        let w2: Array2<f64> = Array2::from_shape_fn((6, 5), |_| rng.gen_range(-0.7..0.7));
        // The FD oracle is only valid away from the relu kink: resample if
        // any pre-activation sits within reach of the probe step.
        let pre = x.dot(&w1) + &b1.row(0);
        if pre.iter().any(|v| v.abs() < 1e-3) {
            continue;
        }
        let report = check_gradient(&three_layer, &[x, w1, b1, w2], 1e-6, 1e-5).unwrap();
        assert!(report.passed, "worst rel err {} at {:?}", report.worst_rel_err, report.worst_coord);
        checked += 1;
    }
}

#[test]
fn linear_program_checks_exactly() {
    let prog = |t: &mut Tape<f64>, ids: &[TensorId]| {
        let y = t.matmul(ids[0], ids[1])?;
        t.sum_all(y)
    };
    let a = array![[1.0, 2.0], [3.0, -1.0]];
    let b = array![[0.5], [2.0]];
    let report = check_gradient(&prog, &[a, b], 1e-5, 1e-9).unwrap();
    assert!(report.passed);
    assert!(report.worst_rel_err < 1e-9);
}

#[test]
fn discontinuity_fails_the_check() {
    // relu has no derivative at 0; probing exactly there must be reported.
    let prog = |t: &mut Tape<f64>, ids: &[TensorId]| {
        let r = t.relu(ids[0])?;
        let s = t.scale(r, 1.0e3)?;
        t.sum_all(s)
    };
    let report = check_gradient(&prog, &[scalar(0.0)], 1e-6, 1e-5).unwrap();
    assert!(!report.passed);
    assert_eq!(report.worst_coord, (0, 0, 0));
}

#[test]
fn rejects_nonpositive_step() {
    let prog = |t: &mut Tape<f64>, ids: &[TensorId]| t.sum_all(ids[0]);
    assert!(matches!(check_gradient(&prog, &[scalar(1.0)], 0.0, 1e-5), Err(TapeError::BadStep(_))));
}

#[test]
fn gradient_of_sum_is_sum_of_gradients() {
    let mut rng = ChaCha12Rng::seed_from_u64(17);
    let x = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
    let f = |t: &mut Tape<f64>, ids: &[TensorId]| {
        let s = t.shifted_softplus(ids[0])?;
        t.sum_all(s)
    };
    let g = |t: &mut Tape<f64>, ids: &[TensorId]| {
        let s = t.logistic(ids[0])?;
        t.mean_all(s)
    };
    let sum = |t: &mut Tape<f64>, ids: &[TensorId]| {
        let a = f(t, ids)?;
        let b = g(t, ids)?;
        t.add(a, b)
    };
    let (_, gf) = evaluate_with_gradient(&f, &[x.clone()], &[0]).unwrap();
    let (_, gg) = evaluate_with_gradient(&g, &[x.clone()], &[0]).unwrap();
    let (_, gs) = evaluate_with_gradient(&sum, &[x], &[0]).unwrap();
    let want = &gf.adjoints[0] + &gg.adjoints[0];
    for (a, b) in gs.adjoints[0].iter().zip(want.iter()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn replay_is_deterministic() {
    let mut rng = ChaCha12Rng::seed_from_u64(23);
    let x = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
    let w = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
    let prog = |t: &mut Tape<f64>, ids: &[TensorId]| {
        let h = t.matmul(ids[0], ids[1])?;
        let h = t.softmax_rows(h)?;
        t.mean_all(h)
    };
    let (v1, g1) = evaluate_with_gradient(&prog, &[x.clone(), w.clone()], &[0, 1]).unwrap();
    let (v2, g2) = evaluate_with_gradient(&prog, &[x, w], &[0, 1]).unwrap();
    assert_eq!(v1, v2);
    assert_eq!(g1.adjoints[0], g2.adjoints[0]);
    assert_eq!(g1.adjoints[1], g2.adjoints[1]);
}

#[test]
fn nan_in_forward_names_the_op() {
    let prog = |t: &mut Tape<f64>, ids: &[TensorId]| {
        let l = t.ln(ids[0])?;
        t.sum_all(l)
    };
    let err = eval_err(&prog, &[scalar(-1.0)]);
    match err {
        TapeError::NonFinite { op } => assert_eq!(op, "ln"),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

fn eval_err(prog: &impl check::Program<f64>, inputs: &[Array2<f64>]) -> TapeError {
    evaluate_with_gradient(prog, inputs, &[]).unwrap_err()
}

#[test]
fn non_scalar_output_is_a_contract_error() {
    let prog = |t: &mut Tape<f64>, ids: &[TensorId]| t.relu(ids[0]);
    let err = eval_err(&prog, &[array![[1.0, 2.0]]]);
    assert!(matches!(err, TapeError::NonScalarOutput { rows: 1, cols: 2 }));
}

#[test]
fn shape_mismatch_is_reported() {
    let mut t = Tape::<f64>::new();
    let a = t.var(array![[1.0, 2.0]]);
    let b = t.var(array![[1.0], [2.0]]);
    assert!(matches!(t.add(a, b), Err(TapeError::ShapeMismatch { op: "add", .. })));
    assert!(matches!(t.matmul(a, a), Err(TapeError::ShapeMismatch { op: "matmul", .. })));
}

#[test]
fn segment_ops_differentiate() {
    // Two segments of sizes 2 and 3 over 5 edge rows.
    let starts = vec![0usize, 2, 5];
    let seg_of_row = vec![0usize, 0, 1, 1, 1];
    let prog = move |t: &mut Tape<f64>, ids: &[TensorId]| {
        let alpha = t.segment_softmax(ids[0], starts.clone())?;
        let weighted = t.mul_head_broadcast(ids[1], alpha)?;
        let pooled = t.segment_sum(weighted, seg_of_row.clone(), 2)?;
        let n = t.row_norms(pooled)?;
        t.mean_all(n)
    };
    let mut rng = ChaCha12Rng::seed_from_u64(31);
    let logits = Array2::from_shape_fn((5, 2), |_| rng.gen_range(-1.0..1.0));
    let values = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
    let report = check_gradient(&prog, &[logits, values], 1e-6, 1e-6).unwrap();
    assert!(report.passed, "worst rel err {}", report.worst_rel_err);
}

#[test]
fn gather_concat_clamp_differentiate() {
    let idx = vec![2usize, 0, 1, 2];
    let prog = move |t: &mut Tape<f64>, ids: &[TensorId]| {
        let picked = t.gather(ids[0], idx.clone())?;
        let both = t.concat_cols(&[picked, ids[1]])?;
        let capped = t.clamp(both, -0.8, 0.8)?;
        let n = t.row_norms(capped)?;
        t.sum_all(n)
    };
    let mut rng = ChaCha12Rng::seed_from_u64(37);
    let a = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-0.6..0.6));
    let b = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-0.6..0.6));
    let report = check_gradient(&prog, &[a, b], 1e-6, 1e-6).unwrap();
    assert!(report.passed, "worst rel err {}", report.worst_rel_err);
}

#[test]
fn edge_features_differentiate() {
    let centers: Vec<f64> = (0..20).map(|m| 10.0 * m as f64 / 19.0).collect();
    let sigma = 10.0 / 19.0;
    let types = vec![0usize, 3, 1, 2];
    let prog = move |t: &mut Tape<f64>, ids: &[TensorId]| {
        let ef = t.edge_features(ids[0], types.clone(), centers.clone(), sigma, 4)?;
        let sq = t.mul(ef, ef)?;
        t.sum_all(sq)
    };
    let d = array![[0.3], [4.7], [8.1], [2.2]];
    let report = check_gradient(&prog, &[d], 1e-6, 1e-6).unwrap();
    assert!(report.passed, "worst rel err {}", report.worst_rel_err);
}

#[test]
fn row_norm_adjoint_at_zero_is_zero() {
    let prog = |t: &mut Tape<f64>, ids: &[TensorId]| {
        let n = t.row_norms(ids[0])?;
        t.sum_all(n)
    };
    let (_, grad) = evaluate_with_gradient(&prog, &[array![[0.0, 0.0, 0.0]]], &[0]).unwrap();
    assert_eq!(grad.adjoints[0], array![[0.0, 0.0, 0.0]]);
}

#[test]
fn constants_are_skipped_in_backward() {
    let mut t = Tape::<f64>::new();
    let x = t.var(scalar(2.0));
    let c = t.constant(scalar(10.0));
    let y = t.mul(x, c).unwrap();
    let out = t.sum_all(y).unwrap();
    let grads = t.backward(out).unwrap();
    assert_eq!(grads.wrt(&t, x)[(0, 0)], 10.0);
    assert_eq!(grads.wrt(&t, c)[(0, 0)], 0.0);
}

#[test]
fn works_in_f32_too() {
    let prog = |t: &mut Tape<f32>, ids: &[TensorId]| t.mul(ids[0], ids[0]);
    let x = Array2::from_elem((1, 1), 3.0f32);
    let (v, g) = evaluate_with_gradient(&prog, &[x], &[0]).unwrap();
    assert_eq!(v, 9.0);
    assert_eq!(g.adjoints[0][(0, 0)], 6.0);
}
