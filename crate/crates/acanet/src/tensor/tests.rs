use super::gradcheck::{self, DEFAULT_STEP};
use super::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn random_tensor(rng: &mut ChaCha12Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, values).unwrap().with_grad()
}

fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
    assert_eq!(actual.len(), expected.len());
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        assert!(
            (a - e).abs() <= tol,
            "element {i}: got {a}, expected {e} (tol {tol})"
        );
    }
}

#[test]
fn matmul_identity_leaves_matrix_unchanged() {
    let mut tape = Tape::new();
    let eye = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let m = tape.constant(Tensor::from_rows(&[vec![3.5, -2.0], vec![0.25, 7.0]]));
    let out = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.values(out), &[3.5, -2.0, 0.25, 7.0]);
}

#[test]
fn matmul_small_example() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let b = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]));
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.values(out), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 2]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
}

#[test]
fn matmul_gradcheck_random_3x4_4x2() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let a = random_tensor(&mut rng, vec![3, 4]);
    let b = random_tensor(&mut rng, vec![4, 2]);
    let report = gradcheck::check(
        |tape, vars| {
            let prod = tape.matmul(vars[0], vars[1])?;
            Ok(tape.mean_all(prod))
        },
        &[a, b],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn softmax_symmetric_row() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0]]));
    let out = tape.row_softmax(x);
    assert_close(tape.values(out), &[0.5, 0.5], 1e-15);
}

#[test]
fn softmax_analytic_row() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![3.0_f64.ln(), 0.0]]));
    let out = tape.row_softmax(x);
    assert_close(tape.values(out), &[0.75, 0.25], 1e-15);
}

#[test]
fn softmax_rows_sum_to_one_on_random_input() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    for _ in 0..100 {
        let rows = rng.gen_range(1..6);
        let cols = rng.gen_range(2..7);
        let t = random_tensor(&mut rng, vec![rows, cols]);
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let out = tape.row_softmax(x);
        let v = tape.values(out);
        for i in 0..rows {
            let sum: f64 = v[i * cols..(i + 1) * cols].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for &p in &v[i * cols..(i + 1) * cols] {
                assert!(p > 0.0 && p < 1.0);
            }
        }
    }
}

#[test]
fn softmax_gradcheck_random_4x5() {
    let mut rng = ChaCha12Rng::seed_from_u64(13);
    let x = random_tensor(&mut rng, vec![4, 5]);
    // Weighted sum keeps the loss sensitive to individual entries; a plain
    // mean of each softmax row would be constant.
    let weights: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin()).collect();
    let report = gradcheck::check(
        |tape, vars| {
            let sm = tape.row_softmax(vars[0]);
            let w = tape.constant(Tensor::new(vec![4, 5], weights.clone()).unwrap());
            let wt = tape.transpose(w);
            let prod = tape.matmul(sm, wt)?;
            Ok(tape.mean_all(prod))
        },
        &[x],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn masked_softmax_zeroes_masked_columns() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![5.0, 1.0, 2.0]]));
    let out = tape
        .row_softmax_masked(x, Some(&[false, true, true]))
        .unwrap();
    let v = tape.values(out);
    assert_eq!(v[0], 0.0);
    assert!((v[1] + v[2] - 1.0).abs() < 1e-12);
}

#[test]
fn fully_masked_softmax_yields_zero_row() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![5.0, 1.0]]));
    let out = tape.row_softmax_masked(x, Some(&[false, false])).unwrap();
    assert_eq!(tape.values(out), &[0.0, 0.0]);
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![4.0, 4.0, 4.0]]));
    let gain = tape.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
    let bias = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let out = tape.layer_norm(x, gain, bias).unwrap();
    assert_close(tape.values(out), &[0.0, 0.0, 0.0], 1e-12);
}

#[test]
fn layer_norm_two_element_row() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 3.0]]));
    let gain = tape.constant(Tensor::vector(vec![1.0, 1.0]));
    let bias = tape.constant(Tensor::vector(vec![0.0, 0.0]));
    let out = tape.layer_norm(x, gain, bias).unwrap();
    // mean 2, population std 1 (up to eps).
    assert_close(tape.values(out), &[-1.0, 1.0], 1e-4);
}

#[test]
fn layer_norm_rejects_single_column() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![3, 1]));
    let gain = tape.constant(Tensor::vector(vec![1.0]));
    let bias = tape.constant(Tensor::vector(vec![0.0]));
    assert!(tape.layer_norm(x, gain, bias).is_err());
}

#[test]
fn layer_norm_gradcheck_random_3x8() {
    let mut rng = ChaCha12Rng::seed_from_u64(17);
    let x = random_tensor(&mut rng, vec![3, 8]);
    let gain = random_tensor(&mut rng, vec![8]);
    let bias = random_tensor(&mut rng, vec![8]);
    let weights: Vec<f64> = (0..24).map(|i| (i as f64 * 0.31).cos()).collect();
    let report = gradcheck::check(
        |tape, vars| {
            let ln = tape.layer_norm(vars[0], vars[1], vars[2])?;
            let w = tape.constant(Tensor::new(vec![3, 8], weights.clone()).unwrap());
            let wt = tape.transpose(w);
            let prod = tape.matmul(ln, wt)?;
            Ok(tape.mean_all(prod))
        },
        &[x, gain, bias],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn relu_definition() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let out = tape.relu(x);
    assert_eq!(tape.values(out), &[0.0, 0.0, 2.0]);
}

#[test]
fn mse_of_identical_tensors_is_zero() {
    let mut rng = ChaCha12Rng::seed_from_u64(23);
    let t = random_tensor(&mut rng, vec![4, 3]);
    let mut tape = Tape::new();
    let a = tape.constant(t.clone());
    let b = tape.constant(t);
    let out = tape.mse(a, b).unwrap();
    assert_eq!(tape.scalar_value(out), 0.0);
}

#[test]
fn mae_small_example() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::vector(vec![2.0, 4.0]));
    let out = tape.mae(a, b).unwrap();
    assert_eq!(tape.scalar_value(out), 1.5);
}

#[test]
fn backward_of_sum_gives_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![3.0, -1.0, 2.5]).with_grad());
    let mean = tape.mean_all(x);
    let sum = tape.scale(mean, 3.0);
    tape.backward(sum).unwrap();
    assert_close(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0], 1e-15);
}

#[test]
fn backward_mse_linear_matches_closed_form() {
    // loss = mse(W x, y); dW = 2 (W x - y) x^T / n.
    let mut rng = ChaCha12Rng::seed_from_u64(29);
    let w = random_tensor(&mut rng, vec![3, 2]);
    let x = Tensor::from_rows(&[vec![0.4], vec![-1.2]]);
    let y = Tensor::from_rows(&[vec![1.0], vec![0.0], vec![-1.0]]);

    let mut tape = Tape::new();
    let wv = tape.leaf(w.clone());
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let pred = tape.matmul(wv, xv).unwrap();
    let loss = tape.mse(pred, yv).unwrap();
    let resid: Vec<f64> = tape
        .values(pred)
        .iter()
        .zip(y.values())
        .map(|(&p, &t)| p - t)
        .collect();
    tape.backward(loss).unwrap();

    let mut expected = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            expected[i * 2 + j] = 2.0 * resid[i] * x.values()[j] / 3.0;
        }
    }
    assert_close(tape.grad(wv).unwrap(), &expected, 1e-12);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
    let y = tape.relu(x);
    match tape.backward(y) {
        Err(TensorError::NonScalarLoss { .. }) => {}
        other => panic!("expected NonScalarLoss, got {other:?}"),
    }
}

#[test]
fn backward_twice_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
    let loss = tape.mean_all(x);
    tape.backward(loss).unwrap();
    match tape.backward(loss) {
        Err(TensorError::TapeConsumed) => {}
        other => panic!("expected TapeConsumed, got {other:?}"),
    }
}

#[test]
fn forward_is_deterministic_bitwise() {
    let run = || {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let a = random_tensor(&mut rng, vec![5, 4]);
        let b = random_tensor(&mut rng, vec![4, 5]);
        let mut tape = Tape::new();
        let av = tape.leaf(a);
        let bv = tape.leaf(b);
        let prod = tape.matmul(av, bv).unwrap();
        let sm = tape.row_softmax(prod);
        let loss = tape.mean_all(sm);
        tape.backward(loss).unwrap();
        (
            tape.values(sm).to_vec(),
            tape.grad(av).unwrap().to_vec(),
        )
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert!(v1.iter().zip(&v2).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn elementwise_and_structural_ops_gradcheck() {
    let mut rng = ChaCha12Rng::seed_from_u64(37);
    // Mix of relu, add, sub, scale, transpose, concat, slice, pad, softplus,
    // mean_rows, mse, mae, masked_row_mse in one composite graph. ReLU inputs
    // stay away from 0 so the subgradient is well defined.
    let a = {
        let t = random_tensor(&mut rng, vec![3, 4]);
        let values: Vec<f64> = t
            .values()
            .iter()
            .map(|&v| if v.abs() < 0.05 { v + 0.1 } else { v })
            .collect();
        Tensor::new(vec![3, 4], values).unwrap().with_grad()
    };
    let b = random_tensor(&mut rng, vec![3, 4]);
    let bias = random_tensor(&mut rng, vec![4]);
    let report = gradcheck::check(
        |tape, vars| {
            let (a, b, bias) = (vars[0], vars[1], vars[2]);
            let sum = tape.add(a, b)?;
            let biased = tape.add_row_broadcast(sum, bias)?;
            let act = tape.relu(biased);
            let sp = tape.softplus(act);
            let t = tape.transpose(sp); // 4x3
            let back = tape.transpose(t); // 3x4
            let sliced = tape.slice_cols(back, 1, 2)?; // 3x2
            let padded = tape.pad_rows(sliced, 5)?; // 5x2
            let cat = tape.concat_rows(&[padded, sliced])?; // 8x2
            let scaled = tape.scale(cat, 0.5);
            let rowsummary = tape.mean_rows(scaled); // 1x2
            let diff = tape.sub(a, b)?;
            let m1 = tape.mse(diff, b)?;
            let m2 = tape.mae(a, b)?;
            let m3 = tape.masked_row_mse(a, b, &[true, false, true])?;
            let s1 = tape.mean_all(rowsummary);
            let l1 = tape.add(m1, m2)?;
            let l2 = tape.add(l1, m3)?;
            let total = tape.add(l2, s1)?;
            Ok(total)
        },
        &[a, b, bias],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn scale_rows_and_concat_cols_gradcheck() {
    let mut rng = ChaCha12Rng::seed_from_u64(41);
    let a = random_tensor(&mut rng, vec![3, 2]);
    let b = random_tensor(&mut rng, vec![3, 3]);
    let factors = vec![0.5, -2.0, 1.25];
    let report = gradcheck::check(
        |tape, vars| {
            let scaled = tape.scale_rows(vars[0], &factors)?;
            let cat = tape.concat_cols(scaled, vars[1])?;
            let sm = tape.row_softmax(cat);
            let w: Vec<f64> = (0..15).map(|i| (i as f64).sin()).collect();
            let wt = tape.constant(Tensor::new(vec![3, 5], w).unwrap());
            let wtt = tape.transpose(wt);
            let prod = tape.matmul(sm, wtt)?;
            Ok(tape.mean_all(prod))
        },
        &[a, b],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn masked_row_mse_all_masked_is_zero() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).with_grad());
    let b = tape.constant(Tensor::from_rows(&[vec![9.0, 9.0]]));
    let loss = tape.masked_row_mse(a, b, &[false]).unwrap();
    assert_eq!(tape.scalar_value(loss), 0.0);
    tape.backward(loss).unwrap();
    assert_close(tape.grad(a).unwrap(), &[0.0, 0.0], 0.0);
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
    let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    let s = tape.add(x, c).unwrap();
    let loss = tape.mean_all(s);
    tape.backward(loss).unwrap();
    assert!(tape.grad(c).is_none());
    assert!(tape.grad(x).is_some());
}
