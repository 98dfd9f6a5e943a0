//! Per-op adjoint verification against central finite differences, plus the
//! tape error paths.

use ckm_autodiff::{concat_cols, concat_rows, grad_check, BackwardError, CVar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(rows, cols, data)
}

/// Checks d(sum(w . op(x)))/dx against finite differences for one input.
fn check_op(
    build: impl Fn(&Tape, &Var) -> Var,
    rows: usize,
    cols: usize,
    lo: f64,
    hi: f64,
    seed: u64,
    tol: f64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = random_tensor(rows, cols, lo, hi, &mut rng);
    let out_probe = {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        build(&tape, &x).value()
    };
    let w = random_tensor(out_probe.rows, out_probe.cols, -1.0, 1.0, &mut rng);

    let eval = |theta: &[f64]| -> (f64, Option<Vec<f64>>) {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(rows, cols, theta.to_vec()));
        let y = build(&tape, &x);
        let loss = y.mul(&tape.constant(w.clone())).sum();
        let v = loss.scalar();
        loss.backward().unwrap();
        (v, Some(x.grad().data))
    };

    let (_, grads) = eval(&x0.data);
    let analytic = grads.unwrap();
    let mut f = |theta: &[f64]| eval(theta).0;
    let report = grad_check(&mut f, &x0.data, &analytic, 1e-6, 200, seed ^ 0x5eed);
    assert!(
        report.passes(tol),
        "op failed gradcheck: max rel err {} at coord {}",
        report.max_rel_error,
        report.worst_coord
    );
}

#[test]
fn unary_adjoints() {
    check_op(|_, x| x.exp(), 3, 4, -1.0, 1.0, 1, 1e-7);
    check_op(|_, x| x.ln(), 3, 4, 0.5, 2.0, 2, 1e-7);
    check_op(|_, x| x.sqrt(), 3, 4, 0.5, 2.0, 3, 1e-7);
    check_op(|_, x| x.sin(), 3, 4, -2.0, 2.0, 4, 1e-7);
    check_op(|_, x| x.cos(), 3, 4, -2.0, 2.0, 5, 1e-7);
    check_op(|_, x| x.tanh(), 3, 4, -2.0, 2.0, 6, 1e-7);
    check_op(|_, x| x.sigmoid(), 3, 4, -2.0, 2.0, 7, 1e-7);
    check_op(|_, x| x.softplus(), 3, 4, -2.0, 2.0, 8, 1e-7);
    check_op(|_, x| x.relu(), 3, 4, 0.2, 2.0, 9, 1e-7);
    check_op(|_, x| x.abs(), 3, 4, 0.2, 2.0, 10, 1e-7);
    check_op(|_, x| x.negate(), 3, 4, -2.0, 2.0, 11, 1e-7);
    check_op(|_, x| x.scale(std::f64::consts::PI), 3, 4, -2.0, 2.0, 12, 1e-7);
    check_op(|_, x| x.add_scalar(0.37), 3, 4, -2.0, 2.0, 13, 1e-7);
    // away from the knee on both sides
    check_op(|_, x| x.huber(1.0), 3, 4, 0.1, 0.8, 14, 1e-7);
    check_op(|_, x| x.huber(1.0), 3, 4, 1.3, 3.0, 15, 1e-7);
}

#[test]
fn clamp_is_straight_through_inside_and_zero_outside() {
    // strictly inside: identity gradient
    check_op(|_, x| x.clamp(&[-1.0], &[1.0]), 3, 4, -0.8, 0.8, 16, 1e-9);
    // strictly outside: zero gradient, and the value is pinned
    let tape = Tape::new();
    let x = tape.leaf(Tensor::row(&[2.0, -3.0, 0.5]));
    let y = x.clamp(&[-1.0], &[1.0]);
    assert_eq!(y.value().data, vec![1.0, -1.0, 0.5]);
    y.sum().backward().unwrap();
    assert_eq!(x.grad().data, vec![0.0, 0.0, 1.0]);
}

#[test]
fn binary_adjoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let b = random_tensor(3, 4, 0.5, 2.0, &mut rng);
    let bneg = random_tensor(3, 4, -2.0, -0.5, &mut rng);
    check_op(|t, x| x.add(&t.leaf(b.clone())), 3, 4, -1.0, 1.0, 20, 1e-7);
    check_op(|t, x| x.sub(&t.leaf(b.clone())), 3, 4, -1.0, 1.0, 21, 1e-7);
    check_op(|t, x| x.mul(&t.leaf(b.clone())), 3, 4, -1.0, 1.0, 22, 1e-7);
    check_op(|t, x| x.div(&t.leaf(b.clone())), 3, 4, -1.0, 1.0, 23, 1e-7);
    check_op(|t, x| t.leaf(b.clone()).div(x), 3, 4, 0.5, 2.0, 24, 1e-7);
    // maximum with well-separated branches
    check_op(|t, x| x.maximum(&t.leaf(bneg.clone())), 3, 4, 0.5, 2.0, 25, 1e-7);
    check_op(|t, x| t.leaf(bneg.clone()).maximum(x), 3, 4, 0.5, 2.0, 26, 1e-7);
}

#[test]
fn broadcast_adjoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let row = random_tensor(1, 4, 0.5, 2.0, &mut rng);
    let col = random_tensor(3, 1, 0.5, 2.0, &mut rng);
    check_op(|t, x| x.add_row(&t.leaf(row.clone())), 3, 4, -1.0, 1.0, 30, 1e-7);
    check_op(|t, x| x.add_col(&t.leaf(col.clone())), 3, 4, -1.0, 1.0, 31, 1e-7);
    check_op(|t, x| x.sub_col(&t.leaf(col.clone())), 3, 4, -1.0, 1.0, 32, 1e-7);
    check_op(|t, x| x.mul_col(&t.leaf(col.clone())), 3, 4, -1.0, 1.0, 33, 1e-7);
    check_op(|t, x| x.div_col(&t.leaf(col.clone())), 3, 4, -1.0, 1.0, 34, 1e-7);
    check_op(|t, x| x.mul_row(&t.leaf(row.clone())), 3, 4, -1.0, 1.0, 35, 1e-7);
    // gradients w.r.t. the broadcast operand
    check_op(|t, x| t.leaf(random_tensor(5, 4, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3))).add_row(x), 1, 4, -1.0, 1.0, 36, 1e-7);
    check_op(|t, x| t.leaf(random_tensor(3, 6, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4))).mul_col(x), 3, 1, 0.5, 2.0, 37, 1e-7);
    check_op(|t, x| t.leaf(random_tensor(3, 6, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5))).div_col(x), 3, 1, 0.5, 2.0, 38, 1e-7);
    check_op(|t, x| t.leaf(random_tensor(5, 4, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(6))).mul_row(x), 1, 4, 0.5, 2.0, 39, 1e-7);
}

#[test]
fn linalg_adjoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(321);
    let b = random_tensor(4, 5, -1.0, 1.0, &mut rng);
    check_op(|t, x| x.matmul(&t.leaf(b.clone())), 3, 4, -1.0, 1.0, 40, 1e-7);
    check_op(|t, x| t.leaf(random_tensor(5, 3, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(7))).matmul(x), 3, 4, -1.0, 1.0, 41, 1e-7);
    check_op(|_, x| x.transpose(), 3, 4, -1.0, 1.0, 42, 1e-9);
    check_op(|_, x| x.softmax_rows(), 3, 5, -2.0, 2.0, 43, 1e-7);
}

#[test]
fn softmax_rows_sum_to_one_and_backward_rows_sum_to_zero() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_rows(&[vec![0.3, -1.5, 2.0, 0.1], vec![5.0, 5.0, 5.0, 5.0]]));
    let y = x.softmax_rows();
    let v = y.value();
    for r in 0..v.rows {
        let s: f64 = v.row_slice(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-12, "row {} sums to {}", r, s);
    }
    // pick out one entry so the softmax Jacobian row-sum property is visible
    let probe = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]]);
    y.mul(&tape.constant(probe)).sum().backward().unwrap();
    let g = x.grad();
    for r in 0..g.rows {
        let s: f64 = g.row_slice(r).iter().sum();
        assert!(s.abs() < 1e-14, "backward row {} sums to {}", r, s);
    }
}

#[test]
fn reduction_adjoints() {
    check_op(|_, x| x.sum(), 3, 4, -1.0, 1.0, 50, 1e-7);
    check_op(|_, x| x.mean(), 3, 4, -1.0, 1.0, 51, 1e-7);
    check_op(|_, x| x.max(), 3, 4, -1.0, 1.0, 52, 1e-7);
    check_op(|_, x| x.sum_axis0(), 3, 4, -1.0, 1.0, 53, 1e-7);
    check_op(|_, x| x.sum_axis1(), 3, 4, -1.0, 1.0, 54, 1e-7);
    check_op(|_, x| x.prod_axis1(), 3, 4, 0.3, 1.5, 55, 1e-7);
}

#[test]
fn prod_axis1_handles_exact_zeros() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_rows(&[vec![2.0, 0.0, 3.0]]));
    let p = x.prod_axis1();
    assert_eq!(p.value().data, vec![0.0]);
    p.sum().backward().unwrap();
    // d(prod)/dx = (0*3, 2*3, 2*0)
    assert_eq!(x.grad().data, vec![0.0, 6.0, 0.0]);
}

#[test]
fn structural_adjoints() {
    check_op(|_, x| x.select_rows(&[2, 0, 2, 1]), 3, 4, -1.0, 1.0, 60, 1e-7);
    check_op(|_, x| x.slice_cols(1, 2), 3, 4, -1.0, 1.0, 61, 1e-7);
    check_op(|_, x| x.reshape(4, 3), 3, 4, -1.0, 1.0, 62, 1e-9);
    check_op(
        |t, x| {
            let other = t.leaf(Tensor::full(2, 4, 0.7));
            concat_rows(&[x, &other])
        },
        3,
        4,
        -1.0,
        1.0,
        63,
        1e-7,
    );
    check_op(
        |t, x| {
            let other = t.leaf(Tensor::full(3, 2, -0.4));
            concat_cols(&[x, &other])
        },
        3,
        4,
        -1.0,
        1.0,
        64,
        1e-7,
    );
}

#[test]
fn complex_ops_differentiate_the_pair() {
    // gradcheck through a complex chain: |(a+bi)*(c+di)|^2 summed
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    let other_re = random_tensor(3, 1, -1.0, 1.0, &mut rng);
    let other_im = random_tensor(3, 1, -1.0, 1.0, &mut rng);
    check_op(
        |t, x| {
            let re = x.slice_cols(0, 1);
            let im = x.slice_cols(1, 1);
            let z = CVar::new(re, im);
            let w = CVar::new(t.constant(other_re.clone()), t.constant(other_im.clone()));
            z.mul(&w).abs2()
        },
        3,
        2,
        -1.0,
        1.0,
        70,
        1e-7,
    );
}

#[test]
fn square_derivative_at_three() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = x.mul(&x);
    assert_eq!(y.scalar(), 9.0);
    y.backward().unwrap();
    assert_eq!(x.grad().scalar_value(), 6.0);
}

#[test]
fn constant_loss_has_zero_gradients() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::row(&[1.0, 2.0, 3.0]));
    let loss = tape.constant_scalar(42.0);
    loss.backward().unwrap();
    assert!(x.grad().data.iter().all(|&g| g == 0.0));
}

#[test]
fn linear_loss_gradient_is_the_input() {
    let tape = Tape::new();
    let w = tape.leaf(Tensor::row(&[0.5, -1.0, 2.0]));
    let x = tape.constant(Tensor::row(&[3.0, 4.0, 5.0]));
    let loss = w.mul(&x).sum();
    loss.backward().unwrap();
    assert_eq!(w.grad().data, vec![3.0, 4.0, 5.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::row(&[1.0, 2.0]));
    assert!(matches!(x.backward(), Err(BackwardError::NonScalarRoot { .. })));
}

#[test]
fn repeated_backward_without_reset_errors() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let y = x.mul(&x);
    y.backward().unwrap();
    assert_eq!(y.backward(), Err(BackwardError::AlreadyRun));
}
