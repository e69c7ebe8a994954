use groupmix::ops::elementwise::{gelu_scalar, hardswish_scalar};
use groupmix::{Error, PoolKind, SeededRng, Tape, Tensor, LN_EPS};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

fn delta_kernel(c: usize, k: usize) -> Tensor {
    let mut w = Tensor::zeros(&[c, k, k]);
    for ch in 0..c {
        w.data_mut()[ch * k * k + k * k / 2] = 1.0;
    }
    w
}

#[test]
fn depthwise_delta_kernel_is_identity() {
    let x = random(&[2, 3, 5, 6], 1);
    for k in [3, 5, 7] {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(delta_kernel(3, k));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d_depthwise(xv, w, b).unwrap();
        assert_eq!(tape.value(y), &x);
    }
}

#[test]
fn depthwise_window_sum() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 1, 5, 5], 2.5));
    let w = tape.constant(Tensor::ones(&[1, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d_depthwise(x, w, b).unwrap();
    assert_eq!(tape.value(y).at(&[0, 0, 2, 2]), 22.5);
    assert_eq!(tape.value(y).at(&[0, 0, 0, 0]), 10.0);
}

#[test]
fn even_kernels_are_config_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[2, 2, 2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(
        tape.conv2d_depthwise(x, w, b),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        tape.pool2d(x, PoolKind::Max, 4),
        Err(Error::Config(_))
    ));
}

#[test]
fn pointwise_examples() {
    let mut tape = Tape::new();
    let x = random(&[2, 2, 3, 3], 2);
    let xv = tape.constant(x.clone());
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let zero = tape.constant(Tensor::zeros(&[2]));
    let y = tape.conv2d_pointwise(xv, eye, zero).unwrap();
    assert_eq!(tape.value(y), &x);

    let sum_w = tape.constant(t(&[1, 2], &[1.0, 1.0]));
    let zero1 = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d_pointwise(xv, sum_w, zero1).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let want = x.at(&[1, 0, i, j]) + x.at(&[1, 1, i, j]);
            assert_eq!(tape.value(y).at(&[1, 0, i, j]), want);
        }
    }
}

#[test]
fn pointwise_equals_flattened_matmul() {
    let (x, w, b) = (random(&[2, 4, 3, 5], 3), random(&[6, 4], 4), random(&[6], 5));
    let mut tape = Tape::new();
    let (xv, wv, bv) = (
        tape.constant(x),
        tape.constant(w.clone()),
        tape.constant(b.clone()),
    );
    let y = tape.conv2d_pointwise(xv, wv, bv).unwrap();

    // B×C×HW → B·HW×C, times Wᵀ, plus bias.
    let flat = tape.reshape(xv, &[2, 4, 15]).unwrap();
    let flat = tape.permute(flat, &[0, 2, 1]).unwrap();
    let flat = tape.reshape(flat, &[30, 4]).unwrap();
    let wt = tape.constant(Tensor::from_fn(&[4, 6], |i| w.data()[(i % 6) * 4 + i / 6]));
    let m = tape.linear(flat, wt, bv).unwrap();
    let m = tape.reshape(m, &[2, 15, 6]).unwrap();
    let m = tape.permute(m, &[0, 2, 1]).unwrap();
    let m = tape.reshape(m, &[2, 6, 3, 5]).unwrap();
    assert!(tape.value(y).max_abs_diff(tape.value(m)) < 1e-12);
}

#[test]
fn strided_conv_sizes_and_delta() {
    let x = random(&[1, 2, 8, 8], 6);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.conv2d(xv, w, b, 2).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 4, 4]);
    let y = tape.conv2d(xv, w, b, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 8, 8]);
    assert!(matches!(tape.conv2d(xv, w, b, 3), Err(Error::Config(_))));

    let mut delta = Tensor::zeros(&[2, 2, 3, 3]);
    delta.data_mut()[4] = 1.0;
    delta.data_mut()[2 * 9 + 9 + 4] = 1.0;
    let dv = tape.constant(delta);
    let b2 = tape.constant(Tensor::zeros(&[2]));
    let y = tape.conv2d(xv, dv, b2, 1).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn pooling_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let max = tape.pool2d(x, PoolKind::Max, 3).unwrap();
    let avg = tape.pool2d(x, PoolKind::Avg, 3).unwrap();
    let min = tape.pool2d(x, PoolKind::Min, 3).unwrap();
    assert_eq!(tape.value(max).at(&[0, 0, 0, 0]), 4.0);
    assert_eq!(tape.value(avg).at(&[0, 0, 0, 0]), 2.5);
    assert_eq!(tape.value(min).at(&[0, 0, 1, 1]), 1.0);

    let c = tape.constant(Tensor::full(&[2, 3, 5, 4], -1.25));
    for kind in [PoolKind::Min, PoolKind::Max, PoolKind::Avg] {
        for k in [3, 5, 7] {
            let y = tape.pool2d(c, kind, k).unwrap();
            assert!(tape.value(y).data().iter().all(|&v| v == -1.25));
        }
    }
}

#[test]
fn softmax_and_layer_norm_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
    let s = tape.softmax(x, 1).unwrap();
    let want = [0.09003, 0.24473, 0.66524];
    for (a, b) in tape.value(s).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-5);
    }
    let big = tape.constant(t(&[2], &[1000.0, 1000.0]));
    let s = tape.softmax(big, 0).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
    let y = tape.layer_norm(x, 1, g, b, LN_EPS).unwrap();
    assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-5);
    let flat = tape.constant(Tensor::full(&[1, 2], 7.0));
    let y = tape.layer_norm(flat, 1, g, b, LN_EPS).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
}

#[test]
fn activation_reference_points() {
    for (x, y) in [(0.0, 0.0), (-3.0, 0.0), (3.0, 3.0), (10.0, 10.0)] {
        assert_eq!(hardswish_scalar(x), y);
    }
    assert!((hardswish_scalar(1.0) - 4.0 / 6.0).abs() < 1e-15);
    assert_eq!(gelu_scalar(0.0), 0.0);
    // x·Φ(x) with Φ from the error function.
    for i in -40..=40 {
        let x = i as f64 / 10.0;
        let phi = 0.5 * (1.0 + libm::erf(x / 2f64.sqrt()));
        assert!((gelu_scalar(x) - x * phi).abs() < 1e-6);
        let odd = gelu_scalar(x) + gelu_scalar(-x);
        assert!((odd - x * (2.0 * phi - 1.0)).abs() < 1e-6);
    }
}

#[test]
fn global_avg_pool_mean_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]));
    let y = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);
    let l = tape.sum(y);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.25; 4]);
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = random(&[3, 4], 9);
    let labels = [2, 0, 3];
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = tape.cross_entropy(l, &labels).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(l).unwrap();
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.data()[r * 4..r * 4 + 4];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for c in 0..4 {
            let onehot = if c == label { 1.0 } else { 0.0 };
            let want = (row[c].exp() / z - onehot) / 3.0;
            assert!((g.at(&[r, c]) - want).abs() < 1e-10);
        }
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    use groupmix::{grad_check, GradCheckOptions};
    let r = grad_check(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            Ok(t.sum(y))
        },
        &[random(&[3, 4], 10), random(&[4, 2], 11)],
        GradCheckOptions::default().with_rtol(1e-5),
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn autodiff_is_linear() {
    let x = random(&[2, 3], 12);
    let grad_of = |a: f64, b: f64| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let sq = tape.mul(xv, xv).unwrap();
        let f = tape.sum(sq);
        let s = tape.softmax(xv, 1).unwrap();
        let first = tape.narrow(s, 1, 0, 1).unwrap();
        let g = tape.sum(first);
        let fa = tape.scale(f, a);
        let gb = tape.scale(g, b);
        let l = tape.add(fa, gb).unwrap();
        tape.backward(l).unwrap();
        tape.grad(xv).unwrap()
    };
    let (gf, gg, both) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0), grad_of(2.5, -0.75));
    for i in 0..6 {
        let want = 2.5 * gf.data()[i] - 0.75 * gg.data()[i];
        assert!((both.data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}
