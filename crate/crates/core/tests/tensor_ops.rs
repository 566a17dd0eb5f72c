use ltrv_core::error::TensorError;
use ltrv_core::tensor::{finite_diff_grad, verify, Tape, Tensor};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn matmul_identity_passes_vector_through() {
    let mut t = Tape::new();
    let eye = Tensor::eye(3);
    let v = Tensor::vector(vec![0.5, -1.25, 7.0]).unwrap();
    let y = t.matmul(&eye, &v).unwrap();
    assert_eq!(y.data(), v.data());
}

#[test]
fn leaky_relu_negative_side_uses_slope() {
    let mut t = Tape::new();
    let x = Tensor::scalar(-1.0).unwrap();
    let y = t.leaky_relu(&x, 0.2).unwrap();
    assert_eq!(y.item(), -0.2);
}

#[test]
fn tanh_at_zero_is_zero() {
    let mut t = Tape::new();
    let y = t.tanh(&Tensor::scalar(0.0).unwrap()).unwrap();
    assert_eq!(y.item(), 0.0);
}

#[test]
fn square_sum_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::vector(vec![3.0]).unwrap());
    let loss = t.square_sum(&x).unwrap();
    let g = t.backward(&loss).unwrap();
    assert_eq!(g.get_or_zeros(&x).data(), &[6.0]);
}

#[test]
fn abs_sum_gradient_is_sign() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::vector(vec![-2.0, 5.0]).unwrap());
    let loss = t.abs_sum(&x).unwrap();
    let g = t.backward(&loss).unwrap();
    assert_eq!(g.get_or_zeros(&x).data(), &[-1.0, 1.0]);
}

#[test]
fn fan_out_sums_contributions() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::vector(vec![1.5]).unwrap());
    let y = t.add(&x, &x).unwrap();
    let loss = t.mean(&y).unwrap();
    let g = t.backward(&loss).unwrap();
    assert_eq!(g.get_or_zeros(&x).data(), &[2.0]);
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::vector(vec![1.0, 2.0]).unwrap());
    let orphan = t.leaf(&Tensor::vector(vec![9.0]).unwrap());
    let loss = t.mean(&x).unwrap();
    let g = t.backward(&loss).unwrap();
    assert_eq!(g.get_or_zeros(&orphan).data(), &[0.0]);
    assert!(g.get(&orphan).is_none());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::vector(vec![1.0, 2.0]).unwrap());
    let y = t.scale(&x, 2.0).unwrap();
    assert!(matches!(t.backward(&y), Err(TensorError::NotScalar(_))));
}

#[test]
fn backward_consumes_the_tape() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::vector(vec![1.0]).unwrap());
    let loss = t.mean(&x).unwrap();
    t.backward(&loss).unwrap();
    assert!(matches!(t.backward(&loss), Err(TensorError::TapeConsumed)));
}

#[test]
fn cross_tape_inputs_rejected() {
    let mut a = Tape::new();
    let mut b = Tape::new();
    let x = a.leaf(&Tensor::scalar(1.0).unwrap());
    assert!(matches!(b.mean(&x), Err(TensorError::TapeMismatch)));
}

#[test]
fn non_finite_op_output_rejected() {
    let mut t = Tape::new();
    let big = Tensor::vector(vec![1e308, 1e308]).unwrap();
    assert!(matches!(t.square_sum(&big), Err(TensorError::NonFinite(_))));
}

/// Three-layer MLP gradient against the finite-difference oracle.
#[test]
fn mlp_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let dims = [4usize, 8, 8, 3];
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for i in 0..3 {
        let w: Vec<f64> = (0..dims[i] * dims[i + 1]).map(|_| rng.gen_range(-0.7..0.7)).collect();
        let b: Vec<f64> = (0..dims[i + 1]).map(|_| rng.gen_range(-0.3..0.3)).collect();
        weights.push(Tensor::new(vec![dims[i], dims[i + 1]], w).unwrap());
        biases.push(Tensor::vector(b).unwrap());
    }
    let target = Tensor::vector((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let forward = |t: &mut Tape, x: &Tensor| -> Result<Tensor, TensorError> {
        let mut cur = x.clone();
        for i in 0..3 {
            let lin = t.matmul(&cur, &weights[i])?;
            cur = t.add(&lin, &biases[i])?;
            if i < 2 {
                cur = t.tanh(&cur)?;
            }
        }
        let d = t.sub(&cur, &target)?;
        let s = t.abs_sum(&d)?;
        t.scale(&s, 1.0 / 3.0)
    };
    let x0 = Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let mut tape = Tape::new();
    let leaf = tape.leaf(&x0);
    let loss = forward(&mut tape, &leaf).unwrap();
    let ad = tape.backward(&loss).unwrap().get_or_zeros(&leaf);
    let fd = finite_diff_grad(
        |probe| {
            let mut t = Tape::new();
            Ok(forward(&mut t, probe)?.item())
        },
        &x0,
        1e-5,
    )
    .unwrap();
    let scale = fd.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
    for (a, f) in ad.data().iter().zip(fd.data()) {
        assert!((a - f).abs() / scale < 1e-4, "{} vs {}", a, f);
    }
}

#[test]
fn matmul_and_conv_are_deterministic_across_calls() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = Tensor::new(vec![17, 13], (0..221).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let b = Tensor::new(vec![13, 9], (0..117).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let x = Tensor::new(vec![3, 2, 8, 8], (0..384).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let w = Tensor::new(vec![4, 2, 3, 3], (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let bias = Tensor::vector(vec![0.1, -0.2, 0.3, 0.4]).unwrap();
    let run = || {
        let mut t = Tape::new();
        let m = t.matmul(&a, &b).unwrap();
        let c = t.conv2d(&x, &w, &bias, 2, 1).unwrap();
        (m, c)
    };
    let (m1, c1) = run();
    let (m2, c2) = run();
    for (p, q) in m1.data().iter().zip(m2.data()) {
        assert_eq!(p.to_bits(), q.to_bits());
    }
    for (p, q) in c1.data().iter().zip(c2.data()) {
        assert_eq!(p.to_bits(), q.to_bits());
    }
}

/// Short randomized sweep over every op kind; the acceptance suite runs
/// the full 100-case version.
#[test]
fn gradient_sweep_all_ops() {
    let reports = verify::gradient_check_all(12, 424242).unwrap();
    assert_eq!(reports.len(), 15);
    for r in &reports {
        assert!(r.max_rel_err < 1e-4, "{}: rel err {}", r.op, r.max_rel_err);
    }
}
