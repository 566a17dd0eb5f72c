//! Randomized gradient verification: every differentiable op kind is
//! checked against central finite differences on inputs sampled away
//! from non-smooth points.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;

use super::{finite_diff_grad, Tape, Tensor};

/// Outcome of the randomized sweep for one op kind.
#[derive(Debug, Clone)]
pub struct OpCheckReport {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
}

const FD_STEP: f64 = 1e-5;

/// Runs `cases` randomized gradient checks per op kind and reports the
/// worst relative error for each. All checks compare the tape gradient
/// with [`finite_diff_grad`] through an identical pure forward path.
pub fn gradient_check_all(cases: usize, seed: u64) -> Result<Vec<OpCheckReport>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    macro_rules! check {
        ($name:expr, $f:expr) => {{
            let mut worst: f64 = 0.0;
            for _ in 0..cases {
                let e = $f(&mut rng)?;
                worst = worst.max(e);
            }
            reports.push(OpCheckReport { op: $name, cases, max_rel_err: worst });
        }};
    }
    check!("matmul", case_matmul);
    check!("add", case_add);
    check!("mul", case_mul);
    check!("concat", case_concat);
    check!("reshape", case_reshape);
    check!("leaky_relu", case_leaky_relu);
    check!("tanh", case_tanh);
    check!("softplus", case_softplus);
    check!("abs_sum", case_abs_sum);
    check!("square_sum", case_square_sum);
    check!("mean", case_mean);
    check!("conv2d", case_conv2d);
    check!("transpose_conv2d", case_convt2d);
    check!("normalize_batch", case_batchnorm);
    check!("kl_to_uniform_hist", case_kl);
    Ok(reports)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite by construction")
}

/// Uniform values with magnitude at least `margin` (for kinked ops).
fn uniform_away(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(margin..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite by construction")
}

/// Compares tape and finite-difference gradients of `f` w.r.t. `x`.
///
/// `f` maps (tape, x-on-tape) to a scalar tensor; the finite-difference
/// side evaluates the same closure with a tape-less probe, which keeps the
/// forward path identical but unrecorded.
fn compare<F>(x: &Tensor, f: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor, TensorError>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x);
    let loss = f(&mut tape, &leaf)?;
    let grads = tape.backward(&loss)?;
    let ad = grads.get_or_zeros(&leaf);
    let fd = finite_diff_grad(
        |probe| {
            let mut t = Tape::new();
            Ok(f(&mut t, probe)?.item())
        },
        x,
        FD_STEP,
    )?;
    let scale = fd.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
    let err = ad
        .data()
        .iter()
        .zip(fd.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(err / scale)
}

/// Projects a tensor-valued op output to a scalar through a fixed random
/// functional, so the full Jacobian is exercised.
fn project(tape: &mut Tape, y: &Tensor, r: &Tensor) -> Result<Tensor, TensorError> {
    let p = tape.mul(y, r)?;
    tape.mean(&p)
}

fn case_matmul(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let (m, k, n) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
    let variant = rng.gen_range(0..3);
    let (sa, sb): (Vec<usize>, Vec<usize>) = match variant {
        0 => (vec![m, k], vec![k, n]),
        1 => (vec![k], vec![k, n]),
        _ => (vec![m, k], vec![k]),
    };
    let a = uniform(rng, &sa, -2.0, 2.0);
    let b = uniform(rng, &sb, -2.0, 2.0);
    let out_shape: Vec<usize> = match variant {
        0 => vec![m, n],
        1 => vec![n],
        _ => vec![m],
    };
    let r = uniform(rng, &out_shape, -1.0, 1.0);
    let wrt_a = rng.gen_bool(0.5);
    if wrt_a {
        compare(&a, |t, x| {
            let y = t.matmul(x, &b)?;
            project(t, &y, &r)
        })
    } else {
        compare(&b, |t, x| {
            let y = t.matmul(&a, x)?;
            project(t, &y, &r)
        })
    }
}

fn case_add(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    if rng.gen_bool(0.5) {
        let shape = [rng.gen_range(1..5), rng.gen_range(1..5)];
        let a = uniform(rng, &shape, -2.0, 2.0);
        let b = uniform(rng, &shape, -2.0, 2.0);
        let r = uniform(rng, &shape, -1.0, 1.0);
        let wrt_a = rng.gen_bool(0.5);
        let (x0, other) = if wrt_a { (a.clone(), b) } else { (b.clone(), a) };
        compare(&x0, |t, x| {
            let y = if wrt_a { t.add(x, &other)? } else { t.add(&other, x)? };
            project(t, &y, &r)
        })
    } else {
        // broadcast: [rows, cols] + [cols], differentiate the bias
        let (rows, cols) = (rng.gen_range(2..5), rng.gen_range(1..5));
        let a = uniform(rng, &[rows, cols], -2.0, 2.0);
        let b = uniform(rng, &[cols], -2.0, 2.0);
        let r = uniform(rng, &[rows, cols], -1.0, 1.0);
        compare(&b, |t, x| {
            let y = t.add(&a, x)?;
            project(t, &y, &r)
        })
    }
}

fn case_mul(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let shape = [rng.gen_range(1..6)];
    let a = uniform(rng, &shape, -2.0, 2.0);
    let b = uniform(rng, &shape, -2.0, 2.0);
    let r = uniform(rng, &shape, -1.0, 1.0);
    compare(&a, |t, x| {
        let y = t.mul(x, &b)?;
        project(t, &y, &r)
    })
}

fn case_concat(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    if rng.gen_bool(0.5) {
        let (na, nb) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let a = uniform(rng, &[na], -2.0, 2.0);
        let b = uniform(rng, &[nb], -2.0, 2.0);
        let r = uniform(rng, &[a.len() + b.len()], -1.0, 1.0);
        compare(&a, |t, x| {
            let y = t.concat(x, &b, 0)?;
            project(t, &y, &r)
        })
    } else {
        let rows = rng.gen_range(1..4);
        let (ca, cb) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let a = uniform(rng, &[rows, ca], -2.0, 2.0);
        let b = uniform(rng, &[rows, cb], -2.0, 2.0);
        let r = uniform(rng, &[rows, ca + cb], -1.0, 1.0);
        compare(&b, |t, x| {
            let y = t.concat(&a, x, 1)?;
            project(t, &y, &r)
        })
    }
}

fn case_reshape(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let a = uniform(rng, &[2, 6], -2.0, 2.0);
    let r = uniform(rng, &[3, 4], -1.0, 1.0);
    compare(&a, |t, x| {
        let y = t.reshape(x, &[3, 4])?;
        project(t, &y, &r)
    })
}

fn case_leaky_relu(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let n = rng.gen_range(1..8);
    let a = uniform_away(rng, &[n], 1e-3 + 2.0 * FD_STEP);
    let r = uniform(rng, &[a.len()], -1.0, 1.0);
    compare(&a, |t, x| {
        let y = t.leaky_relu(x, 0.2)?;
        project(t, &y, &r)
    })
}

fn case_tanh(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let n = rng.gen_range(1..8);
    let a = uniform(rng, &[n], -2.0, 2.0);
    let r = uniform(rng, &[a.len()], -1.0, 1.0);
    compare(&a, |t, x| {
        let y = t.tanh(x)?;
        project(t, &y, &r)
    })
}

fn case_softplus(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let n = rng.gen_range(1..8);
    let a = uniform(rng, &[n], -4.0, 4.0);
    let r = uniform(rng, &[a.len()], -1.0, 1.0);
    compare(&a, |t, x| {
        let y = t.softplus(x)?;
        project(t, &y, &r)
    })
}

fn case_abs_sum(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let n = rng.gen_range(1..8);
    let a = uniform_away(rng, &[n], 1e-3 + 2.0 * FD_STEP);
    compare(&a, |t, x| t.abs_sum(x))
}

fn case_square_sum(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let n = rng.gen_range(1..8);
    let a = uniform(rng, &[n], -2.0, 2.0);
    compare(&a, |t, x| t.square_sum(x))
}

fn case_mean(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let n = rng.gen_range(1..8);
    let a = uniform(rng, &[n], -2.0, 2.0);
    compare(&a, |t, x| t.mean(x))
}

fn case_conv2d(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let (b, ci, co) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3));
    let (h, w) = (rng.gen_range(4..7), rng.gen_range(4..7));
    let stride = rng.gen_range(1..3);
    let x = uniform(rng, &[b, ci, h, w], -1.0, 1.0);
    let wt = uniform(rng, &[co, ci, 3, 3], -1.0, 1.0);
    let bias = uniform(rng, &[co], -0.5, 0.5);
    let (oh, ow) = ((h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1);
    let r = uniform(rng, &[b, co, oh, ow], -1.0, 1.0);
    let pick = rng.gen_range(0..3);
    let build = |t: &mut Tape, xx: &Tensor, ww: &Tensor, bb: &Tensor| -> Result<Tensor, TensorError> {
        let y = t.conv2d(xx, ww, bb, stride, 1)?;
        let p = t.mul(&y, &r)?;
        t.mean(&p)
    };
    match pick {
        0 => compare(&x, |t, v| build(t, v, &wt, &bias)),
        1 => compare(&wt, |t, v| build(t, &x, v, &bias)),
        _ => compare(&bias, |t, v| build(t, &x, &wt, v)),
    }
}

fn case_convt2d(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let (b, ci, co) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3));
    let (h, w) = (rng.gen_range(3..5), rng.gen_range(3..5));
    let x = uniform(rng, &[b, ci, h, w], -1.0, 1.0);
    let wt = uniform(rng, &[ci, co, 3, 3], -1.0, 1.0);
    let bias = uniform(rng, &[co], -0.5, 0.5);
    let (oh, ow) = (2 * h, 2 * w);
    let r = uniform(rng, &[b, co, oh, ow], -1.0, 1.0);
    let pick = rng.gen_range(0..3);
    let build = |t: &mut Tape, xx: &Tensor, ww: &Tensor, bb: &Tensor| -> Result<Tensor, TensorError> {
        let y = t.conv_transpose2d(xx, ww, bb, 2, 1, 1)?;
        let p = t.mul(&y, &r)?;
        t.mean(&p)
    };
    match pick {
        0 => compare(&x, |t, v| build(t, v, &wt, &bias)),
        1 => compare(&wt, |t, v| build(t, &x, v, &bias)),
        _ => compare(&bias, |t, v| build(t, &x, &wt, v)),
    }
}

fn case_batchnorm(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let training = rng.gen_bool(0.5);
    let rank4 = rng.gen_bool(0.5);
    let shape: Vec<usize> = if rank4 {
        vec![rng.gen_range(2..4), rng.gen_range(1..3), 3, 3]
    } else {
        vec![rng.gen_range(2..6), rng.gen_range(1..4)]
    };
    let feat = shape[1];
    let x = uniform(rng, &shape, -2.0, 2.0);
    let rm: Vec<f64> = (0..feat).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let rv: Vec<f64> = (0..feat).map(|_| rng.gen_range(0.5..1.5)).collect();
    let r = uniform(rng, &shape, -1.0, 1.0);
    compare(&x, |t, v| {
        let (y, _) = t.normalize_batch(v, &rm, &rv, training, 1e-5)?;
        project(t, &y, &r)
    })
}

fn case_kl(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let n = rng.gen_range(4..40);
    let x = uniform(rng, &[n], 0.02, 0.98);
    compare(&x, |t, v| t.kl_to_uniform_hist(v, 16, 0.05))
}
