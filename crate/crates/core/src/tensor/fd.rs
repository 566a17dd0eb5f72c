use crate::error::TensorError;

use super::Tensor;

/// Central finite-difference gradient of a scalar-valued function; the
/// independent oracle used by the gradient-correctness tests.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor, TensorError>
where
    F: Fn(&Tensor) -> Result<f64, TensorError>,
{
    if h <= 0.0 {
        return Err(TensorError::Degenerate { op: "finite_diff_grad", detail: format!("h = {}", h) });
    }
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.detached();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::NonFinite("finite_diff_grad"));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0).unwrap();
        let g = finite_diff_grad(|t| Ok(t.item() * t.item()), &x, 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn l1_distance_signs() {
        let target = [1.0, -1.0];
        let x = Tensor::vector(vec![5.0, -6.0]).unwrap();
        let g = finite_diff_grad(
            |t| Ok(t.data().iter().zip(&target).map(|(a, b)| (a - b).abs()).sum()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-9);
        assert!((g.data()[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_h() {
        let x = Tensor::scalar(1.0).unwrap();
        assert!(finite_diff_grad(|t| Ok(t.item()), &x, 0.0).is_err());
    }
}
