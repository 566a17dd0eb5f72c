use std::collections::BTreeMap;

use crate::error::TensorError;

use super::Tensor;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam optimizer state: first/second moment buffers per named parameter
/// plus a shared step counter.
///
/// The counter advances once per [`AdamState::begin_step`], not per tensor,
/// so bias correction is consistent across a parameter group.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub hyper: AdamHyper,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(hyper: AdamHyper) -> Self {
        AdamState { hyper, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter; call once before updating the
    /// parameter group for this optimization step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one Adam update to `param` in place.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<(), TensorError> {
        if param.shape() != grad.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
            });
        }
        if !grad.all_finite() {
            return Err(TensorError::NonFinite("adam_step"));
        }
        assert!(self.step > 0, "begin_step must run before update");
        let n = param.len();
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        if m.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!("moment buffer {} vs param {}", m.len(), n),
            });
        }
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.step as i32);
        let bc2 = 1.0 - h.beta2.powi(self.step as i32);
        let data = param.data_mut();
        for i in 0..n {
            let g = grad.data()[i];
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= h.lr * mhat / (vhat.sqrt() + h.eps);
        }
        Ok(())
    }
}

/// Standalone Adam step over a named parameter list; thin wrapper used by
/// the trainers.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [(String, &mut Tensor)],
    grads: &[Tensor],
) -> Result<(), TensorError> {
    if params.len() != grads.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            detail: format!("{} params vs {} grads", params.len(), grads.len()),
        });
    }
    state.begin_step();
    for ((name, param), grad) in params.iter_mut().zip(grads) {
        state.update(name, param, grad)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut st = AdamState::new(AdamHyper::default());
        let mut p = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let g = Tensor::vector(vec![0.0, 0.0]).unwrap();
        st.begin_step();
        st.update("p", &mut p, &g).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn single_step_unit_gradient_moves_by_lr() {
        // m_hat = v_hat = 1 at t = 1, so the update is -lr/(1 + eps).
        let h = AdamHyper { lr: 0.1, ..AdamHyper::default() };
        let mut st = AdamState::new(h);
        let mut p = Tensor::scalar(0.0).unwrap();
        let g = Tensor::scalar(1.0).unwrap();
        st.begin_step();
        st.update("p", &mut p, &g).unwrap();
        let expect = -h.lr / (1.0 + h.eps);
        assert!((p.item() - expect).abs() < 1e-15, "{} vs {}", p.item(), expect);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let h = AdamHyper { lr: 0.01, ..AdamHyper::default() };
        let mut st = AdamState::new(h);
        let mut p = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let g = Tensor::vector(vec![2.5, -0.3]).unwrap();
        for _ in 0..50 {
            st.begin_step();
            st.update("p", &mut p, &g).unwrap();
        }
        assert!(p.data()[0] < 0.0);
        assert!(p.data()[1] > 0.0);
        assert_eq!(st.step_count(), 50);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut st = AdamState::new(AdamHyper::default());
        let mut p = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let g = Tensor::vector(vec![1.0]).unwrap();
        st.begin_step();
        assert!(st.update("p", &mut p, &g).is_err());
    }
}
