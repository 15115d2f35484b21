use super::Tensor;
use crate::error::{Error, Result};

/// Adam moments and hyperparameters. Constant learning rate, no weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// First-moment buffers, one per parameter (empty until the first step).
    pub m: Vec<Tensor>,
    /// Second-moment buffers.
    pub v: Vec<Tensor>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new(1e-3)
    }
}

impl AdamState {
    pub fn new(lr: f32) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn ensure_buffers(&mut self, params: &[Tensor]) -> Result<()> {
        if self.m.is_empty() && self.v.is_empty() && self.step == 0 {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
            return Ok(());
        }
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::OptimizerStateMismatch(format!(
                "{} moment buffers for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if self.m[i].shape() != p.shape() || self.v[i].shape() != p.shape() {
                return Err(Error::OptimizerStateMismatch(format!(
                    "parameter {i} has shape {:?}, moments {:?}",
                    p.shape(),
                    self.m[i].shape()
                )));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of every parameter from its `grad`.
/// Parameters without a gradient are treated as having a zero gradient.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState) -> Result<()> {
    state.ensure_buffers(params)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (state.beta1 as f64).powi(t);
    let bc2 = 1.0 - (state.beta2 as f64).powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let lr = state.lr;
    for ((p, m), v) in params.iter_mut().zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        let grad = p.grad().map(|g| g.to_vec());
        let (m, v) = (m.data_mut(), v.data_mut());
        match grad {
            Some(g) => {
                for i in 0..g.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                }
            }
            None => {
                m.iter_mut().for_each(|x| *x *= b1);
                v.iter_mut().for_each(|x| *x *= b2);
            }
        }
        let data = p.data_mut();
        for i in 0..data.len() {
            let m_hat = m[i] as f64 / bc1;
            let v_hat = v[i] as f64 / bc2;
            data[i] -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(value: f32, grad: f32) -> Tensor {
        let mut t = Tensor::from_vec(vec![value]);
        t.accumulate_grad(&[grad]).unwrap();
        t
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut params = vec![with_grad(0.7, 0.0), Tensor::from_vec(vec![1.0, -2.0])];
        let before: Vec<Tensor> = params.iter().map(|p| p.detached()).collect();
        let mut state = AdamState::new(1e-3);
        for _ in 0..5 {
            adam_step(&mut params, &mut state).unwrap();
        }
        assert_eq!(state.step, 5);
        for (a, b) in params.iter().zip(&before) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = vec![with_grad(0.0, 1.0)];
        let mut state = AdamState::new(1e-3);
        adam_step(&mut params, &mut state).unwrap();
        assert!((params[0].data()[0] + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn constant_gradient_is_monotone() {
        for g in [2.5f32, -0.3] {
            let mut params = vec![with_grad(1.0, g)];
            let mut state = AdamState::new(1e-3);
            let mut prev = 1.0f32;
            for _ in 0..2 {
                adam_step(&mut params, &mut state).unwrap();
                let now = params[0].data()[0];
                assert!((now - prev) * g.signum() < 0.0);
                prev = now;
            }
        }
    }

    #[test]
    fn shape_drift_is_rejected() {
        let mut state = AdamState::new(1e-3);
        adam_step(&mut [with_grad(0.0, 1.0)], &mut state).unwrap();
        let err = adam_step(&mut [Tensor::zeros(&[2])], &mut state).unwrap_err();
        assert_eq!(err.class(), "optimizer_state_mismatch");
        let err = adam_step(&mut [Tensor::zeros(&[1]), Tensor::zeros(&[1])], &mut state).unwrap_err();
        assert_eq!(err.class(), "optimizer_state_mismatch");
    }
}
