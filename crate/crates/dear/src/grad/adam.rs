use crate::error::{DearError, Result};
use crate::grad::tensor::Tensor;

/// Adam with bias correction. One state instance owns the moment estimates
/// for a fixed list of parameter shapes.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)], learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: shapes.iter().map(|&(c, n)| Tensor::zeros(c, n)).collect(),
            v: shapes.iter().map(|&(c, n)| Tensor::zeros(c, n)).collect(),
        }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    pub fn restore(
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        step: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    ) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step,
            m,
            v,
        }
    }

    /// One update over all parameters. `grads[i]` must match `params[i]`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(DearError::LengthMismatch {
                left: params.len(),
                right: self.m.len(),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if !p.same_shape(g) || !p.same_shape(m) {
                return Err(DearError::ShapeMismatch {
                    expected: format!("{:?}", m.shape()),
                    got: format!("{:?}", g.shape()),
                });
            }
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_matches_closed_form() {
        // Single scalar parameter, gradient g: after one step
        //   m = (1-b1) g, v = (1-b2) g^2, m_hat = g, v_hat = g^2,
        //   delta = lr * g / (|g| + eps)  ~= lr * sign(g)
        let lr = 0.01;
        let g = -3.7;
        let mut adam = AdamState::new(&[(1, 1)], lr);
        let mut params = vec![Tensor::scalar(1.0)];
        let grads = vec![Tensor::scalar(g)];
        adam.step(&mut params, &grads).unwrap();
        let expected = 1.0 - lr * g / (g.abs() + 1e-8);
        assert!((params[0].item() - expected).abs() < 1e-12);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut adam = AdamState::new(&[(2, 3)], 0.1);
        let mut params = vec![Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()];
        let before = params[0].clone();
        let grads = vec![Tensor::zeros(2, 3)];
        adam.step(&mut params, &grads).unwrap();
        assert_eq!(params[0], before);
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut adam = AdamState::new(&[(1, 1)], 0.05);
        let mut params = vec![Tensor::scalar(0.0)];
        let grads = vec![Tensor::scalar(2.0)];
        let mut last = 0.0;
        for _ in 0..20 {
            adam.step(&mut params, &grads).unwrap();
            assert!(params[0].item() < last);
            last = params[0].item();
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut adam = AdamState::new(&[(1, 2)], 0.1);
        let mut params = vec![Tensor::zeros(1, 2)];
        let grads = vec![Tensor::zeros(2, 1)];
        assert!(adam.step(&mut params, &grads).is_err());
    }
}
