//! First-order optimizers: plain SGD and bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state: hyperparameters, per-parameter moment buffers, and a step
/// counter that increases by exactly one per [`OptimizerState::step`].
#[derive(Debug, Clone)]
pub struct OptimizerState<S: Scalar = f32> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step_count: u64,
    pub first_moments: Vec<Tensor<S>>,
    pub second_moments: Vec<Tensor<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            step_count: 0,
            first_moments: Vec::new(),
            second_moments: Vec::new(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::adam_default(),
            learning_rate,
            step_count: 0,
            first_moments: Vec::new(),
            second_moments: Vec::new(),
        }
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            step_count: 0,
            first_moments: Vec::new(),
            second_moments: Vec::new(),
        }
    }

    /// Applies one update. Parameters are replaced by freshly built tensors;
    /// moment buffers are lazily initialized to match parameter shapes.
    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer_step: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.dims() != g.dims() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: p.dims().to_vec(),
                    rhs: g.dims().to_vec(),
                });
            }
        }
        self.step_count += 1;
        let lr = S::from_f64(self.learning_rate);

        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    let data = p
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&pv, &gv)| pv - lr * gv)
                        .collect();
                    *p = Tensor::from_vec(p.dims().to_vec(), data)?;
                    p.check_finite("sgd step")?;
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                if self.first_moments.is_empty() {
                    self.first_moments = params.iter().map(|p| Tensor::zeros(p.dims())).collect();
                    self.second_moments = params.iter().map(|p| Tensor::zeros(p.dims())).collect();
                }
                let b1 = S::from_f64(beta1);
                let b2 = S::from_f64(beta2);
                let eps = S::from_f64(epsilon);
                let t = self.step_count as i32;
                let bc1 = S::ONE - b1.powi(t);
                let bc2 = S::ONE - b2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first_moments[i];
                    let v = &mut self.second_moments[i];
                    let mut new_p = Vec::with_capacity(p.numel());
                    let mut new_m = Vec::with_capacity(p.numel());
                    let mut new_v = Vec::with_capacity(p.numel());
                    for ((&pv, &gv), (&mv, &vv)) in p
                        .data()
                        .iter()
                        .zip(g.data())
                        .zip(m.data().iter().zip(v.data()))
                    {
                        let m_next = b1 * mv + (S::ONE - b1) * gv;
                        let v_next = b2 * vv + (S::ONE - b2) * gv * gv;
                        let m_hat = m_next / bc1;
                        let v_hat = v_next / bc2;
                        new_p.push(pv - lr * m_hat / (v_hat.sqrt() + eps));
                        new_m.push(m_next);
                        new_v.push(v_next);
                    }
                    *p = Tensor::from_vec(p.dims().to_vec(), new_p)?;
                    p.check_finite("adam step")?;
                    *m = Tensor::from_vec(m.dims().to_vec(), new_m)?;
                    *v = Tensor::from_vec(v.dims().to_vec(), new_v)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> Tensor<f32> {
        Tensor::scalar(v)
    }

    #[test]
    fn sgd_basic_update() {
        let mut opt = OptimizerState::sgd(0.1);
        let mut params = vec![one(1.0)];
        opt.step(&mut params, &[one(1.0)]).unwrap();
        assert!((params[0].item() - 0.9).abs() < 1e-7);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_param() {
        let mut opt = OptimizerState::adam(0.01);
        let mut params = vec![one(3.0)];
        opt.step(&mut params, &[one(0.0)]).unwrap();
        assert_eq!(params[0].item(), 3.0);
    }

    #[test]
    fn adam_first_step_moves_by_about_lr() {
        // Hand evaluation at t=1, g=1: m_hat = 1, v_hat = 1,
        // delta = lr * 1 / (1 + eps) ~ lr.
        let mut opt = OptimizerState::adam(0.01);
        let mut params = vec![one(1.0)];
        opt.step(&mut params, &[one(1.0)]).unwrap();
        let delta = 1.0 - params[0].item();
        assert!((delta - 0.01).abs() < 1e-6, "delta = {delta}");
    }

    #[test]
    fn step_counter_strictly_increases() {
        let mut opt = OptimizerState::<f32>::adam(0.01);
        let mut params = vec![one(1.0)];
        for expect in 1..=5u64 {
            opt.step(&mut params, &[one(0.5)]).unwrap();
            assert_eq!(opt.step_count, expect);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut opt = OptimizerState::sgd(0.1);
        let mut params = vec![Tensor::<f32>::zeros(&[2])];
        let grads = vec![Tensor::<f32>::zeros(&[3])];
        assert!(opt.step(&mut params, &grads).is_err());
    }
}
