//! Adaptive-moment optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Which update rule to apply. `Sgd` exists for sensitivity runs against the
/// default decoupled-decay Adam rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    AdamW,
    /// Plain gradient descent with an L2 penalty folded into the gradient.
    SgdL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: OptimizerKind::AdamW, lr: 1e-4, weight_decay: 0.2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment accumulators, one pair per parameter, in a fixed parameter order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

/// One parameter slot passed to [`OptimizerState::step`].
pub struct ParamSlot<'a, T> {
    pub name: &'a str,
    pub value: &'a mut Tensor<T>,
    pub grad: &'a Tensor<T>,
    /// False for parameters exempt from weight decay.
    pub decay: bool,
}

impl OptimizerState {
    pub fn new<T: Scalar>(config: OptimizerConfig, shapes: impl IntoIterator<Item = usize>) -> Self {
        let (first, second): (Vec<_>, Vec<_>) = shapes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        OptimizerState { config, step: 0, first, second }
    }

    pub fn num_params(&self) -> usize {
        self.first.len()
    }

    /// Applies one update to every slot. Aborts with the parameter name on a
    /// non-finite gradient, leaving all parameters untouched.
    pub fn step<T: Scalar>(&mut self, slots: &mut [ParamSlot<'_, T>]) -> Result<()> {
        assert_eq!(slots.len(), self.first.len(), "optimizer slot count mismatch");
        for s in slots.iter() {
            if !s.grad.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}` at step {}", s.name, self.step + 1)));
            }
            assert_eq!(s.value.shape(), s.grad.shape(), "gradient shape mismatch for `{}`", s.name);
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, s) in slots.iter_mut().enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            assert_eq!(m.len(), s.value.len(), "moment shape mismatch for `{}`", s.name);
            let wd = if s.decay { c.weight_decay } else { 0.0 };
            for (j, (p, g)) in s.value.data_mut().iter_mut().zip(s.grad.data()).enumerate() {
                let g = g.as_f64();
                let mut x = p.as_f64();
                match c.kind {
                    OptimizerKind::AdamW => {
                        x *= 1.0 - c.lr * wd;
                        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        x -= c.lr * mh / (vh.sqrt() + c.eps);
                    }
                    OptimizerKind::SgdL2 => {
                        x -= c.lr * (g + wd * x);
                    }
                }
                *p = T::of(x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(config: OptimizerConfig, init: f64, grad: f64, steps: usize) -> Vec<f64> {
        let mut state = OptimizerState::new::<f64>(config, [1]);
        let mut p = Tensor::new([1], vec![init]);
        let g = Tensor::new([1], vec![grad]);
        let mut out = Vec::new();
        for _ in 0..steps {
            state.step(&mut [ParamSlot { name: "p", value: &mut p, grad: &g, decay: true }]).unwrap();
            out.push(p.item());
        }
        out
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let cfg = OptimizerConfig { weight_decay: 0.0, ..Default::default() };
        assert_eq!(run(cfg, 0.7, 0.0, 5), vec![0.7; 5]);
    }

    #[test]
    fn decay_alone_shrinks_geometrically() {
        let cfg = OptimizerConfig { lr: 0.01, weight_decay: 0.5, ..Default::default() };
        let seq = run(cfg, 2.0, 0.0, 3);
        for (k, x) in seq.iter().enumerate() {
            let expect = 2.0 * (1.0f64 - 0.01 * 0.5).powi(k as i32 + 1);
            assert!((x - expect).abs() < 1e-15, "{x} vs {expect}");
        }
    }

    #[test]
    fn constant_unit_gradient_matches_hand_recurrence() {
        // Hand-evaluated recurrence with lr = 0.1, w = 0, g = 1:
        // m_t = 1 - 0.9^t, v_t = 1 - 0.999^t, so m_hat = v_hat = 1 and every
        // step moves by lr / (1 + eps).
        let cfg = OptimizerConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let seq = run(cfg, 1.0, 1.0, 3);
        let d = 0.1 / (1.0 + 1e-8);
        let expect = [1.0 - d, 1.0 - 2.0 * d, 1.0 - 3.0 * d];
        for (x, e) in seq.iter().zip(expect) {
            assert!((x - e).abs() < 1e-12, "{x} vs {e}");
        }
    }

    #[test]
    fn nan_gradient_aborts_without_touching_parameters() {
        let mut state = OptimizerState::new::<f32>(OptimizerConfig::default(), [2]);
        let mut p = Tensor::new([2], vec![1.0f32, 2.0]);
        let g = Tensor::new([2], vec![0.5f32, f32::NAN]);
        let err = state.step(&mut [ParamSlot { name: "w", value: &mut p, grad: &g, decay: true }]).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(state.step, 0);
    }
}
