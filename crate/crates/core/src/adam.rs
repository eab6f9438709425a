//! Adam optimizer with per-parameter first/second moment state.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::fmath;
use crate::tensor::Tensor;

/// Adam state for one flat list of parameter tensors. The caller must pass
/// parameters and gradients in the same order on every step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// State for parameters matching the given shapes, with standard
    /// moment decay (0.9 / 0.999) and eps 1e-8.
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moment tensors in slot order, for serialization.
    pub fn slots(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Reassemble state from its serialized parts.
    pub fn from_parts(
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    ) -> Result<Self, String> {
        if m.len() != v.len() {
            return Err(alloc::format!(
                "moment slot counts differ: {} vs {}",
                m.len(),
                v.len()
            ));
        }
        for (k, (a, b)) in m.iter().zip(&v).enumerate() {
            if a.shape() != b.shape() {
                return Err(alloc::format!("moment shapes differ at slot {k}"));
            }
        }
        Ok(AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step,
            m,
            v,
        })
    }

    /// Apply one update in place. `params` and `grads` must line up with the
    /// shapes this state was created with; missing gradients (None) leave the
    /// corresponding parameter and its moments untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - fmath::pow(self.beta1, t);
        let bc2 = 1.0 - fmath::pow(self.beta2, t);
        for (k, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[k] else { continue };
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch at slot {k}");
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                pd[i] -= self.lr * mhat / (fmath::sqrt(vhat) + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// First step moves each coordinate by almost exactly lr, regardless of
    /// gradient magnitude: mhat/sqrt(vhat) = g/|g| up to eps.
    #[test]
    fn first_step_is_signed_lr() {
        let mut p = Tensor::new(1, 3, vec![1.0, -2.0, 0.5]);
        let g = Tensor::new(1, 3, vec![100.0, -0.001, 3.0]);
        let mut adam = AdamState::new(0.1, &[(1, 3)]);
        adam.step(&mut [&mut p], &[Some(&g)]);
        assert!((p.data()[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((p.data()[1] - (-2.0 + 0.1)).abs() < 1e-3);
        assert!((p.data()[2] - (0.5 - 0.1)).abs() < 1e-6);
    }

    /// Two steps with constant gradient 1 on a scalar, lr = 0.1:
    /// hand-computed update sequence.
    #[test]
    fn two_steps_constant_gradient() {
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut adam = AdamState::new(0.1, &[(1, 1)]);

        adam.step(&mut [&mut p], &[Some(&g)]);
        // m=0.1, v=0.001; mhat=1, vhat=1; p = -0.1/(1+1e-8)
        let p1 = -0.1 / (1.0 + 1e-8);
        assert!((p.item() - p1).abs() < 1e-15);

        adam.step(&mut [&mut p], &[Some(&g)]);
        // m=0.19, v=0.001999; bc1=0.19, bc2=0.001999 → mhat=1, vhat=1
        let p2 = p1 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.item() - p2).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_leaves_param_and_step_untouched() {
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(2.0);
        let g = Tensor::scalar(1.0);
        let mut adam = AdamState::new(0.1, &[(1, 1), (1, 1)]);
        adam.step(&mut [&mut a, &mut b], &[None, Some(&g)]);
        assert_eq!(a.item(), 1.0);
        assert!(b.item() < 2.0);
        assert_eq!(adam.step_count(), 1);
    }
}
