//! Adam with bias correction and a step-halving learning-rate schedule.

use crate::error::Result;
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// One update of every trainable parameter from its accumulated gradient.
    /// Gradients are left in place; call [`ParamStore::zero_grads`] before the
    /// next accumulation.
    pub fn step(&self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for i in 0..store.len() {
            let p = store.get_mut(crate::tensor::ParamId(i));
            if p.is_frozen() {
                continue;
            }
            let (value, grad, m, v, step) = p.parts_mut();
            *step += 1;
            let t = *step as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let it = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((x, &g), (mi, vi)) in it {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `base · 0.5^⌊epoch / period⌋`.
pub fn halving_lr(base: f64, epoch: usize, period: usize) -> f64 {
    base * 0.5f64.powi((epoch / period.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::new(vec![2], vec![1.5, -2.0]).unwrap())
            .unwrap();
        Adam::default().step(&mut store, 0.1).unwrap();
        assert_eq!(store.value(id).data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(0.0)).unwrap();
        store.accumulate_grad(id, &Tensor::scalar(1.0)).unwrap();
        Adam::default().step(&mut store, 1e-3).unwrap();
        assert!((store.value(id).item().unwrap() + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0)).unwrap();
        store.freeze_all();
        Adam::default().step(&mut store, 1.0).unwrap();
        assert_eq!(store.value(id).item().unwrap(), 2.0);
        assert_eq!(store.get(id).step(), 0);
    }

    #[test]
    fn schedule_halves_on_period_boundaries() {
        assert_eq!(halving_lr(1e-4, 0, 100), 1e-4);
        assert_eq!(halving_lr(1e-4, 99, 100), 1e-4);
        assert_eq!(halving_lr(1e-4, 100, 100), 5e-5);
        assert_eq!(halving_lr(1e-4, 250, 100), 2.5e-5);
    }
}
