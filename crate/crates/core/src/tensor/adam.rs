//! Adam with bias correction.

use super::{shape_err, Tensor, TensorError};
use crate::scalar::Real;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![T::ZERO; p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::ZERO; p.numel()]).collect(),
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam { lr, ..Adam::default() }
    }

    /// One update of every parameter from its gradient.
    pub fn step<T: Real>(
        &self,
        params: &mut [&mut Tensor<T>],
        grads: &[Vec<T>],
        state: &mut AdamState<T>,
    ) -> Result<(), TensorError> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(shape_err(
                "adam_step",
                format!("{} params, {} grads, {} moment slots", params.len(), grads.len(), state.m.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() || state.m[i].len() != g.len() {
                return Err(shape_err("adam_step", format!("parameter {} has mismatched sizes", i)));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let c1 = T::from_f64(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut state.m[i];
            let v = &mut state.v[i];
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j];
                m[j] = b1 * m[j] + (T::ONE - b1) * gj;
                v[j] = b2 * v[j] + (T::ONE - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::new(vec![3], vec![0.5f64, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&[&p]);
        Adam::default().step(&mut [&mut p], &[vec![0.0; 3]], &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m = 0.1, v = 0.001; bias-corrected both become 1 => step = lr / (1 + eps)
        let mut p = Tensor::new(vec![1], vec![0.0f64]).unwrap();
        let mut st = AdamState::new(&[&p]);
        Adam::with_lr(0.001).step(&mut [&mut p], &[vec![1.0]], &mut st).unwrap();
        let expect = -0.001 / (1.0 + 1e-8);
        assert!((p.data()[0] - expect).abs() < 1e-15, "{}", p.data()[0]);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut p = Tensor::new(vec![4], vec![0.1f64, 0.2, -0.3, 0.4]).unwrap();
            let mut st = AdamState::new(&[&p]);
            for k in 0..25 {
                let g: Vec<f64> = p.data().iter().map(|x| x * (k as f64).sin() + 0.01).collect();
                Adam::default().step(&mut [&mut p], &[g], &mut st).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn mismatched_shapes_error() {
        let mut p = Tensor::new(vec![2], vec![0.0f64, 0.0]).unwrap();
        let mut st = AdamState::new(&[&p]);
        assert!(Adam::default().step(&mut [&mut p], &[vec![1.0]], &mut st).is_err());
    }
}
