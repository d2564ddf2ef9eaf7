use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor};
use crate::error::{invalid, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update to every trainable parameter of `store`.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
        if state.m.is_empty() {
            *state = AdamState::for_store(store);
        }
        if state.m.len() != store.len() {
            return Err(invalid(format!(
                "optimizer state holds {} moments for {} parameters",
                state.m.len(),
                store.len()
            )));
        }
        for (i, p) in store.iter().enumerate().filter(|(_, p)| p.requires_grad) {
            let grad = p
                .grad
                .as_ref()
                .ok_or_else(|| invalid(format!("parameter {} has no gradient", p.name)))?;
            if grad.shape() != p.value.shape() || state.m[i].shape() != p.value.shape() {
                return Err(invalid(format!("shape mismatch while updating {}", p.name)));
            }
        }
        state.t += 1;
        for (i, p) in store.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let grad = p.grad.as_ref().expect("checked above");
            adam_step(
                self,
                state.t,
                p.value.data_mut(),
                grad.data(),
                state.m[i].data_mut(),
                state.v[i].data_mut(),
            );
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn for_store(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Bias-corrected Adam update of one tensor at step `t` (1-based).
pub fn adam_step<T: Real>(cfg: &Adam, t: u64, value: &mut [T], grad: &[T], m: &mut [T], v: &mut [T]) {
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    let step = T::from_f64_lossy(cfg.lr / c1);
    let c2_sqrt = T::from_f64_lossy(c2.sqrt());
    let eps = T::from_f64_lossy(cfg.eps);
    for i in 0..value.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        value[i] -= step * m[i] / (v[i].sqrt() / c2_sqrt + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Shape;

    #[test]
    fn first_step_moves_by_lr() {
        // after one step m_hat = g and v_hat = g^2, so the update is lr * sign(g)
        let cfg = Adam::new(0.01);
        let mut value = [1.0f64, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adam_step(&cfg, 1, &mut value, &[3.0, -0.5], &mut m, &mut v);
        assert!((value[0] - 0.99).abs() < 1e-9);
        assert!((value[1] + 1.99).abs() < 1e-9);
    }

    #[test]
    fn matches_reference_sequence() {
        let cfg = Adam::new(0.1);
        let grads = [1.0, -2.0, 0.5];
        let mut x = [0.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        let (mut rm, mut rv, mut rx) = (0.0f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            adam_step(&cfg, t as u64, &mut x, &[g], &mut m, &mut v);
            rm = 0.9 * rm + 0.1 * g;
            rv = 0.999 * rv + 0.001 * g * g;
            let mh = rm / (1.0 - 0.9f64.powi(t));
            let vh = rv / (1.0 - 0.999f64.powi(t));
            rx -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((x[0] - rx).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(Shape::scalar())).unwrap();
        let mut state = AdamState::default();
        assert!(Adam::new(1e-3).step(&mut store, &mut state).is_err());
        store.get_mut(0).grad = Some(Tensor::full(Shape::scalar(), 1.0));
        Adam::new(1e-3).step(&mut store, &mut state).unwrap();
        assert_eq!(state.t, 1);
        assert!((store.get(0).value.value() + 1e-3).abs() < 1e-7);
    }
}
