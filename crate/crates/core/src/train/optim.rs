//! Adaptive-moment optimizer with decoupled weight decay. Moments live in
//! the run dtype and are checkpointed, so resumed runs continue bit-exactly.

use crate::autodiff::{ParamId, ParamStore, Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let zeros: Vec<Tensor<S>> = store
            .iter()
            .map(|(_, _, val)| Tensor::zeros(val.rows(), val.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Advance the shared timestep; call once per training step before any
    /// `update`.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Apply one update to the listed parameters from their accumulated
    /// gradients.
    pub fn update(&mut self, store: &mut ParamStore<S>, ids: &[ParamId], lr: f64, weight_decay: f64) {
        let b1 = S::from_f64(ADAM_BETA1);
        let b2 = S::from_f64(ADAM_BETA2);
        let one = S::one();
        let eps = S::from_f64(ADAM_EPS);
        let bc1 = S::from_f64(1.0 - ADAM_BETA1.powi(self.t as i32));
        let bc2 = S::from_f64(1.0 - ADAM_BETA2.powi(self.t as i32));
        let lr_s = S::from_f64(lr);
        let wd = S::from_f64(weight_decay);
        for &id in ids {
            let grad = store.grad(id).clone();
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let value = store.value_mut(id);
            for i in 0..grad.numel() {
                let g = grad.data()[i];
                let mi = b1 * m.data()[i] + (one - b1) * g;
                let vi = b2 * v.data()[i] + (one - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let p = value.data()[i];
                value.data_mut()[i] = p - lr_s * (mhat / (vhat.sqrt() + eps) + wd * p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store
            .register("x", Tensor::from_f64_slice(1, 2, &[3.0, -2.0]).unwrap())
            .unwrap();
        let mut opt = Adam::new(&store);
        for _ in 0..500 {
            store.zero_grads();
            let x = store.value(id).clone();
            for i in 0..2 {
                store.grad_mut(id).data_mut()[i] = 2.0 * x.data()[i];
            }
            opt.begin_step();
            opt.update(&mut store, &[id], 0.05, 0.0);
        }
        for &v in store.value(id).data() {
            assert!(v.abs() < 1e-2, "did not converge: {v}");
        }
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store
            .register("x", Tensor::from_f64_slice(1, 1, &[1.0]).unwrap())
            .unwrap();
        let mut opt = Adam::new(&store);
        opt.begin_step();
        opt.update(&mut store, &[id], 0.1, 0.01);
        let v = store.value(id).item();
        assert!(v < 1.0 && v > 0.99, "decoupled decay only: {v}");
    }
}
