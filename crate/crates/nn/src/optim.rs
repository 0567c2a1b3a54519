use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        Self::with_betas(store, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` is aligned with the store's entries;
    /// `None` leaves the parameter (and its moments) untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(grads.len(), self.m.len(), "gradient list does not match parameter store");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64_lossy(self.lr / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(self.eps);
        for (((param, grad), m), v) in store.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let Some(grad) = grad else { continue };
            for (((p, &g), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                *p -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }
}
