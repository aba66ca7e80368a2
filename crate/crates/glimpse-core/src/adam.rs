//! Adam with bias correction.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

/// Per-parameter Adam state.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step_count: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps_hat: T,
}

impl<T: Real> AdamState<T> {
    /// Defaults beta1=0.9, beta2=0.999, eps_hat=1e-8.
    pub fn new(len: usize, lr: T) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step_count: 0,
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps_hat: T::from_f64(1e-8),
        }
    }
}

/// One Adam update, in place on `param`.
pub fn adam_step<T: Real>(param: &mut [T], grad: &[T], state: &mut AdamState<T>) {
    assert_eq!(param.len(), grad.len(), "gradient length must match parameter");
    assert_eq!(param.len(), state.m.len(), "Adam state length must match parameter");
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = T::one() - state.beta1.powi(t);
    let bc2 = T::one() - state.beta2.powi(t);
    let one = T::one();
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (one - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (one - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] = param[i] - state.lr * m_hat / (v_hat.sqrt() + state.eps_hat);
    }
}
