//! Adam optimizer state and the parameter wrapper used by all networks.

use std::sync::atomic::{AtomicU64, Ordering};

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const ADAM_LR: Real = 1e-3;
pub const ADAM_BETA1: Real = 0.9;
pub const ADAM_BETA2: Real = 0.999;
pub const ADAM_EPSILON: Real = 1e-8;

/// First/second moment accumulators plus the step counter, with the
/// hyper-parameters they were configured with.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub epsilon: Real,
}

impl AdamState {
    pub fn new(shape: &[usize], lr: Real) -> Self {
        AdamState {
            m: Tensor::zeros(shape.to_vec()),
            v: Tensor::zeros(shape.to_vec()),
            t: 0,
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }
}

/// One bias-corrected Adam update. Increments the step counter.
pub fn adam_step(value: &mut Tensor, grad: &Tensor, state: &mut AdamState) -> Result<()> {
    if grad.shape() != value.shape() {
        return Err(Error::shape(
            "adam_step",
            format!("grad {:?} vs param {:?}", grad.shape(), value.shape()),
        ));
    }
    if !grad.all_finite() {
        return Err(Error::Contract("non-finite gradient in adam_step".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.epsilon);
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    let p = value.data_mut();
    for i in 0..p.len() {
        let g = grad.data()[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Stable identity of a parameter across tapes and backward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

/// A named, trainable tensor with its own optimizer state.
#[derive(Clone, Debug)]
pub struct Param {
    id: ParamId,
    name: String,
    value: Tensor,
    state: AdamState,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, lr: Real) -> Self {
        let state = AdamState::new(value.shape(), lr);
        Param {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value,
            state,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::shape(
                "param",
                format!("{:?} vs {:?}", value.shape(), self.value.shape()),
            ));
        }
        self.value = value;
        Ok(())
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut AdamState {
        &mut self.state
    }

    pub fn step_count(&self) -> u64 {
        self.state.t
    }

    pub fn adam_step(&mut self, grad: &Tensor) -> Result<()> {
        adam_step(&mut self.value, grad, &mut self.state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_noop_on_parameters() {
        let mut p = Param::new("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap(), ADAM_LR);
        let before = p.value().clone();
        for _ in 0..5 {
            p.adam_step(&Tensor::zeros(vec![3])).unwrap();
        }
        assert_eq!(p.value().data(), before.data());
        assert_eq!(p.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2, so the first update is exactly -lr * sign(g)
        // up to the epsilon in the denominator.
        let mut p = Param::new("w", Tensor::scalar_value(0.0), ADAM_LR);
        p.adam_step(&Tensor::scalar_value(1.0)).unwrap();
        let got = p.value().data()[0];
        assert!((got + 1e-3).abs() < 1e-8, "got {got}");
    }

    #[test]
    fn constant_gradient_is_monotone() {
        let mut p = Param::new("w", Tensor::scalar_value(1.0), ADAM_LR);
        let mut prev = 1.0;
        for _ in 0..10 {
            p.adam_step(&Tensor::scalar_value(0.3)).unwrap();
            let now = p.value().data()[0];
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut p = Param::new("w", Tensor::scalar_value(0.0), ADAM_LR);
        let err = p.adam_step(&Tensor::scalar_value(Real::NAN));
        assert!(err.is_err());
    }
}
