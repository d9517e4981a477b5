//! Adam optimizer with bias correction. One `AdamState` serves one fixed
//! collection of parameters; first and second moments are kept per
//! coordinate and the step counter is shared across the collection.

use crate::error::{Error, Result};
use crate::nn::Param;

#[derive(Debug, Clone)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    moments: Option<Vec<MomentPair>>,
}

#[derive(Debug, Clone)]
struct MomentPair {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    /// Defaults beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: None,
        }
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            moments: None,
        }
    }

    /// Number of completed steps.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }
}

/// One Adam update over the whole collection. Every parameter must carry a
/// gradient; gradients are consumed. A zero gradient leaves its parameter
/// bit-identical. The step counter advances once per call.
pub fn adam_step(params: &mut [&mut Param], state: &mut AdamState) -> Result<()> {
    let moments = match &mut state.moments {
        Some(m) => {
            if m.len() != params.len() {
                return Err(Error::Contract(format!(
                    "adam_step: state tracks {} parameters, got {}",
                    m.len(),
                    params.len()
                )));
            }
            m
        }
        None => {
            state.moments = Some(
                params
                    .iter()
                    .map(|p| MomentPair {
                        m: vec![0.0; p.value().numel()],
                        v: vec![0.0; p.value().numel()],
                    })
                    .collect(),
            );
            state.moments.as_mut().unwrap()
        }
    };

    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);

    for (p, mom) in params.iter_mut().zip(moments.iter_mut()) {
        let grad = p.take_grad().ok_or_else(|| {
            Error::Contract(format!("adam_step: parameter '{}' has no gradient", p.name()))
        })?;
        if grad.shape() != p.value().shape() {
            return Err(Error::shape(
                "adam_step",
                format!("parameter '{}' grad shape {:?}", p.name(), grad.shape()),
            ));
        }
        if mom.m.len() != grad.numel() {
            return Err(Error::Contract(format!(
                "adam_step: moment size {} does not match parameter '{}'",
                mom.m.len(),
                p.name()
            )));
        }
        let value = p.value_mut().data_mut();
        for (k, &g) in grad.data().iter().enumerate() {
            mom.m[k] = state.beta1 * mom.m[k] + (1.0 - state.beta1) * g;
            mom.v[k] = state.beta2 * mom.v[k] + (1.0 - state.beta2) * g * g;
            // Zero grad with zero moments keeps the exact old value: 0/(0+eps)=0.
            if mom.m[k] != 0.0 || mom.v[k] != 0.0 {
                let m_hat = mom.m[k] / bc1;
                let v_hat = mom.v[k] / bc2;
                value[k] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
            }
        }
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("adam_step on parameter '{}'", p.name())));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(v: Vec<f64>) -> Param {
        let n = v.len();
        Param::new("p", Tensor::new(vec![n], v).unwrap())
    }

    #[test]
    fn zero_grad_is_identity_bitwise() {
        let mut p = param(vec![0.25, -1.75, 3.5]);
        let before = p.value().data().to_vec();
        let mut st = AdamState::new(1e-3);
        p.set_grad(Tensor::zeros(vec![3])).unwrap();
        adam_step(&mut [&mut p], &mut st).unwrap();
        assert_eq!(p.value().data(), &before[..]);
        assert_eq!(st.t(), 1);
    }

    #[test]
    fn first_step_magnitude_is_approximately_lr() {
        // After one step: m_hat = g, v_hat = g^2, delta = lr * g / (|g| + eps).
        let mut p = param(vec![1.0]);
        let mut st = AdamState::new(0.01);
        p.set_grad(Tensor::new(vec![1], vec![0.5]).unwrap()).unwrap();
        adam_step(&mut [&mut p], &mut st).unwrap();
        let delta = 1.0 - p.value().data()[0];
        assert!((delta - 0.01).abs() < 1e-9, "delta {delta}");
    }

    #[test]
    fn converges_on_quadratic() {
        // f(w) = (w - 5)^2 from w = 0, lr = 0.1, 100 steps: lands within 0.5 of 5.
        let mut p = param(vec![0.0]);
        let mut st = AdamState::new(0.1);
        for _ in 0..100 {
            let w = p.value().data()[0];
            p.set_grad(Tensor::new(vec![1], vec![2.0 * (w - 5.0)]).unwrap())
                .unwrap();
            adam_step(&mut [&mut p], &mut st).unwrap();
        }
        let w = p.value().data()[0];
        assert!((w - 5.0).abs() < 0.5, "w = {w}");
        assert_eq!(st.t(), 100);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = param(vec![1.0]);
        let mut st = AdamState::new(0.1);
        assert!(adam_step(&mut [&mut p], &mut st).is_err());
    }

    #[test]
    fn grads_are_consumed_by_the_step() {
        let mut p = param(vec![1.0]);
        let mut st = AdamState::new(0.1);
        p.set_grad(Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        adam_step(&mut [&mut p], &mut st).unwrap();
        assert!(p.grad().is_none());
        // Second call without a fresh grad must fail.
        assert!(adam_step(&mut [&mut p], &mut st).is_err());
    }

    #[test]
    fn parameter_collection_must_stay_fixed() {
        let mut a = param(vec![1.0]);
        let mut b = param(vec![2.0]);
        let mut st = AdamState::new(0.1);
        a.set_grad(Tensor::new(vec![1], vec![0.1]).unwrap()).unwrap();
        b.set_grad(Tensor::new(vec![1], vec![0.1]).unwrap()).unwrap();
        adam_step(&mut [&mut a, &mut b], &mut st).unwrap();
        a.set_grad(Tensor::new(vec![1], vec![0.1]).unwrap()).unwrap();
        assert!(adam_step(&mut [&mut a], &mut st).is_err());
    }
}
