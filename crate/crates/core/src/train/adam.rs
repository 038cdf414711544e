use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ParameterStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments per parameter tensor plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S = f32> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig, shapes: &[Vec<usize>]) -> Result<Self> {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s.clone())).collect::<Result<Vec<_>>>();
        Ok(AdamState {
            config,
            m: zeros()?,
            v: zeros()?,
            t: 0,
        })
    }

    pub fn for_store(config: AdamConfig, store: &ParameterStore<S>) -> Result<Self> {
        Self::new(config, &store.trainable_shapes())
    }

    fn check(&self, index: usize, param: &Tensor<S>, grad: &Tensor<S>, name: &str) -> Result<()> {
        if param.dims() != grad.dims() || self.m[index].dims() != param.dims() {
            return Err(Error::ShapeMismatch {
                op: "adam step",
                left: param.dims().to_vec(),
                right: grad.dims().to_vec(),
            });
        }
        if let Some(at) = grad.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {name} at element {at} is {:?}",
                grad.data()[at].to_f64()
            )));
        }
        Ok(())
    }

    fn update(&mut self, index: usize, param: &mut Tensor<S>, grad: &Tensor<S>) {
        let c = self.config;
        let (b1, b2) = (S::from_f64_lossy(c.beta1), S::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
        let t = self.t as i32;
        let bc1 = S::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = S::from_f64_lossy(1.0 - c.beta2.powi(t));
        let (lr, eps) = (S::from_f64_lossy(c.lr), S::from_f64_lossy(c.epsilon));
        let m = self.m[index].data_mut();
        let v = self.v[index].data_mut();
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// One bias-corrected Adam update of `params` in place. Every gradient is
/// checked before anything is modified.
pub fn adam_step<S: Scalar>(params: &mut [Tensor<S>], grads: &[Tensor<S>], state: &mut AdamState<S>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        state.check(i, p, g, &format!("parameter {i}"))?;
    }
    state.t += 1;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        state.update(i, p, g);
    }
    Ok(())
}

/// [`adam_step`] over the trainable tensors of a store, in slot order.
pub fn adam_step_store<S: Scalar>(
    store: &mut ParameterStore<S>,
    grads: &[Tensor<S>],
    state: &mut AdamState<S>,
) -> Result<()> {
    let n = store.trainable_count();
    if grads.len() != n || state.m.len() != n {
        return Err(Error::invalid(format!(
            "{n} parameters, {} gradients, {} moments",
            grads.len(),
            state.m.len()
        )));
    }
    let names: Vec<String> = store.trainable_names().map(str::to_string).collect();
    for (i, g) in grads.iter().enumerate() {
        state.check(i, store.trainable(i), g, &names[i])?;
    }
    state.t += 1;
    for (i, g) in grads.iter().enumerate() {
        state.update(i, store.trainable_mut(i), g);
    }
    Ok(())
}
