use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers, one pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> AdamState {
        let zeros = |id| Tensor::zeros(store.value(id).shape().to_vec());
        AdamState {
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with learning rate `lr`.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    config: &AdamConfig,
    lr: f64,
) -> Result<(), TensorError> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(TensorError::InvalidArgument {
            op: "adam_step",
            detail: format!("{} gradients for {} parameters", grads.len(), store.len()),
        });
    }
    for (id, g) in store.ids().zip(grads) {
        if g.shape() != store.value(id).shape() {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "adam_step",
                left: store.value(id).shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (i, (id, g)) in store.ids().zip(grads).enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let p = store.value_mut(id).data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * gj;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] -= lr * mh / (vh.sqrt() + config.eps);
        }
    }
    Ok(())
}
