use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError};
use crate::featurize::{EDGE_FEATURES, NODE_FEATURES};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors in a fixed order. Values are reference counted
/// so forward passes on several threads can share them without copies.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id.0])
    }

    /// Mutable access; copies the tensor first if a tape still holds it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        self.values[id.0] = Arc::new(value);
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ffn1_w: ParamId,
    pub ffn1_b: ParamId,
    pub ffn2_w: ParamId,
    pub ffn2_b: ParamId,
    pub ln_attn_g: ParamId,
    pub ln_attn_b: ParamId,
    pub ln_ffn_g: ParamId,
    pub ln_ffn_b: ParamId,
    pub ln_edge_g: ParamId,
    pub ln_edge_b: ParamId,
    pub diffusion_raw: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub node_w: ParamId,
    pub node_b: ParamId,
    pub edge_w: ParamId,
    pub edge_b: ParamId,
    pub position_table: ParamId,
    pub layers: Vec<LayerParams>,
    /// Reset, update and candidate weights and biases, in that order.
    pub readout: Option<[ParamId; 6]>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

#[derive(Clone, Copy)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

/// Walks the parameter list in canonical order, handing each
/// (name, shape, init) to `register`.
fn build_layout(config: &ModelConfig, register: &mut dyn FnMut(String, Vec<usize>, Init) -> ParamId) -> Layout {
    let f = config.hidden_dim;
    let mut reg = |name: &str, shape: &[usize], init: Init| register(name.to_string(), shape.to_vec(), init);
    let node_w = reg("node_embedding.weight", &[NODE_FEATURES, f], Init::Xavier);
    let node_b = reg("node_embedding.bias", &[f], Init::Zeros);
    let edge_w = reg("edge_embedding.weight", &[EDGE_FEATURES, f], Init::Xavier);
    let edge_b = reg("edge_embedding.bias", &[f], Init::Zeros);
    let position_table = reg("position_table", &[config.max_atoms, f], Init::Zeros);
    let layers = (0..config.num_layers)
        .map(|i| {
            let mut r = |suffix: &str, shape: &[usize], init: Init| reg(&format!("layers.{i}.{suffix}"), shape, init);
            LayerParams {
                wq: r("wq", &[f, f], Init::Xavier),
                wk: r("wk", &[f, f], Init::Xavier),
                wv: r("wv", &[f, f], Init::Xavier),
                wo: r("wo.weight", &[f, f], Init::Xavier),
                bo: r("wo.bias", &[f], Init::Zeros),
                ffn1_w: r("ffn1.weight", &[f, 4 * f], Init::Xavier),
                ffn1_b: r("ffn1.bias", &[4 * f], Init::Zeros),
                ffn2_w: r("ffn2.weight", &[4 * f, f], Init::Xavier),
                ffn2_b: r("ffn2.bias", &[f], Init::Zeros),
                ln_attn_g: r("ln_attn.gain", &[f], Init::Ones),
                ln_attn_b: r("ln_attn.bias", &[f], Init::Zeros),
                ln_ffn_g: r("ln_ffn.gain", &[f], Init::Ones),
                ln_ffn_b: r("ln_ffn.bias", &[f], Init::Zeros),
                ln_edge_g: r("ln_edge.gain", &[f], Init::Ones),
                ln_edge_b: r("ln_edge.bias", &[f], Init::Zeros),
                diffusion_raw: r("diffusion_raw", &[], Init::Zeros),
            }
        })
        .collect();
    let readout = (!config.task.is_node_level()).then(|| {
        [
            reg("readout.w_reset", &[2 * f, f], Init::Xavier),
            reg("readout.b_reset", &[f], Init::Zeros),
            reg("readout.w_update", &[2 * f, f], Init::Xavier),
            reg("readout.b_update", &[f], Init::Zeros),
            reg("readout.w_cand", &[2 * f, f], Init::Xavier),
            reg("readout.b_cand", &[f], Init::Zeros),
        ]
    });
    let head_w = reg("head.weight", &[f, config.num_targets], Init::Xavier);
    let head_b = reg("head.bias", &[config.num_targets], Init::Zeros);
    Layout {
        node_w,
        node_b,
        edge_w,
        edge_b,
        position_table,
        layers,
        readout,
        head_w,
        head_b,
    }
}

pub(crate) fn initialize(config: &ModelConfig, seed: u64) -> (ParamStore, Layout) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layout = build_layout(config, &mut |name, shape, init| {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Xavier => {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                Tensor::from_fn(shape, |_| rng.gen_range(-limit..limit))
            }
        };
        store.push(name, t)
    });
    (store, layout)
}

pub(crate) fn match_store(config: &ModelConfig, store: &ParamStore) -> Result<Layout, ModelError> {
    let mut next = 0;
    let mut problem = None;
    let layout = build_layout(config, &mut |name, shape, _| {
        let id = ParamId(next);
        next += 1;
        if problem.is_none() {
            if id.0 >= store.len() {
                problem = Some(format!("missing parameter {name}"));
            } else if store.name(id) != name || store.value(id).shape() != shape.as_slice() {
                problem = Some(format!(
                    "parameter {} has shape {:?}, config expects {name} with shape {shape:?}",
                    store.name(id),
                    store.value(id).shape()
                ));
            }
        }
        id
    });
    if problem.is_none() && next != store.len() {
        problem = Some(format!("{} stored parameters, config expects {next}", store.len()));
    }
    match problem {
        Some(p) => Err(ModelError::Config(p)),
        None => Ok(layout),
    }
}
