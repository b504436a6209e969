//! The encoder: node and edge embeddings, node-edge message interaction,
//! message diffusion, post-norm residual layers, GRU readout and heads.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use params::{LayerParams, ParamId, ParamStore};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::featurize::{FeaturizedGraph, FeaturizerConfig, EDGE_FEATURES, NODE_FEATURES};
use crate::tensor::{gru_cell, GruWeights, Tape, Tensor, TensorError, Var};
use params::Layout;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagonalMode {
    /// Subtract the identity: rows of the combined matrix sum to one.
    IdentitySubtract,
    /// Subtract the diagonal of the outgoing softmax.
    SoftmaxDiagSubtract,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutMode {
    /// One GRU step per atom from a zero state, outputs summed. Invariant
    /// to atom order.
    SetSum,
    /// A GRU run over atoms in index order, outputs summed.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    GraphClassification,
    GraphRegression,
    NodeRegression,
}

impl Task {
    pub fn is_node_level(self) -> bool {
        self == Task::NodeRegression
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub dropout: f64,
    pub distance_cap: usize,
    pub use_positions: bool,
    pub use_edge_direction: bool,
    pub use_diffusion: bool,
    pub diagonal_mode: DiagonalMode,
    /// Restrict interaction to bonded pairs and self loops.
    pub adjacency_mask: bool,
    pub readout_mode: ReadoutMode,
    /// Fixes every layer's diffusion coefficient instead of learning it.
    pub alpha_override: Option<f64>,
    pub max_atoms: usize,
    pub task: Task,
    pub num_targets: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 128,
            num_heads: 4,
            num_layers: 3,
            dropout: 0.1,
            distance_cap: 10,
            use_positions: true,
            use_edge_direction: true,
            use_diffusion: true,
            diagonal_mode: DiagonalMode::IdentitySubtract,
            adjacency_mask: false,
            readout_mode: ReadoutMode::SetSum,
            alpha_override: None,
            max_atoms: 100,
            task: Task::GraphRegression,
            num_targets: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return bad(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1]", self.dropout));
        }
        if let Some(a) = self.alpha_override {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("alpha_override {a} outside [0, 1]"));
            }
        }
        if self.distance_cap == 0 {
            return bad("distance_cap must be at least 1".into());
        }
        if self.max_atoms == 0 || self.max_atoms > 100 {
            return bad(format!("max_atoms {} outside 1..=100", self.max_atoms));
        }
        if self.num_targets == 0 {
            return bad("num_targets must be at least 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn featurizer(&self) -> FeaturizerConfig {
        FeaturizerConfig {
            distance_cap: self.distance_cap,
            max_atoms: self.max_atoms,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("molecule has {atoms} atoms, model supports at most {max}")]
    TooManyAtoms { atoms: usize, max: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Score matrices of one head in one layer, captured during a forward pass.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    /// Scaled scores against outgoing edges, before softmax.
    pub m_out: Tensor,
    /// Scaled scores against incoming edges, before softmax.
    pub m_in: Tensor,
    /// Combined message matrix before diffusion.
    pub combined: Tensor,
    /// Combined matrix after diffusion (equal to `combined` when off).
    pub diffused: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub alpha: f64,
    pub heads: Vec<HeadTrace>,
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub layers: Vec<LayerTrace>,
}

pub struct Output {
    /// `[num_targets]` for graph tasks, `[n, num_targets]` for node tasks.
    pub prediction: Var,
    /// Final node states `[n, f]`.
    pub node_states: Var,
}

/// Parameters plus the configuration that shaped them.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

/// Parameters recorded on a tape, ready for a forward pass.
pub struct Bound<'m> {
    model: &'m Model,
    vars: Vec<Var>,
}

impl Model {
    /// Fresh model with seeded Xavier-uniform projections, zero biases,
    /// zero position table, unit layer-norm gains and α = 0.5.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model, ModelError> {
        config.validate()?;
        let (store, layout) = params::initialize(&config, seed);
        Ok(Model { config, store, layout })
    }

    /// Wraps stored parameters, checking names and shapes against `config`.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Model, ModelError> {
        config.validate()?;
        let layout = params::match_store(&config, &store)?;
        Ok(Model { config, store, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn layer_params(&self, layer: usize) -> &LayerParams {
        &self.layout.layers[layer]
    }

    pub fn position_table(&self) -> ParamId {
        self.layout.position_table
    }

    pub fn edge_embedding_weight(&self) -> ParamId {
        self.layout.edge_w
    }

    pub fn head_weight(&self) -> ParamId {
        self.layout.head_w
    }

    pub fn head_bias(&self) -> ParamId {
        self.layout.head_b
    }

    /// Current α of every layer.
    pub fn alphas(&self) -> Vec<f64> {
        self.layout
            .layers
            .iter()
            .map(|l| {
                self.config
                    .alpha_override
                    .unwrap_or_else(|| sigmoid(self.store.value(l.diffusion_raw).item()))
            })
            .collect()
    }

    /// Records every parameter on `tape`. `substitute` replaces one
    /// parameter by an existing variable, which gradient checks use.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool, substitute: Option<(ParamId, Var)>) -> Bound<'_> {
        let vars = (0..self.store.len())
            .map(|i| match substitute {
                Some((id, v)) if id.0 == i => v,
                _ => tape.leaf_shared(self.store.shared(ParamId(i)), requires_grad),
            })
            .collect();
        Bound { model: self, vars }
    }

    /// Inference-mode forward pass returning plain prediction values.
    pub fn predict(&self, g: &FeaturizedGraph) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false, None);
        let out = bound.forward(&mut tape, g, None, None)?;
        Ok(tape.value(out.prediction).clone())
    }

    pub fn trace(&self, g: &FeaturizedGraph) -> Result<(Tensor, Trace), ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false, None);
        let mut trace = Trace::default();
        let out = bound.forward(&mut tape, g, None, Some(&mut trace))?;
        Ok((tape.value(out.prediction).clone(), trace))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `M_o[v,u] = q_v . k_(v,u) / sqrt(d)` and `M_i[v,u] = q_v . k_(u,v) / sqrt(d)`.
pub fn interaction_scores(tape: &mut Tape, q: Var, k: Var) -> Result<(Var, Var), TensorError> {
    let d = tape.shape(q)[1] as f64;
    let scale = 1.0 / d.sqrt();
    let mo = tape.contract_outgoing(q, k)?;
    let mi = tape.contract_incoming(q, k)?;
    Ok((tape.scale(mo, scale), tape.scale(mi, scale)))
}

/// Row-softmaxes both score matrices and removes the doubly counted
/// self-loop term.
pub fn combine_messages(
    tape: &mut Tape,
    m_out: Var,
    m_in: Var,
    mode: DiagonalMode,
    mask: Option<&Tensor>,
) -> Result<Var, TensorError> {
    let n = tape.shape(m_out)[0];
    let so = tape.softmax_rows(m_out, mask)?;
    let si = tape.softmax_rows(m_in, mask)?;
    let both = tape.add(so, si)?;
    let eye = tape.constant(Tensor::identity(n));
    let self_loop = match mode {
        DiagonalMode::IdentitySubtract => eye,
        DiagonalMode::SoftmaxDiagSubtract => tape.mul(so, eye)?,
    };
    tape.sub(both, self_loop)
}

/// `M'[u,v] = M[u,v] * exp(-alpha * A[u,v])`.
pub fn apply_diffusion(tape: &mut Tape, m: Var, a: &Tensor, alpha: Var) -> Result<Var, TensorError> {
    let neg_a = tape.constant(Tensor::from_fn(a.shape().to_vec(), |i| -a.data()[i]));
    let exponent = tape.mul(neg_a, alpha)?;
    let decay = tape.exp(exponent);
    tape.mul(m, decay)
}

/// Node delta `M V` and edge delta `M[u,v] * K[u,v,:]`.
pub fn update_states(tape: &mut Tape, m: Var, v: Var, k: Var) -> Result<(Var, Var), TensorError> {
    let node = tape.matmul(m, v)?;
    let edge = tape.mul(m, k)?;
    Ok((node, edge))
}

fn adjacency_mask(a: &Tensor) -> Tensor {
    Tensor::from_fn(a.shape().to_vec(), |i| if a.data()[i] <= 1.0 { 0.0 } else { 1.0 })
}

impl Bound<'_> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// Projects `[n, 115]` node features to width `f` and adds the learned
    /// position rows when enabled.
    pub fn embed_nodes(&self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        let n = tape.shape(x)[0];
        if n > self.config().max_atoms {
            return Err(ModelError::TooManyAtoms {
                atoms: n,
                max: self.config().max_atoms,
            });
        }
        let l = &self.model.layout;
        let h = tape.linear(x, self.var(l.node_w), Some(self.var(l.node_b)))?;
        if !self.config().use_positions {
            return Ok(h);
        }
        let idx: Vec<usize> = (0..n).collect();
        let pos = tape.embedding_lookup(self.var(l.position_table), &idx)?;
        Ok(tape.add(h, pos)?)
    }

    /// Edge states: projected bond features plus the source node state, or
    /// the mean of both endpoint states when direction is ignored.
    pub fn embed_edges(&self, tape: &mut Tape, e: Var, hx: Var) -> Result<Var, ModelError> {
        let (se, sx) = (tape.shape(e).to_vec(), tape.shape(hx).to_vec());
        if se.len() != 3 || sx.len() != 2 || se[0] != sx[0] || se[1] != sx[0] || se[2] != EDGE_FEATURES {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "embed_edges",
                left: se,
                right: sx,
            }
            .into());
        }
        let l = &self.model.layout;
        let base = tape.linear(e, self.var(l.edge_w), Some(self.var(l.edge_b)))?;
        let src = tape.broadcast_source(hx)?;
        let node_term = if self.config().use_edge_direction {
            src
        } else {
            let dst = tape.broadcast_target(hx)?;
            let both = tape.add(src, dst)?;
            tape.scale(both, 0.5)
        };
        Ok(tape.add(base, node_term)?)
    }

    /// Queries and values from node states, keys from edge states, for
    /// head `head` (columns `head * d .. (head + 1) * d`).
    pub fn project_qkv(
        &self,
        tape: &mut Tape,
        hx: Var,
        he: Var,
        layer: usize,
        head: usize,
    ) -> Result<(Var, Var, Var), ModelError> {
        let p = &self.model.layout.layers[layer];
        let d = self.config().head_dim();
        let q = tape.linear(hx, self.var(p.wq), None)?;
        let k = tape.linear(he, self.var(p.wk), None)?;
        let v = tape.linear(hx, self.var(p.wv), None)?;
        Ok((
            tape.slice_last(q, head * d, d)?,
            tape.slice_last(k, head * d, d)?,
            tape.slice_last(v, head * d, d)?,
        ))
    }

    /// Diffusion coefficient of `layer` as a tape scalar.
    pub fn alpha(&self, tape: &mut Tape, layer: usize) -> Var {
        match self.config().alpha_override {
            Some(a) => tape.constant(Tensor::scalar(a)),
            None => {
                let raw = self.var(self.model.layout.layers[layer].diffusion_raw);
                tape.sigmoid(raw)
            }
        }
    }

    /// One encoder layer over `(hX, hE)`.
    pub fn encoder_layer(
        &self,
        tape: &mut Tape,
        (hx, he): (Var, Var),
        a: &Tensor,
        layer: usize,
        mut rng: Option<&mut ChaCha8Rng>,
        trace: Option<&mut Trace>,
    ) -> Result<(Var, Var), ModelError> {
        let cfg = self.config();
        let p = &self.model.layout.layers[layer];
        let (f, d, heads) = (cfg.hidden_dim, cfg.head_dim(), cfg.num_heads);
        let mask = cfg.adjacency_mask.then(|| adjacency_mask(a));

        let q_all = tape.linear(hx, self.var(p.wq), None)?;
        let k_all = tape.linear(he, self.var(p.wk), None)?;
        let v_all = tape.linear(hx, self.var(p.wv), None)?;
        let alpha = cfg.use_diffusion.then(|| self.alpha(tape, layer));

        let mut node_parts = Vec::with_capacity(heads);
        let mut edge_parts = Vec::with_capacity(heads);
        let mut head_traces = Vec::new();
        for h in 0..heads {
            let q = tape.slice_last(q_all, h * d, d)?;
            let k = tape.slice_last(k_all, h * d, d)?;
            let v = tape.slice_last(v_all, h * d, d)?;
            let (mo, mi) = interaction_scores(tape, q, k)?;
            let m = combine_messages(tape, mo, mi, cfg.diagonal_mode, mask.as_ref())?;
            let md = match alpha {
                Some(alpha) => apply_diffusion(tape, m, a, alpha)?,
                None => m,
            };
            if trace.is_some() {
                head_traces.push(HeadTrace {
                    m_out: tape.value(mo).clone(),
                    m_in: tape.value(mi).clone(),
                    combined: tape.value(m).clone(),
                    diffused: tape.value(md).clone(),
                });
            }
            let (dn, de) = update_states(tape, md, v, k)?;
            node_parts.push(dn);
            edge_parts.push(de);
        }
        if let Some(trace) = trace {
            let alpha = alpha.map_or(0.0, |v| tape.value(v).item());
            trace.layers.push(LayerTrace {
                alpha,
                heads: head_traces,
            });
        }

        let rate = cfg.dropout;
        let mut drop = |tape: &mut Tape, v: Var| -> Result<Var, TensorError> {
            match rng.as_deref_mut() {
                Some(r) => tape.dropout(v, rate, true, r),
                None => Ok(v),
            }
        };

        let attn = tape.concat(&node_parts, 1)?;
        let attn = tape.linear(attn, self.var(p.wo), Some(self.var(p.bo)))?;
        let attn = drop(tape, attn)?;
        let hx1 = tape.add(hx, attn)?;
        let hx1 = tape.layer_norm(hx1, self.var(p.ln_attn_g), self.var(p.ln_attn_b), LN_EPS)?;

        let ff = tape.linear(hx1, self.var(p.ffn1_w), Some(self.var(p.ffn1_b)))?;
        let gate = tape.sigmoid(ff);
        let ff = tape.mul(ff, gate)?;
        let ff = tape.linear(ff, self.var(p.ffn2_w), Some(self.var(p.ffn2_b)))?;
        let ff = drop(tape, ff)?;
        let hx2 = tape.add(hx1, ff)?;
        let hx2 = tape.layer_norm(hx2, self.var(p.ln_ffn_g), self.var(p.ln_ffn_b), LN_EPS)?;

        let edge = tape.concat(&edge_parts, 2)?;
        debug_assert_eq!(tape.shape(edge)[2], f);
        let edge = drop(tape, edge)?;
        let he1 = tape.add(he, edge)?;
        let he1 = tape.layer_norm(he1, self.var(p.ln_edge_g), self.var(p.ln_edge_b), LN_EPS)?;
        Ok((hx2, he1))
    }

    /// Sums GRU outputs over atoms into one `[f]` vector.
    pub fn readout(&self, tape: &mut Tape, hx: Var) -> Result<Var, ModelError> {
        let l = &self.model.layout;
        let r = l.readout.as_ref().expect("graph task has readout params");
        let w = GruWeights {
            w_reset: self.var(r[0]),
            b_reset: self.var(r[1]),
            w_update: self.var(r[2]),
            b_update: self.var(r[3]),
            w_cand: self.var(r[4]),
            b_cand: self.var(r[5]),
        };
        let (n, f) = (tape.shape(hx)[0], tape.shape(hx)[1]);
        match self.config().readout_mode {
            ReadoutMode::SetSum => {
                let h0 = tape.constant(Tensor::zeros([n, f]));
                let out = gru_cell(tape, &w, hx, h0)?;
                Ok(tape.sum(out, 0)?)
            }
            ReadoutMode::Sequential => {
                let mut h = tape.constant(Tensor::zeros([1, f]));
                let mut outputs = Vec::with_capacity(n);
                for i in 0..n {
                    let x = tape.embedding_lookup(hx, &[i])?;
                    h = gru_cell(tape, &w, x, h)?;
                    outputs.push(h);
                }
                let all = tape.concat(&outputs, 0)?;
                Ok(tape.sum(all, 0)?)
            }
        }
    }

    /// Full forward pass. Passing `rng` enables dropout (training mode).
    pub fn forward(
        &self,
        tape: &mut Tape,
        g: &FeaturizedGraph,
        mut rng: Option<&mut ChaCha8Rng>,
        mut trace: Option<&mut Trace>,
    ) -> Result<Output, ModelError> {
        let n = g.atom_count();
        if n > self.config().max_atoms {
            return Err(ModelError::TooManyAtoms {
                atoms: n,
                max: self.config().max_atoms,
            });
        }
        debug_assert_eq!(g.x.shape(), &[n, NODE_FEATURES]);
        let x = tape.constant(g.x.clone());
        let e = tape.constant(g.e.clone());
        let hx = self.embed_nodes(tape, x)?;
        let he = self.embed_edges(tape, e, hx)?;
        let mut state = (hx, he);
        for layer in 0..self.config().num_layers {
            state = self.encoder_layer(tape, state, &g.a, layer, rng.as_deref_mut(), trace.as_deref_mut())?;
        }
        let l = &self.model.layout;
        let (hw, hb) = (self.var(l.head_w), self.var(l.head_b));
        let prediction = if self.config().task.is_node_level() {
            tape.linear(state.0, hw, Some(hb))?
        } else {
            let z = self.readout(tape, state.0)?;
            tape.linear(z, hw, Some(hb))?
        };
        Ok(Output {
            prediction,
            node_states: state.0,
        })
    }
}
