//! Finite-difference gradient suite over every differentiable primitive and
//! over full encoder losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::featurize::build_featurized;
use crate::model::{Model, ModelConfig, ModelError, ReadoutMode, Task};
use crate::synthetic::random_molecule;
use crate::tensor::{finite_difference_check, gru_cell, GruWeights, Tape, Tensor, TensorError, Var};
use crate::train::{bce_masked_loss, mse_loss, LossError};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const ENCODER_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub op: String,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

type Case = fn() -> Result<f64, TensorError>;

const CASES: &[(&str, f64, Case)] = &[
    ("add", PRIMITIVE_TOLERANCE, add),
    ("sub", PRIMITIVE_TOLERANCE, sub),
    ("mul", PRIMITIVE_TOLERANCE, mul),
    ("scale", PRIMITIVE_TOLERANCE, || primitive(&[3, 4], 5, |t, x| Ok(t.scale(x, -2.5)))),
    ("exp", PRIMITIVE_TOLERANCE, || primitive(&[3, 4], 6, |t, x| Ok(t.exp(x)))),
    ("sigmoid", PRIMITIVE_TOLERANCE, || primitive(&[3, 4], 7, |t, x| Ok(t.sigmoid(x)))),
    ("tanh", PRIMITIVE_TOLERANCE, || primitive(&[3, 4], 8, |t, x| Ok(t.tanh(x)))),
    ("relu", PRIMITIVE_TOLERANCE, || primitive(&[3, 4], 9, |t, x| Ok(t.relu(x)))),
    ("matmul", PRIMITIVE_TOLERANCE, matmul),
    ("linear", PRIMITIVE_TOLERANCE, linear),
    ("concat", PRIMITIVE_TOLERANCE, concat),
    ("sum", PRIMITIVE_TOLERANCE, reductions),
    ("embedding_lookup", PRIMITIVE_TOLERANCE, || {
        primitive(&[4, 3], 46, |t, x| t.embedding_lookup(x, &[2, 0, 2, 3]))
    }),
    ("reshape", PRIMITIVE_TOLERANCE, || primitive(&[2, 6], 47, |t, x| t.reshape(x, &[3, 4]))),
    ("slice_last", PRIMITIVE_TOLERANCE, || primitive(&[3, 5], 48, |t, x| t.slice_last(x, 1, 3))),
    ("broadcast_source", PRIMITIVE_TOLERANCE, || primitive(&[3, 4], 49, |t, x| t.broadcast_source(x))),
    ("broadcast_target", PRIMITIVE_TOLERANCE, || primitive(&[3, 4], 50, |t, x| t.broadcast_target(x))),
    ("softmax_rows", PRIMITIVE_TOLERANCE, softmax),
    ("layer_norm", PRIMITIVE_TOLERANCE, layer_norm),
    ("dropout", PRIMITIVE_TOLERANCE, || {
        primitive(&[4, 6], 55, |t, x| t.dropout(x, 0.4, true, &mut ChaCha8Rng::seed_from_u64(56)))
    }),
    ("contract_outgoing", PRIMITIVE_TOLERANCE, || contraction(true)),
    ("contract_incoming", PRIMITIVE_TOLERANCE, || contraction(false)),
    ("gru_cell", PRIMITIVE_TOLERANCE, gru),
    ("bce_masked_loss", PRIMITIVE_TOLERANCE, || loss_case(true)),
    ("mse_loss", PRIMITIVE_TOLERANCE, || loss_case(false)),
    ("encoder_1_layer", ENCODER_TOLERANCE, || encoder(1, Task::GraphRegression, ReadoutMode::SetSum, 101)),
    ("encoder_3_layer", ENCODER_TOLERANCE, || encoder(3, Task::GraphClassification, ReadoutMode::Sequential, 103)),
];

pub fn op_names() -> Vec<&'static str> {
    CASES.iter().map(|c| c.0).collect()
}

/// Runs every case, or only the one named `op`. An unknown name is an
/// `InvalidArgument` error.
pub fn run(op: Option<&str>) -> Result<Vec<CheckResult>, TensorError> {
    let selected: Vec<_> = CASES.iter().filter(|c| op.is_none_or(|o| o == c.0)).collect();
    if selected.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "gradcheck",
            detail: format!("unknown op {:?}; expected one of {}", op.unwrap_or(""), op_names().join(", ")),
        });
    }
    selected
        .into_iter()
        .map(|&(name, tolerance, case)| {
            Ok(CheckResult {
                op: name.to_string(),
                max_error: case()?,
                tolerance,
            })
        })
        .collect()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.5..1.5))
}

/// Reduces an output with fixed, distinct weights per entry.
fn weighted_sum(t: &mut Tape, y: Var) -> Result<Var, TensorError> {
    let shape = t.shape(y).to_vec();
    let w = t.constant(Tensor::from_fn(shape, |i| ((i as f64) * 0.61).sin() + 0.3));
    let p = t.mul(y, w)?;
    Ok(t.sum_all(p))
}

fn primitive<F>(shape: &[usize], seed: u64, f: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    finite_difference_check(
        |t, v| {
            let y = f(t, v)?;
            weighted_sum(t, y)
        },
        &random(shape, seed),
        STEP,
    )
}

fn worst(errors: &[Result<f64, TensorError>]) -> Result<f64, TensorError> {
    let mut m: f64 = 0.0;
    for e in errors {
        m = m.max(e.clone()?);
    }
    Ok(m)
}

fn with_const<F>(c: &Tensor, f: F) -> impl Fn(&mut Tape, Var) -> Result<Var, TensorError> + '_
where
    F: Fn(&mut Tape, Var, Var) -> Result<Var, TensorError> + 'static,
{
    move |t, x| {
        let cv = t.constant(c.clone());
        f(t, x, cv)
    }
}

fn add() -> Result<f64, TensorError> {
    let other = random(&[3, 4], 99);
    let big = random(&[3, 3, 4], 10);
    worst(&[
        primitive(&[3, 4], 1, with_const(&other, |t, x, o| t.add(x, o))),
        primitive(&[], 14, with_const(&big, |t, x, b| t.add(b, x))),
    ])
}

fn sub() -> Result<f64, TensorError> {
    let other = random(&[3, 4], 99);
    let big = random(&[3, 3, 4], 10);
    worst(&[
        primitive(&[3, 4], 2, with_const(&other, |t, x, o| t.sub(o, x))),
        primitive(&[3], 15, with_const(&big, |t, x, b| t.sub(b, x))),
    ])
}

fn mul() -> Result<f64, TensorError> {
    let other = random(&[3, 4], 99);
    let big = random(&[3, 3, 4], 10);
    let col = random(&[3, 3, 1], 13);
    worst(&[
        primitive(&[3, 4], 3, with_const(&other, |t, x, o| t.mul(x, o))),
        primitive(&[3, 4], 4, |t, x| t.mul(x, x)),
        primitive(&[3, 3], 11, with_const(&big, |t, x, b| t.mul(x, b))),
        primitive(&[3, 3, 4], 12, with_const(&col, |t, x, s| t.mul(x, s))),
    ])
}

fn matmul() -> Result<f64, TensorError> {
    let w = random(&[4, 5], 20);
    let a = random(&[2, 3], 22);
    let bb = random(&[2, 4, 3], 24);
    worst(&[
        primitive(&[3, 4], 21, with_const(&w, |t, x, w| t.matmul(x, w))),
        primitive(&[3, 4], 23, with_const(&a, |t, x, a| t.matmul(a, x))),
        primitive(&[2, 3, 4], 25, with_const(&bb, |t, x, b| t.matmul(x, b))),
    ])
}

fn linear() -> Result<f64, TensorError> {
    let w = random(&[4, 5], 20);
    let bias = random(&[5], 26);
    let inp = random(&[6, 4], 28);
    worst(&[
        primitive(&[2, 3, 4], 27, |t, x| {
            let wv = t.constant(w.clone());
            let bv = t.constant(bias.clone());
            t.linear(x, wv, Some(bv))
        }),
        primitive(&[4, 5], 29, with_const(&inp, |t, x, i| t.linear(i, x, None))),
        primitive(&[5], 30, |t, x| {
            let iv = t.constant(inp.clone());
            let wv = t.constant(w.clone());
            t.linear(iv, wv, Some(x))
        }),
    ])
}

fn concat() -> Result<f64, TensorError> {
    let other = random(&[3, 2], 40);
    worst(&[
        primitive(&[3, 4], 41, with_const(&other, |t, x, o| t.concat(&[o, x, o], 1))),
        primitive(&[3, 4], 42, |t, x| t.concat(&[x, x], 0)),
    ])
}

fn reductions() -> Result<f64, TensorError> {
    worst(&[
        primitive(&[2, 3, 4], 43, |t, x| t.sum(x, 1)),
        primitive(&[2, 3, 4], 44, |t, x| t.mean(x, 2)),
        primitive(&[2, 3], 45, |t, x| Ok(t.sum_all(x))),
    ])
}

fn softmax() -> Result<f64, TensorError> {
    let mask = Tensor::from_fn([3, 5], |i| if i % 3 == 1 { 1.0 } else { 0.0 });
    worst(&[
        primitive(&[3, 5], 60, |t, x| t.softmax_rows(x, None)),
        primitive(&[3, 5], 61, |t, x| t.softmax_rows(x, Some(&mask))),
        primitive(&[2, 4, 4], 59, |t, x| t.softmax_rows(x, None)),
    ])
}

fn layer_norm() -> Result<f64, TensorError> {
    let g = random(&[5], 62);
    let b = random(&[5], 63);
    let inp = random(&[4, 5], 65);
    worst(&[
        primitive(&[4, 5], 64, |t, x| {
            let gv = t.constant(g.clone());
            let bv = t.constant(b.clone());
            t.layer_norm(x, gv, bv, 1e-5)
        }),
        primitive(&[5], 66, |t, x| {
            let iv = t.constant(inp.clone());
            let bv = t.constant(b.clone());
            t.layer_norm(iv, x, bv, 1e-5)
        }),
        primitive(&[5], 67, |t, x| {
            let iv = t.constant(inp.clone());
            let gv = t.constant(g.clone());
            t.layer_norm(iv, gv, x, 1e-5)
        }),
    ])
}

fn contraction(outgoing: bool) -> Result<f64, TensorError> {
    let k = random(&[4, 4, 3], 70);
    let q = random(&[4, 3], 71);
    let op = move |t: &mut Tape, q: Var, k: Var| {
        if outgoing {
            t.contract_outgoing(q, k)
        } else {
            t.contract_incoming(q, k)
        }
    };
    worst(&[
        primitive(&[4, 3], 72, move |t, x| {
            let kv = t.constant(k.clone());
            op(t, x, kv)
        }),
        primitive(&[4, 4, 3], 73, move |t, x| {
            let qv = t.constant(q.clone());
            op(t, qv, x)
        }),
    ])
}

fn gru() -> Result<f64, TensorError> {
    let (fin, hid, rows) = (3, 4, 2);
    let shapes = [
        vec![fin + hid, hid],
        vec![hid],
        vec![fin + hid, hid],
        vec![hid],
        vec![fin + hid, hid],
        vec![hid],
    ];
    let params: Vec<Tensor> = shapes.iter().enumerate().map(|(i, s)| random(s, 90 + i as u64)).collect();
    let input = random(&[rows, fin], 98);
    let h0 = random(&[rows, hid], 97);
    // slot 0..6: a weight, 6: the input, 7: the hidden state
    let build = |t: &mut Tape, x: Var, slot: usize| -> Result<Var, TensorError> {
        let vars: Vec<Var> = params.iter().map(|p| t.constant(p.clone())).collect();
        let pick = |i: usize| if slot == i { x } else { vars[i] };
        let w = GruWeights {
            w_reset: pick(0),
            b_reset: pick(1),
            w_update: pick(2),
            b_update: pick(3),
            w_cand: pick(4),
            b_cand: pick(5),
        };
        let inp = if slot == 6 { x } else { t.constant(input.clone()) };
        let h = if slot == 7 { x } else { t.constant(h0.clone()) };
        gru_cell(t, &w, inp, h)
    };
    let mut errors: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| primitive(s, 90 + i as u64, |t, x| build(t, x, i)))
        .collect();
    errors.push(primitive(&[rows, fin], 98, |t, x| build(t, x, 6)));
    errors.push(primitive(&[rows, hid], 97, |t, x| build(t, x, 7)));
    worst(&errors)
}

fn loss_error(e: LossError) -> TensorError {
    match e {
        LossError::Tensor(e) => e,
        other => TensorError::InvalidArgument {
            op: "loss",
            detail: other.to_string(),
        },
    }
}

fn loss_case(bce: bool) -> Result<f64, TensorError> {
    let x0 = random(&[5], 110);
    let targets = [1.0, 0.0, 1.0, 1.0, 0.0];
    let mask = [1.0, 1.0, 0.0, 1.0, 1.0];
    finite_difference_check(
        |t, v| {
            if bce {
                bce_masked_loss(t, v, &targets, &mask).map_err(loss_error)
            } else {
                mse_loss(t, v, &targets, &mask).map_err(loss_error)
            }
        },
        &x0,
        STEP,
    )
}

fn model_error(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(e) => e,
        other => TensorError::InvalidArgument {
            op: "encoder",
            detail: other.to_string(),
        },
    }
}

/// Checks the gradient of a masked loss with respect to every parameter of
/// a small randomized encoder, on two random 5 to 8 atom molecules.
fn encoder(layers: usize, task: Task, readout: ReadoutMode, seed: u64) -> Result<f64, TensorError> {
    let num_targets = if task == Task::GraphClassification { 2 } else { 1 };
    let config = ModelConfig {
        hidden_dim: 8,
        num_heads: 2,
        num_layers: layers,
        dropout: 0.0,
        readout_mode: readout,
        task,
        num_targets,
        ..ModelConfig::default()
    };
    let mut model = Model::init(config.clone(), seed).map_err(model_error)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params().ids().collect();
    for &id in &ids {
        let shape = model.params().value(id).shape().to_vec();
        model.params_mut().set(id, Tensor::from_fn(shape, |_| rng.gen_range(-0.5..0.5)));
    }
    let mut errors = Vec::new();
    for _ in 0..2 {
        let n = rng.gen_range(5..=8);
        let g = build_featurized(&random_molecule(n, &mut rng), &config.featurizer()).map_err(|e| {
            TensorError::InvalidArgument {
                op: "encoder",
                detail: e.to_string(),
            }
        })?;
        let targets: Vec<f64> = (0..num_targets).map(|_| rng.gen_range(0..2) as f64).collect();
        let mask = vec![1.0; num_targets];
        for &id in &ids {
            errors.push(finite_difference_check(
                |t, v| {
                    let b = model.bind(t, false, Some((id, v)));
                    let out = b.forward(t, &g, None, None).map_err(model_error)?;
                    let loss = if task == Task::GraphClassification {
                        bce_masked_loss(t, out.prediction, &targets, &mask)
                    } else {
                        mse_loss(t, out.prediction, &targets, &mask)
                    };
                    loss.map_err(loss_error)
                },
                model.params().value(id),
                STEP,
            ));
        }
    }
    worst(&errors)
}
