use super::{Tape, TensorError, Var};

/// Gate weights of a GRU cell. Each matrix maps the concatenation
/// `[input; hidden]` (width `in + hid`) to `hid` columns.
#[derive(Debug, Clone, Copy)]
pub struct GruWeights {
    pub w_reset: Var,
    pub b_reset: Var,
    pub w_update: Var,
    pub b_update: Var,
    pub w_cand: Var,
    pub b_cand: Var,
}

/// One GRU step over a batch of rows: `x` is `[rows, in]`, `h` is
/// `[rows, hid]`, and the result is the next hidden state.
pub fn gru_cell(tape: &mut Tape, w: &GruWeights, x: Var, h: Var) -> Result<Var, TensorError> {
    let xh = tape.concat(&[x, h], 1)?;
    let r = tape.linear(xh, w.w_reset, Some(w.b_reset))?;
    let r = tape.sigmoid(r);
    let z = tape.linear(xh, w.w_update, Some(w.b_update))?;
    let z = tape.sigmoid(z);
    let rh = tape.mul(r, h)?;
    let xrh = tape.concat(&[x, rh], 1)?;
    let cand = tape.linear(xrh, w.w_cand, Some(w.b_cand))?;
    let cand = tape.tanh(cand);
    let diff = tape.sub(h, cand)?;
    let keep = tape.mul(z, diff)?;
    tape.add(cand, keep)
}
