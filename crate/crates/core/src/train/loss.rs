use crate::tensor::{CustomOp, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("every entry is masked")]
    AllMasked,
    #[error("{preds} predictions vs {targets} targets vs {mask} mask entries")]
    ShapeMismatch { preds: usize, targets: usize, mask: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn kept(tape: &Tape, pred: Var, targets: &[f64], mask: &[f64]) -> Result<usize, LossError> {
    let n = tape.value(pred).len();
    if targets.len() != n || mask.len() != n {
        return Err(LossError::ShapeMismatch {
            preds: n,
            targets: targets.len(),
            mask: mask.len(),
        });
    }
    let count = mask.iter().filter(|&&m| m != 0.0).count();
    if count == 0 {
        return Err(LossError::AllMasked);
    }
    Ok(count)
}

struct MaskedBce {
    targets: Vec<f64>,
    mask: Vec<f64>,
    count: f64,
}

impl CustomOp for MaskedBce {
    fn name(&self) -> &'static str {
        "bce_masked"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = grad[0] / self.count;
        let d = inputs[0]
            .data()
            .iter()
            .zip(&self.targets)
            .zip(&self.mask)
            .map(|((&x, &y), &m)| if m != 0.0 { g * (sigmoid(x) - y) } else { 0.0 })
            .collect();
        vec![Some(d)]
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy with logits over unmasked entries, in the
/// stable form `max(x, 0) - x y + ln(1 + e^-|x|)`.
pub fn bce_masked_loss(tape: &mut Tape, logits: Var, targets: &[f64], mask: &[f64]) -> Result<Var, LossError> {
    let count = kept(tape, logits, targets, mask)? as f64;
    let x = tape.value(logits).data();
    let total: f64 = x
        .iter()
        .zip(targets)
        .zip(mask)
        .filter(|(_, &m)| m != 0.0)
        .map(|((&x, &y), _)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
        .sum();
    let op = MaskedBce {
        targets: targets.to_vec(),
        mask: mask.to_vec(),
        count,
    };
    Ok(tape.custom(&[logits], Tensor::scalar(total / count), Box::new(op)))
}

struct MaskedMse {
    targets: Vec<f64>,
    mask: Vec<f64>,
    count: f64,
}

impl CustomOp for MaskedMse {
    fn name(&self) -> &'static str {
        "mse_masked"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = 2.0 * grad[0] / self.count;
        let d = inputs[0]
            .data()
            .iter()
            .zip(&self.targets)
            .zip(&self.mask)
            .map(|((&p, &t), &m)| if m != 0.0 { g * (p - t) } else { 0.0 })
            .collect();
        vec![Some(d)]
    }
}

/// Mean squared error over unmasked entries.
pub fn mse_loss(tape: &mut Tape, pred: Var, targets: &[f64], mask: &[f64]) -> Result<Var, LossError> {
    let count = kept(tape, pred, targets, mask)? as f64;
    let p = tape.value(pred).data();
    let total: f64 = p
        .iter()
        .zip(targets)
        .zip(mask)
        .filter(|(_, &m)| m != 0.0)
        .map(|((&p, &t), _)| (p - t) * (p - t))
        .sum();
    let op = MaskedMse {
        targets: targets.to_vec(),
        mask: mask.to_vec(),
        count,
    };
    Ok(tape.custom(&[pred], Tensor::scalar(total / count), Box::new(op)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;

    #[test]
    fn bce_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([1], vec![0.0]).unwrap());
        let l = bce_masked_loss(&mut t, x, &[1.0], &[1.0]).unwrap();
        assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let x = t.constant(Tensor::zeros([2]));
        let l = bce_masked_loss(&mut t, x, &[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let x = t.constant(Tensor::new([1], vec![800.0]).unwrap());
        let l = bce_masked_loss(&mut t, x, &[0.0], &[1.0]).unwrap();
        assert_eq!(t.value(l).item(), 800.0);
        assert_eq!(bce_masked_loss(&mut t, x, &[0.0], &[0.0]).unwrap_err(), LossError::AllMasked);
    }

    #[test]
    fn masked_entries_get_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new([3], vec![0.3, -1.2, 2.0]).unwrap(), true);
        let a = bce_masked_loss(&mut t, x, &[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap();
        let b = mse_loss(&mut t, x, &[0.0, 5.0, 1.0], &[0.0, 1.0, 1.0]).unwrap();
        let s = t.add(a, b).unwrap();
        let g = t.backward(s).unwrap();
        let g = g.get(x).unwrap().data();
        assert!(g[0] != 0.0 && g[1] != 0.0 && g[2] != 0.0);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::new([3], vec![0.3, -1.2, 2.0]).unwrap(), true);
        let a = bce_masked_loss(&mut t, x, &[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap();
        let g = t.backward(a).unwrap();
        assert_eq!(g.get(x).unwrap().data()[1], 0.0);
    }

    #[test]
    fn mse_values_and_gradients() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([2], vec![0.0, 2.0]).unwrap());
        let l = mse_loss(&mut t, x, &[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(t.value(l).item(), 1.0);
        let x0 = Tensor::new([4], vec![0.5, -1.0, 2.5, 0.1]).unwrap();
        for (targets, mask) in [([1.0, 0.0, 1.0, 0.0], [1.0, 1.0, 0.0, 1.0]), ([0.2, 0.9, -3.0, 4.0], [1.0; 4])] {
            let e = finite_difference_check(|t, v| Ok(mse_loss(t, v, &targets, &mask).unwrap()), &x0, 1e-5).unwrap();
            assert!(e < 1e-8);
            let bin = targets.map(|v: f64| if v > 0.5 { 1.0 } else { 0.0 });
            let e = finite_difference_check(|t, v| Ok(bce_masked_loss(t, v, &bin, &mask).unwrap()), &x0, 1e-5).unwrap();
            assert!(e < 1e-8);
        }
    }
}
