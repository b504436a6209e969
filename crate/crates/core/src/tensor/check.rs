use super::{Tape, Tensor, TensorError, Var};

/// Compares the tape gradient of a scalar function with central
/// differences of step `h`. Returns the largest
/// `|analytic - numeric| / max(1, |numeric|)` over all input entries.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let eval = |input: Tensor| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let v = tape.leaf(input, false);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let zero = Tensor::zeros(x.shape().to_vec());
    let analytic = grads.get(v).unwrap_or(&zero);

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn exact_gradient_of_a_quadratic() {
        let x = random(&[4], 1);
        let err = finite_difference_check(|t, v| {
            let sq = t.mul(v, v)?;
            Ok(t.sum_all(sq))
        }, &x, 1e-4)
        .unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn contractions_match_triple_loop() {
        let n = 5;
        let f = 3;
        let k = random(&[n, n, f], 80);
        let q = random(&[n, f], 81);
        let mut t = Tape::new();
        let qv = t.constant(q.clone());
        let kv = t.constant(k.clone());
        let out = t.contract_outgoing(qv, kv).unwrap();
        let inc = t.contract_incoming(qv, kv).unwrap();
        for v in 0..n {
            for u in 0..n {
                let mut o = 0.0;
                let mut i = 0.0;
                for c in 0..f {
                    o += q.at(&[v, c]) * k.at(&[v, u, c]);
                    i += q.at(&[v, c]) * k.at(&[u, v, c]);
                }
                assert!((t.value(out).at(&[v, u]) - o).abs() < 1e-12);
                assert!((t.value(inc).at(&[v, u]) - i).abs() < 1e-12);
            }
        }
    }
}
