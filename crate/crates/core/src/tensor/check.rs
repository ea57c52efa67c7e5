//! Central-difference gradient checking against the reverse sweep.

use super::{Result, Tape, TensorError, TensorId};

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Max relative error between analytic and central-difference gradients of a
/// scalar-valued graph with respect to one input tensor.
///
/// `build` must be deterministic: it is re-run for every probe, so any
/// stochastic element (noise, dropout) has to be frozen by the caller.
pub fn finite_difference_check<F>(
    x0: &[f64],
    shape: [usize; 2],
    eps: f64,
    mut build: F,
) -> Result<f64>
where
    F: FnMut(&mut Tape, TensorId) -> Result<TensorId>,
{
    let inputs = [("x", shape, x0.to_vec())];
    finite_difference_check_multi(&inputs, eps, |tape, ids| build(tape, ids[0]))
}

/// Multi-input variant: checks the gradient with respect to every listed
/// tensor and returns the worst relative error across all coordinates.
pub fn finite_difference_check_multi<F>(
    inputs: &[(&str, [usize; 2], Vec<f64>)],
    eps: f64,
    mut build: F,
) -> Result<f64>
where
    F: FnMut(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    // analytic gradients
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|(name, shape, vals)| tape.leaf_labeled(*shape, vals.clone(), true, name))
        .collect();
    let root = build(&mut tape, &ids)?;
    if tape.shape(root) != [1, 1] {
        return Err(TensorError::NonScalarRoot {
            got: tape.shape(root),
        });
    }
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, (_, _, vals))| {
            tape.grad(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; vals.len()])
        })
        .collect();

    // numeric probes
    let mut eval = |probe: usize, coord: usize, delta: f64| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<TensorId> = inputs
            .iter()
            .enumerate()
            .map(|(k, (name, shape, vals))| {
                let mut v = vals.clone();
                if k == probe {
                    v[coord] += delta;
                }
                t.leaf_labeled(*shape, v, false, name)
            })
            .collect();
        let root = build(&mut t, &ids)?;
        Ok(t.value_scalar(root))
    };

    let mut worst = 0.0f64;
    for (k, (_, _, vals)) in inputs.iter().enumerate() {
        for i in 0..vals.len() {
            let fp = eval(k, i, eps)?;
            let fm = eval(k, i, -eps)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let e = rel_err(analytic[k][i], numeric);
            if e > worst {
                worst = e;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        // f = sum(x⊙x), df/dx = 2x
        let x0 = vec![1.5, -2.0, 0.0, 3.25];
        let err = finite_difference_check(&x0, [2, 2], 1e-4, |t, x| {
            let sq = t.mul(x, x)?;
            Ok(t.sum_all(sq))
        })
        .unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn multi_input_check_covers_all_tensors() {
        let inputs = [
            ("a", [1, 3], vec![0.4, -0.2, 1.1]),
            ("b", [3, 1], vec![0.9, 0.3, -0.7]),
        ];
        let err = finite_difference_check_multi(&inputs, 1e-4, |t, ids| {
            let p = t.matmul(ids[0], ids[1])?;
            let s = t.sigmoid(p);
            Ok(t.sum_all(s))
        })
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu near a kink: probe straddles x=0 so numeric and analytic differ
        let x0 = vec![1e-6];
        let err = finite_difference_check(&x0, [1, 1], 1e-4, |t, x| {
            let y = t.relu(x);
            Ok(t.sum_all(y))
        })
        .unwrap();
        assert!(err > 0.4, "kink should be visible to the checker, got {err}");
    }
}
