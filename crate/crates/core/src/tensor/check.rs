//! Central finite-difference gradient verification.

use crate::error::{CoreError, Result};

use super::{Tape, Tensor, TensorId};

pub const GRAD_CHECK_H: f64 = 1e-5;
pub const GRAD_CHECK_TOL: f64 = 1e-4;

/// Compare tape gradients of a scalar-valued function against central
/// finite differences, coordinate by coordinate, over every input tensor.
///
/// Returns the maximum relative error `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &ids)?;
    if tape.value(out).numel() != 1 {
        return Err(CoreError::shape("grad_check function must return a scalar"));
    }
    if !tape.value(out).item().is_finite() {
        return Err(CoreError::NonFinite("grad_check forward"));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| {
            tape.grad(*id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(*id).numel()])
        })
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::no_grad();
        let ids: Vec<TensorId> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = f(&mut t, &ids)?;
        let v = t.value(out).item();
        if !v.is_finite() {
            return Err(CoreError::NonFinite("grad_check probe"));
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ci in 0..input.numel() {
            let base = input.data().to_vec();
            let mut plus = base.clone();
            plus[ci] += h;
            probe[ti] = Tensor::new(input.shape().to_vec(), plus);
            let fp = eval(&probe)?;
            let mut minus = base;
            minus[ci] -= h;
            probe[ti] = Tensor::new(input.shape().to_vec(), minus);
            let fm = eval(&probe)?;
            probe[ti] = input.clone();
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti][ci];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
