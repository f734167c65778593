//! Finite-difference gradient verification.
//!
//! The checker only ever calls the provided closure to *evaluate* the scalar
//! function; it never inspects recorded gradients, so it stays an independent
//! oracle for whatever backward pass produced them.

use crate::tensor::Tensor;
use crate::Result;

/// Central-difference estimate of `∂f/∂inputs[which][elem]`.
pub fn central_diff<F>(f: &F, inputs: &[Tensor], which: usize, elem: usize, step: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let perturb = |delta: f64| -> Vec<Tensor> {
        inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == which {
                    let mut data = t.data().to_vec();
                    data[elem] += delta;
                    Tensor::new(t.shape().to_vec(), data).expect("same shape")
                } else {
                    t.clone()
                }
            })
            .collect()
    };
    let plus = f(&perturb(step))?;
    let minus = f(&perturb(-step))?;
    Ok((plus - minus) / (2.0 * step))
}

/// Passes when `|a − b| ≤ atol + rtol·max(|a|,|b|)`.
pub fn close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= atol + rtol * a.abs().max(b.abs())
}

/// Compares an analytic gradient against central differences at a set of
/// elements, returning the worst (analytic, numeric) violation if any.
pub fn compare_grad<F>(
    f: &F,
    inputs: &[Tensor],
    which: usize,
    analytic: &Tensor,
    elems: &[usize],
    step: f64,
    rtol: f64,
    atol: f64,
) -> Result<Option<(usize, f64, f64)>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    for &elem in elems {
        let numeric = central_diff(f, inputs, which, elem, step)?;
        let a = analytic.data()[elem];
        if !close(a, numeric, rtol, atol) {
            return Ok(Some((elem, a, numeric)));
        }
    }
    Ok(None)
}
