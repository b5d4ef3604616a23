use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central finite
/// differences. Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
///
/// The function receives the evaluation point as an `n×1` leaf.
pub fn check_gradient<F>(f: F, point: &[f64], step: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    if !(step > 0.0) {
        return Err(Error::contract(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let graph = Graph::new();
    let x = graph.param(Tensor::column(point.to_vec()));
    let y = f(&graph, x)?;
    let fx = y.item();
    if !fx.is_finite() {
        return Err(Error::Numeric(format!(
            "function value {fx} at the base point"
        )));
    }
    let analytic = graph.backward(y)?.get(x);

    let eval = |p: Vec<f64>| -> Result<f64> {
        let g = Graph::new();
        let v = f(&g, g.constant(Tensor::column(p)))?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric(format!(
                "function value {v} in finite-difference probe"
            )))
        }
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut hi = point.to_vec();
        let mut lo = point.to_vec();
        hi[i] += step;
        lo[i] -= step;
        let numeric = (eval(hi)? - eval(lo)?) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
