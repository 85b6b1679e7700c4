use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences.
///
/// `f` receives a fresh graph and the parameter node and returns the scalar
/// loss node. The return value is the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, params: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::validation(format!("step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let p = g.leaf(params.clone());
    let loss = f(&mut g, p)?;
    let analytic = g.backward(loss)?.get_or_zeros(p, params.shape());

    let eval = |values: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let p = g.constant(values);
        let out = f(&mut g, p)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("objective returned {v}")));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let mut plus = params.clone();
        plus.data_mut()[i] += step;
        let mut minus = params.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Concatenates tensors into one flat vector, returning the shapes needed
/// to split it again with [`unflatten`].
pub fn flatten(tensors: &[&Tensor]) -> (Tensor, Vec<Vec<usize>>) {
    let shapes = tensors.iter().map(|t| t.shape().to_vec()).collect();
    let data: Vec<f64> = tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
    let n = data.len().max(1);
    let data = if data.is_empty() { vec![0.0] } else { data };
    (Tensor::from_parts(&[n], data).expect("flat"), shapes)
}

/// Splits a flat graph node into nodes of the given shapes.
pub fn unflatten(g: &mut Graph, flat: Var, shapes: &[Vec<usize>]) -> Result<Vec<Var>> {
    let mut offset = 0;
    let mut out = Vec::with_capacity(shapes.len());
    for s in shapes {
        let n: usize = s.iter().product();
        let piece = g.slice(flat, 0, offset, n)?;
        out.push(g.reshape(piece, s)?);
        offset += n;
    }
    Ok(out)
}
