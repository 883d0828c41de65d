//! Central-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Relative error used throughout: `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out)[0])
}

/// Checks the gradient of scalar `f` with respect to every input tensor.
///
/// Coordinate `j` is perturbed by `h * max(1, |x_j|)`. Returns, per input,
/// the largest [`relative_error`] over its coordinates. Errors only come
/// from `f` itself.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut tracked: Vec<Tensor> = inputs.to_vec();
    tracked.iter_mut().for_each(|t| t.set_requires_grad(true));

    let mut g = Graph::new();
    let vars: Vec<Var> = tracked.iter().map(|t| g.leaf(t)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&tracked)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut worst = vec![0.0f64; inputs.len()];
    let mut probe = tracked.clone();
    for (k, input) in tracked.iter().enumerate() {
        for (j, &x0) in input.data().iter().enumerate() {
            let step = h * 1f64.max(x0.abs());
            probe[k].data_mut()[j] = x0 + step;
            let plus = evaluate(&f, &probe)?;
            probe[k].data_mut()[j] = x0 - step;
            let minus = evaluate(&f, &probe)?;
            probe[k].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * step);
            worst[k] = worst[k].max(relative_error(analytic[k][j], numeric));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let errs = grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), h)?;
    Ok(errs[0])
}
