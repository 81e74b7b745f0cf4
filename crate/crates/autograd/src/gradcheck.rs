//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{AutogradError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// for a scalar function of a single tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}

/// Like [`grad_check`] but over several inputs at once; the error is the max
/// across every coordinate of every input.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(AutogradError::Invalid(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let first = scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let second = eval(xs)?;
    if first.to_bits() != second.to_bits() {
        return Err(AutogradError::NonDeterministic { first, second });
    }

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (which, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        for i in 0..xs[which].len() {
            let orig = xs[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 || t.rank() > 1 {
        return Err(AutogradError::NotScalar(t.shape().to_vec()));
    }
    Ok(t.item())
}
