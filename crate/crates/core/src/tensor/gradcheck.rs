use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compare the backward-pass gradient of a scalar function against central
/// differences and return the worst relative error
/// `|analytic - numeric| / (|analytic| + 1e-12)` over all components.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), eps)
}

/// Multi-input form of [`finite_diff_check`]; every input is checked.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("finite_diff_check", "eps must be positive"));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut worst: f64 = 0.0;
    let mut inputs = xs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for j in 0..grad.numel() {
            let orig = inputs[which].data()[j];
            inputs[which].data_mut()[j] = orig + eps;
            let plus = eval(&inputs)?;
            inputs[which].data_mut()[j] = orig - eps;
            let minus = eval(&inputs)?;
            inputs[which].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[j];
            worst = worst.max((a - numeric).abs() / (a.abs() + 1e-12));
        }
    }
    Ok(worst)
}
