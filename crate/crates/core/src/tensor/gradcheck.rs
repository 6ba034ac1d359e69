//! Central finite-difference comparison against backpropagated gradients.

use super::error::TensorError;
use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Denominator floor for relative errors, so entries whose true gradient is
/// zero are judged by absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(input, element)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `d f / d inputs` from backward with central differences of step
/// `eps`. `f` must build a scalar from the variables it is handed.
pub fn check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar_value(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            probe[i].data_mut()[e] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[e] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_err(analytic[e], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
