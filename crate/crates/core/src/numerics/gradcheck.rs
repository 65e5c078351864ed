//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used to build the numerical gradient, so the
//! check stays independent of the backward rules it validates.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Analytic and numerical gradients for one input.
#[derive(Debug, Clone)]
pub struct InputGrad {
    pub analytic: Tensor,
    pub numeric: Tensor,
}

impl InputGrad {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, falling back to
    /// the absolute difference when both gradients vanish.
    pub fn rel_error(&self) -> f64 {
        let diff: f64 = self
            .analytic
            .data()
            .iter()
            .zip(self.numeric.data())
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let scale = self.analytic.norm().max(self.numeric.norm());
        if scale < 1e-10 {
            diff
        } else {
            diff / scale
        }
    }
}

/// Evaluate `f` on `inputs`, returning analytic and central-difference
/// gradients of its scalar output with respect to every input.
pub fn gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Result<Vec<InputGrad>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().enumerate().map(|(i, t)| g.param(i, t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| g.param(i, t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut work = inputs.to_vec();
    let mut result = Vec::with_capacity(inputs.len());
    for (i, &v) in vars.iter().enumerate() {
        let mut numeric = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        result.push(InputGrad { analytic: g.grad(v), numeric });
    }
    Ok(result)
}

/// Largest relative error over all inputs.
pub fn max_rel_error<F>(inputs: &[Tensor], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    Ok(gradients(inputs, step, f)?.iter().map(InputGrad::rel_error).fold(0.0, f64::max))
}
