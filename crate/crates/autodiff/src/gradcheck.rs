//! Central finite-difference oracle for gradients.
//!
//! Only evaluates the forward pass, so it stays independent of the tape's
//! backward rules it is used to check.

use crate::{Graph, Result, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Result of comparing analytic against numeric gradients.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradMismatch>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Relative error with an absolute floor, so near-zero gradients compare on
/// an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Builds a scalar from `inputs` with `f`, then compares the tape gradient
/// w.r.t. the selected elements of each input against central differences
/// with step `h`. `select(input, len)` lists which element indices to check.
pub fn check<F>(
    inputs: &[Tensor<f64>],
    h: f64,
    mut select: impl FnMut(usize, usize) -> Vec<usize>,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradReport::default();
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(*var).unwrap_or(&zero);
        for idx in select(k, inputs[k].len()) {
            let orig = probe[k].data()[idx];
            probe[k].data_mut()[idx] = orig + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[idx] = orig - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[idx];
            let err = rel_err(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(GradMismatch { input: k, index: idx, analytic: a, numeric });
            }
        }
    }
    Ok(report)
}

/// Select every element.
pub fn all(_: usize, len: usize) -> Vec<usize> {
    (0..len).collect()
}
