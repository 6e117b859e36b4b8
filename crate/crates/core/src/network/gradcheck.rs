//! Finite-difference check of a forward pass over named parameters.

use facefill_autodiff::gradcheck::{GradMismatch, GradReport};
use facefill_autodiff::{Tensor, Var};

use super::{Ctx, ParamStore};
use crate::error::Result;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn poke(store: &mut ParamStore<f64>, name: &str, i: usize, v: f64) {
    store.get_mut(name).expect("present").data_mut()[i] = v;
}

/// Compares tape gradients of the scalar `f` against central differences
/// with step `h`, for every element of every parameter in `store` and of
/// every tensor in `inputs`. Inputs are numbered after the parameters in
/// the report, in store order.
pub fn check_grads<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], h: f64, floor: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Ctx<f64>, &[Var]) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>, ins: &[Tensor<f64>]| -> Result<f64> {
        let mut ctx = Ctx::new().with(s, false);
        let vars: Vec<Var> = ins.iter().map(|t| ctx.g.constant(t.clone())).collect();
        let out = f(&mut ctx, &vars)?;
        Ok(ctx.g.value(out).item())
    };

    let mut ctx = Ctx::new().with(store, true);
    let vars: Vec<Var> = inputs.iter().map(|t| ctx.g.param(t.clone())).collect();
    let out = f(&mut ctx, &vars)?;
    let grads = ctx.g.backward(out)?;
    let param_grads = ctx.collect_grads(&grads, store);
    let input_grads: Vec<Tensor<f64>> =
        vars.iter().zip(inputs).map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();
    drop(ctx);

    let mut report = GradReport::default();
    let mut record = |input: usize, index: usize, analytic: f64, numeric: f64| {
        let err = rel_err(analytic, numeric, floor);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some(GradMismatch { input, index, analytic, numeric });
        }
    };

    let mut probe = store.clone();
    let names: Vec<String> = store.names().map(String::from).collect();
    for (k, name) in names.iter().enumerate() {
        let analytic = param_grads.get(name).expect("collected for every name");
        for i in 0..analytic.len() {
            let orig = store.get(name).expect("present").data()[i];
            poke(&mut probe, name, i, orig + h);
            let up = eval(&probe, inputs)?;
            poke(&mut probe, name, i, orig - h);
            let down = eval(&probe, inputs)?;
            poke(&mut probe, name, i, orig);
            record(k, i, analytic.data()[i], (up - down) / (2.0 * h));
        }
    }
    let mut probe_in = inputs.to_vec();
    for (k, analytic) in input_grads.iter().enumerate() {
        for i in 0..analytic.len() {
            let orig = inputs[k].data()[i];
            probe_in[k].data_mut()[i] = orig + h;
            let up = eval(store, &probe_in)?;
            probe_in[k].data_mut()[i] = orig - h;
            let down = eval(store, &probe_in)?;
            probe_in[k].data_mut()[i] = orig;
            record(names.len() + k, i, analytic.data()[i], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}
