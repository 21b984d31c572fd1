//! Central finite-difference gradient checks.

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

/// Floor of the relative-error denominator.
pub const REL_EPS: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|, REL_EPS)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_EPS)
}

fn eval_scalar<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let x = tape.constant(point.clone())?;
    let y = f(&tape, x)?;
    let v = y.item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            op: "finite-difference",
        });
    }
    Ok(v)
}

/// Maximum relative error between the tape gradient of `f` at `point` and
/// central differences with the given `step`.
pub fn finite_difference_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if step <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let tape = Tape::new();
    let x = tape.var(point.clone())?;
    let y = f(&tape, x)?;
    let analytic = tape.backward(y)?.wrt(x);

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Finite-difference check of the gradient with respect to stored parameters.
///
/// For each id, `entries` evenly spaced elements are perturbed in place and
/// restored bit-exactly afterwards.
pub fn param_gradient_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    entries: usize,
    step: f64,
    f: F,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    if step <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let saved = store.clone();
    store.zero_grads();
    {
        let tape = Tape::new();
        let y = f(&tape, store)?;
        tape.backward(y)?.accumulate_into(store)?;
    }
    let analytic: Vec<Tensor> = ids.iter().map(|&id| store.get(id).grad().clone()).collect();
    store.zero_grads();

    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let v = f(&tape, s)?.item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                op: "finite-difference",
            })
        }
    };

    let mut worst: f64 = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        let n = store.value(id).len();
        let count = entries.min(n).max(1);
        for j in 0..count {
            let i = j * n / count;
            let mut v = store.value(id).clone();
            let orig = v.data()[i];
            v.data_mut()[i] = orig + step;
            store.set_value(id, v.clone())?;
            let up = eval(store)?;
            v.data_mut()[i] = orig - step;
            store.set_value(id, v.clone())?;
            let down = eval(store)?;
            v.data_mut()[i] = orig;
            store.set_value(id, v)?;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic[k].data()[i], numeric));
        }
    }
    *store = saved;
    Ok(worst)
}
