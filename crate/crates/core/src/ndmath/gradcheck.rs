//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default central-difference step.
pub const GRAD_CHECK_EPS: f64 = 1e-5;

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.scalar_value(out);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite objective {v}")));
    }
    Ok(v)
}

/// Analytic gradients of `f` at `params`, one vector per parameter.
pub fn analytic_grads<F>(f: &F, params: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.scalar_value(out);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite objective {v}")));
    }
    tape.backward(out)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&var, p)| tape.grad(var).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();
    Ok((v, grads))
}

/// Largest per-coordinate relative error between the tape gradient and
/// `(f(θ+εe) − f(θ−εe)) / 2ε`, using `|a − n| / max(1e-8, |n|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, analytic) = analytic_grads(&f, params)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let plus = eval(&f, &work)?;
            work[pi].data_mut()[k] = orig - eps;
            let minus = eval(&f, &work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (a - numeric).abs() / numeric.abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
