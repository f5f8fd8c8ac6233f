use super::array::DiffArray;
use super::tape::{Tape, Var};
use crate::error::{domain_err, Result};

/// Compares the tape gradient of a scalar function against central
/// differences and returns the largest
/// `|analytic - numeric| / max(1, |analytic|)` over all coordinates of `x`.
///
/// `f` receives a fresh tape and the leaf holding `x`, and must return a
/// scalar node.
pub fn finite_diff_check<F>(f: F, x: &DiffArray<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let out = f(&mut tape, leaf)?;
    let value = tape.value(out).item()?;
    if !value.is_finite() {
        return Err(domain_err!("function is not finite at x"));
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: DiffArray<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let out = f(&mut t, v)?;
        let y = t.value(out).item()?;
        if !y.is_finite() {
            return Err(domain_err!("function is not finite under perturbation"));
        }
        Ok(y)
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
