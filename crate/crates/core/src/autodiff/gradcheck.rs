use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the tape gradient of scalar `f` at `x` against central finite
/// differences with the given `step`, returning the largest relative error
/// `|g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|)` over all coordinates.
///
/// `f` must be smooth in a `step` neighbourhood of `x`; a relu kink exactly
/// at a coordinate is outside what this check can judge.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let root = f(&mut tape, xv)?;
    finite(tape.value(root).item()?, "f(x)")?;
    tape.backward(root)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(x.shape().to_vec(), data)?);
        let r = f(&mut tape, v)?;
        finite(tape.value(r).item()?, "f(x ± step)")
    };

    let mut worst = 0.0f64;
    for (i, &g_ad) in analytic.iter().enumerate() {
        let mut plus = x.data().to_vec();
        let mut minus = x.data().to_vec();
        plus[i] += step;
        minus[i] -= step;
        let g_fd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let rel = (g_ad - g_fd).abs() / (g_ad.abs() + g_fd.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} = {v}")))
    }
}
