use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Largest coordinate-wise `|analytic - numeric| / max(1, |numeric|)` between
/// the tape gradient of `f` and central differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vs| f(tape, vs[0]), core::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once; the error is the maximum over
/// every coordinate of every input.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for i in 0..xs[k].len() {
            let x0 = xs[k].data()[i];
            probe[k].data_mut()[i] = x0 + eps;
            let fp = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - eps;
            let fm = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            let err = (analytic.data()[i] - numeric).abs() / f64::max(1.0, numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
