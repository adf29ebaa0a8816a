//! Central-difference gradient oracle.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative discrepancy between the tape gradient of `f` at `point`
/// and a central difference with step `eps`.
///
/// Per coordinate the error is `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), eps)
}

/// [`grad_check`] over several input tensors at once; every coordinate of every
/// input is probed.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("gradient-check step {eps} outside [1e-7, 1e-3]")));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::NonScalarLoss(value.shape().to_vec()));
    }
    if !value.item().is_finite() {
        return Err(Error::NonFiniteValue("function value at the base point".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(tape);

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|p| tape.constant(p.clone())).collect();
        let y = tape.item(f(&tape, &vars)?);
        if !y.is_finite() {
            return Err(Error::NonFiniteValue("function value at a probe point".into()));
        }
        Ok(y)
    };

    let mut probe: Vec<Tensor> = points.to_vec();
    let mut worst: f64 = 0.0;
    for (t, grad) in analytic.iter().enumerate() {
        for c in 0..points[t].len() {
            let base = points[t].data()[c];
            probe[t].data_mut()[c] = base + eps;
            let plus = eval(&probe)?;
            probe[t].data_mut()[c] = base - eps;
            let minus = eval(&probe)?;
            probe[t].data_mut()[c] = base;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[c];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_tight() {
        let p = Tensor::vector(vec![0.3, -1.7, 2.2, 0.0]);
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq, None)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_first_component() {
        let p = Tensor::vector(vec![0.3, -0.7]);
        let err = grad_check(
            |t, x| {
                let s = t.softmax(x, None)?;
                let s = t.reshape(s, &[1, 2])?;
                t.slice_cols(s, 0, 1)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn rejects_step_out_of_range() {
        let p = Tensor::scalar(1.0);
        assert!(grad_check(|t, x| t.sum(x, None), &p, 1e-2).is_err());
        assert!(grad_check(|t, x| t.sum(x, None), &p, 1e-9).is_err());
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        // ln(max(x, 0)) at x = 0 floors to ln(0) = -inf
        let p = Tensor::scalar(1e-6);
        let res = grad_check(|t, x| t.log_floor(x, 0.0), &p, 1e-5);
        assert!(matches!(res, Err(Error::NonFiniteValue(_))));
    }
}
