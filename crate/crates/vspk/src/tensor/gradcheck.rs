//! Finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Denominator floor of the relative-error quotient, so exact-zero
/// gradients do not divide by zero. Note the floor is far below central-
/// difference roundoff (about `ulp(loss) / h`): a coordinate whose true
/// gradient is smaller than roughly 1e-6 reports noise, so test functions
/// should keep gradients healthy everywhere.
const DENOM_FLOOR: f64 = 1e-8;

/// Compares the tape's gradients against central finite differences.
///
/// `f` builds a scalar loss from leaves registered for `params`; it is
/// re-invoked on a fresh tape for every probe, so it must be deterministic
/// in everything except the parameter values. Returns the maximum relative
/// error `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over
/// every coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("step must be positive, got {h}")));
    }

    let analytic = {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = params.iter().map(|p| tape.leaf(p)).collect();
        let loss = f(&mut tape, &ids)?;
        if tape.data(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar loss, got shape {:?}",
                tape.shape(loss)
            )));
        }
        if !tape.value(loss)?.is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        tape.backward(loss)?;
        ids.iter().map(|&id| tape.grad(id)).collect::<Vec<Tensor>>()
    };

    let mut probe: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let original = probe[p].data()[i];
            probe[p].data_mut()[i] = original + h;
            let plus = eval(&f, &probe)?;
            probe[p].data_mut()[i] = original - h;
            let minus = eval(&f, &probe)?;
            probe[p].data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p].data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = f(&mut tape, &ids)?;
    let v = tape.value(loss)?;
    if !v.is_finite() {
        return Err(Error::Numeric("probe loss is not finite".into()));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_its_derivative() {
        let w = Tensor::new(vec![1], vec![3.0]).unwrap();
        let err = grad_check(
            |tape, ids| {
                let sq = tape.mul(ids[0], ids[0])?;
                Ok(tape.sum(sq))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "relative error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let w = Tensor::new(vec![3], vec![0.5, -0.25, 2.0]).unwrap();
        let err = grad_check(
            |tape, _ids| {
                let c = Tensor::scalar(7.0);
                Ok(tape.leaf(&c))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_non_scalar_loss() {
        let w = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let res = grad_check(|tape, ids| tape.mul(ids[0], ids[0]), &[w], 1e-5);
        assert!(res.is_err());
    }
}
