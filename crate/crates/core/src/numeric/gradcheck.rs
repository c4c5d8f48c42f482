//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let value = tape.value(root);
    if value.numel() != 1 {
        return Err(Error::NonScalarRoot(value.shape().to_vec()));
    }
    Ok(value.data()[0])
}

/// Compares the tape gradient of the scalar `f` against
/// `(f(p + h) - f(p - h)) / 2h` coordinate by coordinate and returns the
/// largest relative error per parameter tensor.
///
/// `f` receives a fresh tape and one leaf per entry of `params`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite_diff_check", format!("step must be > 0, got {h}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let base = tape.scalar(root);

    let again = evaluate(&f, params)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let mut work = params.to_vec();
    let mut errors = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let mut worst: f64 = 0.0;
        for c in 0..work[pi].numel() {
            let original = work[pi].data()[c];
            work[pi].data_mut()[c] = original + h;
            let plus = evaluate(&f, &work)?;
            work[pi].data_mut()[c] = original - h;
            let minus = evaluate(&f, &work)?;
            work[pi].data_mut()[c] = original;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[c], numeric));
        }
        errors.push(worst);
    }
    Ok(errors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let errs = finite_diff_check(
            |tape, p| tape.mul(p[0], p[0]),
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(errs[0] < 1e-8, "{errs:?}");
    }

    #[test]
    fn kink_is_flagged() {
        let errs = finite_diff_check(|tape, p| Ok(tape.abs(p[0])), &[Tensor::scalar(0.0)], 1e-5).unwrap();
        assert!(errs[0] > 1e-4, "{errs:?}");
    }

    #[test]
    fn nondeterministic_function_fails() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let res = finite_diff_check(
            |tape, p| {
                calls.set(calls.get() + 1.0);
                let s = tape.scale(p[0], calls.get());
                Ok(s)
            },
            &[Tensor::scalar(1.0)],
            1e-5,
        );
        assert!(matches!(res, Err(Error::NonDeterministic { .. })));
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(finite_diff_check(|_, p| Ok(p[0]), &[Tensor::scalar(1.0)], 0.0).is_err());
    }
}
