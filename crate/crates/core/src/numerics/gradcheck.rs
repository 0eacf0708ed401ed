//! Central finite-difference validation of tape gradients (64-bit only).

use super::rng::Rng;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

/// Scalar function of several tensors, expressed on a tape.
pub trait TapeFn: for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Result<Var<'a, f64>> {}
impl<F> TapeFn for F where F: for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Result<Var<'a, f64>> {}

fn eval(f: &impl TapeFn, points: &[Tensor<f64>]) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<_> = points.iter().map(|p| tape.constant(p)).collect();
    let out = f(&tape, &vars)?;
    let v = out.value();
    if v.numel() != 1 {
        contract!("finite-difference target must be scalar, got {:?}", v.shape());
    }
    Ok(v.item())
}

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)` for a
/// function of a single tensor.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: for<'a> Fn(&'a Tape<f64>, Var<'a, f64>) -> Result<Var<'a, f64>>,
{
    finite_diff_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(point),
        h,
        None,
    )
}

/// Multi-input variant. With `sample = Some((n, rng))` only `n` coordinates
/// per input, chosen at random, are perturbed.
pub fn finite_diff_check_many<F: TapeFn>(
    f: F,
    points: &[Tensor<f64>],
    h: f64,
    sample: Option<(usize, &mut Rng)>,
) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        contract!("step h must be positive, got {h}");
    }
    let tape = Tape::new();
    let vars: Vec<_> = points.iter().map(|p| tape.param(p)).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out).map_err(|e| match e {
        Error::NonFinite { op, detail } => Error::NonFinite {
            op,
            detail: format!("analytic gradient: {detail}"),
        },
        other => other,
    })?;
    if let Some((_, op)) = tape.first_non_finite() {
        return Err(Error::NonFinite {
            op: op.to_string(),
            detail: "forward value".into(),
        });
    }

    let mut sample = sample;
    let mut worst = 0.0f64;
    for (pi, p) in points.iter().enumerate() {
        let analytic = grads.wrt(vars[pi]);
        let coords: Vec<usize> = match sample.as_mut() {
            Some((n, rng)) if *n < p.numel() => (0..*n).map(|_| rng.below(p.numel())).collect(),
            _ => (0..p.numel()).collect(),
        };
        for i in coords {
            let mut plus = points.to_vec();
            plus[pi].data_mut()[i] += h;
            let mut minus = points.to_vec();
            minus[pi].data_mut()[i] -= h;
            let numeric = (eval(&f, &plus)? - eval(&f, &minus)?) / (2.0 * h);
            let a = analytic.data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite {
                    op: tape
                        .first_non_finite()
                        .map(|(_, op)| op.to_string())
                        .unwrap_or_else(|| "finite difference".into()),
                    detail: format!("input {pi} coordinate {i}: analytic {a}, numeric {numeric}"),
                });
            }
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
