//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::scalar::Scalar;

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Denominator floor in the relative error.
pub const REL_FLOOR: f64 = 1e-8;
/// Entries this far below the largest gradient of any input are compared
/// against that scale instead: central differences carry the same absolute
/// rounding error, near `ulp(f) / eps`, on every entry, and it swamps
/// near-zero ones.
pub const GRADIENT_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input, element)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with step `eps`, element by element. Every input is bound as
/// a trainable leaf.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<GradCheck>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    grad_check_scaled(f, inputs, eps, |_, _| 1.0)
}

/// Like [`grad_check`], but compares the tape gradient of element `e` of
/// input `i` against `scale(i, e)` times the finite difference. Reversal
/// layers leave the forward value alone, so their expected backward is a
/// scaled copy of the numeric derivative.
pub fn grad_check_scaled<T, F, S>(f: F, inputs: &[Tensor<T>], eps: f64, scale: S) -> Result<GradCheck>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    S: Fn(usize, usize) -> f64,
{
    let eval = |xs: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item()?.as_f64())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let scale_of = |v: &Var| grads.wrt(*v).data().iter().fold(0.0f64, |m, g| m.max(g.as_f64().abs()));
    let floor = GRADIENT_FLOOR * vars.iter().map(scale_of).fold(0.0, f64::max);
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            probe[i].data_mut()[e] = orig + T::lit(eps);
            let up = eval(&probe)?;
            probe[i].data_mut()[e] = orig - T::lit(eps);
            let down = eval(&probe)?;
            probe[i].data_mut()[e] = orig;
            let numeric = scale(i, e) * (up - down) / (2.0 * eps);
            let a = analytic.data()[e].as_f64();
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor).max(REL_FLOOR);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, e));
            }
        }
    }
    Ok(report)
}
