//! Gradient reversal (plain and confidence-weighted) and the scale reduction
//! module that sits between a reversal layer and a pixel-wise domain head.

use crate::autodiff::{Tape, Var};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReversalMode {
    /// Backward multiplies by `-lambda`.
    Plain,
    /// Backward multiplies row `k` by `-lambda * (d*p_k + (1-d)*(1-p_k))`.
    Weighted,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReversalSpec {
    pub lambda: f64,
    pub mode: ReversalMode,
}

impl ReversalSpec {
    pub fn new(lambda: f64, mode: ReversalMode) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "reversal lambda must be finite and >= 0, got {lambda}"
            )));
        }
        Ok(Self { lambda, mode })
    }
}

/// Gradient reversal layer.
pub fn grl<T: Scalar>(tape: &mut Tape<T>, x: Var, lambda: f64) -> Result<Var> {
    tape.grl(x, T::lit(lambda))
}

/// Weight applied to a row's reversed gradient: the classifier's probability
/// of the row's true domain.
pub fn wgrl_weight(p_source: f64, d: Domain) -> f64 {
    match d {
        Domain::Source => p_source,
        Domain::Target => 1.0 - p_source,
    }
}

fn check_probs(p: &[f64]) -> Result<()> {
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!(
            "source probability {bad} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Weighted gradient reversal with known per-row source probabilities.
pub fn wgrl<T: Scalar>(tape: &mut Tape<T>, x: Var, lambda: f64, p: &[f64], d: Domain) -> Result<Var> {
    let node = tape.weighted_grl(x, T::lit(lambda))?;
    set_wgrl_probs(tape, node, p, d)?;
    Ok(node)
}

/// Weighted reversal whose probabilities are supplied later through
/// [`set_wgrl_probs`], once the downstream classifier has run.
pub fn wgrl_deferred<T: Scalar>(tape: &mut Tape<T>, x: Var, lambda: f64) -> Result<Var> {
    tape.weighted_grl(x, T::lit(lambda))
}

/// Attaches detached weights to a weighted reversal node.
pub fn set_wgrl_probs<T: Scalar>(tape: &mut Tape<T>, node: Var, p: &[f64], d: Domain) -> Result<()> {
    check_probs(p)?;
    let w = p.iter().map(|&v| T::lit(wgrl_weight(v, d))).collect();
    tape.set_reversal_weights(node, w)
}

/// Reversal according to `spec`; weighted mode needs `p`.
pub fn reverse<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    spec: ReversalSpec,
    p: Option<&[f64]>,
    d: Domain,
) -> Result<Var> {
    match (spec.mode, p) {
        (ReversalMode::Plain, _) => grl(tape, x, spec.lambda),
        (ReversalMode::Weighted, Some(p)) => wgrl(tape, x, spec.lambda, p, d),
        (ReversalMode::Weighted, None) => Err(Error::InvalidArgument(
            "weighted reversal requires per-row probabilities".into(),
        )),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SrmSpec {
    /// Sampling factor: each `s×s` spatial patch becomes one location.
    pub s: usize,
    /// Width of the channel-reducing 1×1 convolution.
    pub out_channels: usize,
}

impl SrmSpec {
    pub fn new(s: usize, out_channels: usize) -> Result<Self> {
        if s == 0 || out_channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "SRM needs s >= 1 and out_channels >= 1, got s={s}, out_channels={out_channels}"
            )));
        }
        Ok(Self { s, out_channels })
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        if h % self.s != 0 || w % self.s != 0 {
            return Err(Error::shape(
                "srm",
                format!("spatial dims {h}x{w} not divisible by s={}", self.s),
            ));
        }
        Ok(())
    }
}

/// Source coordinate `(c, u, v)` in the input for output element `(c_out, u, v)`.
///
/// `u` indexes the first spatial axis and `v` the second. Within an
/// output channel group of `s*s`, `c mod s` steps along `u` and
/// `(c mod s²) / s` steps along `v`.
#[inline]
pub fn srm_source(c_out: usize, u: usize, v: usize, s: usize) -> (usize, usize, usize) {
    let within = c_out % (s * s);
    (c_out / (s * s), u * s + within % s, v * s + within / s)
}

/// Flat gather indices realising the space-to-depth map for a `[c, h, w]`
/// input.
pub fn srm_index(c: usize, h: usize, w: usize, s: usize) -> Vec<usize> {
    let (oc, oh, ow) = (c * s * s, h / s, w / s);
    let mut index = Vec::with_capacity(oc * oh * ow);
    for co in 0..oc {
        for u in 0..oh {
            for v in 0..ow {
                let (ci, y, x) = srm_source(co, u, v, s);
                index.push((ci * h + y) * w + x);
            }
        }
    }
    index
}

/// Inverse of [`srm_rearrange`] on plain values (`[c·s², h/s, w/s]` back to `[c, h, w]`).
pub fn srm_restore<T: Copy + Default>(rearranged: &[T], c: usize, h: usize, w: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::default(); c * h * w];
    for (o, &src) in srm_index(c, h, w, s).iter().enumerate() {
        out[src] = rearranged[o];
    }
    out
}

/// Parameter-free space-to-depth step: `[C,H,W] -> [C·s², H/s, W/s]`.
pub fn srm_rearrange<T: Scalar>(tape: &mut Tape<T>, x: Var, s: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("srm_rearrange", format!("expected [C,H,W], got {shape:?}")));
    }
    if s == 0 {
        return Err(Error::InvalidArgument("SRM sampling factor must be >= 1".into()));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h % s != 0 || w % s != 0 {
        return Err(Error::shape(
            "srm_rearrange",
            format!("spatial dims {h}x{w} not divisible by s={s}"),
        ));
    }
    tape.gather(x, srm_index(c, h, w, s), &[c * s * s, h / s, w / s])
}

/// 1×1 channel reduction followed by [`srm_rearrange`].
pub fn srm_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    spec: &SrmSpec,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("srm_forward", format!("expected [C,H,W], got {shape:?}")));
    }
    spec.check_dims(shape[1], shape[2])?;
    if tape.shape(weight) != [spec.out_channels, shape[0], 1, 1] {
        return Err(Error::ShapeMismatch {
            op: "srm_forward weight",
            left: vec![spec.out_channels, shape[0], 1, 1],
            right: tape.shape(weight).to_vec(),
        });
    }
    let reduced = tape.conv2d(x, weight, bias, 1, 0)?;
    srm_rearrange(tape, reduced, spec.s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use proptest::prelude::*;

    #[test]
    fn wgrl_hand_values() {
        let run = |d: Domain, p: f64, lambda: f64| {
            let mut tape = Tape::<f64>::new();
            let x = tape.param(Tensor::zeros(&[1, 1]));
            let r = wgrl(&mut tape, x, lambda, &[p], d).unwrap();
            let l = tape.sum(r);
            tape.backward(l).unwrap().wrt(x).data()[0]
        };
        assert!((run(Domain::Source, 0.9, 0.5) - (-0.45)).abs() < 1e-15);
        assert_eq!(run(Domain::Target, 0.5, 1.0), -0.5);
        assert_eq!(run(Domain::Target, 1.0, 1.0), 0.0);
    }

    #[test]
    fn wgrl_rejects_bad_probability() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[1, 1]));
        assert!(wgrl(&mut tape, x, 1.0, &[1.2], Domain::Source).is_err());
        assert!(ReversalSpec::new(-0.1, ReversalMode::Plain).is_err());
    }

    #[test]
    fn grl_zero_lambda_blocks_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let r = grl(&mut tape, x, 0.0).unwrap();
        let l = tape.sum(r);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn srm_two_by_two_order() {
        // (u, v) = (axis0, axis1); [[a, b], [c, d]] -> [a, c, b, d]
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = srm_rearrange(&mut tape, x, 2).unwrap();
        assert_eq!(tape.shape(y), &[4, 1, 1]);
        assert_eq!(tape.value(y).data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn srm_identity_cases() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..18).map(|v| v as f64).collect();
        let x = tape.constant(Tensor::from_f64(&[2, 3, 3], &data).unwrap());
        let y = srm_rearrange(&mut tape, x, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let w = tape.param(Tensor::from_f64(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.param(Tensor::zeros(&[2]));
        let spec = SrmSpec::new(1, 2).unwrap();
        let z = srm_forward(&mut tape, x, &spec, w, b).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
        assert!(srm_rearrange(&mut tape, x, 2).is_err());
    }

    #[test]
    fn srm_forward_element_count() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[8, 4, 6], 0.5));
        let spec = SrmSpec::new(2, 3).unwrap();
        let w = tape.param(Tensor::full(&[3, 8, 1, 1], 0.1));
        let b = tape.param(Tensor::zeros(&[3]));
        let y = srm_forward(&mut tape, x, &spec, w, b).unwrap();
        assert_eq!(tape.shape(y), &[12, 2, 3]);
        assert_eq!(tape.value(y).numel(), 3 * 4 * 6);
    }

    proptest! {
        #[test]
        fn nested_mod_is_plain_mod(c in 0usize..10_000, s in 1usize..12) {
            prop_assert_eq!(c % (s * s) % s, c % s);
        }

        #[test]
        fn restore_inverts_rearrange(c in 1usize..4, hb in 1usize..4, wb in 1usize..4, s in 1usize..4) {
            let (h, w) = (hb * s, wb * s);
            let x: Vec<u32> = (0..(c * h * w) as u32).collect();
            let idx = srm_index(c, h, w, s);
            let y: Vec<u32> = idx.iter().map(|&i| x[i]).collect();
            prop_assert_eq!(srm_restore(&y, c, h, w, s), x);
        }
    }
}
