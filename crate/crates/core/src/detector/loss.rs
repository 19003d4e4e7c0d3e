//! Source-domain detection loss: RPN objectness and regression plus head
//! classification and regression, all under the same IoU assignment rule.

use crate::autodiff::{Tape, Tensor, Var};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::bbox::{encode, iou, BBox};
use super::net::{DetectorConfig, HeadOutput, RpnOutput};
use super::Annotation;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    /// Matched to the ground-truth box with this index.
    Positive(usize),
    Negative,
    Ignored,
}

/// IoU-threshold assignment: `>= pos` positive, `< neg` negative, otherwise
/// ignored. With `force_best`, each ground truth also claims the box it
/// overlaps most, so no object goes without a positive.
pub fn assign(boxes: &[BBox], gts: &[BBox], pos: f64, neg: f64, force_best: bool) -> Vec<Assignment> {
    let mut out: Vec<Assignment> = boxes
        .iter()
        .map(|b| {
            let best = gts
                .iter()
                .enumerate()
                .map(|(g, gt)| (g, iou(b, gt)))
                .fold(None::<(usize, f64)>, |acc, (g, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((g, v)),
                });
            match best {
                Some((g, v)) if v >= pos => Assignment::Positive(g),
                Some((_, v)) if v >= neg => Assignment::Ignored,
                _ => Assignment::Negative,
            }
        })
        .collect();
    if force_best {
        for (g, gt) in gts.iter().enumerate() {
            let best = boxes
                .iter()
                .enumerate()
                .map(|(i, b)| (i, iou(b, gt)))
                .fold(None::<(usize, f64)>, |acc, (i, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((i, v)),
                });
            if let Some((i, v)) = best {
                if v > 0.0 && !matches!(out[i], Assignment::Positive(_)) {
                    out[i] = Assignment::Positive(g);
                }
            }
        }
    }
    out
}

/// Named components of the detection loss. Regression terms are absent when
/// no box is positive.
#[derive(Clone, Copy, Debug)]
pub struct DetectionLoss {
    pub total: Var,
    pub rpn_cls: Var,
    pub rpn_reg: Option<Var>,
    pub roi_cls: Option<Var>,
    pub roi_reg: Option<Var>,
}

fn select_rows<T: Scalar>(tape: &mut Tape<T>, x: Var, rows: &[usize]) -> Result<Var> {
    let width = tape.shape(x)[1];
    let index = rows
        .iter()
        .flat_map(|&r| (0..width).map(move |k| r * width + k))
        .collect();
    tape.gather(x, index, &[rows.len(), width])
}

/// Classification over non-ignored rows plus smooth-L1 regression over
/// positive rows. `class_of(gt)` gives the class index used for positives.
fn assigned_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    deltas: Var,
    refs: &[BBox],
    gts: &[BBox],
    assignment: &[Assignment],
    class_of: impl Fn(usize) -> usize,
) -> Result<(Option<Var>, Option<Var>)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut pos_rows = Vec::new();
    let mut targets = Vec::new();
    for (i, a) in assignment.iter().enumerate() {
        match *a {
            Assignment::Positive(g) => {
                rows.push(i);
                labels.push(class_of(g));
                pos_rows.push(i);
                targets.extend(encode(&gts[g], &refs[i]).map(T::lit));
            }
            Assignment::Negative => {
                rows.push(i);
                labels.push(0);
            }
            Assignment::Ignored => {}
        }
    }
    let cls = if rows.is_empty() {
        None
    } else {
        let picked = select_rows(tape, logits, &rows)?;
        Some(tape.softmax_cross_entropy(picked, &labels)?)
    };
    let reg = if pos_rows.is_empty() {
        None
    } else {
        let picked = select_rows(tape, deltas, &pos_rows)?;
        let tgt = tape.constant(Tensor::new(&[pos_rows.len(), 4], targets)?);
        Some(tape.smooth_l1(picked, tgt)?)
    };
    Ok((cls, reg))
}

/// Full detection loss for one labelled image.
///
/// `rois` are the regions the head was evaluated on, in row order of `head`.
#[allow(clippy::too_many_arguments)]
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &DetectorConfig,
    domain: Domain,
    rpn: &RpnOutput,
    anchors: &[BBox],
    head: &HeadOutput,
    rois: &[BBox],
    annotation: &Annotation,
) -> Result<DetectionLoss> {
    if domain != Domain::Source {
        return Err(Error::Domain(
            "detection loss applies to labelled source-domain images only".into(),
        ));
    }
    let gts = &annotation.boxes;

    let anchor_assign = assign(anchors, gts, cfg.pos_iou, cfg.neg_iou, true);
    let (rpn_cls, rpn_reg) = assigned_loss(tape, rpn.objectness, rpn.deltas, anchors, gts, &anchor_assign, |_| 1)?;
    let rpn_cls = rpn_cls.ok_or_else(|| Error::Domain("every anchor was ignored".into()))?;

    let roi_assign = assign(rois, gts, cfg.pos_iou, cfg.neg_iou, false);
    let (roi_cls, roi_reg) = assigned_loss(tape, head.logits, head.bbox_reg, rois, gts, &roi_assign, |g| {
        annotation.labels[g] + 1
    })?;

    let mut total = rpn_cls;
    for term in [rpn_reg, roi_cls, roi_reg].into_iter().flatten() {
        total = tape.add(total, term)?;
    }
    Ok(DetectionLoss {
        total,
        rpn_cls,
        rpn_reg,
        roi_cls,
        roi_reg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn thresholds() {
        let gt = [b(0.0, 0.0, 10.0, 10.0)];
        let boxes = [
            b(0.0, 0.0, 10.0, 10.0),  // 1.0
            b(0.0, 0.0, 10.0, 16.0),  // 0.625
            b(0.0, 0.0, 10.0, 25.0),  // 0.4
            b(50.0, 50.0, 60.0, 60.0), // 0
        ];
        let a = assign(&boxes, &gt, 0.5, 0.3, false);
        assert_eq!(
            a,
            vec![
                Assignment::Positive(0),
                Assignment::Positive(0),
                Assignment::Ignored,
                Assignment::Negative
            ]
        );
    }

    #[test]
    fn force_best_claims_an_anchor() {
        let gt = [b(0.0, 0.0, 10.0, 10.0)];
        let boxes = [b(0.0, 0.0, 10.0, 25.0), b(0.0, 0.0, 10.0, 40.0)];
        let a = assign(&boxes, &gt, 0.5, 0.3, true);
        assert_eq!(a[0], Assignment::Positive(0));
        assert_eq!(a[1], Assignment::Negative);
        assert!(assign(&boxes, &[], 0.5, 0.3, true)
            .iter()
            .all(|&x| x == Assignment::Negative));
    }
}
