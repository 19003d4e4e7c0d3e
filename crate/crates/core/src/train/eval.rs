//! Average precision with all-points interpolation, mAP and IoU sweeps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{iou, Annotation, BBox, Detection};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synthetic::Sample;

use super::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub n_det: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub iou_thr: f64,
    pub per_class: Vec<ClassAp>,
    /// Mean AP over classes with at least one ground-truth box.
    pub map: f64,
    pub n_gt: usize,
    pub n_det: usize,
}

/// A scored box of one class in image `image`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Marks each detection true or false positive. Detections are visited by
/// descending score (ties keep input order); each claims the unmatched
/// ground-truth box of its image with the highest IoU ≥ `iou_thr`.
pub fn match_detections(dets: &[Scored], gts: &[Vec<BBox>], iou_thr: f64) -> Vec<(usize, bool)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    order
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            if let Some(boxes) = gts.get(d.image) {
                for (g, gt) in boxes.iter().enumerate() {
                    let o = iou(&d.bbox, gt);
                    if !taken[d.image][g] && o >= iou_thr && best.map_or(true, |(_, b)| o > b) {
                        best = Some((g, o));
                    }
                }
            }
            if let Some((g, _)) = best {
                taken[d.image][g] = true;
            }
            (i, best.is_some())
        })
        .collect()
}

/// Area under the precision envelope, from true/false flags in rank order.
pub fn ap_from_flags(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let precision: Vec<f64> = flags
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            tp += t as usize;
            tp as f64 / (k + 1) as f64
        })
        .collect();
    let mut envelope = precision;
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let hits: f64 = flags.iter().zip(&envelope).filter(|(t, _)| **t).fold(0.0, |s, (_, e)| s + e);
    hits / n_gt as f64
}

/// AP of one class.
pub fn average_precision(dets: &[Scored], gts: &[Vec<BBox>], iou_thr: f64) -> f64 {
    let n_gt = gts.iter().map(Vec::len).sum();
    let flags: Vec<bool> = match_detections(dets, gts, iou_thr).into_iter().map(|(_, t)| t).collect();
    ap_from_flags(&flags, n_gt)
}

/// Per-class AP and mAP for per-image detections against per-image truth.
pub fn evaluate_detections(
    detections: &[Vec<Detection>],
    truth: &[Annotation],
    num_classes: usize,
    iou_thr: f64,
) -> Result<EvalResult> {
    if truth.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    if detections.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} detection lists for {} images",
            detections.len(),
            truth.len()
        )));
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let gts: Vec<Vec<BBox>> = truth
            .iter()
            .map(|a| {
                a.boxes
                    .iter()
                    .zip(&a.labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(b, _)| *b)
                    .collect()
            })
            .collect();
        let dets: Vec<Scored> = detections
            .iter()
            .enumerate()
            .flat_map(|(image, ds)| {
                ds.iter().filter(|d| d.class == c).map(move |d| Scored {
                    image,
                    bbox: d.bbox,
                    score: d.score,
                })
            })
            .collect();
        let n_gt: usize = gts.iter().map(Vec::len).sum();
        per_class.push(ClassAp {
            class: c,
            ap: (n_gt > 0).then(|| average_precision(&dets, &gts, iou_thr)),
            n_gt,
            n_det: dets.len(),
        });
    }
    let aps: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    if aps.is_empty() {
        log::warn!("no ground-truth boxes in the evaluation set; mAP reported as 0");
    }
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().fold(0.0, |s, a| s + a) / aps.len() as f64
    };
    Ok(EvalResult {
        iou_thr,
        map,
        n_gt: per_class.iter().map(|c| c.n_gt).sum(),
        n_det: per_class.iter().map(|c| c.n_det).sum(),
        per_class,
    })
}

/// Runs the detector over every sample.
pub fn detect_all<T: Scalar>(model: &Model<T>, samples: &[Sample], score_thr: f64) -> Result<Vec<Vec<Detection>>> {
    samples
        .iter()
        .map(|s| {
            let img = crate::autodiff::Tensor::from_f64(s.image.shape(), s.image.data())?;
            model.detect(&img, score_thr)
        })
        .collect()
}

pub fn evaluate_map<T: Scalar>(model: &Model<T>, samples: &[Sample], iou_thr: f64, score_thr: f64) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let dets = detect_all(model, samples, score_thr)?;
    let truth: Vec<Annotation> = samples.iter().map(|s| s.annotation.clone()).collect();
    evaluate_detections(&dets, &truth, model.detector.config().num_classes, iou_thr)
}

/// 0.50, 0.55, …, 0.95.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// mAP at each threshold from one set of detections.
pub fn sweep_detections(
    detections: &[Vec<Detection>],
    truth: &[Annotation],
    num_classes: usize,
    thresholds: &[f64],
) -> Result<Vec<(f64, f64)>> {
    thresholds
        .iter()
        .map(|&t| Ok((t, evaluate_detections(detections, truth, num_classes, t)?.map)))
        .collect()
}

pub fn iou_sweep<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample],
    thresholds: &[f64],
    score_thr: f64,
) -> Result<Vec<(f64, f64)>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let dets = detect_all(model, samples, score_thr)?;
    let truth: Vec<Annotation> = samples.iter().map(|s| s.annotation.clone()).collect();
    sweep_detections(&dets, &truth, model.detector.config().num_classes, thresholds)
}

pub fn write_sweep_csv(path: &Path, rows: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let err = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["threshold", "map"]).map_err(err)?;
    for (t, m) in rows {
        w.write_record([t.to_string(), m.to_string()]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
