//! Miniature two-stage detector: five-block conv backbone, single-level RPN,
//! max ROI pooling and a two-layer fully connected head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::anchors::generate_anchors;
use super::bbox::{decode, nms, BBox};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub image_size: usize,
    /// Object classes, background excluded.
    pub num_classes: usize,
    pub widths: [usize; 5],
    pub anchor_sizes: Vec<f64>,
    pub rpn_width: usize,
    pub head_width: usize,
    pub roi_grid: usize,
    pub top_n: usize,
    pub nms_iou: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub test_nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: 96,
            num_classes: 3,
            widths: [8, 16, 32, 32, 32],
            anchor_sizes: vec![16.0, 32.0, 48.0],
            rpn_width: 32,
            head_width: 64,
            roi_grid: 3,
            top_n: 32,
            nms_iou: 0.7,
            pos_iou: 0.5,
            neg_iou: 0.3,
            test_nms_iou: 0.3,
            max_detections: 100,
        }
    }
}

/// Output stride of the block whose features feed the RPN and ROI pooling.
pub const FEATURE_STRIDE: usize = 16;
/// Input normalization, `(x - mean) / std`, from source training pixels.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.2;

/// Feature maps of blocks 3, 4 and 5 (strides 4, 8, 16).
#[derive(Clone, Copy, Debug)]
pub struct BackboneFeatures {
    pub block3: Var,
    pub block4: Var,
    pub block5: Var,
}

impl BackboneFeatures {
    pub fn block(&self, m: usize) -> Option<Var> {
        match m {
            3 => Some(self.block3),
            4 => Some(self.block4),
            5 => Some(self.block5),
            _ => None,
        }
    }
}

/// Stride of backbone block `m` (1-based) relative to the input.
pub fn block_stride(m: usize) -> usize {
    1 << (m - 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add_he(format!("{name}.w"), &[c_out, c_in, k, k], c_in * k * k, rng)?,
            b: store.add_zeros(format!("{name}.b"), &[c_out])?,
        })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, pad: usize) -> Result<Var> {
        tape.conv2d(x, p.var(self.w), p.var(self.b), 1, pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add_he(format!("{name}.w"), &[inputs, outputs], inputs, rng)?,
            b: store.add_zeros(format!("{name}.b"), &[outputs])?,
        })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.affine(x, p.var(self.w), p.var(self.b))
    }
}

/// Per-anchor RPN outputs, rows ordered like [`generate_anchors`].
#[derive(Clone, Copy, Debug)]
pub struct RpnOutput {
    /// `[num_anchors, 2]`, column 1 is the object logit.
    pub objectness: Var,
    /// `[num_anchors, 4]` center-size deltas.
    pub deltas: Var,
}

/// Head outputs for a batch of regions.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[N, head_width]` post-ReLU feature of the second FC layer.
    pub feature: Var,
    /// `[N, K+1]` class logits; column 0 is background.
    pub logits: Var,
    /// `[N, K+1]` softmax of `logits`.
    pub scores: Var,
    /// `[N, 4]` class-agnostic box refinement.
    pub bbox_reg: Var,
}

/// Everything the image-level pass produces.
#[derive(Clone, Debug)]
pub struct ImageForward {
    pub features: BackboneFeatures,
    pub rpn: RpnOutput,
    pub anchors: Vec<BBox>,
    /// Post-NMS proposals with their object probability, best first.
    pub proposals: Vec<(BBox, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Object class in `0..K`.
    pub class: usize,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct Detector {
    cfg: DetectorConfig,
    backbone: Vec<[Conv; 2]>,
    rpn_conv: Conv,
    rpn_obj: Conv,
    rpn_reg: Conv,
    fc1: Dense,
    fc2: Dense,
    cls: Dense,
    reg: Dense,
}

impl Detector {
    /// Registers all detector parameters in `store` under the `det.` prefix.
    pub fn new<T: Scalar>(cfg: DetectorConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        if cfg.image_size % FEATURE_STRIDE != 0 || cfg.image_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} must be a positive multiple of {FEATURE_STRIDE}",
                cfg.image_size
            )));
        }
        let mut backbone = Vec::with_capacity(5);
        let mut c_in = 3;
        for (i, &w) in cfg.widths.iter().enumerate() {
            let a = Conv::new(store, &format!("det.block{}.conv1", i + 1), w, c_in, 3, rng)?;
            let b = Conv::new(store, &format!("det.block{}.conv2", i + 1), w, w, 3, rng)?;
            backbone.push([a, b]);
            c_in = w;
        }
        let a = cfg.anchor_sizes.len();
        let rpn_conv = Conv::new(store, "det.rpn.conv", cfg.rpn_width, c_in, 3, rng)?;
        let rpn_obj = Conv::new(store, "det.rpn.obj", 2 * a, cfg.rpn_width, 1, rng)?;
        let rpn_reg = Conv::new(store, "det.rpn.reg", 4 * a, cfg.rpn_width, 1, rng)?;
        let pooled = c_in * cfg.roi_grid * cfg.roi_grid;
        let fc1 = Dense::new(store, "det.head.fc1", pooled, cfg.head_width, rng)?;
        let fc2 = Dense::new(store, "det.head.fc2", cfg.head_width, cfg.head_width, rng)?;
        let cls = Dense::new(store, "det.head.cls", cfg.head_width, cfg.num_classes + 1, rng)?;
        let reg = Dense::new(store, "det.head.reg", cfg.head_width, 4, rng)?;
        // small regression outputs at start so decoded boxes stay near their references
        for d in [&rpn_reg.w, &reg.w] {
            let p = store.get_mut(*d);
            p.value = p.value.map(|v| v * T::lit(0.1));
        }
        Ok(Self {
            cfg,
            backbone,
            rpn_conv,
            rpn_obj,
            rpn_reg,
            fc1,
            fc2,
            cls,
            reg,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    /// Channels of backbone block `m` (1-based).
    pub fn block_channels(&self, m: usize) -> usize {
        self.cfg.widths[m - 1]
    }

    /// Number of values in the aggregated proposal vector (feature, scores, box).
    pub fn aggregate_width(&self) -> usize {
        self.cfg.head_width + self.cfg.num_classes + 1 + 4
    }

    pub fn backbone_forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<BackboneFeatures> {
        let s = tape.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 || s[1] % FEATURE_STRIDE != 0 || s[2] % FEATURE_STRIDE != 0 {
            return Err(Error::shape(
                "backbone",
                format!("expected [3,H,W] with H,W divisible by {FEATURE_STRIDE}, got {s:?}"),
            ));
        }
        let mut x = image;
        let mut outs = Vec::with_capacity(3);
        for (i, [a, b]) in self.backbone.iter().enumerate() {
            if i > 0 {
                x = tape.max_pool2d(x, 2)?;
            }
            x = a.apply(tape, p, x, 1)?;
            x = tape.relu(x);
            x = b.apply(tape, p, x, 1)?;
            x = tape.relu(x);
            if i >= 2 {
                outs.push(x);
            }
        }
        Ok(BackboneFeatures {
            block3: outs[0],
            block4: outs[1],
            block5: outs[2],
        })
    }

    pub fn rpn_forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, block5: Var) -> Result<RpnOutput> {
        let h = self.rpn_conv.apply(tape, p, block5, 1)?;
        let h = tape.relu(h);
        let obj = self.rpn_obj.apply(tape, p, h, 0)?;
        let reg = self.rpn_reg.apply(tape, p, h, 0)?;
        let s = tape.shape(obj).to_vec();
        let (rows, cols) = (s[1], s[2]);
        let a = self.cfg.anchor_sizes.len();
        let n = rows * cols * a;
        let per_anchor = |width: usize| {
            let mut idx = Vec::with_capacity(n * width);
            for y in 0..rows {
                for x in 0..cols {
                    for ai in 0..a {
                        for k in 0..width {
                            idx.push(((ai * width + k) * rows + y) * cols + x);
                        }
                    }
                }
            }
            idx
        };
        Ok(RpnOutput {
            objectness: tape.gather(obj, per_anchor(2), &[n, 2])?,
            deltas: tape.gather(reg, per_anchor(4), &[n, 4])?,
        })
    }

    pub fn anchors_for(&self, rows: usize, cols: usize) -> Vec<BBox> {
        let size = self.cfg.image_size as f64;
        generate_anchors(rows, cols, FEATURE_STRIDE, &self.cfg.anchor_sizes, size, size)
    }

    /// Decodes every anchor, ranks by object probability, suppresses
    /// overlaps and keeps the best `top_n`.
    pub fn select_proposals<T: Scalar>(&self, tape: &Tape<T>, rpn: &RpnOutput, anchors: &[BBox]) -> Vec<(BBox, f64)> {
        let size = self.cfg.image_size as f64;
        let logits = tape.value(rpn.objectness).to_f64_vec();
        let deltas = tape.value(rpn.deltas).to_f64_vec();
        select_proposals(anchors, &logits, &deltas, size, self.cfg.top_n, self.cfg.nms_iou)
    }

    /// Backbone, RPN and proposal selection for one `[3,H,W]` image with
    /// pixels in `[0, 1]` (centered on 0.5 before the first convolution).
    pub fn forward_image<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, image: &Tensor<T>) -> Result<ImageForward> {
        let n = self.cfg.image_size;
        if image.shape() != [3, n, n] {
            return Err(Error::ShapeMismatch {
                op: "detector input",
                left: vec![3, n, n],
                right: image.shape().to_vec(),
            });
        }
        let (mean, std) = (T::lit(PIXEL_MEAN), T::lit(PIXEL_STD));
        let x = tape.constant(image.map(|v| (v - mean) / std));
        let features = self.backbone_forward(tape, p, x)?;
        let rpn = self.rpn_forward(tape, p, features.block5)?;
        let s = tape.shape(features.block5).to_vec();
        let anchors = self.anchors_for(s[1], s[2]);
        let proposals = self.select_proposals(tape, &rpn, &anchors);
        Ok(ImageForward {
            features,
            rpn,
            anchors,
            proposals,
        })
    }

    /// ROI pooling plus the fully connected head on `boxes`.
    pub fn head_forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, block5: Var, boxes: &[BBox]) -> Result<HeadOutput> {
        if boxes.is_empty() {
            return Err(Error::InvalidArgument("detection head needs at least one region".into()));
        }
        let pooled = roi_pool(tape, block5, boxes, FEATURE_STRIDE, self.cfg.roi_grid)?;
        let flat = tape.shape(pooled)[1..].iter().product::<usize>();
        let x = tape.reshape(pooled, &[boxes.len(), flat])?;
        let x = self.fc1.apply(tape, p, x)?;
        let x = tape.relu(x);
        let x = self.fc2.apply(tape, p, x)?;
        let feature = tape.relu(x);
        let logits = self.cls.apply(tape, p, feature)?;
        let scores = tape.softmax(logits)?;
        let bbox_reg = self.reg.apply(tape, p, feature)?;
        Ok(HeadOutput {
            feature,
            logits,
            scores,
            bbox_reg,
        })
    }

    /// Inference on one image with frozen parameters.
    pub fn detect<T: Scalar>(&self, params: &ParamStore<T>, image: &Tensor<T>, score_thr: f64) -> Result<Vec<Detection>> {
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let fwd = self.forward_image(&mut tape, &p, image)?;
        if fwd.proposals.is_empty() {
            return Ok(Vec::new());
        }
        let boxes: Vec<BBox> = fwd.proposals.iter().map(|(b, _)| *b).collect();
        let head = self.head_forward(&mut tape, &p, fwd.features.block5, &boxes)?;
        let scores = tape.value(head.scores).to_f64_vec();
        let reg = tape.value(head.bbox_reg).to_f64_vec();
        Ok(postprocess(&self.cfg, &boxes, &scores, &reg, score_thr))
    }
}

/// Turns head outputs into per-class detections: refine, threshold, per-class
/// NMS, cap at `max_detections`.
pub fn postprocess(cfg: &DetectorConfig, boxes: &[BBox], scores: &[f64], reg: &[f64], score_thr: f64) -> Vec<Detection> {
    let k1 = cfg.num_classes + 1;
    let size = cfg.image_size as f64;
    let refined: Vec<BBox> = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let d = [reg[4 * i], reg[4 * i + 1], reg[4 * i + 2], reg[4 * i + 3]];
            decode(&d, b).clip(size, size)
        })
        .collect();
    let mut out = Vec::new();
    for class in 1..k1 {
        let mut cand = Vec::new();
        let mut cand_scores = Vec::new();
        for (i, b) in refined.iter().enumerate() {
            let s = scores[i * k1 + class];
            if s >= score_thr && b.is_valid() {
                cand.push(*b);
                cand_scores.push(s);
            }
        }
        for i in nms(&cand, &cand_scores, cfg.test_nms_iou, usize::MAX) {
            out.push(Detection {
                bbox: cand[i],
                class: class - 1,
                score: cand_scores[i],
            });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(cfg.max_detections);
    out
}

/// Proposal selection on plain values. `logits` is `[n,2]`, `deltas` `[n,4]`.
pub fn select_proposals(
    anchors: &[BBox],
    logits: &[f64],
    deltas: &[f64],
    image_size: f64,
    top_n: usize,
    nms_iou: f64,
) -> Vec<(BBox, f64)> {
    let mut boxes = Vec::with_capacity(anchors.len());
    let mut scores = Vec::with_capacity(anchors.len());
    for (i, a) in anchors.iter().enumerate() {
        let d = [deltas[4 * i], deltas[4 * i + 1], deltas[4 * i + 2], deltas[4 * i + 3]];
        let b = decode(&d, a).clip(image_size, image_size);
        if b.width() >= 1.0 && b.height() >= 1.0 {
            // P(object) from the two-way logits
            let z = logits[2 * i + 1] - logits[2 * i];
            boxes.push(b);
            scores.push(1.0 / (1.0 + (-z).exp()));
        }
    }
    nms(&boxes, &scores, nms_iou, top_n)
        .into_iter()
        .map(|i| (boxes[i], scores[i]))
        .collect()
}

/// Cell range `[start, end)` covered by bin `j` of `grid` over `[lo, hi]` (inclusive).
fn bin_range(lo: usize, hi: usize, j: usize, grid: usize) -> (usize, usize) {
    let len = hi - lo + 1;
    let start = lo + (j * len) / grid;
    let end = lo + ((j + 1) * len).div_ceil(grid);
    let start = start.min(hi);
    (start, end.clamp(start + 1, hi + 1))
}

/// Projects a pixel box onto a feature map with the given stride; inclusive
/// cell bounds clamped to the map.
pub fn project_box(b: &BBox, stride: usize, rows: usize, cols: usize) -> (usize, usize, usize, usize) {
    let s = stride as f64;
    let clamp = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
    let x1 = clamp((b.x1 / s).floor(), cols);
    let y1 = clamp((b.y1 / s).floor(), rows);
    let x2 = clamp((b.x2 / s).ceil() - 1.0, cols).max(x1);
    let y2 = clamp((b.y2 / s).ceil() - 1.0, rows).max(y1);
    (x1, y1, x2, y2)
}

/// Max ROI pooling of `feature: [C,h,w]` over each box into a `grid×grid`
/// bin layout. Output `[N, C, grid, grid]`; gradients route to each bin's
/// first maximum.
pub fn roi_pool<T: Scalar>(tape: &mut Tape<T>, feature: Var, boxes: &[BBox], stride: usize, grid: usize) -> Result<Var> {
    let s = tape.shape(feature).to_vec();
    if s.len() != 3 || grid == 0 {
        return Err(Error::shape("roi_pool", format!("expected [C,h,w] and grid >= 1, got {s:?}")));
    }
    let (c, rows, cols) = (s[0], s[1], s[2]);
    let data = tape.value(feature).data();
    let mut index = Vec::with_capacity(boxes.len() * c * grid * grid);
    for b in boxes {
        let (x1, y1, x2, y2) = project_box(b, stride, rows, cols);
        for ci in 0..c {
            for gy in 0..grid {
                let (ys, ye) = bin_range(y1, y2, gy, grid);
                for gx in 0..grid {
                    let (xs, xe) = bin_range(x1, x2, gx, grid);
                    let mut best = (ci * rows + ys) * cols + xs;
                    for y in ys..ye {
                        for x in xs..xe {
                            let at = (ci * rows + y) * cols + x;
                            if data[at] > data[best] {
                                best = at;
                            }
                        }
                    }
                    index.push(best);
                }
            }
        }
    }
    tape.gather(feature, index, &[boxes.len(), c, grid, grid])
}
