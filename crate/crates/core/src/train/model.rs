//! Detector plus domain classifiers, and one training step of the
//! combined objective.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::SrmSpec;
use crate::alignment::{
    aggregate_proposal_features, head_rows, hierarchical_alignment_loss, proposal_alignment_loss,
    total_alignment_loss, BlockDomainClassifier, ProposalDomainClassifier,
};
use crate::autodiff::{Bound, Gradients, ParamStore, Tape, Tensor, Var};
use crate::detector::{detection_loss, Annotation, BBox, Detection, Detector, ImageForward};
use crate::domain::Domain;
use crate::error::Result;
use crate::scalar::Scalar;

use super::config::RunConfig;
use super::optim::Sgd;

/// Per-iteration scalar losses. Inactive terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_det: f64,
    pub l_3: f64,
    pub l_4: f64,
    pub l_5: f64,
    pub l_p: f64,
    pub l_t: f64,
    pub l_maf: f64,
}

impl LossBreakdown {
    /// `|l_t − (l_p + l_3 + l_4 + l_5)|`.
    pub fn alignment_residual(&self) -> f64 {
        (self.l_t - (self.l_p + self.l_3 + self.l_4 + self.l_5)).abs()
    }

    /// `|l_maf − (l_det + alpha·l_t)|`.
    pub fn total_residual(&self, alpha: f64) -> f64 {
        (self.l_maf - (self.l_det + alpha * self.l_t)).abs()
    }
}

/// Loss nodes of one iteration's tape.
#[derive(Clone, Copy, Debug)]
pub struct LossGraph {
    pub l_det: Var,
    pub l_3: Option<Var>,
    pub l_4: Option<Var>,
    pub l_5: Option<Var>,
    pub l_p: Option<Var>,
    pub l_t: Option<Var>,
    pub l_maf: Var,
}

impl LossGraph {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<T>) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| tape.value(x).data()[0].as_f64());
        LossBreakdown {
            l_det: v(Some(self.l_det)),
            l_3: v(self.l_3),
            l_4: v(self.l_4),
            l_5: v(self.l_5),
            l_p: v(self.l_p),
            l_t: v(self.l_t),
            l_maf: v(Some(self.l_maf)),
        }
    }
}

/// RNG for one purpose under the run seed. Detector and each classifier get
/// their own stream so switching alignment parts on or off never changes
/// the detector's initialisation.
pub fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const DETECTOR_STREAM: u64 = 1;
const BLOCK_STREAM: u64 = 10;
const PROPOSAL_STREAM: u64 = 20;

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f64> {
    pub detector: Detector,
    pub blocks: Vec<BlockDomainClassifier>,
    pub proposal: Option<ProposalDomainClassifier>,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let detector = Detector::new(
            cfg.detector.clone(),
            &mut params,
            &mut init_rng(cfg.seed, DETECTOR_STREAM),
        )?;
        let a = &cfg.align;
        let srm = SrmSpec::new(a.srm_s, a.srm_channels)?;
        let mut blocks = Vec::with_capacity(a.blocks.len());
        for &m in &a.blocks {
            let mut rng = init_rng(cfg.seed, BLOCK_STREAM + m as u64);
            blocks.push(BlockDomainClassifier::new(
                m,
                detector.block_channels(m),
                srm,
                &mut params,
                &mut rng,
            )?);
        }
        let proposal = if a.proposal {
            let width = ProposalDomainClassifier::width_for(&detector, a.aggregate);
            let mut rng = init_rng(cfg.seed, PROPOSAL_STREAM);
            Some(ProposalDomainClassifier::new(width, &mut params, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            detector,
            blocks,
            proposal,
            params,
        })
    }

    /// Fresh model with parameters from a checkpoint.
    pub fn load(cfg: &RunConfig, path: &Path) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        m.params.load(path)?;
        Ok(m)
    }

    pub fn detect(&self, image: &Tensor<T>, score_thr: f64) -> Result<Vec<Detection>> {
        self.detector.detect(&self.params, image, score_thr)
    }

    /// Alignment terms for one image; the head is evaluated on proposals
    /// only when the proposal branch needs it.
    fn align_image(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        cfg: &RunConfig,
        fwd: &ImageForward,
        head_rows_of: Option<(crate::detector::HeadOutput, usize)>,
        d: Domain,
    ) -> Result<([Option<Var>; 3], Option<Var>)> {
        let a = &cfg.align;
        let bl = hierarchical_alignment_loss(tape, p, &fwd.features, d, &self.blocks, a.lambda, a.reduction)?;
        let mut lp = None;
        if let Some(clf) = &self.proposal {
            let head = match head_rows_of {
                Some((head, n)) if n > 0 => Some(head_rows(tape, &head, n)?),
                Some(_) => None,
                None if fwd.proposals.is_empty() => None,
                None => {
                    let boxes: Vec<BBox> = fwd.proposals.iter().map(|(b, _)| *b).collect();
                    Some(self.detector.head_forward(tape, p, fwd.features.block5, &boxes)?)
                }
            };
            match head {
                Some(head) => {
                    let x = aggregate_proposal_features(tape, &head, a.aggregate)?;
                    let out = proposal_alignment_loss(tape, p, x, d, clf, a.proposal_reversal(), a.reduction)?;
                    lp = out.map(|o| o.loss);
                }
                None => log::warn!("no proposals on {} image; L_p contributes 0", d.as_str()),
            }
        }
        Ok(([bl.l3, bl.l4, bl.l5], lp))
    }

    /// Builds `L_MAF` for one source/target pair on `tape`. `target` may be
    /// omitted when no alignment term is active.
    pub fn losses(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        cfg: &RunConfig,
        source: &Tensor<T>,
        annotation: &Annotation,
        target: Option<&Tensor<T>>,
    ) -> Result<LossGraph> {
        let det = &self.detector;
        let fs = det.forward_image(tape, p, source)?;
        let n_props = fs.proposals.len();
        let mut rois: Vec<BBox> = fs.proposals.iter().map(|(b, _)| *b).collect();
        rois.extend_from_slice(&annotation.boxes);
        let head_s = det.head_forward(tape, p, fs.features.block5, &rois)?;
        let dl = detection_loss(
            tape,
            det.config(),
            Domain::Source,
            &fs.rpn,
            &fs.anchors,
            &head_s,
            &rois,
            annotation,
        )?;
        let l_det = dl.total;

        let active = !self.blocks.is_empty() || self.proposal.is_some();
        let (Some(target), true) = (target, active) else {
            return Ok(LossGraph {
                l_det,
                l_3: None,
                l_4: None,
                l_5: None,
                l_p: None,
                l_t: None,
                l_maf: l_det,
            });
        };

        let (bs, ps) = self.align_image(tape, p, cfg, &fs, Some((head_s, n_props)), Domain::Source)?;
        let ft = det.forward_image(tape, p, target)?;
        let (bt, pt) = self.align_image(tape, p, cfg, &ft, None, Domain::Target)?;

        let half = T::lit(0.5);
        let mut mean_pair = |a: Option<Var>, b: Option<Var>| -> Result<Option<Var>> {
            Ok(match (a, b) {
                (Some(a), Some(b)) => {
                    let s = tape.add(a, b)?;
                    Some(tape.scale(s, half))
                }
                (Some(x), None) | (None, Some(x)) => Some(tape.scale(x, half)),
                (None, None) => None,
            })
        };
        let l_3 = mean_pair(bs[0], bt[0])?;
        let l_4 = mean_pair(bs[1], bt[1])?;
        let l_5 = mean_pair(bs[2], bt[2])?;
        let l_p = mean_pair(ps, pt)?;
        let terms: Vec<Var> = [l_p, l_3, l_4, l_5].into_iter().flatten().collect();
        let l_t = total_alignment_loss(tape, &terms)?;
        let weighted = tape.scale(l_t, T::lit(cfg.alpha));
        let l_maf = tape.add(l_det, weighted)?;
        Ok(LossGraph {
            l_det,
            l_3,
            l_4,
            l_5,
            l_p,
            l_t: Some(l_t),
            l_maf,
        })
    }

    /// Loss values and gradients for one pair, without updating parameters.
    pub fn gradients(
        &self,
        cfg: &RunConfig,
        source: &Tensor<T>,
        annotation: &Annotation,
        target: Option<&Tensor<T>>,
    ) -> Result<(LossBreakdown, Bound, Gradients<T>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let g = self.losses(&mut tape, &p, cfg, source, annotation, target)?;
        let grads = tape.backward(g.l_maf)?;
        Ok((g.breakdown(&tape), p, grads))
    }
}

/// One minimax iteration: a single tape over the source/target pair, one
/// backward through the reversal layers, one momentum-SGD update.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    sgd: &mut Sgd<T>,
    cfg: &RunConfig,
    lr: f64,
    source: &Tensor<T>,
    annotation: &Annotation,
    target: &Tensor<T>,
) -> Result<LossBreakdown> {
    let target = cfg.aligns().then_some(target);
    let (losses, bound, grads) = model.gradients(cfg, source, annotation, target)?;
    sgd.step(&mut model.params, &bound, &grads, lr)?;
    Ok(losses)
}
