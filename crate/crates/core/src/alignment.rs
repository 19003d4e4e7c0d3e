//! Adversarial feature alignment: pixel-wise domain classifiers on backbone
//! blocks (behind GRL and SRM) and a proposal-level domain classifier on
//! aggregated head outputs (behind WGRL).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{grl, set_wgrl_probs, srm_forward, wgrl_deferred, ReversalMode, ReversalSpec, SrmSpec};
use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::detector::net::{Conv, Dense};
use crate::detector::{BackboneFeatures, BBox, Detector, HeadOutput};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How per-location and per-proposal cross-entropies are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    Sum,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            other => Err(Error::Config(format!("reduction must be mean or sum, got {other}"))),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    /// Backbone blocks with a domain classifier, subset of {3, 4, 5}.
    pub blocks: Vec<usize>,
    pub proposal: bool,
    pub lambda: f64,
    pub srm_s: usize,
    pub srm_channels: usize,
    pub reduction: Reduction,
    /// Weighted reversal on the proposal branch; plain GRL when false.
    pub wgrl: bool,
    /// Concatenate class scores and box regression onto the proposal feature.
    pub aggregate: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            blocks: vec![3, 4, 5],
            proposal: true,
            lambda: 1.0,
            srm_s: 2,
            srm_channels: 32,
            reduction: Reduction::Mean,
            wgrl: true,
            aggregate: true,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.blocks.iter().find(|b| !(3..=5).contains(*b)) {
            return Err(Error::Config(format!("align.blocks: block {b} not in 3,4,5")));
        }
        let mut sorted = self.blocks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.blocks.len() {
            return Err(Error::Config("align.blocks: duplicate block".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("align.lambda must be >= 0, got {}", self.lambda)));
        }
        SrmSpec::new(self.srm_s, self.srm_channels).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn proposal_reversal(&self) -> ReversalSpec {
        ReversalSpec {
            lambda: self.lambda,
            mode: if self.wgrl {
                ReversalMode::Weighted
            } else {
                ReversalMode::Plain
            },
        }
    }
}

fn reduce<T: Scalar>(tape: &mut Tape<T>, mean_ce: Var, n: usize, reduction: Reduction) -> Var {
    match reduction {
        Reduction::Mean => mean_ce,
        Reduction::Sum => tape.scale(mean_ce, T::lit(n as f64)),
    }
}

/// Pixel-wise domain classifier for one backbone block: SRM (1×1 conv then
/// space-to-depth), 1×1 conv to 16 + ReLU, 1×1 conv to 2 domain logits.
#[derive(Clone, Debug)]
pub struct BlockDomainClassifier {
    pub block: usize,
    pub srm: SrmSpec,
    srm_conv: Conv,
    hidden: Conv,
    out: Conv,
}

pub const BLOCK_HIDDEN: usize = 16;
pub const PROPOSAL_HIDDEN: usize = 32;

impl BlockDomainClassifier {
    pub fn new<T: Scalar>(
        block: usize,
        in_channels: usize,
        srm: SrmSpec,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let name = format!("align.block{block}");
        let srm_conv = Conv {
            w: store.add_he(format!("{name}.srm.w"), &[srm.out_channels, in_channels, 1, 1], in_channels, rng)?,
            b: store.add_zeros(format!("{name}.srm.b"), &[srm.out_channels])?,
        };
        let wide = srm.out_channels * srm.s * srm.s;
        let hidden = Conv {
            w: store.add_he(format!("{name}.fc1.w"), &[BLOCK_HIDDEN, wide, 1, 1], wide, rng)?,
            b: store.add_zeros(format!("{name}.fc1.b"), &[BLOCK_HIDDEN])?,
        };
        let out = Conv {
            w: store.add_zeros(format!("{name}.fc2.w"), &[2, BLOCK_HIDDEN, 1, 1])?,
            b: store.add_zeros(format!("{name}.fc2.b"), &[2])?,
        };
        Ok(Self {
            block,
            srm,
            srm_conv,
            hidden,
            out,
        })
    }

    /// Per-location logits `[locations, 2]` for an already reversed feature map.
    pub fn logits<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, reversed: Var) -> Result<Var> {
        let reduced = srm_forward(tape, reversed, &self.srm, p.var(self.srm_conv.w), p.var(self.srm_conv.b))?;
        let h = self.hidden.apply(tape, p, reduced, 0)?;
        let h = tape.relu(h);
        let z = self.out.apply(tape, p, h, 0)?;
        let s = tape.shape(z).to_vec();
        let locs = s[1] * s[2];
        let index = (0..locs).flat_map(|l| [l, locs + l]).collect();
        tape.gather(z, index, &[locs, 2])
    }

    /// `L_m` for one image: GRL, classifier, cross-entropy against `d` at
    /// every location.
    pub fn loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        feature: Var,
        d: Domain,
        lambda: f64,
        reduction: Reduction,
    ) -> Result<Var> {
        let reversed = grl(tape, feature, lambda)?;
        let logits = self.logits(tape, p, reversed)?;
        let n = tape.shape(logits)[0];
        let ce = tape.softmax_cross_entropy(logits, &vec![d.label(); n])?;
        Ok(reduce(tape, ce, n, reduction))
    }
}

/// Per-block alignment losses; `None` for blocks without a classifier.
#[derive(Clone, Copy, Debug, Default)]
pub struct BlockLosses {
    pub l3: Option<Var>,
    pub l4: Option<Var>,
    pub l5: Option<Var>,
}

impl BlockLosses {
    pub fn get(&self, m: usize) -> Option<Var> {
        match m {
            3 => self.l3,
            4 => self.l4,
            5 => self.l5,
            _ => None,
        }
    }

    fn set(&mut self, m: usize, v: Var) {
        match m {
            3 => self.l3 = Some(v),
            4 => self.l4 = Some(v),
            5 => self.l5 = Some(v),
            _ => unreachable!("blocks validated to 3..=5"),
        }
    }

    pub fn present(&self) -> impl Iterator<Item = Var> {
        [self.l3, self.l4, self.l5].into_iter().flatten()
    }
}

/// Hierarchical alignment over every configured block; a single backward
/// through the result trains the classifiers to separate domains and the
/// backbone to confuse them.
pub fn hierarchical_alignment_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    features: &BackboneFeatures,
    d: Domain,
    classifiers: &[BlockDomainClassifier],
    lambda: f64,
    reduction: Reduction,
) -> Result<BlockLosses> {
    let mut out = BlockLosses::default();
    for clf in classifiers {
        let f = features
            .block(clf.block)
            .ok_or_else(|| Error::InvalidArgument(format!("no backbone block {}", clf.block)))?;
        let l = clf.loss(tape, p, f, d, lambda, reduction)?;
        out.set(clf.block, l);
    }
    Ok(out)
}

/// One proposal's values, detached from any tape.
#[derive(Clone, Debug)]
pub struct ProposalRecord<T: Scalar = f64> {
    pub bbox: BBox,
    pub feature: Tensor<T>,
    pub cls_scores: Tensor<T>,
    pub bbox_reg: Tensor<T>,
    pub objectness: f64,
}

impl<T: Scalar> ProposalRecord<T> {
    /// Reads row `row` of a head evaluation.
    pub fn from_head(tape: &Tape<T>, head: &HeadOutput, row: usize, bbox: BBox, objectness: f64) -> Result<Self> {
        let take = |v: Var| -> Result<Tensor<T>> {
            let t = tape.value(v);
            let w = t.shape()[1];
            Ok(Tensor::vector(t.data()[row * w..(row + 1) * w].to_vec()))
        };
        Ok(Self {
            bbox,
            feature: take(head.feature)?,
            cls_scores: take(head.scores)?,
            bbox_reg: take(head.bbox_reg)?,
            objectness,
        })
    }

    /// `feature ⊕ cls_scores ⊕ bbox_reg` as plain values.
    pub fn aggregate(&self) -> Tensor<T> {
        let mut v = self.feature.data().to_vec();
        v.extend_from_slice(self.cls_scores.data());
        v.extend_from_slice(self.bbox_reg.data());
        Tensor::vector(v)
    }
}

/// Rows `0..n` of a head evaluation: the proposals that take part in
/// alignment (the head may also have scored appended ground-truth boxes).
pub fn head_rows<T: Scalar>(tape: &mut Tape<T>, head: &HeadOutput, n: usize) -> Result<HeadOutput> {
    let total = tape.shape(head.feature)[0];
    if n > total {
        return Err(Error::InvalidArgument(format!("{n} rows requested from {total}")));
    }
    if n == total {
        return Ok(*head);
    }
    let mut take = |v: Var| -> Result<Var> {
        let w = tape.shape(v)[1];
        tape.gather(v, (0..n * w).collect(), &[n, w])
    };
    Ok(HeadOutput {
        feature: take(head.feature)?,
        logits: take(head.logits)?,
        scores: take(head.scores)?,
        bbox_reg: take(head.bbox_reg)?,
    })
}

/// `[N, F + (K+1) + 4]` concatenation of proposal feature, softmax scores and
/// box regression. Without `aggregate` only the feature is used.
pub fn aggregate_proposal_features<T: Scalar>(tape: &mut Tape<T>, head: &HeadOutput, aggregate: bool) -> Result<Var> {
    if aggregate {
        tape.concat(&[head.feature, head.scores, head.bbox_reg], 1)
    } else {
        Ok(head.feature)
    }
}

/// Two-layer MLP domain classifier on aggregated proposal vectors.
#[derive(Clone, Debug)]
pub struct ProposalDomainClassifier {
    pub input_width: usize,
    fc1: Dense,
    fc2: Dense,
}

impl ProposalDomainClassifier {
    pub fn new<T: Scalar>(input_width: usize, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        let fc1 = Dense::new(store, "align.proposal.fc1", input_width, PROPOSAL_HIDDEN, rng)?;
        // zero output layer: both classifiers start at p = 1/2
        let fc2 = Dense {
            w: store.add_zeros("align.proposal.fc2.w", &[PROPOSAL_HIDDEN, 2])?,
            b: store.add_zeros("align.proposal.fc2.b", &[2])?,
        };
        Ok(Self { input_width, fc1, fc2 })
    }

    /// Classifier input width for a detector.
    pub fn width_for(det: &Detector, aggregate: bool) -> usize {
        if aggregate {
            det.aggregate_width()
        } else {
            det.config().head_width
        }
    }

    pub fn logits<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = tape.shape(x).get(1).copied().unwrap_or(0);
        if w != self.input_width {
            return Err(Error::ShapeMismatch {
                op: "proposal classifier",
                left: vec![self.input_width],
                right: tape.shape(x).to_vec(),
            });
        }
        let h = self.fc1.apply(tape, p, x)?;
        let h = tape.relu(h);
        self.fc2.apply(tape, p, h)
    }
}

/// Source probability (softmax column 1) of each row of `[N,2]` logits.
pub fn source_probabilities<T: Scalar>(tape: &Tape<T>, logits: Var) -> Vec<f64> {
    tape.value(logits)
        .data()
        .chunks(2)
        .map(|r| {
            let z = r[1].as_f64() - r[0].as_f64();
            1.0 / (1.0 + (-z).exp())
        })
        .collect()
}

/// Output of [`proposal_alignment_loss`].
#[derive(Clone, Debug)]
pub struct ProposalAlignment {
    pub loss: Var,
    /// The reversal node between aggregation and classifier.
    pub reversal: Var,
    /// Per-proposal source probability from the same forward pass.
    pub p_source: Vec<f64>,
}

/// `L_p` for one image from aggregated proposal vectors `[N, width]`.
///
/// Returns `None` (and logs a warning) when there are no proposals.
pub fn proposal_alignment_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    aggregated: Var,
    d: Domain,
    clf: &ProposalDomainClassifier,
    spec: ReversalSpec,
    reduction: Reduction,
) -> Result<Option<ProposalAlignment>> {
    let n = tape.shape(aggregated)[0];
    if n == 0 {
        log::warn!("no proposals for proposal alignment; L_p contributes 0");
        return Ok(None);
    }
    let reversal = match spec.mode {
        ReversalMode::Plain => grl(tape, aggregated, spec.lambda)?,
        ReversalMode::Weighted => wgrl_deferred(tape, aggregated, spec.lambda)?,
    };
    let logits = clf.logits(tape, p, reversal)?;
    let p_source = source_probabilities(tape, logits);
    if spec.mode == ReversalMode::Weighted {
        set_wgrl_probs(tape, reversal, &p_source, d)?;
    }
    let ce = tape.softmax_cross_entropy(logits, &vec![d.label(); n])?;
    Ok(Some(ProposalAlignment {
        loss: reduce(tape, ce, n, reduction),
        reversal,
        p_source,
    }))
}

/// `L_t`: plain sum of the active alignment terms (zero when none is active).
pub fn total_alignment_loss<T: Scalar>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    };
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}
