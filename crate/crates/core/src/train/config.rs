//! Run configuration: defaults, flat `key = value` files, ablation presets.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{AlignConfig, Reduction};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Weight of the alignment loss in `L_det + alpha * L_t`.
    pub alpha: f64,
    pub momentum: f64,
    pub phase1_iters: usize,
    pub lr1: f64,
    pub phase2_iters: usize,
    pub lr2: f64,
    /// Seeds model initialisation and the epoch shuffles.
    pub seed: u64,
    /// Score threshold applied before evaluation.
    pub score_thr: f64,
    /// Iterations between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub align: AlignConfig,
    pub detector: DetectorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            momentum: 0.9,
            phase1_iters: 3000,
            lr1: 1e-3,
            phase2_iters: 1000,
            lr2: 1e-4,
            seed: 0,
            score_thr: 0.05,
            checkpoint_every: 0,
            align: AlignConfig::default(),
            detector: DetectorConfig::default(),
        }
    }
}

/// Every key a config file may set.
pub const KEYS: &[&str] = &[
    "alpha",
    "momentum",
    "phase1_iters",
    "lr1",
    "phase2_iters",
    "lr2",
    "seed",
    "score_thr",
    "checkpoint_every",
    "align.blocks",
    "align.proposal",
    "align.lambda",
    "align.srm_s",
    "align.srm_channels",
    "align.reduction",
    "align.wgrl",
    "align.aggregate",
    "det.image_size",
    "det.num_classes",
    "det.widths",
    "det.anchor_sizes",
    "det.rpn_width",
    "det.head_width",
    "det.roi_grid",
    "det.top_n",
    "det.nms_iou",
    "det.pos_iou",
    "det.neg_iou",
    "det.test_nms_iou",
    "det.max_detections",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>>
where
    V::Err: std::fmt::Display,
{
    let value = value.trim();
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<V: std::fmt::Display>(vs: &[V]) -> String {
    if vs.is_empty() {
        return "none".into();
    }
    vs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Total iterations over both learning-rate phases.
    pub fn total_iters(&self) -> usize {
        self.phase1_iters + self.phase2_iters
    }

    /// Learning rate for 0-based iteration `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        if iter < self.phase1_iters {
            self.lr1
        } else {
            self.lr2
        }
    }

    /// Whether any alignment term is computed.
    pub fn aligns(&self) -> bool {
        !self.align.blocks.is_empty() || self.align.proposal
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let a = &mut self.align;
        let d = &mut self.detector;
        match key {
            "alpha" => self.alpha = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "phase1_iters" => self.phase1_iters = parse(key, v)?,
            "lr1" => self.lr1 = parse(key, v)?,
            "phase2_iters" => self.phase2_iters = parse(key, v)?,
            "lr2" => self.lr2 = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "score_thr" => self.score_thr = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "align.blocks" => a.blocks = parse_list(key, v)?,
            "align.proposal" => a.proposal = parse(key, v)?,
            "align.lambda" => a.lambda = parse(key, v)?,
            "align.srm_s" => a.srm_s = parse(key, v)?,
            "align.srm_channels" => a.srm_channels = parse(key, v)?,
            "align.reduction" => a.reduction = parse::<Reduction>(key, v)?,
            "align.wgrl" => a.wgrl = parse(key, v)?,
            "align.aggregate" => a.aggregate = parse(key, v)?,
            "det.image_size" => d.image_size = parse(key, v)?,
            "det.num_classes" => d.num_classes = parse(key, v)?,
            "det.widths" => {
                let w: Vec<usize> = parse_list(key, v)?;
                d.widths = w
                    .try_into()
                    .map_err(|w: Vec<usize>| Error::Config(format!("{key}: need 5 widths, got {}", w.len())))?;
            }
            "det.anchor_sizes" => d.anchor_sizes = parse_list(key, v)?,
            "det.rpn_width" => d.rpn_width = parse(key, v)?,
            "det.head_width" => d.head_width = parse(key, v)?,
            "det.roi_grid" => d.roi_grid = parse(key, v)?,
            "det.top_n" => d.top_n = parse(key, v)?,
            "det.nms_iou" => d.nms_iou = parse(key, v)?,
            "det.pos_iou" => d.pos_iou = parse(key, v)?,
            "det.neg_iou" => d.neg_iou = parse(key, v)?,
            "det.test_nms_iou" => d.test_nms_iou = parse(key, v)?,
            "det.max_detections" => d.max_detections = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped; unknown keys and repeated keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: key {key:?} set twice", n + 1)));
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        self.validate()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Flat text form; `from_text(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let a = &self.align;
        let d = &self.detector;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("alpha", self.alpha.to_string());
        kv("momentum", self.momentum.to_string());
        kv("phase1_iters", self.phase1_iters.to_string());
        kv("lr1", self.lr1.to_string());
        kv("phase2_iters", self.phase2_iters.to_string());
        kv("lr2", self.lr2.to_string());
        kv("seed", self.seed.to_string());
        kv("score_thr", self.score_thr.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("align.blocks", join(&a.blocks));
        kv("align.proposal", a.proposal.to_string());
        kv("align.lambda", a.lambda.to_string());
        kv("align.srm_s", a.srm_s.to_string());
        kv("align.srm_channels", a.srm_channels.to_string());
        kv("align.reduction", a.reduction.to_string());
        kv("align.wgrl", a.wgrl.to_string());
        kv("align.aggregate", a.aggregate.to_string());
        kv("det.image_size", d.image_size.to_string());
        kv("det.num_classes", d.num_classes.to_string());
        kv("det.widths", join(&d.widths));
        kv("det.anchor_sizes", join(&d.anchor_sizes));
        kv("det.rpn_width", d.rpn_width.to_string());
        kv("det.head_width", d.head_width.to_string());
        kv("det.roi_grid", d.roi_grid.to_string());
        kv("det.top_n", d.top_n.to_string());
        kv("det.nms_iou", d.nms_iou.to_string());
        kv("det.pos_iou", d.pos_iou.to_string());
        kv("det.neg_iou", d.neg_iou.to_string());
        kv("det.test_nms_iou", d.test_nms_iou.to_string());
        kv("det.max_detections", d.max_detections.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.lr1 > 0.0) || !(self.lr2 > 0.0) {
            return bad(format!("learning rates must be > 0, got {} and {}", self.lr1, self.lr2));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.total_iters() == 0 {
            return bad("schedule has no iterations".into());
        }
        if self.detector.anchor_sizes.is_empty() || self.detector.num_classes == 0 {
            return bad("detector needs anchors and at least one class".into());
        }
        self.align.validate()
    }

    /// SHA-256 of the flat text form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Ablation presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "source-only")]
    SourceOnly,
    #[serde(rename = "pf")]
    ProposalOnly,
    #[serde(rename = "df")]
    BlocksOnly,
    #[serde(rename = "maf-star")]
    MafStar,
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no-wgrl")]
    NoWgrl,
    #[serde(rename = "no-aggregate")]
    NoAggregate,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::SourceOnly,
        Variant::ProposalOnly,
        Variant::BlocksOnly,
        Variant::MafStar,
        Variant::Full,
        Variant::NoWgrl,
        Variant::NoAggregate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source-only",
            Variant::ProposalOnly => "pf",
            Variant::BlocksOnly => "df",
            Variant::MafStar => "maf-star",
            Variant::Full => "full",
            Variant::NoWgrl => "no-wgrl",
            Variant::NoAggregate => "no-aggregate",
        }
    }

    /// `base` with this variant's alignment switches applied.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        match self {
            Variant::SourceOnly => {
                c.alpha = 0.0;
                c.align.blocks.clear();
                c.align.proposal = false;
            }
            Variant::ProposalOnly => c.align.blocks.clear(),
            Variant::BlocksOnly => c.align.proposal = false,
            Variant::MafStar => {
                c.align.blocks = vec![5];
                c.align.proposal = true;
            }
            Variant::Full => {}
            Variant::NoWgrl => c.align.wgrl = false,
            Variant::NoAggregate => c.align.aggregate = false,
        }
        c
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant {s:?} (expected one of {})", names.join(", ")))
            })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
