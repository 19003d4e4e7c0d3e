//! The ablation grid: every variant under identical seeds and schedule.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthetic::Datasets;

use super::config::{RunConfig, Variant};
use super::eval::evaluate_map;
use super::run::train;

pub const ABLATION_JSON: &str = "ablation.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    /// Target-validation mAP@0.5, mean over seeds.
    pub map50: f64,
    pub per_seed: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Hash of the variant's configuration with the base seed.
    #[serde(rename = "config-hash")]
    pub config_hash: String,
}

/// Trains and evaluates each variant for each seed under `out/<variant>/seed<k>`.
pub fn ablation_grid(
    base: &RunConfig,
    data: &Datasets,
    variants: &[Variant],
    seeds: &[u64],
    out: &Path,
) -> Result<BTreeMap<String, AblationEntry>> {
    if data.val.is_empty() {
        return Err(Error::InvalidArgument("ablation needs a labeled validation split".into()));
    }
    let mut report = BTreeMap::new();
    for &v in variants {
        let cfg = v.apply(base);
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let run = RunConfig { seed, ..cfg.clone() };
            let dir = out.join(v.name()).join(format!("seed{seed}"));
            log::info!("ablation: {v} seed {seed}");
            let (model, _) = train::<f64>(&run, &data.source, &data.target, &dir, true)?;
            let r = evaluate_map(&model, &data.val, 0.5, run.score_thr)?;
            per_seed.push(r.map);
        }
        let map50 = if per_seed.is_empty() {
            0.0
        } else {
            per_seed.iter().sum::<f64>() / per_seed.len() as f64
        };
        report.insert(
            v.name().to_string(),
            AblationEntry {
                map50,
                per_seed,
                seeds: seeds.to_vec(),
                config_hash: cfg.hash(),
            },
        );
    }
    write_report(&out.join(ABLATION_JSON), &report)?;
    Ok(report)
}

pub fn write_report(path: &Path, report: &BTreeMap<String, AblationEntry>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
