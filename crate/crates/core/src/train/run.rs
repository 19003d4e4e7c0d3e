//! The training loop: seeded epoch shuffles, loss log, checkpoints, resume.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{self, Record};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synthetic::Sample;

use super::config::RunConfig;
use super::model::{init_rng, train_step, LossBreakdown, Model};
use super::optim::Sgd;

pub const LOSSES_CSV: &str = "losses.csv";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const STATE_CKPT: &str = "state.ckpt";
const ITER_RECORD: &str = "iter";

const SOURCE_SHUFFLE: u64 = 100;
const TARGET_SHUFFLE: u64 = 101;

/// Index of the sample visited at `iter` when cycling `n` samples in
/// shuffled epochs; a pure function of `(seed, stream, iter)`.
pub fn epoch_index(seed: u64, stream: u64, iter: usize, n: usize) -> usize {
    let epoch = (iter / n) as u64;
    let mut rng = init_rng(seed, (stream << 32) | epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order[iter % n]
}

/// One row of `losses.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iter: usize,
    pub l_det: f64,
    pub l_3: f64,
    pub l_4: f64,
    pub l_5: f64,
    pub l_p: f64,
    pub l_t: f64,
    pub l_maf: f64,
    pub lr: f64,
}

impl LossRow {
    pub fn new(iter: usize, l: &LossBreakdown, lr: f64) -> Self {
        Self {
            iter,
            l_det: l.l_det,
            l_3: l.l_3,
            l_4: l.l_4,
            l_5: l.l_5,
            l_p: l.l_p,
            l_t: l.l_t,
            l_maf: l.l_maf,
            lr,
        }
    }

    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            l_det: self.l_det,
            l_3: self.l_3,
            l_4: self.l_4,
            l_5: self.l_5,
            l_p: self.l_p,
            l_t: self.l_t,
            l_maf: self.l_maf,
        }
    }
}

pub fn write_losses(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_losses(path: &Path) -> Result<Vec<LossRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// Training state over a fixed pair of sample lists.
pub struct Trainer<'a, T: Scalar = f64> {
    pub cfg: RunConfig,
    pub model: Model<T>,
    pub sgd: Sgd<T>,
    /// Iterations completed.
    pub iter: usize,
    pub rows: Vec<LossRow>,
    source: Vec<(Tensor<T>, &'a Sample)>,
    target: Vec<Tensor<T>>,
}

fn convert<T: Scalar>(s: &Sample) -> Result<Tensor<T>> {
    Tensor::from_f64(s.image.shape(), s.image.data())
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(cfg: &RunConfig, source: &'a [Sample], target: &'a [Sample]) -> Result<Self> {
        cfg.validate()?;
        if source.is_empty() {
            return Err(Error::InvalidArgument("training needs at least one source image".into()));
        }
        if cfg.aligns() && target.is_empty() {
            return Err(Error::InvalidArgument("alignment needs at least one target image".into()));
        }
        let model = Model::new(cfg)?;
        let sgd = Sgd::new(&model.params, cfg.momentum);
        Ok(Self {
            cfg: cfg.clone(),
            sgd,
            model,
            iter: 0,
            rows: Vec::new(),
            source: source.iter().map(|s| Ok((convert(s)?, s))).collect::<Result<_>>()?,
            target: target.iter().map(convert).collect::<Result<_>>()?,
        })
    }

    pub fn done(&self) -> bool {
        self.iter >= self.cfg.total_iters()
    }

    /// Runs iteration `self.iter` and records its losses.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let i = self.iter;
        let lr = self.cfg.lr_at(i);
        let si = epoch_index(self.cfg.seed, SOURCE_SHUFFLE, i, self.source.len());
        let (src, sample) = &self.source[si];
        // target images only enter the tape when alignment is active
        let tgt = if self.target.is_empty() {
            src
        } else {
            &self.target[epoch_index(self.cfg.seed, TARGET_SHUFFLE, i, self.target.len())]
        };
        let losses = train_step(&mut self.model, &mut self.sgd, &self.cfg, lr, src, &sample.annotation, tgt)?;
        self.rows.push(LossRow::new(i, &losses, lr));
        self.iter += 1;
        Ok(losses)
    }

    pub fn state_records(&self) -> Vec<Record> {
        let mut r = self.sgd.records(&self.model.params);
        r.push(Record {
            name: ITER_RECORD.into(),
            shape: vec![1],
            values: vec![self.iter as f64],
        });
        r
    }

    /// Writes `model.ckpt`, `state.ckpt` and `losses.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.params.save(&dir.join(MODEL_CKPT))?;
        checkpoint::write(&dir.join(STATE_CKPT), &self.state_records())?;
        write_losses(&dir.join(LOSSES_CSV), &self.rows)
    }

    /// Restores parameters, velocities, iteration and loss log from `dir`.
    pub fn resume(&mut self, dir: &Path) -> Result<()> {
        self.model.params.load(&dir.join(MODEL_CKPT))?;
        let path = dir.join(STATE_CKPT);
        let records = checkpoint::read(&path)?;
        self.sgd.load_records(&self.model.params, &records, &path)?;
        let iter = records
            .iter()
            .find(|r| r.name == ITER_RECORD)
            .and_then(|r| r.values.first())
            .ok_or_else(|| Error::format(&path, "missing iteration record"))?;
        self.iter = *iter as usize;
        let mut rows = read_losses(&dir.join(LOSSES_CSV))?;
        if rows.len() < self.iter {
            return Err(Error::format(
                dir.join(LOSSES_CSV),
                format!("{} rows for {} completed iterations", rows.len(), self.iter),
            ));
        }
        rows.truncate(self.iter);
        self.rows = rows;
        Ok(())
    }
}

/// What a finished run reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iters: usize,
    pub last: LossBreakdown,
    /// Largest `|l_t − Σ terms|` over all iterations.
    pub max_alignment_residual: f64,
    /// Largest `|l_maf − (l_det + α·l_t)|` over all iterations.
    pub max_total_residual: f64,
    pub out_dir: PathBuf,
}

/// Trains to the end of the schedule, writing outputs into `out`. With
/// `resume`, continues from a previous run's state in `out` if present.
pub fn train<T: Scalar>(
    cfg: &RunConfig,
    source: &[Sample],
    target: &[Sample],
    out: &Path,
    resume: bool,
) -> Result<(Model<T>, TrainSummary)> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut t = Trainer::<T>::new(cfg, source, target)?;
    if resume && out.join(STATE_CKPT).exists() {
        t.resume(out)?;
        log::info!("resumed at iteration {}", t.iter);
    }
    let total = cfg.total_iters();
    let report = (total / 20).max(1);
    while !t.done() {
        let l = t.step()?;
        if t.iter % report == 0 || t.iter == total {
            log::info!(
                "iter {}/{} l_det {:.4} l_t {:.4} l_maf {:.4}",
                t.iter,
                total,
                l.l_det,
                l.l_t,
                l.l_maf
            );
        }
        if cfg.checkpoint_every > 0 && t.iter % cfg.checkpoint_every == 0 && !t.done() {
            t.save(out)?;
        }
    }
    t.save(out)?;
    let (mut a, mut b) = (0.0f64, 0.0f64);
    for r in &t.rows {
        let l = r.breakdown();
        a = a.max(l.alignment_residual());
        b = b.max(l.total_residual(cfg.alpha));
    }
    let summary = TrainSummary {
        iters: t.iter,
        last: t.rows.last().map(LossRow::breakdown).unwrap_or_default(),
        max_alignment_residual: a,
        max_total_residual: b,
        out_dir: out.to_path_buf(),
    };
    Ok((t.model, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epochs_visit_every_sample_once() {
        for epoch in 0..3 {
            let mut seen: Vec<usize> = (0..7).map(|i| epoch_index(5, 1, epoch * 7 + i, 7)).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..7).collect::<Vec<_>>());
        }
        let a: Vec<usize> = (0..7).map(|i| epoch_index(5, 1, i, 7)).collect();
        let b: Vec<usize> = (7..14).map(|i| epoch_index(5, 1, i, 7)).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn losses_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        let rows = vec![LossRow::new(
            0,
            &LossBreakdown {
                l_det: 1.25,
                l_t: 0.1 + 0.2,
                l_maf: 1.0 / 3.0,
                ..Default::default()
            },
            1e-4,
        )];
        write_losses(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("iter,l_det,l_3,l_4,l_5,l_p,l_t,l_maf,lr\n"));
        assert_eq!(read_losses(&p).unwrap(), rows);
    }
}
