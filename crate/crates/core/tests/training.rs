//! Training-loop contracts: reductions, loss identities, resume, determinism.

use maf::synthetic::{render, GenConfig, Sample, Stream};
use maf::train::run::{LOSSES_CSV, MODEL_CKPT, STATE_CKPT};
use maf::train::{train, Model, RunConfig, Trainer, Variant};
use maf::Domain;

fn samples(stream: Stream, n: u64) -> Vec<Sample> {
    let cfg = GenConfig::default();
    (0..n)
        .map(|i| {
            let (image, annotation) = render(&cfg, stream, i).unwrap();
            let domain = if stream == Stream::Source { Domain::Source } else { Domain::Target };
            Sample {
                file: format!("{i}"),
                domain,
                image,
                annotation,
            }
        })
        .collect()
}

fn short(variant: Variant, p1: usize, p2: usize) -> RunConfig {
    let mut c = variant.apply(&RunConfig::default());
    c.phase1_iters = p1;
    c.phase2_iters = p2;
    c
}

/// Detector parameters after every iteration.
fn detector_trajectory(cfg: &RunConfig, src: &[Sample], tgt: &[Sample]) -> Vec<Vec<Vec<f64>>> {
    let mut t: Trainer = Trainer::new(cfg, src, tgt).unwrap();
    let mut out = Vec::new();
    while !t.done() {
        t.step().unwrap();
        out.push(
            t.model
                .params
                .iter()
                .filter(|(_, p)| p.name.starts_with("det."))
                .map(|(_, p)| p.value.data().to_vec())
                .collect(),
        );
    }
    out
}

#[test]
fn zero_alpha_and_zero_lambda_reduce_to_source_only() {
    let src = samples(Stream::Source, 6);
    let tgt = samples(Stream::Target, 6);
    let base = detector_trajectory(&short(Variant::SourceOnly, 12, 4), &src, &tgt);

    let mut no_alpha = short(Variant::Full, 12, 4);
    no_alpha.alpha = 0.0;
    assert_eq!(detector_trajectory(&no_alpha, &src, &tgt), base, "alpha = 0");

    let mut no_lambda = short(Variant::Full, 12, 4);
    no_lambda.align.lambda = 0.0;
    assert_eq!(detector_trajectory(&no_lambda, &src, &tgt), base, "lambda = 0");

    // and the reduction is not vacuous
    assert_ne!(detector_trajectory(&short(Variant::Full, 12, 4), &src, &tgt), base);
}

#[test]
fn loss_identities_hold_every_iteration() {
    let src = samples(Stream::Source, 4);
    let tgt = samples(Stream::Target, 4);
    for variant in Variant::ALL {
        let cfg = short(variant, 25, 5);
        let mut t: Trainer = Trainer::new(&cfg, &src, &tgt).unwrap();
        while !t.done() {
            let l = t.step().unwrap();
            assert!(l.alignment_residual() <= 1e-12, "{} iter {}: {l:?}", variant.name(), t.iter);
            assert!(l.total_residual(cfg.alpha) <= 1e-12, "{} iter {}: {l:?}", variant.name(), t.iter);
        }
        let last = t.rows.last().unwrap().breakdown();
        match variant {
            Variant::SourceOnly => assert_eq!(last.l_t, 0.0),
            Variant::ProposalOnly => assert!(last.l_p > 0.0 && last.l_3 + last.l_4 + last.l_5 == 0.0),
            Variant::BlocksOnly => assert!(last.l_p == 0.0 && last.l_3 > 0.0 && last.l_5 > 0.0),
            Variant::MafStar => assert!(last.l_p > 0.0 && last.l_3 == 0.0 && last.l_5 > 0.0),
            _ => assert!(last.l_p > 0.0 && last.l_3 > 0.0 && last.l_4 > 0.0 && last.l_5 > 0.0),
        }
    }
}

#[test]
fn resume_continues_bitwise() {
    let src = samples(Stream::Source, 5);
    let tgt = samples(Stream::Target, 5);
    // the split straddles the learning-rate drop
    let cfg = short(Variant::Full, 10, 6);
    let dir = tempfile::tempdir().unwrap();

    let mut straight: Trainer = Trainer::new(&cfg, &src, &tgt).unwrap();
    while !straight.done() {
        straight.step().unwrap();
    }

    let mut first: Trainer = Trainer::new(&cfg, &src, &tgt).unwrap();
    for _ in 0..8 {
        first.step().unwrap();
    }
    first.save(dir.path()).unwrap();
    // extra steps that must be discarded by the resume
    first.step().unwrap();

    let mut second: Trainer = Trainer::new(&cfg, &src, &tgt).unwrap();
    second.resume(dir.path()).unwrap();
    assert_eq!(second.iter, 8);
    while !second.done() {
        second.step().unwrap();
    }
    assert_eq!(second.rows, straight.rows);
    for ((_, a), (_, b)) in straight.model.params.iter().zip(second.model.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
    }
}

#[test]
fn identical_configs_write_identical_bytes() {
    let src = samples(Stream::Source, 4);
    let tgt = samples(Stream::Target, 4);
    let cfg = short(Variant::Full, 15, 5);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train::<f64>(&cfg, &src, &tgt, a.path(), false).unwrap();
    train::<f64>(&cfg, &src, &tgt, b.path(), false).unwrap();
    for f in [LOSSES_CSV, MODEL_CKPT, STATE_CKPT] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(!x.is_empty());
        assert!(x == y, "{f} differs");
    }
    let mut other = cfg.clone();
    other.seed = 1;
    let c = tempfile::tempdir().unwrap();
    train::<f64>(&other, &src, &tgt, c.path(), false).unwrap();
    assert_ne!(
        std::fs::read(a.path().join(MODEL_CKPT)).unwrap(),
        std::fs::read(c.path().join(MODEL_CKPT)).unwrap()
    );
}

#[test]
fn overfits_a_single_image() {
    let src = samples(Stream::Source, 1);
    let cfg = short(Variant::SourceOnly, 200, 0);
    let mut t: Trainer = Trainer::new(&cfg, &src, &[]).unwrap();
    while !t.done() {
        t.step().unwrap();
    }
    let mean = |r: &[maf::train::run::LossRow]| r.iter().map(|x| x.l_det).sum::<f64>() / r.len() as f64;
    let (head, tail) = (mean(&t.rows[..20]), mean(&t.rows[180..]));
    println!("single image l_det: first 20 {head:.4}, last 20 {tail:.4}");
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

#[test]
fn smoke_run_lowers_detection_loss() {
    let src = samples(Stream::Source, 50);
    let tgt = samples(Stream::Target, 50);
    let cfg = short(Variant::Full, 500, 0);
    let mut t: Trainer = Trainer::new(&cfg, &src, &tgt).unwrap();
    while !t.done() {
        t.step().unwrap();
    }
    let mean = |r: &[maf::train::run::LossRow]| r.iter().map(|x| x.l_det).sum::<f64>() / r.len() as f64;
    let (head, tail) = (mean(&t.rows[..100]), mean(&t.rows[400..]));
    println!("500 iterations l_det: first 100 {head:.4}, last 100 {tail:.4}");
    assert!(tail < head);
    assert!(t.rows.iter().all(|r| r.l_maf.is_finite()));
}

#[test]
fn f32_model_trains() {
    let src = samples(Stream::Source, 2);
    let tgt = samples(Stream::Target, 2);
    let cfg = short(Variant::Full, 5, 0);
    let mut t: Trainer<f32> = Trainer::new(&cfg, &src, &tgt).unwrap();
    while !t.done() {
        let l = t.step().unwrap();
        assert!(l.l_maf.is_finite());
    }
    let m: &Model<f32> = &t.model;
    assert!(m.detect(&maf::autodiff::Tensor::from_f64(src[0].image.shape(), src[0].image.data()).unwrap(), 0.0).is_ok());
}
