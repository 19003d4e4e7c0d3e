//! mAP against an independent brute-force matcher, and IoU-sweep monotonicity.

mod common;

use common::{instance, oracle_map, CLASSES};
use maf::detector::{iou, Annotation, BBox, Detection};
use maf::synthetic::{render, GenConfig, Sample, Stream};
use maf::train::eval::{ap_from_flags, sweep_detections};
use maf::train::{default_thresholds, evaluate_detections, iou_sweep, Model, RunConfig};
use maf::Domain;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn map_matches_brute_force_on_micro_instances() {
    let mut nontrivial = 0;
    for seed in 0..100 {
        let (dets, truth) = instance(seed);
        for thr in [0.3, 0.5, 0.75] {
            let got = evaluate_detections(&dets, &truth, CLASSES, thr).unwrap().map;
            let want = oracle_map(&dets, &truth, thr);
            assert_eq!(got.to_bits(), want.to_bits(), "seed {seed} thr {thr}: {got} vs {want}");
            if got > 0.0 && got < 1.0 {
                nontrivial += 1;
            }
        }
    }
    assert!(nontrivial > 30, "only {nontrivial} instances with fractional mAP");
}

/// VOC-style recall-step sum over the same envelope.
fn recall_step_ap(flags: &[bool], n_gt: usize) -> f64 {
    let mut tp = 0.0;
    let mut rec = vec![0.0];
    let mut prec = vec![0.0];
    for (k, &t) in flags.iter().enumerate() {
        tp += t as u8 as f64;
        rec.push(tp / n_gt as f64);
        prec.push(tp / (k + 1) as f64);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (1..rec.len()).map(|i| (rec[i] - rec[i - 1]) * prec[i]).sum()
}

#[test]
fn envelope_sum_equals_recall_step_area() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.gen_range(0..20);
        let flags: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        let tps = flags.iter().filter(|t| **t).count();
        let n_gt = tps + rng.gen_range(if tps == 0 { 1 } else { 0 }..4);
        let a = ap_from_flags(&flags, n_gt);
        let b = recall_step_ap(&flags, n_gt);
        assert!((a - b).abs() < 1e-12, "{flags:?} n_gt {n_gt}: {a} vs {b}");
    }
}

#[test]
fn single_detection_cases() {
    let gt = BBox::new(10.0, 10.0, 20.0, 20.0).unwrap();
    let truth = vec![Annotation::new(vec![gt], vec![0]).unwrap()];
    let hit = Detection {
        bbox: BBox::new(10.0, 10.0, 20.0, 22.0).unwrap(),
        class: 0,
        score: 0.5,
    };
    let miss = Detection {
        bbox: BBox::new(50.0, 50.0, 60.0, 60.0).unwrap(),
        class: 0,
        score: 0.9,
    };
    assert!(iou(&hit.bbox, &gt) >= 0.7);
    let r = evaluate_detections(&[vec![hit]], &truth, 1, 0.5).unwrap();
    assert_eq!(r.map, 1.0);
    let r = evaluate_detections(&[vec![miss, hit]], &truth, 1, 0.5).unwrap();
    assert_eq!(r.map, 0.5);
    let r = evaluate_detections(&[vec![]], &truth, 1, 0.5).unwrap();
    assert_eq!(r.map, 0.0);
}

fn samples(n: u64) -> Vec<Sample> {
    let cfg = GenConfig::default();
    (0..n)
        .map(|i| {
            let (image, annotation) = render(&cfg, Stream::Val, i).unwrap();
            Sample {
                file: format!("val_{i}"),
                domain: Domain::Target,
                image,
                annotation,
            }
        })
        .collect()
}

fn assert_monotone(rows: &[(f64, f64)]) {
    for w in rows.windows(2) {
        assert!(w[1].1 <= w[0].1, "sweep rises from {:?} to {:?}", w[0], w[1]);
    }
}

#[test]
fn sweep_is_monotone_for_random_models() {
    let data = samples(8);
    for seed in 0..3 {
        let cfg = RunConfig {
            seed,
            score_thr: 0.0,
            ..RunConfig::default()
        };
        let model: Model = Model::new(&cfg).unwrap();
        let rows = iou_sweep(&model, &data, &default_thresholds(), cfg.score_thr).unwrap();
        assert_eq!(rows.len(), 10);
        assert_monotone(&rows);
    }
}

#[test]
fn sweep_is_monotone_on_micro_instances_and_perfect_at_every_threshold() {
    for seed in 0..100 {
        let (dets, truth) = instance(seed);
        assert_monotone(&sweep_detections(&dets, &truth, CLASSES, &default_thresholds()).unwrap());
    }
    let data = samples(5);
    let truth: Vec<Annotation> = data.iter().map(|s| s.annotation.clone()).collect();
    let perfect: Vec<Vec<Detection>> = truth
        .iter()
        .map(|a| {
            a.boxes
                .iter()
                .zip(&a.labels)
                .map(|(b, &l)| Detection {
                    bbox: *b,
                    class: l,
                    score: 1.0,
                })
                .collect()
        })
        .collect();
    let rows = sweep_detections(&perfect, &truth, 3, &default_thresholds()).unwrap();
    assert!(rows.iter().all(|(_, m)| *m == 1.0));
}

#[test]
fn untrained_model_scores_near_zero() {
    let data = samples(20);
    let model: Model = Model::new(&RunConfig::default()).unwrap();
    let r = maf::train::evaluate_map(&model, &data, 0.5, 0.05).unwrap();
    assert!(r.map < 0.05, "random model mAP {}", r.map);
}
