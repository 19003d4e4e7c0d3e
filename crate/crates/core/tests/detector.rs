//! Box geometry, NMS against a suppression-matrix reference, forward shapes.

use maf::autodiff::{Tape, Tensor};
use maf::detector::{decode, encode, iou, nms, BBox};
use maf::synthetic::{render, GenConfig, Stream};
use maf::train::{Model, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<BBox> {
    (0..n)
        .map(|_| {
            let x = rng.gen_range(0.0..80.0);
            let y = rng.gen_range(0.0..80.0);
            BBox::new(x, y, x + rng.gen_range(4.0..30.0), y + rng.gen_range(4.0..30.0)).unwrap()
        })
        .collect()
}

/// IoU matrix up front, then walk indices by descending score and let each
/// surviving box switch off every later box it overlaps by more than `thr`.
fn reference_nms(boxes: &[BBox], scores: &[f64], thr: f64, limit: usize) -> Vec<usize> {
    let n = boxes.len();
    let m: Vec<Vec<f64>> = boxes.iter().map(|a| boxes.iter().map(|b| iou(a, b)).collect()).collect();
    let mut rank: Vec<usize> = Vec::new();
    let mut placed = vec![false; n];
    for _ in 0..n {
        let next = (0..n)
            .filter(|&i| !placed[i])
            .reduce(|a, b| if scores[b] > scores[a] { b } else { a })
            .unwrap();
        placed[next] = true;
        rank.push(next);
    }
    let mut suppressed = vec![false; n];
    let mut keep = Vec::new();
    for (r, &i) in rank.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &rank[r + 1..] {
            if m[i][j] > thr {
                suppressed[j] = true;
            }
        }
    }
    keep.truncate(limit);
    keep
}

#[test]
fn nms_matches_reference_on_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for trial in 0..200 {
        let boxes = random_boxes(&mut rng, 50);
        // coarse scores force ties on some trials
        let levels: f64 = if trial % 2 == 0 { 8.0 } else { 1e6 };
        let scores: Vec<f64> = (0..50).map(|_| (rng.gen_range(0.0..1.0) * levels).floor() / levels).collect();
        for thr in [0.3, 0.5, 0.7] {
            for limit in [usize::MAX, 10] {
                let got = nms(&boxes, &scores, thr, limit);
                assert_eq!(got, reference_nms(&boxes, &scores, thr, limit), "trial {trial} thr {thr}");
            }
            let kept = nms(&boxes, &scores, thr, usize::MAX);
            for (a, &i) in kept.iter().enumerate() {
                for &j in &kept[a + 1..] {
                    assert!(iou(&boxes[i], &boxes[j]) <= thr);
                    assert!(scores[i] >= scores[j]);
                }
            }
            for i in (0..50).filter(|i| !kept.contains(i)) {
                assert!(kept.iter().any(|&k| scores[k] >= scores[i] && iou(&boxes[k], &boxes[i]) > thr));
            }
        }
    }
}

#[test]
fn iou_of_offset_squares_is_one_seventh() {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
    let b = BBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
    assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &BBox::new(2.0, 0.0, 4.0, 2.0).unwrap()), 0.0);
}

#[test]
fn decode_inverts_encode() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let boxes = random_boxes(&mut rng, 400);
    for pair in boxes.chunks(2) {
        let back = decode(&encode(&pair[0], &pair[1]), &pair[1]);
        for (x, y) in back.to_array().iter().zip(pair[0].to_array()) {
            assert!((x - y).abs() < 1e-9, "{back:?} vs {:?}", pair[0]);
        }
    }
}

#[test]
fn forward_shapes() {
    let model: Model = Model::new(&RunConfig::default()).unwrap();
    let (img, _) = render(&GenConfig::default(), Stream::Source, 0).unwrap();
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let f = model.detector.forward_image(&mut tape, &p, &img).unwrap();
    let w = model.detector.config().widths;
    assert_eq!(tape.shape(f.features.block(3).unwrap()), [w[2], 24, 24]);
    assert_eq!(tape.shape(f.features.block(4).unwrap()), [w[3], 12, 12]);
    assert_eq!(tape.shape(f.features.block(5).unwrap()), [w[4], 6, 6]);
    assert_eq!(f.anchors.len(), 108);
    assert!(!f.proposals.is_empty() && f.proposals.len() <= 32);
    for (b, _) in &f.proposals {
        assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 96.0 && b.y2 <= 96.0);
    }
    let dets = model.detect(&img, 0.0).unwrap();
    assert!(dets.iter().all(|d| d.class < 3 && (0.0..=1.0).contains(&d.score)));
}

#[test]
fn wrong_image_size_is_refused() {
    let model: Model = Model::new(&RunConfig::default()).unwrap();
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let img = Tensor::zeros(&[3, 64, 64]);
    assert!(model.detector.forward_image(&mut tape, &p, &img).is_err());
}
