//! Helpers shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use maf::alignment::Reduction;
use maf::adversarial::{grl, set_wgrl_probs, wgrl_deferred};
use maf::autodiff::{Bound, Gradients, Tape, Tensor, Var};
use maf::detector::{iou, Annotation, BBox, Detection};
use maf::train::{Model, RunConfig};
use maf::Domain;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CLASSES: usize = 2;

fn grid_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.gen_range(0..6) as f64;
    let y = rng.gen_range(0..6) as f64;
    let w = rng.gen_range(1..5) as f64;
    let h = rng.gen_range(1..5) as f64;
    BBox::new(x, y, x + w, y + h).unwrap()
}

/// Up to 5 ground-truth boxes and 8 detections over 1-3 images; coarse
/// integer boxes and a small score alphabet so IoU and score ties occur.
pub fn instance(seed: u64) -> (Vec<Vec<Detection>>, Vec<Annotation>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = rng.gen_range(1..=3);
    let n_gt = rng.gen_range(0..=5);
    let n_det = rng.gen_range(0..=8);
    let mut truth = vec![(Vec::new(), Vec::new()); images];
    for _ in 0..n_gt {
        let i = rng.gen_range(0..images);
        truth[i].0.push(grid_box(&mut rng));
        truth[i].1.push(rng.gen_range(0..CLASSES));
    }
    let mut dets = vec![Vec::new(); images];
    for _ in 0..n_det {
        let i = rng.gen_range(0..images);
        // half the detections are jittered copies of a ground-truth box
        let bbox = match truth[i].0.len() {
            n if n > 0 && rng.gen_bool(0.5) => {
                let g: BBox = truth[i].0[rng.gen_range(0..n)];
                let dx = rng.gen_range(-1..=1) as f64;
                BBox::new(g.x1 + dx, g.y1, g.x2 + dx, g.y2 + rng.gen_range(0..=1) as f64).unwrap()
            }
            _ => grid_box(&mut rng),
        };
        dets[i].push(Detection {
            bbox,
            class: rng.gen_range(0..CLASSES),
            score: rng.gen_range(1..=4) as f64 / 4.0,
        });
    }
    let truth = truth.into_iter().map(|(b, l)| Annotation::new(b, l).unwrap()).collect();
    (dets, truth)
}

/// Brute-force reference: full IoU table, rank by repeated scans for the
/// highest remaining score (earliest on ties), match each detection to the
/// best still-free truth box at or above the threshold, precision envelope by
/// suffix maxima recomputed from scratch at every rank.
pub fn oracle_map(dets: &[Vec<Detection>], truth: &[Annotation], thr: f64) -> f64 {
    let mut aps = Vec::new();
    for c in 0..CLASSES {
        let pool: Vec<(usize, &Detection)> = dets
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| ds.iter().map(move |d| (i, d)))
            .filter(|(_, d)| d.class == c)
            .collect();
        let gts: Vec<(usize, BBox)> = truth
            .iter()
            .enumerate()
            .flat_map(|(i, a)| a.boxes.iter().zip(&a.labels).map(move |(b, l)| (i, *b, *l)))
            .filter(|(_, _, l)| *l == c)
            .map(|(i, b, _)| (i, b))
            .collect();
        if gts.is_empty() {
            continue;
        }
        let table: Vec<Vec<f64>> = pool
            .iter()
            .map(|(i, d)| gts.iter().map(|(j, g)| if i == j { iou(&d.bbox, g) } else { -1.0 }).collect())
            .collect();
        let mut visited = vec![false; pool.len()];
        let mut used = vec![false; gts.len()];
        let mut flags = Vec::new();
        for _ in 0..pool.len() {
            let mut pick: Option<usize> = None;
            for k in 0..pool.len() {
                if !visited[k] && pick.map_or(true, |p| pool[k].1.score > pool[p].1.score) {
                    pick = Some(k);
                }
            }
            let k = pick.unwrap();
            visited[k] = true;
            let mut best: Option<usize> = None;
            for g in 0..gts.len() {
                if !used[g] && table[k][g] >= thr && best.map_or(true, |b| table[k][g] > table[k][b]) {
                    best = Some(g);
                }
            }
            if let Some(g) = best {
                used[g] = true;
            }
            flags.push(best.is_some());
        }
        let precision_at = |r: usize| flags[..=r].iter().filter(|t| **t).count() as f64 / (r + 1) as f64;
        let mut total = 0.0;
        for r in 0..flags.len() {
            if flags[r] {
                total += (r..flags.len()).map(precision_at).fold(f64::NEG_INFINITY, f64::max);
            }
        }
        aps.push(total / gts.len() as f64);
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Default model with every domain-classifier output layer randomized, so
/// the classifiers start away from uniform and pass nonzero gradients back.
pub fn scrambled_classifier() -> Model {
    let mut model = Model::new(&RunConfig::default()).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let ids: Vec<_> = model
        .params
        .iter()
        .filter(|(_, p)| p.name.starts_with("align.") && p.name.ends_with("fc2.w"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let p = model.params.get_mut(id);
        for v in p.value.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    model
}

pub fn grads_with_prefix(model: &Model, bound: &Bound, grads: &Gradients, prefix: &str) -> Vec<(String, Option<Vec<f64>>)> {
    model
        .params
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(id, p)| (p.name.clone(), grads.get(bound.var(id)).map(|g| g.data().to_vec())))
        .collect()
}

/// Block-`m` alignment loss with or without the reversal in front of the classifier.
pub fn block_grads(model: &Model, img: &Tensor, m: usize, d: Domain, lambda: Option<f64>) -> (Bound, Gradients) {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let f = model.detector.forward_image(&mut tape, &p, img).unwrap();
    let clf = model.blocks.iter().find(|c| c.block == m).unwrap();
    let feature = f.features.block(m).unwrap();
    let loss = match lambda {
        Some(l) => clf.loss(&mut tape, &p, feature, d, l, Reduction::Mean).unwrap(),
        None => {
            let logits = clf.logits(&mut tape, &p, feature).unwrap();
            let n = tape.shape(logits)[0];
            tape.softmax_cross_entropy(logits, &vec![d.label(); n]).unwrap()
        }
    };
    let g = tape.backward(loss).unwrap();
    (p, g)
}

pub enum Rev {
    None,
    Plain(f64),
    /// Weighted reversal; `Some(w)` forces every weight to `w`.
    Weighted(f64, Option<f64>),
}

/// Proposal alignment on a stand-in aggregated matrix `x` (one row per
/// proposal); returns the gradient on `x` and the source probabilities.
pub fn proposal_grads(model: &Model, x: &Tensor, d: Domain, rev: Rev) -> (Vec<f64>, Vec<f64>, Vec<(String, Option<Vec<f64>>)>) {
    let clf = model.proposal.as_ref().unwrap();
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let xv = tape.param(x.clone());
    let (inp, node): (Var, Option<Var>) = match rev {
        Rev::None => (xv, None),
        Rev::Plain(l) => (grl(&mut tape, xv, l).unwrap(), None),
        Rev::Weighted(l, _) => {
            let n = wgrl_deferred(&mut tape, xv, l).unwrap();
            (n, Some(n))
        }
    };
    let logits = clf.logits(&mut tape, &p, inp).unwrap();
    let probs = maf::alignment::source_probabilities(&tape, logits);
    if let (Some(node), Rev::Weighted(_, forced)) = (node, &rev) {
        match forced {
            Some(w) => tape.set_reversal_weights(node, vec![*w; probs.len()]).unwrap(),
            None => set_wgrl_probs(&mut tape, node, &probs, d).unwrap(),
        }
    }
    let n = x.shape()[0];
    let loss = tape.softmax_cross_entropy(logits, &vec![d.label(); n]).unwrap();
    let g = tape.backward(loss).unwrap();
    let cls = grads_with_prefix(model, &p, &g, "align.proposal.");
    (g.wrt(xv).data().to_vec(), probs, cls)
}

pub fn random_rows(model: &Model, n: usize, seed: u64) -> Tensor {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w = model.proposal.as_ref().unwrap().input_width;
    Tensor::new(&[n, w], (0..n * w).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}
