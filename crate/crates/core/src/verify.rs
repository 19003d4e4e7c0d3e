//! Finite-difference suite over every differentiable operator and the
//! reversal composites.

use rand::Rng;
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::adversarial::{grl, srm_forward, srm_rearrange, wgrl, wgrl_weight, ReversalMode, ReversalSpec, SrmSpec};
use crate::alignment::{proposal_alignment_loss, BlockDomainClassifier, ProposalDomainClassifier, Reduction};
use crate::autodiff::{grad_check, grad_check_scaled, Bound, GradCheck, ParamId, ParamStore, Tape, Tensor, Var};
use crate::detector::{roi_pool, BBox, Detector, DetectorConfig, FEATURE_STRIDE};
use crate::domain::Domain;
use crate::error::Result;

pub const EPS: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
/// Linear permutation ops are held to a tighter bound.
pub const LINEAR_TOLERANCE: f64 = 1e-8;
pub const LINEAR_EPS: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

/// Values with magnitude in `[0.1, 1]`, random sign: at least 0.1 from the ReLU kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v).expect("shape matches")
}

/// Distinct values spaced 0.05 apart in random order, so max selections
/// never tie within a finite-difference step.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).expect("shape matches")
}

/// `Σ x ⊙ w` with a fixed random `w`, so every output element matters.
fn weighted(tape: &mut Tape<f64>, x: Var, w: &Tensor) -> Result<Var> {
    let c = tape.constant(w.clone().reshape(tape.shape(x))?);
    let m = tape.mul(x, c)?;
    Ok(tape.sum(m))
}

fn entry(name: &'static str, tolerance: f64, r: GradCheck) -> SuiteEntry {
    SuiteEntry {
        name,
        max_rel_error: r.max_rel_error,
        tolerance,
        checked: r.checked,
    }
}

/// Binds `store` with the parameters in `checked` taken from `vars` (in
/// that order) and all others as constants.
fn bind_subset(tape: &mut Tape<f64>, store: &ParamStore<f64>, checked: &[ParamId], vars: &[Var]) -> Bound {
    let all = store
        .iter()
        .map(|(id, p)| match checked.iter().position(|c| *c == id) {
            Some(k) => vars[k],
            None => tape.constant(p.value.clone()),
        })
        .collect();
    Bound::from_vars(all)
}

fn values(store: &ParamStore<f64>, ids: &[ParamId]) -> Vec<Tensor> {
    ids.iter().map(|&id| store.get(id).value.clone()).collect()
}

/// Fresh draws in the parameters' shapes; the classifiers start with a zero
/// output layer, which would leave the feature gradient identically zero.
fn randomized(rng: &mut ChaCha8Rng, store: &ParamStore<f64>, ids: &[ParamId]) -> Vec<Tensor> {
    ids.iter().map(|&id| uniform(rng, store.get(id).value.shape(), -1.0, 1.0)).collect()
}

fn ids_with_prefix(store: &ParamStore<f64>, prefix: &str) -> Vec<ParamId> {
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(id, _)| id)
        .collect()
}

fn tiny_detector(rng: &mut ChaCha8Rng) -> Result<(Detector, ParamStore<f64>)> {
    let cfg = DetectorConfig {
        image_size: 16,
        widths: [2, 3, 4, 4, 4],
        rpn_width: 4,
        head_width: 6,
        ..DetectorConfig::default()
    };
    let mut store = ParamStore::new();
    let det = Detector::new(cfg, &mut store, rng)?;
    // move regression weights back to unit scale so they are not tiny
    for (id, name) in store.iter().map(|(id, p)| (id, p.name.clone())).collect::<Vec<_>>() {
        if name.contains(".reg.") || name.ends_with(".b") {
            let fresh = uniform(rng, store.get(id).value.shape(), -0.3, 0.3);
            store.get_mut(id).value = fresh;
        }
    }
    Ok((det, store))
}

/// Runs the full suite; every entry should pass its tolerance.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    {
        let inputs = [off_zero(&mut rng, &[3, 4]), off_zero(&mut rng, &[3, 4])];
        let w = uniform(&mut rng, &[12], -1.0, 1.0);
        let r = grad_check(
            |t, v| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(v[0], v[1])?;
                let m = t.mul(s, d)?;
                let m = t.scale(m, 0.75);
                weighted(t, m, &w)
            },
            &inputs,
            EPS,
        )?;
        out.push(entry("add/sub/mul/scale", TOLERANCE, r));
    }
    {
        let inputs = [
            uniform(&mut rng, &[3, 4], -1.0, 1.0),
            uniform(&mut rng, &[4, 2], -1.0, 1.0),
            uniform(&mut rng, &[2], -1.0, 1.0),
        ];
        let w = uniform(&mut rng, &[6], -1.0, 1.0);
        let r = grad_check(|t, v| { let y = t.affine(v[0], v[1], v[2])?; weighted(t, y, &w) }, &inputs, EPS)?;
        out.push(entry("affine", TOLERANCE, r));
    }
    for (name, stride) in [("conv2d", 1), ("conv2d-stride2", 2)] {
        let inputs = [
            uniform(&mut rng, &[2, 5, 5], -1.0, 1.0),
            uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0),
            uniform(&mut rng, &[3], -1.0, 1.0),
        ];
        let side = (5 + 2 - 3) / stride + 1;
        let w = uniform(&mut rng, &[3 * side * side], -1.0, 1.0);
        let r = grad_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride, 1)?;
                weighted(t, y, &w)
            },
            &inputs,
            EPS,
        )?;
        out.push(entry(name, TOLERANCE, r));
    }
    {
        let inputs = [off_zero(&mut rng, &[12])];
        let w = uniform(&mut rng, &[12], -1.0, 1.0);
        let r = grad_check(|t, v| { let y = t.relu(v[0]); weighted(t, y, &w) }, &inputs, EPS)?;
        out.push(entry("relu", TOLERANCE, r));
        let inputs = [uniform(&mut rng, &[12], -3.0, 3.0)];
        let r = grad_check(|t, v| { let y = t.sigmoid(v[0]); weighted(t, y, &w) }, &inputs, EPS)?;
        out.push(entry("sigmoid", TOLERANCE, r));
    }
    {
        let inputs = [distinct(&mut rng, &[2, 4, 4])];
        let w = uniform(&mut rng, &[8], -1.0, 1.0);
        let r = grad_check(|t, v| { let y = t.max_pool2d(v[0], 2)?; weighted(t, y, &w) }, &inputs, EPS)?;
        out.push(entry("maxpool2d", TOLERANCE, r));
    }
    {
        let inputs = [uniform(&mut rng, &[4, 3], -2.0, 2.0)];
        let w = uniform(&mut rng, &[12], -1.0, 1.0);
        let r = grad_check(|t, v| { let y = t.softmax(v[0])?; weighted(t, y, &w) }, &inputs, EPS)?;
        out.push(entry("softmax", TOLERANCE, r));
        let r = grad_check(|t, v| t.softmax_cross_entropy(v[0], &[0, 2, 1, 2]), &inputs, EPS)?;
        out.push(entry("softmax-cross-entropy", TOLERANCE, r));
    }
    {
        // errors in both branches, away from the |e| = 1 seam
        let pred = uniform(&mut rng, &[3, 4], -0.5, 0.5);
        let offs = Tensor::from_f64(&[3, 4], &[0.3, -0.6, 1.7, -2.4, 0.1, 0.8, -1.5, 2.2, -0.2, 0.5, 3.0, -0.7])?;
        let tgt = Tensor::new(&[3, 4], pred.data().iter().zip(offs.data()).map(|(p, o)| p + o).collect())?;
        let r = grad_check(|t, v| t.smooth_l1(v[0], v[1]), &[pred, tgt], EPS)?;
        out.push(entry("smooth-l1", TOLERANCE, r));
    }
    {
        let inputs = [
            uniform(&mut rng, &[2, 3], -1.0, 1.0),
            uniform(&mut rng, &[2, 1], -1.0, 1.0),
            uniform(&mut rng, &[2, 4], -1.0, 1.0),
        ];
        let w = uniform(&mut rng, &[16], -1.0, 1.0);
        let r = grad_check(
            |t, v| {
                let c = t.concat(&[v[0], v[1], v[2]], 1)?;
                let s = t.sigmoid(c);
                weighted(t, s, &w)
            },
            &inputs,
            EPS,
        )?;
        out.push(entry("concat", TOLERANCE, r));
    }
    {
        let inputs = [distinct(&mut rng, &[2, 6, 6])];
        let boxes = [
            BBox::new(0.0, 0.0, 96.0, 96.0)?,
            BBox::new(10.0, 20.0, 60.0, 50.0)?,
            BBox::new(40.0, 40.0, 50.0, 55.0)?,
        ];
        let w = uniform(&mut rng, &[3 * 2 * 9], -1.0, 1.0);
        let r = grad_check(
            |t, v| {
                let y = roi_pool(t, v[0], &boxes, FEATURE_STRIDE, 3)?;
                weighted(t, y, &w)
            },
            &inputs,
            EPS,
        )?;
        out.push(entry("roi-pool", TOLERANCE, r));
    }
    for s in [1usize, 2, 3] {
        let inputs = [uniform(&mut rng, &[2, 6, 6], -1.0, 1.0)];
        let w = uniform(&mut rng, &[72], -1.0, 1.0);
        // linear in x, so a wide step loses nothing to truncation
        let r = grad_check(|t, v| { let y = srm_rearrange(t, v[0], s)?; weighted(t, y, &w) }, &inputs, LINEAR_EPS)?;
        let name = match s {
            1 => "srm-rearrange-s1",
            2 => "srm-rearrange-s2",
            _ => "srm-rearrange-s3",
        };
        out.push(entry(name, LINEAR_TOLERANCE, r));
    }
    {
        let spec = SrmSpec::new(2, 2)?;
        let inputs = [
            uniform(&mut rng, &[3, 4, 4], -1.0, 1.0),
            uniform(&mut rng, &[2, 3, 1, 1], -1.0, 1.0),
            uniform(&mut rng, &[2], -1.0, 1.0),
        ];
        let w = uniform(&mut rng, &[32], -1.0, 1.0);
        let r = grad_check(
            |t, v| {
                let y = srm_forward(t, v[0], &spec, v[1], v[2])?;
                let y = t.sigmoid(y);
                weighted(t, y, &w)
            },
            &inputs,
            EPS,
        )?;
        out.push(entry("srm-forward", TOLERANCE, r));
    }
    {
        // x and W sit before the reversal, V after it
        let lambda = 0.7;
        let inputs = [
            uniform(&mut rng, &[3, 4], -1.0, 1.0),
            uniform(&mut rng, &[4, 3], -1.0, 1.0),
            uniform(&mut rng, &[3, 2], -1.0, 1.0),
        ];
        let r = grad_check_scaled(
            |t, v| {
                let zero3 = t.constant(Tensor::zeros(&[3]));
                let zero2 = t.constant(Tensor::zeros(&[2]));
                let h = t.affine(v[0], v[1], zero3)?;
                let h = grl(t, h, lambda)?;
                let h = t.sigmoid(h);
                let y = t.affine(h, v[2], zero2)?;
                t.softmax_cross_entropy(y, &[1, 0, 1])
            },
            &inputs,
            EPS,
            |i, _| if i < 2 { -lambda } else { 1.0 },
        )?;
        out.push(entry("grl-composite", TOLERANCE, r));
    }
    {
        let (lambda, d) = (0.5, Domain::Target);
        let p = [0.9, 0.2, 0.6];
        let inputs = [uniform(&mut rng, &[3, 4], -1.0, 1.0), uniform(&mut rng, &[4, 2], -1.0, 1.0)];
        let r = grad_check_scaled(
            |t, v| {
                let zero = t.constant(Tensor::zeros(&[2]));
                let h = wgrl(t, v[0], lambda, &p, d)?;
                let y = t.affine(h, v[1], zero)?;
                t.softmax_cross_entropy(y, &[0, 0, 0])
            },
            &inputs,
            EPS,
            |i, e| if i == 0 { -lambda * wgrl_weight(p[e / 4], d) } else { 1.0 },
        )?;
        out.push(entry("wgrl-composite", TOLERANCE, r));
    }
    {
        // block classifier behind GRL + SRM: feature reversed, θ_m plain
        let lambda = 1.0;
        let mut store = ParamStore::new();
        let clf = BlockDomainClassifier::new(4, 3, SrmSpec::new(2, 2)?, &mut store, &mut rng)?;
        let ids: Vec<ParamId> = store.ids().collect();
        let mut inputs = vec![uniform(&mut rng, &[3, 4, 4], -1.0, 1.0)];
        inputs.extend(randomized(&mut rng, &store, &ids));
        let r = grad_check_scaled(
            |t, v| {
                let p = bind_subset(t, &store, &ids, &v[1..]);
                clf.loss(t, &p, v[0], Domain::Source, lambda, Reduction::Mean)
            },
            &inputs,
            EPS,
            |i, _| if i == 0 { -lambda } else { 1.0 },
        )?;
        out.push(entry("block-alignment", TOLERANCE, r));
    }
    {
        // proposal classifier behind WGRL with p from the same pass
        let lambda = 1.0;
        let d = Domain::Source;
        let mut store = ParamStore::new();
        let clf = ProposalDomainClassifier::new(5, &mut store, &mut rng)?;
        let ids: Vec<ParamId> = store.ids().collect();
        let mut inputs = vec![uniform(&mut rng, &[3, 5], -1.0, 1.0)];
        inputs.extend(randomized(&mut rng, &store, &ids));
        let spec = ReversalSpec::new(lambda, ReversalMode::Weighted)?;
        let probe = {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|v| t.param(v.clone())).collect();
            let p = bind_subset(&mut t, &store, &ids, &vars[1..]);
            proposal_alignment_loss(&mut t, &p, vars[0], d, &clf, spec, Reduction::Mean)?
                .map(|o| o.p_source)
                .unwrap_or_default()
        };
        let r = grad_check_scaled(
            |t, v| {
                let p = bind_subset(t, &store, &ids, &v[1..]);
                let out = proposal_alignment_loss(t, &p, v[0], d, &clf, spec, Reduction::Mean)?;
                Ok(out.expect("three proposals").loss)
            },
            &inputs,
            EPS,
            |i, e| if i == 0 { -lambda * wgrl_weight(probe[e / 5], d) } else { 1.0 },
        )?;
        out.push(entry("proposal-alignment", TOLERANCE, r));
    }
    {
        let (det, store) = tiny_detector(&mut rng)?;
        let ids = ids_with_prefix(&store, "det.block");
        let mut inputs = vec![uniform(&mut rng, &[3, 16, 16], -1.0, 1.0)];
        inputs.extend(values(&store, &ids));
        let w3 = uniform(&mut rng, &[4 * 4 * 4], -1.0, 1.0);
        let w5 = uniform(&mut rng, &[4], -1.0, 1.0);
        let r = grad_check(
            |t, v| {
                let p = bind_subset(t, &store, &ids, &v[1..]);
                let f = det.backbone_forward(t, &p, v[0])?;
                let a = weighted(t, f.block3, &w3)?;
                let b = weighted(t, f.block5, &w5)?;
                t.add(a, b)
            },
            &inputs,
            EPS,
        )?;
        out.push(entry("backbone", TOLERANCE, r));

        let ids = ids_with_prefix(&store, "det.rpn");
        let mut inputs = vec![uniform(&mut rng, &[4, 2, 2], -1.0, 1.0)];
        inputs.extend(values(&store, &ids));
        let n = 2 * 2 * det.config().anchor_sizes.len();
        let (wo, wd) = (uniform(&mut rng, &[n * 2], -1.0, 1.0), uniform(&mut rng, &[n * 4], -1.0, 1.0));
        let r = grad_check(
            |t, v| {
                let p = bind_subset(t, &store, &ids, &v[1..]);
                let o = det.rpn_forward(t, &p, v[0])?;
                let a = weighted(t, o.objectness, &wo)?;
                let b = weighted(t, o.deltas, &wd)?;
                t.add(a, b)
            },
            &inputs,
            EPS,
        )?;
        out.push(entry("rpn", TOLERANCE, r));

        let ids = ids_with_prefix(&store, "det.head");
        let mut inputs = vec![distinct(&mut rng, &[4, 6, 6])];
        inputs.extend(values(&store, &ids));
        let boxes = [BBox::new(0.0, 0.0, 96.0, 96.0)?, BBox::new(20.0, 10.0, 70.0, 60.0)?];
        let k1 = det.config().num_classes + 1;
        let (ws, wr) = (uniform(&mut rng, &[2 * k1], -1.0, 1.0), uniform(&mut rng, &[8], -1.0, 1.0));
        let r = grad_check(
            |t, v| {
                let p = bind_subset(t, &store, &ids, &v[1..]);
                let h = det.head_forward(t, &p, v[0], &boxes)?;
                let a = weighted(t, h.scores, &ws)?;
                let b = weighted(t, h.bbox_reg, &wr)?;
                t.add(a, b)
            },
            &inputs,
            EPS,
        )?;
        out.push(entry("detection-head", TOLERANCE, r));
    }
    Ok(out)
}
