//! Define-by-run tape. Every forward op appends a node holding its value and
//! whatever context its backward rule needs; `backward` walks the nodes once
//! in reverse construction order.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which operand of a binary op was broadcast from a single element.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    Left,
    Right,
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, T),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SmoothL1 {
        pred: Var,
        target: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Reverse {
        x: Var,
        lambda: T,
    },
    WeightedReverse {
        x: Var,
        lambda: T,
        weights: Option<Vec<T>>,
    },
}

impl<T: Scalar> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Affine { .. } => "affine",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::Concat { .. } => "concat",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Gather { .. } => "gather",
            Op::Reverse { .. } => "grl",
            Op::WeightedReverse { .. } => "wgrl",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) => vec![*a, *b],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Conv2d { x, k, b, .. } => vec![*x, *k, *b],
            Op::SmoothL1 { pred, target } => vec![*pred, *target],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::SoftmaxCrossEntropy { logits: x, .. }
            | Op::Gather { x, .. }
            | Op::Reverse { x, .. }
            | Op::WeightedReverse { x, .. } => vec![*x],
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation record.
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar = f64> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient reaching `v`, or `None` when no path from the loss touches it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when disconnected.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok(())
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the op that produced `v`.
    pub fn op_kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.kind()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        debug_assert!(
            value.is_finite() || inputs.iter().any(|v| !self.nodes[v.0].value.is_finite()),
            "{} produced non-finite output from finite inputs",
            op.kind()
        );
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::None)
        } else if self.value(a).numel() == 1 {
            Ok(Broadcast::Left)
        } else if self.value(b).numel() == 1 {
            Ok(Broadcast::Right)
        } else {
            Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: impl Fn(Var, Var, Broadcast) -> Op<T>,
    ) -> Result<Var> {
        let bc = self.broadcast(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let (shape, data): (Vec<usize>, Vec<T>) = match bc {
            Broadcast::None => (
                va.shape().to_vec(),
                va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::Left => {
                let x = va.data()[0];
                (vb.shape().to_vec(), vb.data().iter().map(|&y| f(x, y)).collect())
            }
            Broadcast::Right => {
                let y = vb.data()[0];
                (va.shape().to_vec(), va.data().iter().map(|&x| f(x, y)).collect())
            }
        };
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, mk(a, b, bc)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Multiplication by a constant. A zero factor cuts the gradient path.
    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    /// `x·W + b` for `x: [N,I]`, `W: [I,O]`, `b: [O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::ShapeMismatch {
                op: "affine",
                left: sx.to_vec(),
                right: sw.to_vec(),
            });
        }
        if sb != [sw[1]] {
            return Err(Error::ShapeMismatch {
                op: "affine bias",
                left: sw.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (n, i, o) = (sx[0], sx[1], sw[1]);
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            n,
            i,
            o,
            self.value(x).data(),
            i as isize,
            1,
            self.value(w).data(),
            o as isize,
            1,
            T::one(),
            &mut out,
            o as isize,
            1,
        );
        let out = Tensor::new(&[n, o], out)?;
        Ok(self.push(out, Op::Affine { x, w, b }))
    }

    /// Cross-correlation of `x: [C_in,H,W]` with `k: [C_out,C_in,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), stride, pad)?;
        if self.shape(b) != [geom.c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: self.shape(k).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let cols = kernels::im2col(&geom, self.value(x).data());
        let out = kernels::conv_forward(&geom, &cols, self.value(k).data(), self.value(b).data());
        let out = Tensor::new(&[geom.c_out, geom.oh, geom.ow], out)?;
        Ok(self.push(out, Op::Conv2d { x, k, b, geom, cols }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            // split on sign so exp never overflows
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push(out, Op::Sigmoid(x))
    }

    /// Non-overlapping max pooling over `[C,H,W]`; ties go to the first
    /// maximum in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || size == 0 || s[1] % size != 0 || s[2] % size != 0 {
            return Err(Error::shape(
                "max_pool2d",
                format!("spatial dims of {s:?} not divisible by {size}"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / size, w / size);
        let data = self.value(x).data();
        let mut index = Vec::with_capacity(c * oh * ow);
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (ci * h + oy * size) * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let at = (ci * h + oy * size + dy) * w + ox * size + dx;
                            if data[at] > data[best] {
                                best = at;
                            }
                        }
                    }
                    index.push(best);
                }
            }
        }
        self.gather(x, index, &[c, oh, ow])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let k = *v
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
        let mut out = v.data().to_vec();
        if k > 0 {
            for row in out.chunks_mut(k) {
                kernels::softmax_in_place(row);
            }
        }
        let out = Tensor::new(v.shape(), out)?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let lse = kernels::log_sum_exp(row);
            loss += lse - row[label];
            kernels::softmax_in_place(row);
        }
        let out = Tensor::scalar(loss / T::lit(n as f64));
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over elements of the Huber-style smooth L1 penalty on `pred - target`.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        check_same("smooth_l1", self.shape(pred), self.shape(target))?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        if p.is_empty() {
            return Err(Error::shape("smooth_l1", "empty input"));
        }
        let half = T::lit(0.5);
        let total: T = p
            .iter()
            .zip(t)
            .map(|(&a, &b)| {
                let e = a - b;
                if e.abs() < T::one() {
                    half * e * e
                } else {
                    e.abs() - half
                }
            })
            .sum();
        let out = Tensor::scalar(total / T::lit(p.len() as f64));
        Ok(self.push(out, Op::SmoothL1 { pred, target }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let block = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.value(x).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: xs.to_vec(),
                axis,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::shape("mean", "empty input"));
        }
        let total: T = v.data().iter().copied().sum();
        let out = Tensor::scalar(total / T::lit(v.numel() as f64));
        Ok(self.push(out, Op::Mean(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// `out[i] = x[index[i]]` (flat indices). Backward scatter-adds.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {} elements", src.len()),
            ));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Gather { x, index }))
    }

    /// Identity forward; backward multiplies the upstream gradient by `-lambda`.
    pub fn grl(&mut self, x: Var, lambda: T) -> Result<Var> {
        if !(lambda >= T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "reversal lambda must be non-negative, got {lambda}"
            )));
        }
        let out = self.value(x).clone();
        Ok(self.push(out, Op::Reverse { x, lambda }))
    }

    /// Identity forward; backward scales row `r` (first axis) by
    /// `-lambda * weight[r]`. The weights are attached later with
    /// [`Tape::set_reversal_weights`], which lets them depend on values
    /// computed downstream of this node in the same pass.
    pub fn weighted_grl(&mut self, x: Var, lambda: T) -> Result<Var> {
        if !(lambda >= T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "reversal lambda must be non-negative, got {lambda}"
            )));
        }
        if self.value(x).rank() == 0 {
            return Err(Error::shape("wgrl", "input needs a row axis"));
        }
        let out = self.value(x).clone();
        Ok(self.push(
            out,
            Op::WeightedReverse {
                x,
                lambda,
                weights: None,
            },
        ))
    }

    pub fn set_reversal_weights(&mut self, node: Var, weights: Vec<T>) -> Result<()> {
        let rows = self.nodes[node.0].value.shape().first().copied().unwrap_or(0);
        match &mut self.nodes[node.0].op {
            Op::WeightedReverse { weights: slot, .. } => {
                if weights.len() != rows {
                    return Err(Error::shape(
                        "wgrl",
                        format!("{} weights for {rows} rows", weights.len()),
                    ));
                }
                *slot = Some(weights);
                Ok(())
            }
            other => Err(Error::InvalidArgument(format!(
                "node {} is {}, not a weighted reversal",
                node.0,
                other.kind()
            ))),
        }
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!(
                "loss node {} is not on this tape",
                loss.0
            )));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape(), g).expect("gradient matches value shape"))
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => add_into(acc, &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); self.nodes[v.0].value.numel()]);
        }
        f(slot.as_mut().expect("slot initialised"));
    }

    fn broadcast_grads(
        &self,
        grads: &mut [Option<Vec<T>>],
        a: Var,
        b: Var,
        bc: Broadcast,
        ga: Vec<T>,
        gb: Vec<T>,
    ) {
        let reduce = |g: Vec<T>| vec![g.iter().copied().sum::<T>()];
        match bc {
            Broadcast::None => {
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            Broadcast::Left => {
                self.accumulate(grads, a, reduce(ga));
                self.accumulate(grads, b, gb);
            }
            Broadcast::Right => {
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, reduce(gb));
            }
        }
    }

    /// Value of `v` at output position `i`, honouring scalar broadcast.
    fn at(&self, v: Var, i: usize) -> T {
        let d = self.nodes[v.0].value.data();
        if d.len() == 1 {
            d[0]
        } else {
            d[i]
        }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                self.broadcast_grads(grads, *a, *b, *bc, g.to_vec(), g.to_vec());
            }
            Op::Sub(a, b, bc) => {
                let gb = g.iter().map(|&v| -v).collect();
                self.broadcast_grads(grads, *a, *b, *bc, g.to_vec(), gb);
            }
            Op::Mul(a, b, bc) => {
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v * self.at(*b, i))
                    .collect();
                let gb = g
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v * self.at(*a, i))
                    .collect();
                self.broadcast_grads(grads, *a, *b, *bc, ga, gb);
            }
            Op::Scale(x, s) => {
                if *s != T::zero() {
                    self.accumulate(grads, *x, g.iter().map(|&v| v * *s).collect());
                }
            }
            Op::Affine { x, w, b } => {
                let (n, i) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[1];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                // dx = g·Wᵀ
                self.accumulate_with(grads, *x, |dx| {
                    T::gemm(n, o, i, g, o as isize, 1, wv, 1, o as isize, T::one(), dx, i as isize, 1)
                });
                // dW = xᵀ·g
                self.accumulate_with(grads, *w, |dw| {
                    T::gemm(i, n, o, xv, 1, i as isize, g, o as isize, 1, T::one(), dw, o as isize, 1)
                });
                self.accumulate_with(grads, *b, |db| {
                    for row in g.chunks(o) {
                        add_into(db, row);
                    }
                });
            }
            Op::Conv2d { x, k, b, geom, cols } => {
                let kv = self.value(*k).data();
                if self.nodes[x.0].requires_grad {
                    let dcols = kernels::conv_backward_cols(geom, kv, g);
                    self.accumulate_with(grads, *x, |dx| kernels::col2im_add(geom, &dcols, dx));
                }
                self.accumulate_with(grads, *k, |dk| kernels::conv_backward_kernel(geom, cols, g, dk));
                self.accumulate_with(grads, *b, |db| {
                    let p = geom.oh * geom.ow;
                    for (d, row) in db.iter_mut().zip(g.chunks(p)) {
                        *d += row.iter().copied().sum::<T>();
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let gx = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &s)| gv * s * (T::one() - s))
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let k = *node.value.shape().last().expect("softmax has rank >= 1");
                let mut gx = vec![T::zero(); y.len()];
                if k > 0 {
                    for ((gr, yr), out) in g.chunks(k).zip(y.chunks(k)).zip(gx.chunks_mut(k)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                            *o = yv * (gv - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / T::lit(labels.len() as f64);
                let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gx[r * k + l] -= scale;
                }
                self.accumulate(grads, *logits, gx);
            }
            Op::SmoothL1 { pred, target } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let scale = g[0] / T::lit(p.len() as f64);
                let gp: Vec<T> = p
                    .iter()
                    .zip(t)
                    .map(|(&a, &b)| {
                        let e = a - b;
                        let d = if e.abs() < T::one() { e } else { e.signum() };
                        d * scale
                    })
                    .collect();
                if self.nodes[target.0].requires_grad {
                    self.accumulate(grads, *target, gp.iter().map(|&v| -v).collect());
                }
                self.accumulate(grads, *pred, gp);
            }
            Op::Concat { inputs, axis } => {
                let base = self.shape(inputs[0]);
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &x in inputs {
                    let block = self.shape(x)[*axis] * inner;
                    let mut gx = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        let start = o * total + offset;
                        gx.extend_from_slice(&g[start..start + block]);
                    }
                    offset += block;
                    self.accumulate(grads, x, gx);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Gather { x, index } => {
                self.accumulate_with(grads, *x, |dx| {
                    for (&i, &gv) in index.iter().zip(g) {
                        dx[i] += gv;
                    }
                });
            }
            Op::Reverse { x, lambda } => {
                if *lambda != T::zero() {
                    let f = -*lambda;
                    self.accumulate(grads, *x, g.iter().map(|&v| f * v).collect());
                }
            }
            Op::WeightedReverse { x, lambda, weights } => {
                let weights = weights.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("weighted reversal used before its weights were set".into())
                })?;
                if *lambda != T::zero() {
                    let row = g.len() / weights.len().max(1);
                    let mut gx = Vec::with_capacity(g.len());
                    for (gr, &w) in g.chunks(row.max(1)).zip(weights) {
                        let f = -*lambda * w;
                        gx.extend(gr.iter().map(|&v| f * v));
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
        }
        Ok(())
    }
}
