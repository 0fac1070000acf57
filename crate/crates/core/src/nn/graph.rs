use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::ops::{self, RoiTaps};
use super::params::ParamStore;
use super::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Deconv2x2 { x: Var, w: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Maximum(Var, Var),
    Upsample { x: Var, factor: usize },
    SpatialSoftmax(Var),
    ChannelGate { x: Var, gate: Var },
    RoiAlign { x: Var, taps: Arc<RoiTaps> },
    Reshape(Var),
    Gather { x: Var, index: Vec<usize> },
    Concat(Vec<Var>),
    Sum(Vec<Var>),
    BceMean { logits: Var, targets: Vec<f64> },
    SoftmaxCeMean { logits: Var, labels: Vec<usize> },
    SmoothL1Sum { pred: Var, target: Vec<f64>, scale: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Tape of tensor operations supporting reverse-mode differentiation.
///
/// Parameters are bound by name on first use so that a weight shared by
/// several call sites (e.g. RPN head applied to every pyramid level)
/// accumulates its gradient in one leaf.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter bound into the graph. Parameters that
    /// were bound but received no gradient get zeros.
    pub fn params(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = self.grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(store.get(name).expect("bound parameter").shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Binds the named parameter from `store`.
    ///
    /// Panics if the name is absent: parameter names are produced by the
    /// same model code that initialised the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let t = store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
            .clone();
        let v = self.push(t, Op::Leaf);
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = ops::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        self.push(out, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn deconv2x2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = ops::deconv2x2_forward(self.value(x), self.value(w), self.value(b));
        self.push(out, Op::Deconv2x2 { x, w, b })
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = ops::linear_forward(self.value(x), self.value(w), self.value(b));
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x.max(*y)).collect();
        let out = Tensor::from_vec(va.shape(), data);
        self.push(out, Op::Maximum(a, b))
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        if factor == 1 {
            return x;
        }
        let out = ops::upsample_nearest_forward(self.value(x), factor);
        self.push(out, Op::Upsample { x, factor })
    }

    pub fn spatial_softmax(&mut self, x: Var) -> Var {
        let out = ops::spatial_softmax_forward(self.value(x));
        self.push(out, Op::SpatialSoftmax(x))
    }

    pub fn channel_gate(&mut self, x: Var, gate: Var) -> Var {
        let out = ops::channel_gate_forward(self.value(x), self.value(gate));
        self.push(out, Op::ChannelGate { x, gate })
    }

    pub fn roi_align(&mut self, x: Var, taps: Arc<RoiTaps>) -> Var {
        let out = taps.forward(self.value(x));
        self.push(out, Op::RoiAlign { x, taps })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(out, Op::Reshape(x))
    }

    /// Flat gather; output is 1-D with `index.len()` entries.
    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Var {
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_vec(&[index.len()], data);
        self.push(out, Op::Gather { x, index })
    }

    /// Flattens and concatenates.
    pub fn concat(&mut self, parts: Vec<Var>) -> Var {
        let mut data = Vec::new();
        for &p in &parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(&[data.len()], data);
        self.push(out, Op::Concat(parts))
    }

    /// Sum of all elements of all inputs, as a `[1]` tensor.
    pub fn sum(&mut self, parts: Vec<Var>) -> Var {
        let total = parts.iter().map(|&p| self.value(p).sum()).sum();
        self.push(Tensor::scalar(total), Op::Sum(parts))
    }

    /// Mean binary cross-entropy of `logits` against `targets` (same length).
    pub fn bce_mean(&mut self, logits: Var, targets: Vec<f64>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.len(), targets.len());
        let total: f64 = z.data().iter().zip(&targets).map(|(&z, &t)| ops::bce_with_logits(z, t)).sum();
        let out = Tensor::scalar(if targets.is_empty() { 0.0 } else { total / targets.len() as f64 });
        self.push(out, Op::BceMean { logits, targets })
    }

    /// Mean softmax cross-entropy; `logits` is `[R, K]`.
    pub fn softmax_ce_mean(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let z = self.value(logits);
        let k = z.shape()[1];
        assert_eq!(z.shape()[0], labels.len());
        let mut total = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &z.data()[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[l];
        }
        let out = Tensor::scalar(if labels.is_empty() { 0.0 } else { total / labels.len() as f64 });
        self.push(out, Op::SoftmaxCeMean { logits, labels })
    }

    /// `scale · Σ smooth_l1(pred − target)`.
    pub fn smooth_l1_sum(&mut self, pred: Var, target: Vec<f64>, scale: f64) -> Var {
        let p = self.value(pred);
        assert_eq!(p.len(), target.len());
        let total: f64 = p.data().iter().zip(&target).map(|(a, b)| ops::smooth_l1(a - b)).sum();
        self.push(Tensor::scalar(scale * total), Op::SmoothL1Sum { pred, target, scale })
    }

    /// Reverse-mode pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let r = ops::conv2d_backward(self.value(*x), self.value(*w), b.is_some(), *stride, *pad, &g);
                    acc(&mut grads, *x, r.dx);
                    acc(&mut grads, *w, r.dw);
                    if let (Some(b), Some(db)) = (b, r.db) {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Deconv2x2 { x, w, b } => {
                    let (dx, dw, db) = ops::deconv2x2_backward(self.value(*x), self.value(*w), &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = Tensor::from_vec(g.shape(), g.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect());
                    let gb = Tensor::from_vec(g.shape(), g.data().iter().zip(va.data()).map(|(g, x)| g * x).collect());
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g.map(|v| v * f)),
                Op::Relu(a) => {
                    let out = &node.value;
                    let data = g.data().iter().zip(out.data()).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 }).collect();
                    acc(&mut grads, *a, Tensor::from_vec(g.shape(), data));
                }
                Op::Maximum(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut ga = Tensor::zeros(g.shape());
                    let mut gb = Tensor::zeros(g.shape());
                    for k in 0..g.len() {
                        if va.data()[k] >= vb.data()[k] {
                            ga.data_mut()[k] = g.data()[k];
                        } else {
                            gb.data_mut()[k] = g.data()[k];
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Upsample { x, factor } => {
                    let dx = ops::upsample_nearest_backward(self.value(*x).shape(), *factor, &g);
                    acc(&mut grads, *x, dx);
                }
                Op::SpatialSoftmax(x) => {
                    let dx = ops::spatial_softmax_backward(&node.value, &g);
                    acc(&mut grads, *x, dx);
                }
                Op::ChannelGate { x, gate } => {
                    let (dx, dg) = ops::channel_gate_backward(self.value(*x), self.value(*gate), &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gate, dg);
                }
                Op::RoiAlign { x, taps } => {
                    let c = self.value(*x).shape()[1];
                    acc(&mut grads, *x, taps.backward(c, &g));
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(&mut grads, *x, g.reshape(&shape));
                }
                Op::Gather { x, index } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (k, &i) in index.iter().enumerate() {
                        dx.data_mut()[i] += g.data()[k];
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let shape = self.value(*p).shape().to_vec();
                        let n = self.value(*p).len();
                        acc(&mut grads, *p, Tensor::from_vec(&shape, g.data()[offset..offset + n].to_vec()));
                        offset += n;
                    }
                }
                Op::Sum(parts) => {
                    let gv = g.item();
                    for p in parts {
                        let shape = self.value(*p).shape().to_vec();
                        acc(&mut grads, *p, Tensor::full(&shape, gv));
                    }
                }
                Op::BceMean { logits, targets } => {
                    let z = self.value(*logits);
                    let n = targets.len().max(1) as f64;
                    let gv = g.item() / n;
                    let data = z.data().iter().zip(targets).map(|(&z, &t)| gv * (ops::sigmoid(z) - t)).collect();
                    acc(&mut grads, *logits, Tensor::from_vec(z.shape(), data));
                }
                Op::SoftmaxCeMean { logits, labels } => {
                    let z = self.value(*logits);
                    let k = z.shape()[1];
                    let gv = g.item() / labels.len().max(1) as f64;
                    let mut dz = Tensor::zeros(z.shape());
                    for (r, &l) in labels.iter().enumerate() {
                        let row = &z.data()[r * k..(r + 1) * k];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for j in 0..k {
                            let p = (row[j] - max).exp() / total;
                            dz.data_mut()[r * k + j] = gv * (p - if j == l { 1.0 } else { 0.0 });
                        }
                    }
                    acc(&mut grads, *logits, dz);
                }
                Op::SmoothL1Sum { pred, target, scale } => {
                    let p = self.value(*pred);
                    let gv = g.item() * scale;
                    let data = p.data().iter().zip(target).map(|(a, b)| gv * ops::smooth_l1_grad(a - b)).collect();
                    acc(&mut grads, *pred, Tensor::from_vec(p.shape(), data));
                }
            }
        }
        Gradients {
            grads,
            params: self.param_order.clone(),
        }
    }
}
