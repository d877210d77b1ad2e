use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::{self, Activation, ConvGeometry};
use super::{Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddTrailing { x: Var, b: Var },
    Mul(Var, Var),
    Scale(Var, T),
    ChannelGate { x: Var, gate: Var },
    Sum(Var),
    Mean(Var),
    MatMul { a: Var, b: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    MaxPool { x: Var, argmax: Vec<u32> },
    AvgPool { x: Var, k: usize, stride: usize },
    GlobalAvgPool(Var),
    Act { x: Var, kind: Activation },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, invstd: Vec<T>, batch_stats: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, invstd: Vec<T> },
    Softmax(Var),
    Mask { x: Var, mask: Vec<T> },
    DropPath { x: Var, keep: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Mul(a, b) => vec![*a, *b],
            AddTrailing { x, b } => vec![*x, *b],
            ChannelGate { x, gate } => vec![*x, *gate],
            Scale(x, _) | Sum(x) | Mean(x) | Reshape(x) | GlobalAvgPool(x) | Softmax(x) => vec![*x],
            MatMul { a, b } | Bmm { a, b, .. } => vec![*a, *b],
            Linear { x, w, b } | Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Permute { x, .. }
            | Slice { x, .. }
            | MaxPool { x, .. }
            | AvgPool { x, .. }
            | Act { x, .. }
            | Mask { x, .. }
            | DropPath { x, .. } => vec![*x],
            Concat { xs, .. } => xs.clone(),
            BatchNorm { x, gamma, beta, .. } | LayerNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            AddTrailing { .. } => "add_broadcast",
            Mul(..) => "mul",
            Scale(..) => "scale",
            ChannelGate { .. } => "channel_gate",
            Sum(_) => "sum",
            Mean(_) => "mean",
            MatMul { .. } => "matmul",
            Bmm { .. } => "bmm",
            Linear { .. } => "linear",
            Reshape(_) => "reshape",
            Permute { .. } => "permute",
            Concat { .. } => "concat",
            Slice { .. } => "slice",
            Conv2d { .. } => "conv2d",
            MaxPool { .. } => "max_pool2d",
            AvgPool { .. } => "avg_pool2d",
            GlobalAvgPool(_) => "global_avg_pool",
            Act { kind, .. } => kind.name(),
            BatchNorm { .. } => "batch_norm",
            LayerNorm { .. } => "layer_norm",
            Softmax(_) => "softmax",
            Mask { .. } => "dropout",
            DropPath { .. } => "drop_path",
            CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation and replays it in reverse for gradients.
///
/// Nodes are appended in evaluation order, which is a topological order of the
/// graph; backward walks it in reverse so every node is visited exactly once.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    training: bool,
    rng: ChaCha8Rng,
    scope: String,
    macs: u64,
}

impl<T: Scalar> Tape<T> {
    /// Inference tape: dropout and drop-path are identities.
    pub fn inference() -> Self {
        Self::build(false, 0)
    }

    /// Training tape; `seed` drives every stochastic regularizer on it.
    pub fn training(seed: u64) -> Self {
        Self::build(true, seed)
    }

    fn build(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            scope: String::new(),
            macs: 0,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of all matmul/conv work recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub(crate) fn add_macs(&mut self, n: u64) {
        self.macs += n;
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Names the layer that subsequent operations belong to (used in errors).
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Gradient of the last `backward` target with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: op.name(),
                scope: self.scope.clone(),
            });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass seeded with ones (the usual case: a scalar loss).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let seed = Tensor::ones(self.shape(root));
        self.backward_with(root, seed)
    }

    /// Reverse pass with an explicit output cotangent.
    pub fn backward_with(&mut self, root: Var, seed: Tensor<T>) -> Result<()> {
        if seed.shape() != self.shape(root) {
            return Err(TensorError::dim(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let val = |v: &Var| &nodes[v.0].value;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor<T>| accumulate(grads, v, t);
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(a) {
                    acc(*a, g.clone());
                }
                if wants(b) {
                    acc(*b, g.clone());
                }
            }
            Op::AddTrailing { x, b } => {
                if wants(x) {
                    acc(*x, g.clone());
                }
                if wants(b) {
                    acc(*b, ops::reduce_leading(g, val(b).shape()));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    acc(*a, ops::hadamard(g, val(b)));
                }
                if wants(b) {
                    acc(*b, ops::hadamard(g, val(a)));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc(*x, g.map(|v| v * c));
            }
            Op::ChannelGate { x, gate } => {
                let (gx, gg) = ops::channel_gate_backward(g, val(x), val(gate), wants(x), wants(gate));
                if let Some(t) = gx {
                    acc(*x, t);
                }
                if let Some(t) = gg {
                    acc(*gate, t);
                }
            }
            Op::Sum(x) => {
                acc(*x, Tensor::full(val(x).shape(), g.data()[0]));
            }
            Op::Mean(x) => {
                let n = T::lit(val(x).numel() as f64);
                acc(*x, Tensor::full(val(x).shape(), g.data()[0] / n));
            }
            Op::MatMul { a, b } => {
                let (ga, gb) = ops::matmul_backward(g, val(a), val(b), wants(a), wants(b));
                if let Some(t) = ga {
                    acc(*a, t);
                }
                if let Some(t) = gb {
                    acc(*b, t);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (ga, gb) = ops::bmm_backward(g, val(a), val(b), *trans_b, wants(a), wants(b));
                if let Some(t) = ga {
                    acc(*a, t);
                }
                if let Some(t) = gb {
                    acc(*b, t);
                }
            }
            Op::Linear { x, w, b } => {
                let (gx, gw, gb) = ops::linear_backward(g, val(x), val(w), wants(x), wants(w));
                if let Some(t) = gx {
                    acc(*x, t);
                }
                if let Some(t) = gw {
                    acc(*w, t);
                }
                if let Some(b) = b {
                    if wants(b) {
                        acc(*b, gb);
                    }
                }
            }
            Op::Reshape(x) => {
                let t = g.clone().reshape(val(x).shape()).expect("reshape grad");
                acc(*x, t);
            }
            Op::Permute { x, perm } => {
                acc(*x, ops::permute_inverse(g, perm));
            }
            Op::Concat { xs, axis } => {
                let parts = ops::split_axis(g, *axis, &xs.iter().map(|v| val(v).shape()[*axis]).collect::<Vec<_>>());
                for (v, t) in xs.iter().zip(parts) {
                    if wants(v) {
                        acc(*v, t);
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                acc(*x, ops::slice_backward(g, val(x).shape(), *axis, *start));
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = ops::conv2d_backward(g, val(x), val(w), geom, wants(x), wants(w));
                if let Some(t) = gx {
                    acc(*x, t);
                }
                if let Some(t) = gw {
                    acc(*w, t);
                }
                if let Some(b) = b {
                    if wants(b) {
                        acc(*b, gb);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                acc(*x, ops::max_pool_backward(g, val(x).shape(), argmax));
            }
            Op::AvgPool { x, k, stride } => {
                acc(*x, ops::avg_pool_backward(g, val(x).shape(), *k, *stride));
            }
            Op::GlobalAvgPool(x) => {
                acc(*x, ops::global_avg_pool_backward(g, val(x).shape()));
            }
            Op::Act { x, kind } => {
                acc(*x, ops::activation_backward(*kind, g, val(x), out));
            }
            Op::BatchNorm { x, gamma, beta, xhat, invstd, batch_stats } => {
                let (gx, gg, gb) = ops::batch_norm_backward(g, val(gamma), xhat, invstd, *batch_stats, wants(x));
                if let Some(t) = gx {
                    acc(*x, t);
                }
                if wants(gamma) {
                    acc(*gamma, gg);
                }
                if wants(beta) {
                    acc(*beta, gb);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, invstd } => {
                let (gx, gg, gb) = ops::layer_norm_backward(g, val(gamma), xhat, invstd, wants(x));
                if let Some(t) = gx {
                    acc(*x, t);
                }
                if wants(gamma) {
                    acc(*gamma, gg);
                }
                if wants(beta) {
                    acc(*beta, gb);
                }
            }
            Op::Softmax(x) => {
                acc(*x, ops::softmax_backward(g, out));
            }
            Op::Mask { x, mask } => {
                let mut t = g.clone();
                for (v, &m) in t.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
                acc(*x, t);
            }
            Op::DropPath { x, keep } => {
                acc(*x, ops::scale_leading(g, keep));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                acc(*logits, ops::cross_entropy_backward(g, val(logits).shape(), labels, probs));
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_node_accumulates_both_paths() {
        // f(x) = x*x + 3x at x = 2: df/dx = 2x + 3 = 7.
        let mut tape = Tape::<f64>::training(0);
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let sq = tape.mul(x, x).unwrap();
        let three_x = tape.scale(x, 3.0).unwrap();
        let f = tape.add(sq, three_x).unwrap();
        assert_eq!(tape.value(f).data()[0], 10.0);
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(x).unwrap().data()[0], 7.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::training(0);
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data()[0], 5.0);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn non_finite_output_names_scope() {
        let mut tape = Tape::<f32>::inference();
        tape.set_scope("stage3.block1");
        let x = tape.constant(Tensor::scalar(f32::MAX));
        let err = tape.scale(x, 10.0).unwrap_err();
        assert_eq!(
            err,
            TensorError::NonFinite {
                op: "scale",
                scope: "stage3.block1".into()
            }
        );
    }
}
