//! Tape of eagerly evaluated nodes.
//!
//! Every backward rule is itself written with graph ops, so the gradient
//! returned by [`Graph::grad`] is an ordinary node that can be differentiated
//! again. The gradient penalty of a Wasserstein critic relies on that.

use std::sync::Arc;

use crate::conv::{self, ConvGeometry};
use crate::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    /// Elementwise product with a constant buffer (leaky ReLU slopes).
    MaskMul(NodeId, Arc<Vec<T>>),
    Tanh(NodeId),
    Powf(NodeId, T),
    Matmul {
        a: NodeId,
        b: NodeId,
        trans_a: bool,
        trans_b: bool,
    },
    Conv {
        x: NodeId,
        w: NodeId,
        geom: ConvGeometry,
    },
    ConvTranspose {
        y: NodeId,
        w: NodeId,
        geom: ConvGeometry,
    },
    ConvWeight {
        x: NodeId,
        y: NodeId,
        geom: ConvGeometry,
    },
    /// `x[n, c, ..] + b[c]`.
    AddChannelBias(NodeId, NodeId),
    /// `[n, c, ..] -> [c]`.
    SumChannels(NodeId),
    /// `[c] -> shape`, repeating along the leading and trailing axes.
    BroadcastChannels(NodeId),
    /// `[outer * inner] -> [outer]`.
    SumInner(NodeId),
    /// `[outer] -> shape`, repeating each value over the trailing `inner` elements.
    BroadcastInner(NodeId),
    Reshape(NodeId),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Scale(a, _)
            | AddScalar(a, _)
            | MaskMul(a, _)
            | Tanh(a)
            | Powf(a, _)
            | SumChannels(a)
            | BroadcastChannels(a)
            | SumInner(a)
            | BroadcastInner(a)
            | Reshape(a) => vec![*a],
            Matmul { a, b, .. } => vec![*a, *b],
            Conv { x, w, .. } => vec![*x, *w],
            ConvTranspose { y, w, .. } => vec![*y, *w],
            ConvWeight { x, y, .. } => vec![*x, *y],
            AddChannelBias(x, b) => vec![*x, *b],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Computation graph; nodes are evaluated as they are created.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "channel op needs [n, c, ..], got {shape:?}");
    let outer = shape[0];
    let channels = shape[1];
    let inner = shape[2..].iter().product();
    (outer, channels, inner)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a, c))
    }

    fn mask_mul(&mut self, a: NodeId, mask: Arc<Vec<T>>) -> NodeId {
        let src = self.value(a);
        assert_eq!(src.len(), mask.len());
        let data = src.data().iter().zip(mask.iter()).map(|(&x, &m)| x * m).collect();
        let v = Tensor::new(src.shape().to_vec(), data);
        self.push(v, Op::MaskMul(a, mask))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: T) -> NodeId {
        let mask: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > T::zero() { T::one() } else { slope })
            .collect();
        self.mask_mul(a, Arc::new(mask))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn powf(&mut self, a: NodeId, p: T) -> NodeId {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(v, Op::Powf(a, p))
    }

    /// `op(a) * op(b)` for 2D operands.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul needs 2D operands");
        let (m, ka) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(ka, kb, "matmul inner dimension mismatch {sa:?} x {sb:?}");
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            ka,
            n,
            T::one(),
            self.value(a).data(),
            trans_a,
            self.value(b).data(),
            trans_b,
            T::zero(),
            &mut out,
        );
        self.push(
            Tensor::new(vec![m, n], out),
            Op::Matmul {
                a,
                b,
                trans_a,
                trans_b,
            },
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_t(a, b, false, false)
    }

    fn batch_of(&self, id: NodeId, want: impl Fn(usize) -> Vec<usize>) -> usize {
        let shape = self.shape(id);
        let batch = shape[0];
        assert_eq!(shape, want(batch).as_slice(), "conv operand shape");
        batch
    }

    /// Strided convolution, `x: [n, in, ..] -> [n, out, ..]`.
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, geom: ConvGeometry) -> NodeId {
        let batch = self.batch_of(x, |b| geom.x_shape(b));
        assert_eq!(self.shape(w), geom.weight_shape().as_slice());
        let out = conv::conv(&geom, batch, self.value(x).data(), self.value(w).data());
        self.push(
            Tensor::new(geom.y_shape(batch), out),
            Op::Conv { x, w, geom },
        )
    }

    /// Transposed convolution, `y: [n, out, ..] -> [n, in, ..]` (upsampling).
    pub fn conv_transpose3d(&mut self, y: NodeId, w: NodeId, geom: ConvGeometry) -> NodeId {
        let batch = self.batch_of(y, |b| geom.y_shape(b));
        assert_eq!(self.shape(w), geom.weight_shape().as_slice());
        let out = conv::conv_transpose(&geom, batch, self.value(y).data(), self.value(w).data());
        self.push(
            Tensor::new(geom.x_shape(batch), out),
            Op::ConvTranspose { y, w, geom },
        )
    }

    /// Weight-shaped correlation of `x` and `y`, summed over the batch.
    pub fn conv_weight3d(&mut self, x: NodeId, y: NodeId, geom: ConvGeometry) -> NodeId {
        let batch = self.batch_of(x, |b| geom.x_shape(b));
        self.batch_of(y, |_| geom.y_shape(batch));
        let out = conv::conv_weight(&geom, batch, self.value(x).data(), self.value(y).data());
        self.push(
            Tensor::new(geom.weight_shape(), out),
            Op::ConvWeight { x, y, geom },
        )
    }

    /// Adds `b[c]` to every element of channel `c` of `x: [n, c, ..]`.
    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = self.value(x);
        let (outer, channels, inner) = channel_layout(xv.shape());
        let bv = self.value(b).data();
        assert_eq!(bv.len(), channels, "bias length");
        let mut data = xv.data().to_vec();
        for n in 0..outer {
            for c in 0..channels {
                let start = (n * channels + c) * inner;
                for v in &mut data[start..start + inner] {
                    *v += bv[c];
                }
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), data);
        self.push(v, Op::AddChannelBias(x, b))
    }

    pub fn sum_channels(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (outer, channels, inner) = channel_layout(xv.shape());
        let mut out = vec![T::zero(); channels];
        for n in 0..outer {
            for (c, o) in out.iter_mut().enumerate() {
                let start = (n * channels + c) * inner;
                *o += xv.data()[start..start + inner].iter().copied().sum::<T>();
            }
        }
        self.push(Tensor::new(vec![channels], out), Op::SumChannels(x))
    }

    pub fn broadcast_channels(&mut self, b: NodeId, shape: Vec<usize>) -> NodeId {
        let (outer, channels, inner) = channel_layout(&shape);
        let bv = self.value(b).data();
        assert_eq!(bv.len(), channels);
        let mut data = Vec::with_capacity(outer * channels * inner);
        for _ in 0..outer {
            for &c in bv {
                data.extend(std::iter::repeat_n(c, inner));
            }
        }
        self.push(Tensor::new(shape, data), Op::BroadcastChannels(b))
    }

    /// Sums contiguous groups: `[outer * inner] -> [outer]`.
    pub fn sum_inner(&mut self, x: NodeId, outer: usize) -> NodeId {
        let xv = self.value(x);
        assert!(outer > 0 && xv.len() % outer == 0, "sum_inner: {} by {outer}", xv.len());
        let inner = xv.len() / outer;
        let out = xv.data().chunks(inner).map(|c| c.iter().copied().sum()).collect();
        self.push(Tensor::new(vec![outer], out), Op::SumInner(x))
    }

    /// Inverse layout of [`Graph::sum_inner`]: repeats each element over `inner`.
    pub fn broadcast_inner(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let xv = self.value(x);
        let total: usize = shape.iter().product();
        assert!(total % xv.len() == 0, "broadcast_inner: {} into {shape:?}", xv.len());
        let inner = total / xv.len();
        let mut data = Vec::with_capacity(total);
        for &v in xv.data() {
            data.extend(std::iter::repeat_n(v, inner));
        }
        self.push(Tensor::new(shape, data), Op::BroadcastInner(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        self.sum_inner(x, 1)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self.value(x).clone().reshaped(shape);
        self.push(v, Op::Reshape(x))
    }

    /// Gradients of the scalar `output` with respect to each node in `wrt`.
    ///
    /// The returned nodes are differentiable. Nodes of `wrt` that `output`
    /// does not depend on get a zero leaf.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Vec<NodeId> {
        assert_eq!(self.value(output).len(), 1, "grad of a non-scalar node");
        let end = output.0 + 1;
        let mut requires = vec![false; end];
        for w in wrt {
            if w.0 < end {
                requires[w.0] = true;
            }
        }
        for i in 0..end {
            if !requires[i] {
                requires[i] = self.nodes[i].op.inputs().iter().any(|j| requires[j.0]);
            }
        }

        let mut grads: Vec<Option<NodeId>> = vec![None; end];
        let seed = Tensor::full(self.shape(output).to_vec(), T::one());
        grads[output.0] = Some(self.leaf(seed));
        for i in (0..end).rev() {
            if !requires[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            for (input, gi) in self.backward(NodeId(i), &op, g, &requires) {
                grads[input.0] = Some(match grads[input.0] {
                    Some(prev) => self.add(prev, gi),
                    None => gi,
                });
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let zeros = Tensor::zeros(self.shape(*w).to_vec());
                    self.leaf(zeros)
                }
            })
            .collect()
    }

    fn backward(
        &mut self,
        node: NodeId,
        op: &Op<T>,
        g: NodeId,
        requires: &[bool],
    ) -> Vec<(NodeId, NodeId)> {
        let need = |id: NodeId| requires[id.0];
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(*a) {
                    out.push((*a, g));
                }
                if need(*b) {
                    out.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    out.push((*a, g));
                }
                if need(*b) {
                    let neg = self.scale(g, -T::one());
                    out.push((*b, neg));
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    let ga = self.mul(g, *b);
                    out.push((*a, ga));
                }
                if need(*b) {
                    let gb = self.mul(g, *a);
                    out.push((*b, gb));
                }
            }
            Op::Scale(a, c) => {
                let ga = self.scale(g, *c);
                out.push((*a, ga));
            }
            Op::AddScalar(a, _) => out.push((*a, g)),
            Op::MaskMul(a, mask) => {
                let ga = self.mask_mul(g, mask.clone());
                out.push((*a, ga));
            }
            Op::Tanh(a) => {
                // d tanh = 1 - y^2, written against the output node itself
                let y2 = self.mul(node, node);
                let neg = self.scale(y2, -T::one());
                let deriv = self.add_scalar(neg, T::one());
                let ga = self.mul(g, deriv);
                out.push((*a, ga));
            }
            Op::Powf(a, p) => {
                let lowered = self.powf(*a, *p - T::one());
                let deriv = self.scale(lowered, *p);
                let ga = self.mul(g, deriv);
                out.push((*a, ga));
            }
            Op::Matmul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (a, b, ta, tb) = (*a, *b, *trans_a, *trans_b);
                if need(a) {
                    let ga = if ta {
                        self.matmul_t(b, g, tb, true)
                    } else {
                        self.matmul_t(g, b, false, !tb)
                    };
                    out.push((a, ga));
                }
                if need(b) {
                    let gb = if tb {
                        self.matmul_t(g, a, true, ta)
                    } else {
                        self.matmul_t(a, g, !ta, false)
                    };
                    out.push((b, gb));
                }
            }
            Op::Conv { x, w, geom } => {
                if need(*x) {
                    let gx = self.conv_transpose3d(g, *w, *geom);
                    out.push((*x, gx));
                }
                if need(*w) {
                    let gw = self.conv_weight3d(*x, g, *geom);
                    out.push((*w, gw));
                }
            }
            Op::ConvTranspose { y, w, geom } => {
                if need(*y) {
                    let gy = self.conv3d(g, *w, *geom);
                    out.push((*y, gy));
                }
                if need(*w) {
                    let gw = self.conv_weight3d(g, *y, *geom);
                    out.push((*w, gw));
                }
            }
            Op::ConvWeight { x, y, geom } => {
                if need(*x) {
                    let gx = self.conv_transpose3d(*y, g, *geom);
                    out.push((*x, gx));
                }
                if need(*y) {
                    let gy = self.conv3d(*x, g, *geom);
                    out.push((*y, gy));
                }
            }
            Op::AddChannelBias(x, b) => {
                if need(*x) {
                    out.push((*x, g));
                }
                if need(*b) {
                    let gb = self.sum_channels(g);
                    out.push((*b, gb));
                }
            }
            Op::SumChannels(x) => {
                let shape = self.shape(*x).to_vec();
                let gx = self.broadcast_channels(g, shape);
                out.push((*x, gx));
            }
            Op::BroadcastChannels(b) => {
                let gb = self.sum_channels(g);
                out.push((*b, gb));
            }
            Op::SumInner(x) => {
                let shape = self.shape(*x).to_vec();
                let gx = self.broadcast_inner(g, shape);
                out.push((*x, gx));
            }
            Op::BroadcastInner(x) => {
                let outer = self.value(*x).len();
                let flat = self.sum_inner(g, outer);
                let shape = self.shape(*x).to_vec();
                let gx = self.reshape(flat, shape);
                out.push((*x, gx));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                let gx = self.reshape(g, shape);
                out.push((*x, gx));
            }
        }
        out
    }
}
