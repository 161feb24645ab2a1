//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so the tape is always topologically sorted and
//! [`Graph::backward`] is a single reverse sweep.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, Activation, Padding, Pool};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: Padding,
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    MaxPool2x2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(NodeId),
    GlobalMaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    ChannelMean(NodeId),
    ChannelMax {
        x: NodeId,
        argmax: Vec<usize>,
    },
    ConcatChannels(NodeId, NodeId),
    Reshape(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    SparseCrossEntropy {
        p: NodeId,
        labels: Vec<usize>,
    },
    Sum(NodeId),
    Square(NodeId),
    Select {
        x: NodeId,
        index: usize,
    },
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Probability floor used by the cross-entropy loss.
pub const PROB_FLOOR: f32 = 1e-7;

/// Gradients keyed by node; present only for nodes the loss depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap<T: Element = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> GradientMap<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (NodeId(i), g)))
    }

    /// Bitwise comparison of every gradient.
    pub fn bit_eq(&self, other: &GradientMap<T>) -> bool {
        self.grads.len() == other.grads.len()
            && self.grads.iter().zip(&other.grads).all(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => a.bit_eq(b),
                (None, None) => true,
                _ => false,
            })
    }
}

#[derive(Debug)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self::default()
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push_raw(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient (data, frozen weights).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.push_raw(value, op, needs_grad)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: Padding) -> Result<NodeId> {
        let v = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, padding)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            &[x, w, b],
        ))
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::dense(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(v, Op::Dense { x, w, b }, &[x, w, b]))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let v = ops::activation(self.value(x), kind);
        let op = match kind {
            Activation::Relu => Op::Relu(x),
            Activation::Sigmoid => Op::Sigmoid(x),
        };
        self.push(v, op, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::softmax(self.value(x))?;
        Ok(self.push(v, Op::Softmax(x), &[x]))
    }

    pub fn pool(&mut self, x: NodeId, kind: Pool) -> Result<NodeId> {
        let (v, argmax) = ops::pool_with_argmax(self.value(x), kind)?;
        let op = match kind {
            Pool::Max2x2 => Op::MaxPool2x2 { x, argmax },
            Pool::GlobalAvg => Op::GlobalAvgPool(x),
            Pool::GlobalMax => Op::GlobalMaxPool { x, argmax },
        };
        Ok(self.push(v, op, &[x]))
    }

    /// Mean over the channel axis: `N×C×H×W -> N×1×H×W`.
    pub fn channel_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::channel_mean(self.value(x))?;
        Ok(self.push(v, Op::ChannelMean(x), &[x]))
    }

    /// Max over the channel axis: `N×C×H×W -> N×1×H×W`.
    pub fn channel_max(&mut self, x: NodeId) -> Result<NodeId> {
        let (v, argmax) = ops::channel_max(self.value(x))?;
        Ok(self.push(v, Op::ChannelMax { x, argmax }, &[x]))
    }

    /// Concatenate two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, ca, h, w) = ta.dims4("concat")?;
        let (nb, cb, hb, wb) = tb.dims4("concat")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::dim("concat", ta.shape(), tb.shape()));
        }
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(n * (pa + pb));
        for ni in 0..n {
            data.extend_from_slice(&ta.data()[ni * pa..][..pa]);
            data.extend_from_slice(&tb.data()[ni * pb..][..pb]);
        }
        let v = Tensor::from_parts(vec![n, ca + cb, h, w], data);
        Ok(self.push(v, Op::ConcatChannels(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    fn broadcast_binary(&self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor::from_parts(ta.shape().to_vec(), data));
        }
        let shape = ops::broadcast_shape(op, ta.shape(), tb.shape())?;
        let data = ops::broadcast_indices(ta.shape(), tb.shape(), &shape)
            .into_iter()
            .map(|(i, j)| f(ta.data()[i], tb.data()[j]))
            .collect();
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> NodeId {
        let factor = T::of(factor as f64);
        let v = self.value(x).map(|v| v * factor);
        self.push(v, Op::Scale(x, factor), &[x])
    }

    /// Inverted dropout. Returns `x` itself when not training or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, rate: f32, training: bool, rng: &mut R) -> Result<NodeId> {
        ops::check_dropout_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let t = self.value(x);
        let mask = ops::dropout_mask(t.numel(), rate, rng);
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let v = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(v, Op::Dropout { x, mask }, &[x]))
    }

    /// Mean over the batch of `-ln(max(p[label], 1e-7))` for `p: N×K` probabilities.
    pub fn sparse_cross_entropy(&mut self, p: NodeId, labels: &[usize]) -> Result<NodeId> {
        let loss = sparse_ce(self.value(p), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SparseCrossEntropy {
                p,
                labels: labels.to_vec(),
            },
            &[p],
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v * v);
        self.push(v, Op::Square(x), &[x])
    }

    /// The single element at flat `index`, as a scalar node.
    pub fn select(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let t = self.value(x);
        let v = *t
            .data()
            .get(index)
            .ok_or_else(|| Error::shape("select", t.shape(), format!("index {index} out of range")))?;
        Ok(self.push(Tensor::scalar(v), Op::Select { x, index }, &[x]))
    }

    /// Reverse sweep from a scalar `loss`. Fan-out contributions are summed in
    /// reverse tape order, so two sweeps over the same tape agree bit for bit.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(GradientMap { grads });
        }
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        Ok(GradientMap { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) -> Result<()> {
        if !self.wants(id) {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (dx, dw, db) =
                    ops::conv2d_backward(self.value(*x), self.value(*w), dy, *stride, *padding, self.wants(*x))?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx)?;
                }
                self.accumulate(grads, *w, dw)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::Dense { x, w, b } => {
                let (dx, dw, db) = ops::dense_backward(self.value(*x), self.value(*w), dy)?;
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *w, dw)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv.data().iter().zip(dy.data()).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() }).collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), data))?;
            }
            Op::Sigmoid(x) => {
                let data = out.data().iter().zip(dy.data()).map(|(&s, &d)| d * s * (T::one() - s)).collect();
                self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), data))?;
            }
            Op::Softmax(x) => {
                let k = out.shape()[1];
                let mut data = vec![T::zero(); out.numel()];
                for ((y, d), dst) in out
                    .data()
                    .chunks_exact(k)
                    .zip(dy.data().chunks_exact(k))
                    .zip(data.chunks_exact_mut(k))
                {
                    let dot: T = y.iter().zip(d).map(|(&a, &b)| a * b).sum();
                    for j in 0..k {
                        dst[j] = y[j] * (d[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), data))?;
            }
            Op::MaxPool2x2 { x, argmax } | Op::GlobalMaxPool { x, argmax } | Op::ChannelMax { x, argmax } => {
                let xv = self.value(*x);
                let mut data = vec![T::zero(); xv.numel()];
                for (&src, &d) in argmax.iter().zip(dy.data()) {
                    data[src] += d;
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), data))?;
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4("gap_backward")?;
                let hw = h * w;
                let mut data = Vec::with_capacity(xv.numel());
                for &d in dy.data() {
                    let share = d / T::of(hw as f64);
                    data.extend(std::iter::repeat_n(share, hw));
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), data))?;
            }
            Op::ChannelMean(x) => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4("channel_mean_backward")?;
                let hw = h * w;
                let mut data = vec![T::zero(); xv.numel()];
                for ni in 0..n {
                    let src = &dy.data()[ni * hw..][..hw];
                    for ci in 0..c {
                        for (dst, &d) in data[(ni * c + ci) * hw..][..hw].iter_mut().zip(src) {
                            *dst = d / T::of(c as f64);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), data))?;
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                let n = sa[0];
                let pa: usize = sa[1..].iter().product();
                let pb: usize = sb[1..].iter().product();
                let (mut da, mut db) = (Vec::with_capacity(n * pa), Vec::with_capacity(n * pb));
                for chunk in dy.data().chunks_exact(pa + pb) {
                    da.extend_from_slice(&chunk[..pa]);
                    db.extend_from_slice(&chunk[pa..]);
                }
                self.accumulate(grads, *a, Tensor::from_parts(sa, da))?;
                self.accumulate(grads, *b, Tensor::from_parts(sb, db))?;
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, dy.data().to_vec()))?;
            }
            Op::Add(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                if self.wants(*a) {
                    self.accumulate(grads, *a, unbroadcast(dy, sa, sb, Side::Left, None))?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, unbroadcast(dy, sa, sb, Side::Right, None))?;
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let da = unbroadcast(dy, ta.shape(), tb.shape(), Side::Left, Some(tb));
                    self.accumulate(grads, *a, da)?;
                }
                if self.wants(*b) {
                    let db = unbroadcast(dy, ta.shape(), tb.shape(), Side::Right, Some(ta));
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Scale(x, factor) => {
                self.accumulate(grads, *x, dy.map(|d| d * *factor))?;
            }
            Op::Dropout { x, mask } => {
                let data = dy.data().iter().zip(mask).map(|(&d, &m)| d * m).collect();
                self.accumulate(grads, *x, Tensor::from_parts(dy.shape().to_vec(), data))?;
            }
            Op::SparseCrossEntropy { p, labels } => {
                let pv = self.value(*p);
                let k = pv.shape()[1];
                let n = T::of(labels.len() as f64);
                let g = dy.data()[0];
                let mut data = vec![T::zero(); pv.numel()];
                for (row, &label) in labels.iter().enumerate() {
                    let prob = pv.data()[row * k + label];
                    if prob > T::of(PROB_FLOOR as f64) {
                        data[row * k + label] = -g / (n * prob);
                    }
                }
                self.accumulate(grads, *p, Tensor::from_parts(pv.shape().to_vec(), data))?;
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(shape, dy.data()[0]))?;
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                let data = xv.data().iter().zip(dy.data()).map(|(&v, &d)| (v + v) * d).collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), data))?;
            }
            Op::Select { x, index } => {
                let mut g = Tensor::zeros(self.value(*x).shape().to_vec());
                g.data_mut()[*index] = dy.data()[0];
                self.accumulate(grads, *x, g)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Side {
    Left,
    Right,
}

/// Gradient of one operand of a broadcasting binary op, summed back down to
/// that operand's shape. `factor` is the other operand for products.
fn unbroadcast<T: Element>(
    dy: &Tensor<T>,
    a_shape: &[usize],
    b_shape: &[usize],
    side: Side,
    factor: Option<&Tensor<T>>,
) -> Tensor<T> {
    let out_shape = dy.shape();
    let target = match side {
        Side::Left => a_shape,
        Side::Right => b_shape,
    };
    if a_shape == out_shape && b_shape == out_shape {
        let data = match factor {
            Some(f) => dy.data().iter().zip(f.data()).map(|(&d, &o)| d * o).collect(),
            None => dy.data().to_vec(),
        };
        return Tensor::from_parts(target.to_vec(), data);
    }
    let mut acc = vec![T::zero(); target.iter().product()];
    for (k, (ia, ib)) in ops::broadcast_indices(a_shape, b_shape, out_shape).into_iter().enumerate() {
        let (dst, src) = match side {
            Side::Left => (ia, ib),
            Side::Right => (ib, ia),
        };
        let d = dy.data()[k];
        acc[dst] += match factor {
            Some(f) => d * f.data()[src],
            None => d,
        };
    }
    Tensor::from_parts(target.to_vec(), acc)
}

/// Sparse categorical cross-entropy on probabilities `p: N×K`.
pub fn sparse_ce<T: Element>(p: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (n, k) = p.dims2("sparse_ce")?;
    if labels.len() != n {
        return Err(Error::dim("sparse_ce", p.shape(), &[labels.len()]));
    }
    let mut total = T::zero();
    for (row, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Data(format!("label {label} out of range for {k} classes")));
        }
        total += -p.data()[row * k + label].max(T::of(PROB_FLOOR as f64)).ln();
    }
    Ok(total / T::of(n as f64))
}
