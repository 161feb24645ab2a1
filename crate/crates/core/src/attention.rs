//! Squeeze-and-excitation and CBAM channel/spatial attention.
//!
//! Both blocks are available on a [`Graph`] (for training and gradients) and
//! as plain tensor functions that build a throwaway graph.

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::ops::{Padding, Pool};
use crate::tensor::{Element, Tensor};

/// Default channel reduction ratio.
pub const DEFAULT_REDUCTION: usize = 8;

/// CBAM spatial kernel extent.
pub const SPATIAL_KERNEL: usize = 7;

/// Hidden width of the excitation MLP: `max(1, round(C / r))`.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    let r = reduction.max(1);
    ((channels as f64 / r as f64).round() as usize).max(1)
}

/// Uniform Glorot initialisation in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    Tensor::uniform(shape, -limit, limit, rng)
}

/// SE gate: `GAP -> dense(C, C/r) -> relu -> dense(C/r, C) -> sigmoid`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeParams<T = Tensor> {
    pub reduce_w: T,
    pub reduce_b: T,
    pub expand_w: T,
    pub expand_b: T,
}

/// CBAM: a channel MLP shared by the average and max paths, then a 7x7
/// 2-in/1-out convolution over cross-channel mean and max maps.
#[derive(Clone, Debug, PartialEq)]
pub struct CbamParams<T = Tensor> {
    pub fc1_w: T,
    pub fc1_b: T,
    pub fc2_w: T,
    pub fc2_b: T,
    pub spatial_w: T,
    pub spatial_b: T,
}

impl<T> SeParams<T> {
    /// Build from a lookup by name suffix (`"reduce.weight"`, ...).
    pub fn try_from_fn(mut f: impl FnMut(&str) -> Result<T>) -> Result<Self> {
        Ok(SeParams {
            reduce_w: f("reduce.weight")?,
            reduce_b: f("reduce.bias")?,
            expand_w: f("expand.weight")?,
            expand_b: f("expand.bias")?,
        })
    }

    pub fn named(&self) -> [(&'static str, &T); 4] {
        [
            ("reduce.weight", &self.reduce_w),
            ("reduce.bias", &self.reduce_b),
            ("expand.weight", &self.expand_w),
            ("expand.bias", &self.expand_b),
        ]
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> SeParams<U> {
        SeParams {
            reduce_w: f("reduce.weight", &self.reduce_w),
            reduce_b: f("reduce.bias", &self.reduce_b),
            expand_w: f("expand.weight", &self.expand_w),
            expand_b: f("expand.bias", &self.expand_b),
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &T) -> Result<U>) -> Result<SeParams<U>> {
        Ok(SeParams {
            reduce_w: f("reduce.weight", &self.reduce_w)?,
            reduce_b: f("reduce.bias", &self.reduce_b)?,
            expand_w: f("expand.weight", &self.expand_w)?,
            expand_b: f("expand.bias", &self.expand_b)?,
        })
    }
}

impl<T> CbamParams<T> {
    /// Build from a lookup by name suffix (`"mlp.fc1.weight"`, ...).
    pub fn try_from_fn(mut f: impl FnMut(&str) -> Result<T>) -> Result<Self> {
        Ok(CbamParams {
            fc1_w: f("mlp.fc1.weight")?,
            fc1_b: f("mlp.fc1.bias")?,
            fc2_w: f("mlp.fc2.weight")?,
            fc2_b: f("mlp.fc2.bias")?,
            spatial_w: f("spatial.weight")?,
            spatial_b: f("spatial.bias")?,
        })
    }

    pub fn named(&self) -> [(&'static str, &T); 6] {
        [
            ("mlp.fc1.weight", &self.fc1_w),
            ("mlp.fc1.bias", &self.fc1_b),
            ("mlp.fc2.weight", &self.fc2_w),
            ("mlp.fc2.bias", &self.fc2_b),
            ("spatial.weight", &self.spatial_w),
            ("spatial.bias", &self.spatial_b),
        ]
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> CbamParams<U> {
        CbamParams {
            fc1_w: f("mlp.fc1.weight", &self.fc1_w),
            fc1_b: f("mlp.fc1.bias", &self.fc1_b),
            fc2_w: f("mlp.fc2.weight", &self.fc2_w),
            fc2_b: f("mlp.fc2.bias", &self.fc2_b),
            spatial_w: f("spatial.weight", &self.spatial_w),
            spatial_b: f("spatial.bias", &self.spatial_b),
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &T) -> Result<U>) -> Result<CbamParams<U>> {
        Ok(CbamParams {
            fc1_w: f("mlp.fc1.weight", &self.fc1_w)?,
            fc1_b: f("mlp.fc1.bias", &self.fc1_b)?,
            fc2_w: f("mlp.fc2.weight", &self.fc2_w)?,
            fc2_b: f("mlp.fc2.bias", &self.fc2_b)?,
            spatial_w: f("spatial.weight", &self.spatial_w)?,
            spatial_b: f("spatial.bias", &self.spatial_b)?,
        })
    }
}

impl SeParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Self {
        let h = hidden_width(channels, reduction);
        Self {
            reduce_w: glorot(vec![channels, h], channels, h, rng),
            reduce_b: Tensor::zeros(vec![h]),
            expand_w: glorot(vec![h, channels], h, channels, rng),
            expand_b: Tensor::zeros(vec![channels]),
        }
    }

    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let h = hidden_width(channels, reduction);
        Self {
            reduce_w: Tensor::zeros(vec![channels, h]),
            reduce_b: Tensor::zeros(vec![h]),
            expand_w: Tensor::zeros(vec![h, channels]),
            expand_b: Tensor::zeros(vec![channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.expand_b.numel()
    }

    /// Record every tensor on `g`, as leaves when `track` is set.
    pub fn register<T: Element>(&self, g: &mut Graph<T>, track: bool) -> SeParams<NodeId> {
        self.map(|_, t| if track { g.leaf(t.cast()) } else { g.constant(t.cast()) })
    }
}

impl CbamParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Self {
        let h = hidden_width(channels, reduction);
        let k2 = SPATIAL_KERNEL * SPATIAL_KERNEL;
        Self {
            fc1_w: glorot(vec![channels, h], channels, h, rng),
            fc1_b: Tensor::zeros(vec![h]),
            fc2_w: glorot(vec![h, channels], h, channels, rng),
            fc2_b: Tensor::zeros(vec![channels]),
            spatial_w: glorot(vec![1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL], 2 * k2, k2, rng),
            spatial_b: Tensor::zeros(vec![1]),
        }
    }

    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let h = hidden_width(channels, reduction);
        Self {
            fc1_w: Tensor::zeros(vec![channels, h]),
            fc1_b: Tensor::zeros(vec![h]),
            fc2_w: Tensor::zeros(vec![h, channels]),
            fc2_b: Tensor::zeros(vec![channels]),
            spatial_w: Tensor::zeros(vec![1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL]),
            spatial_b: Tensor::zeros(vec![1]),
        }
    }

    pub fn channels(&self) -> usize {
        self.fc2_b.numel()
    }

    /// Record every tensor on `g`, as leaves when `track` is set.
    pub fn register<T: Element>(&self, g: &mut Graph<T>, track: bool) -> CbamParams<NodeId> {
        self.map(|_, t| if track { g.leaf(t.cast()) } else { g.constant(t.cast()) })
    }
}

fn check_channels<T: Element>(op: &'static str, g: &Graph<T>, x: NodeId, expected: NodeId) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = g.value(x).dims4(op)?;
    // the last dense layer's bias has one entry per channel
    let want = g.value(expected).numel();
    if c != want {
        return Err(Error::dim(op, g.value(x).shape(), &[want]));
    }
    Ok((n, c, h, w))
}

/// `N×C×1×1` pooled map flattened to `N×C`.
fn pooled<T: Element>(g: &mut Graph<T>, x: NodeId, kind: Pool, n: usize, c: usize) -> Result<NodeId> {
    let p = g.pool(x, kind)?;
    g.reshape(p, &[n, c])
}

/// Two-layer MLP with a ReLU in between.
fn mlp<T: Element>(g: &mut Graph<T>, v: NodeId, w1: NodeId, b1: NodeId, w2: NodeId, b2: NodeId) -> Result<NodeId> {
    let h = g.dense(v, w1, b1)?;
    let h = g.relu(h);
    g.dense(h, w2, b2)
}

pub fn se_block_graph<T: Element>(g: &mut Graph<T>, x: NodeId, p: &SeParams<NodeId>) -> Result<NodeId> {
    let (n, c, _, _) = check_channels("se_block", g, x, p.expand_b)?;
    let v = pooled(g, x, Pool::GlobalAvg, n, c)?;
    let z = mlp(g, v, p.reduce_w, p.reduce_b, p.expand_w, p.expand_b)?;
    let s = g.sigmoid(z);
    let s = g.reshape(s, &[n, c, 1, 1])?;
    g.mul(x, s)
}

/// Channel weights `sigmoid(MLP(GAP(x)) + MLP(GMP(x)))`, shape `N×C`.
pub fn cbam_channel_graph<T: Element>(g: &mut Graph<T>, x: NodeId, p: &CbamParams<NodeId>) -> Result<NodeId> {
    let (n, c, _, _) = check_channels("cbam_channel", g, x, p.fc2_b)?;
    let avg = pooled(g, x, Pool::GlobalAvg, n, c)?;
    let max = pooled(g, x, Pool::GlobalMax, n, c)?;
    let a = mlp(g, avg, p.fc1_w, p.fc1_b, p.fc2_w, p.fc2_b)?;
    let m = mlp(g, max, p.fc1_w, p.fc1_b, p.fc2_w, p.fc2_b)?;
    let z = g.add(a, m)?;
    Ok(g.sigmoid(z))
}

/// Spatial map `sigmoid(conv7x7([mean_c(x), max_c(x)]))`, shape `N×1×H×W`.
pub fn cbam_spatial_graph<T: Element>(g: &mut Graph<T>, x: NodeId, p: &CbamParams<NodeId>) -> Result<NodeId> {
    g.value(x).dims4("cbam_spatial")?;
    let mean = g.channel_mean(x)?;
    let max = g.channel_max(x)?;
    let both = g.concat_channels(mean, max)?;
    let z = g.conv2d(both, p.spatial_w, p.spatial_b, 1, Padding::Same)?;
    Ok(g.sigmoid(z))
}

/// Channel attention, then spatial attention on the channel-refined map.
pub fn cbam_graph<T: Element>(g: &mut Graph<T>, x: NodeId, p: &CbamParams<NodeId>) -> Result<NodeId> {
    let (n, c, _, _) = check_channels("cbam", g, x, p.fc2_b)?;
    let cw = cbam_channel_graph(g, x, p)?;
    let cw = g.reshape(cw, &[n, c, 1, 1])?;
    let refined = g.mul(x, cw)?;
    let sw = cbam_spatial_graph(g, refined, p)?;
    g.mul(refined, sw)
}

pub fn se_block(x: &Tensor, p: &SeParams) -> Result<Tensor> {
    let mut g = Graph::<f32>::new();
    let xi = g.constant(x.clone());
    let ids = p.register(&mut g, false);
    let out = se_block_graph(&mut g, xi, &ids)?;
    Ok(g.value(out).clone())
}

fn run_cbam(
    x: &Tensor,
    p: &CbamParams,
    f: impl Fn(&mut Graph<f32>, NodeId, &CbamParams<NodeId>) -> Result<NodeId>,
) -> Result<Tensor> {
    let mut g = Graph::<f32>::new();
    let xi = g.constant(x.clone());
    let ids = p.register(&mut g, false);
    let out = f(&mut g, xi, &ids)?;
    Ok(g.value(out).clone())
}

pub fn cbam_channel(x: &Tensor, p: &CbamParams) -> Result<Tensor> {
    run_cbam(x, p, cbam_channel_graph)
}

pub fn cbam_spatial(x: &Tensor, p: &CbamParams) -> Result<Tensor> {
    run_cbam(x, p, cbam_spatial_graph)
}

pub fn cbam(x: &Tensor, p: &CbamParams) -> Result<Tensor> {
    run_cbam(x, p, cbam_graph)
}
