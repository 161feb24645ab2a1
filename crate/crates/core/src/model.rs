//! Small CNN backbones, an optional attention block, the classification head
//! `softmax(W2 · dropout(relu(W1 · GAP(F) + b1)) + b2)`, layer freezing and
//! soft-voting ensembles.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, CbamParams, SeParams, DEFAULT_REDUCTION};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::ops::{Padding, Pool};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Backbone {
    #[serde(rename = "tiny-a")]
    TinyA,
    #[serde(rename = "tiny-b")]
    TinyB,
    #[serde(rename = "tiny-c")]
    TinyC,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::TinyA, Backbone::TinyB, Backbone::TinyC];

    /// `(kernel, output channels)` of each conv block, in order.
    pub fn blocks(self) -> &'static [(usize, usize)] {
        match self {
            Backbone::TinyA => &[(3, 8), (3, 16), (3, 32)],
            Backbone::TinyB => &[(5, 12), (3, 24), (3, 32)],
            Backbone::TinyC => &[(3, 8), (3, 16), (3, 24), (3, 32)],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Backbone::TinyA => "tiny-a",
            Backbone::TinyB => "tiny-b",
            Backbone::TinyC => "tiny-c",
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Backbone::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown backbone {s:?} (expected tiny-a, tiny-b or tiny-c)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    None,
    Se,
    Cbam,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 3] = [AttentionKind::None, AttentionKind::Se, AttentionKind::Cbam];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::None => "none",
            AttentionKind::Se => "se",
            AttentionKind::Cbam => "cbam",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionKind::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention {s:?} (expected none, se or cbam)")))
    }
}

fn default_reduction() -> usize {
    DEFAULT_REDUCTION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: Backbone,
    pub attention: AttentionKind,
    pub classes: usize,
    pub hidden: usize,
    pub dropout: f32,
    /// `(C, H, W)` of one input image.
    pub input: [usize; 3],
    #[serde(default = "default_reduction")]
    pub reduction: usize,
}

impl ModelSpec {
    /// Head width 64, dropout 0.5, 3×32×32 input, reduction ratio 8.
    pub fn new(backbone: Backbone, attention: AttentionKind, classes: usize) -> Self {
        Self {
            backbone,
            attention,
            classes,
            hidden: 64,
            dropout: 0.5,
            input: [3, 32, 32],
            reduction: DEFAULT_REDUCTION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("head hidden width must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        if self.reduction == 0 {
            return Err(Error::Config("attention reduction ratio must be at least 1".into()));
        }
        let [c, h, w] = self.input;
        let step = 1usize << self.backbone.blocks().len();
        if c == 0 || h == 0 || w == 0 || h % step != 0 || w % step != 0 {
            return Err(Error::Config(format!(
                "{} needs input height and width divisible by {step}, got {c}x{h}x{w}",
                self.backbone
            )));
        }
        Ok(())
    }

    /// `(C, H, W)` of the trunk output, which is also the attention output.
    pub fn feature_shape(&self) -> [usize; 3] {
        let blocks = self.backbone.blocks();
        let step = 1usize << blocks.len();
        [blocks[blocks.len() - 1].1, self.input[1] / step, self.input[2] / step]
    }

    pub fn feature_channels(&self) -> usize {
        self.feature_shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
}

/// Named parameter tensors in a fixed order determined by the [`ModelSpec`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    entries: IndexMap<String, Param>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) {
        self.entries.insert(name.into(), Param { value, frozen });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Usage(format!("missing parameter {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn frozen_names(&self) -> Vec<&str> {
        self.iter().filter(|(_, p)| p.frozen).map(|(n, _)| n).collect()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Record every parameter on `g`, as leaves or constants per `mode`.
    pub fn register<T: Element>(&self, g: &mut Graph<T>, mode: Track) -> ParamIds {
        let ids = self
            .entries
            .iter()
            .map(|(name, p)| {
                let value = p.value.cast();
                let id = match mode {
                    Track::All => g.leaf(value),
                    Track::Trainable if !p.frozen => g.leaf(value),
                    _ => g.constant(value),
                };
                (name.clone(), id)
            })
            .collect();
        ParamIds(ids)
    }

    /// Bitwise equality of every tensor and flag.
    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, a), (nb, b))| na == nb && a.frozen == b.frozen && a.value.bit_eq(&b.value))
    }
}

/// Which parameters [`ModelParams::register`] makes differentiable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Track {
    /// Every parameter is a leaf.
    All,
    /// Unfrozen parameters are leaves, frozen ones constants.
    Trainable,
    /// Every parameter is a constant.
    None,
}

/// Graph handles of registered parameters, by name.
#[derive(Clone, Debug)]
pub struct ParamIds(IndexMap<String, NodeId>);

impl ParamIds {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl FromIterator<(String, NodeId)> for ParamIds {
    fn from_iter<I: IntoIterator<Item = (String, NodeId)>>(iter: I) -> Self {
        ParamIds(iter.into_iter().collect())
    }
}

fn conv_name(i: usize, what: &str) -> String {
    format!("backbone.conv{}.{what}", i + 1)
}

/// Fresh parameters for `spec`, initialised deterministically from `seed`.
/// Weights are Glorot-uniform, biases zero, nothing frozen.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();
    let mut cin = spec.input[0];
    for (i, &(k, cout)) in spec.backbone.blocks().iter().enumerate() {
        let w = attention::glorot(vec![cout, cin, k, k], cin * k * k, cout * k * k, &mut rng);
        params.insert(conv_name(i, "weight"), w, false);
        params.insert(conv_name(i, "bias"), Tensor::zeros(vec![cout]), false);
        cin = cout;
    }
    match spec.attention {
        AttentionKind::None => {}
        AttentionKind::Se => {
            let p = SeParams::init(cin, spec.reduction, &mut rng);
            for (suffix, t) in p.named() {
                params.insert(format!("attention.{suffix}"), t.clone(), false);
            }
        }
        AttentionKind::Cbam => {
            let p = CbamParams::init(cin, spec.reduction, &mut rng);
            for (suffix, t) in p.named() {
                params.insert(format!("attention.{suffix}"), t.clone(), false);
            }
        }
    }
    let (h, k) = (spec.hidden, spec.classes);
    params.insert("head.dense1.weight", attention::glorot(vec![cin, h], cin, h, &mut rng), false);
    params.insert("head.dense1.bias", Tensor::zeros(vec![h]), false);
    params.insert("head.dense2.weight", attention::glorot(vec![h, k], h, k, &mut rng), false);
    params.insert("head.dense2.bias", Tensor::zeros(vec![k]), false);
    Ok(params)
}

/// Names and shapes of every parameter `spec` implies, in [`build_model`]
/// order, without allocating any tensors.
pub fn param_shapes(spec: &ModelSpec) -> Result<Vec<(String, Vec<usize>)>> {
    spec.validate()?;
    let mut out = Vec::new();
    let mut cin = spec.input[0];
    for (i, &(k, cout)) in spec.backbone.blocks().iter().enumerate() {
        out.push((conv_name(i, "weight"), vec![cout, cin, k, k]));
        out.push((conv_name(i, "bias"), vec![cout]));
        cin = cout;
    }
    let r = attention::hidden_width(cin, spec.reduction);
    let attn: Vec<(&str, Vec<usize>)> = match spec.attention {
        AttentionKind::None => vec![],
        AttentionKind::Se => vec![
            ("reduce.weight", vec![cin, r]),
            ("reduce.bias", vec![r]),
            ("expand.weight", vec![r, cin]),
            ("expand.bias", vec![cin]),
        ],
        AttentionKind::Cbam => {
            let k = attention::SPATIAL_KERNEL;
            vec![
                ("mlp.fc1.weight", vec![cin, r]),
                ("mlp.fc1.bias", vec![r]),
                ("mlp.fc2.weight", vec![r, cin]),
                ("mlp.fc2.bias", vec![cin]),
                ("spatial.weight", vec![1, 2, k, k]),
                ("spatial.bias", vec![1]),
            ]
        }
    };
    out.extend(attn.into_iter().map(|(s, shape)| (format!("attention.{s}"), shape)));
    let (h, k) = (spec.hidden, spec.classes);
    out.push(("head.dense1.weight".into(), vec![cin, h]));
    out.push(("head.dense1.bias".into(), vec![h]));
    out.push(("head.dense2.weight".into(), vec![h, k]));
    out.push(("head.dense2.bias".into(), vec![k]));
    Ok(out)
}

/// Check that `params` has exactly the names and shapes `spec` implies.
pub fn check_params(spec: &ModelSpec, params: &ModelParams) -> Result<()> {
    let reference = param_shapes(spec)?;
    if reference.len() != params.len() {
        return Err(Error::Usage(format!(
            "expected {} parameters for {} + {}, got {}",
            reference.len(),
            spec.backbone,
            spec.attention,
            params.len()
        )));
    }
    for ((want, shape), (got, p)) in reference.iter().zip(params.iter()) {
        if want != got {
            return Err(Error::Usage(format!("expected parameter {want:?}, got {got:?}")));
        }
        if shape != p.value.shape() {
            return Err(Error::dim("parameter shape", shape, p.value.shape()));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezePolicy {
    /// Freeze every backbone parameter except the last conv block.
    PaperDefault,
    None,
    /// Freeze the whole backbone; attention and head stay trainable.
    All,
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-default" => Ok(FreezePolicy::PaperDefault),
            "none" => Ok(FreezePolicy::None),
            "all" => Ok(FreezePolicy::All),
            _ => Err(Error::Config(format!(
                "unknown freeze policy {s:?} (expected paper-default, none or all)"
            ))),
        }
    }
}

/// Reset every frozen flag according to `policy`; values are untouched.
pub fn apply_freeze(params: &ModelParams, policy: FreezePolicy) -> ModelParams {
    let last_conv = params
        .names()
        .filter_map(|n| n.strip_prefix("backbone.conv"))
        .filter_map(|rest| rest.split('.').next()?.parse::<usize>().ok())
        .max();
    let mut out = params.clone();
    for (name, p) in out.iter_mut() {
        let block = name
            .strip_prefix("backbone.conv")
            .and_then(|rest| rest.split('.').next()?.parse::<usize>().ok());
        p.frozen = match (policy, block) {
            (FreezePolicy::None, _) | (_, None) => false,
            (FreezePolicy::All, Some(_)) => true,
            (FreezePolicy::PaperDefault, Some(b)) => Some(b) != last_conv,
        };
    }
    out
}

/// Graph handles produced by [`forward_graph`].
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub logits: NodeId,
    pub probabilities: NodeId,
    /// Post-attention trunk output, the last spatial map before pooling.
    pub features: NodeId,
    /// Named intermediate outputs in evaluation order: `backbone.block1`,
    /// ..., `features`, `head.pooled`, `head.hidden`.
    pub layers: Vec<(String, NodeId)>,
}

impl ForwardNodes {
    pub fn layer(&self, name: &str) -> Option<NodeId> {
        self.layers.iter().find(|(n, _)| n == name).map(|&(_, id)| id)
    }
}

/// Name of the default Grad-CAM target layer.
pub const FEATURES: &str = "features";

/// Names of the spatial (rank-4) layers `forward_graph` records for `spec`.
pub fn spatial_layers(spec: &ModelSpec) -> Vec<String> {
    let mut names: Vec<String> = (1..=spec.backbone.blocks().len())
        .map(|i| format!("backbone.block{i}"))
        .collect();
    names.push(FEATURES.to_string());
    names
}

/// Builds the forward pass, optionally cutting the tape at one named layer:
/// that layer's value is re-recorded as a fresh leaf and everything after it
/// reads from the leaf, so gradients with respect to it are available even
/// when nothing before it is tracked.
struct Builder<'a, T: Element> {
    g: &'a mut Graph<T>,
    cut_at: Option<&'a str>,
    layers: Vec<(String, NodeId)>,
}

impl<T: Element> Builder<'_, T> {
    fn record(&mut self, name: String, id: NodeId) -> NodeId {
        let id = if self.cut_at == Some(name.as_str()) {
            let v = self.g.value(id).clone();
            self.g.leaf(v)
        } else {
            id
        };
        self.layers.push((name, id));
        id
    }
}

/// Trunk → attention → GAP → dense+ReLU → dropout → dense → softmax.
/// `cut_at` names a layer from [`spatial_layers`] to re-root as a leaf.
pub fn forward_graph<T: Element, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    ids: &ParamIds,
    x: NodeId,
    training: bool,
    rng: &mut R,
    cut_at: Option<&str>,
) -> Result<ForwardNodes> {
    let (n, c, h, w) = g.value(x).dims4("forward")?;
    if [c, h, w] != spec.input {
        return Err(Error::dim("forward", &[n, c, h, w], &[n, spec.input[0], spec.input[1], spec.input[2]]));
    }
    if let Some(name) = cut_at {
        if !spatial_layers(spec).iter().any(|l| l == name) {
            return Err(Error::Usage(format!(
                "unknown target layer {name:?}; expected one of {:?}",
                spatial_layers(spec)
            )));
        }
    }
    let mut b = Builder {
        g,
        cut_at,
        layers: Vec::new(),
    };
    let mut h_id = x;
    for i in 0..spec.backbone.blocks().len() {
        let conv = b
            .g
            .conv2d(h_id, ids.get(&conv_name(i, "weight"))?, ids.get(&conv_name(i, "bias"))?, 1, Padding::Same)?;
        let act = b.g.relu(conv);
        let pooled = b.g.pool(act, Pool::Max2x2)?;
        h_id = b.record(format!("backbone.block{}", i + 1), pooled);
    }
    let attended = match spec.attention {
        AttentionKind::None => h_id,
        AttentionKind::Se => {
            let p = SeParams::try_from_fn(|s| ids.get(&format!("attention.{s}")))?;
            attention::se_block_graph(b.g, h_id, &p)?
        }
        AttentionKind::Cbam => {
            let p = CbamParams::try_from_fn(|s| ids.get(&format!("attention.{s}")))?;
            attention::cbam_graph(b.g, h_id, &p)?
        }
    };
    let features = b.record(FEATURES.to_string(), attended);

    let head = head_graph(b.g, spec, ids, features, training, rng)?;
    b.layers.push(("head.pooled".into(), head.pooled));
    b.layers.push(("head.hidden".into(), head.hidden));
    Ok(ForwardNodes {
        logits: head.logits,
        probabilities: head.probabilities,
        features,
        layers: b.layers,
    })
}

/// Graph handles produced by [`head_graph`].
#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    pub pooled: NodeId,
    pub hidden: NodeId,
    pub logits: NodeId,
    pub probabilities: NodeId,
}

/// GAP → dense+ReLU → dropout → dense → softmax on an `N×C×H×W` feature map.
pub fn head_graph<T: Element, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    ids: &ParamIds,
    features: NodeId,
    training: bool,
    rng: &mut R,
) -> Result<HeadNodes> {
    let (n, c, _, _) = g.value(features).dims4("head")?;
    if c != spec.feature_channels() {
        return Err(Error::dim("head", &[c], &[spec.feature_channels()]));
    }
    let gap = g.pool(features, Pool::GlobalAvg)?;
    let pooled = g.reshape(gap, &[n, c])?;
    let d1 = g.dense(pooled, ids.get("head.dense1.weight")?, ids.get("head.dense1.bias")?)?;
    let hidden = g.relu(d1);
    let dropped = g.dropout(hidden, spec.dropout, training, rng)?;
    let logits = g.dense(dropped, ids.get("head.dense2.weight")?, ids.get("head.dense2.bias")?)?;
    let probabilities = g.softmax(logits)?;
    Ok(HeadNodes {
        pooled,
        hidden,
        logits,
        probabilities,
    })
}

/// Values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Tensor,
    pub probabilities: Tensor,
    pub features: Tensor,
    pub layers: Vec<(String, Tensor)>,
}

pub fn forward<R: Rng + ?Sized>(
    params: &ModelParams,
    spec: &ModelSpec,
    x: &Tensor,
    training: bool,
    rng: &mut R,
) -> Result<ForwardTrace> {
    let mut g = Graph::<f32>::new();
    let ids = params.register(&mut g, Track::None);
    let xi = g.constant(x.clone());
    let nodes = forward_graph(&mut g, spec, &ids, xi, training, rng, None)?;
    Ok(ForwardTrace {
        logits: g.value(nodes.logits).clone(),
        probabilities: g.value(nodes.probabilities).clone(),
        features: g.value(nodes.features).clone(),
        layers: nodes
            .layers
            .iter()
            .map(|(n, id)| (n.clone(), g.value(*id).clone()))
            .collect(),
    })
}

/// Inference-mode class probabilities, `N×K`.
pub fn predict_proba(params: &ModelParams, spec: &ModelSpec, x: &Tensor) -> Result<Tensor> {
    // dropout is the identity at inference, so the stream is never drawn from
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    forward(params, spec, x, false, &mut rng).map(|t| t.probabilities)
}

/// Row sums may drift this far from 1 before a member is rejected.
const ROW_SUM_TOL: f64 = 1e-5;

/// Weighted mean of member probability tables (uniform without weights).
/// Sums run in `f64` in member order and are rounded to `f32` once, so one
/// member, or several identical members, come back unchanged. Rows are not
/// rescaled to sum to exactly 1: members are `f32` softmax rows that already
/// miss 1 by a few ulps, and rescaling would move them.
pub fn soft_vote(members: &[Tensor], weights: Option<&[f32]>) -> Result<Tensor> {
    let first = members
        .first()
        .ok_or_else(|| Error::Usage("soft_vote needs at least one member".into()))?;
    let (rows, k) = first.dims2("soft_vote")?;
    for m in members {
        if m.shape() != first.shape() {
            return Err(Error::dim("soft_vote", first.shape(), m.shape()));
        }
        for (r, row) in m.data().chunks_exact(k).enumerate() {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|v| v.is_nan() || *v < 0.0) {
                return Err(Error::Usage(format!("soft_vote: row {r} is not a probability vector (sum {s})")));
            }
        }
    }
    let weights: Vec<f64> = match weights {
        None => vec![1.0; members.len()],
        Some(w) => {
            if w.len() != members.len() {
                return Err(Error::Usage(format!(
                    "soft_vote: {} weights for {} members",
                    w.len(),
                    members.len()
                )));
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Usage("soft_vote: weights must be finite and nonnegative".into()));
            }
            w.iter().map(|&v| v as f64).collect()
        }
    };
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Usage("soft_vote: weights sum to zero".into()));
    }
    let mut acc = vec![0.0f64; rows * k];
    for (m, &wt) in members.iter().zip(&weights) {
        for (a, &v) in acc.iter_mut().zip(m.data()) {
            *a += wt * v as f64;
        }
    }
    let out = acc.iter().map(|&v| (v / total) as f32).collect();
    Tensor::new(vec![rows, k], out)
}

/// Per-row argmax; ties go to the lowest class index.
pub fn predict(probabilities: &Tensor) -> Result<Vec<usize>> {
    let (_, k) = probabilities.dims2("predict")?;
    Ok(probabilities
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_a_trunk_shape() {
        let spec = ModelSpec::new(Backbone::TinyA, AttentionKind::None, 7);
        assert_eq!(spec.feature_shape(), [32, 4, 4]);
        let params = build_model(&spec, 1).unwrap();
        let x = Tensor::<f32>::zeros(vec![2, 3, 32, 32]);
        let t = forward(&params, &spec, &x, false, &mut rand::rng()).unwrap();
        assert_eq!(t.features.shape(), &[2, 32, 4, 4]);
        assert_eq!(t.logits.shape(), &[2, 7]);
    }

    #[test]
    fn tiny_c_needs_sixteen_divisible_input() {
        let mut spec = ModelSpec::new(Backbone::TinyC, AttentionKind::None, 3);
        spec.input = [3, 24, 24];
        assert!(matches!(build_model(&spec, 0), Err(Error::Config(_))));
        spec.input = [3, 32, 32];
        assert_eq!(spec.feature_shape(), [32, 2, 2]);
    }

    #[test]
    fn param_shapes_match_built_models() {
        for b in Backbone::ALL {
            for a in [AttentionKind::None, AttentionKind::Se, AttentionKind::Cbam] {
                let spec = ModelSpec::new(b, a, 5);
                let built = build_model(&spec, 0).unwrap();
                let shapes = param_shapes(&spec).unwrap();
                assert_eq!(shapes.len(), built.len());
                for ((n, s), (bn, bp)) in shapes.iter().zip(built.iter()) {
                    assert_eq!((n.as_str(), s.as_slice()), (bn, bp.value.shape()));
                }
            }
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = ModelSpec::new(Backbone::TinyA, AttentionKind::Se, 1);
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        spec.classes = 2;
        spec.dropout = 1.0;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        assert!(matches!("tiny-z".parse::<Backbone>(), Err(Error::Config(_))));
    }

    #[test]
    fn freeze_by_prefix() {
        let spec = ModelSpec::new(Backbone::TinyA, AttentionKind::Cbam, 7);
        let params = build_model(&spec, 3).unwrap();
        let frozen = apply_freeze(&params, FreezePolicy::PaperDefault);
        assert_eq!(
            frozen.frozen_names(),
            vec!["backbone.conv1.weight", "backbone.conv1.bias", "backbone.conv2.weight", "backbone.conv2.bias"]
        );
        assert!(apply_freeze(&frozen, FreezePolicy::None).frozen_names().is_empty());
        assert_eq!(apply_freeze(&params, FreezePolicy::All).frozen_names().len(), 6);
    }

    #[test]
    fn predict_ties_go_low() {
        let p = Tensor::new(vec![2, 3], vec![0.1, 0.7, 0.2, 0.4, 0.2, 0.4]).unwrap();
        assert_eq!(predict(&p).unwrap(), vec![1, 0]);
    }

    #[test]
    fn soft_vote_errors() {
        assert!(matches!(soft_vote(&[], None), Err(Error::Usage(_))));
        let a = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        assert!(soft_vote(&[a.clone(), b], None).is_err());
        assert!(matches!(soft_vote(&[a], Some(&[0.0])), Err(Error::Usage(_))));
        let bad = Tensor::new(vec![1, 2], vec![0.7, 0.7]).unwrap();
        assert!(matches!(soft_vote(&[bad], None), Err(Error::Usage(_))));
    }
}
