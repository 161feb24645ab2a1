//! Adam, the step-decay schedule, FGSM, early stopping and the epoch loop.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, PROB_FLOOR};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{check_params, forward_graph, predict, predict_proba, ModelParams, ModelSpec, ParamIds, Track};
use crate::numfmt::sig;
use crate::tensor::Tensor;

/// Gradients keyed by parameter name.
pub type NamedGrads = IndexMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    /// Added to `√v` before dividing, after the bias correction has been
    /// folded into the step size.
    pub epsilon_hat: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon_hat: 1e-7,
        }
    }
}

/// Moment estimates for unfrozen parameters, created lazily on first update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
    pub t: u64,
}

/// One bias-corrected Adam step over every unfrozen parameter:
/// `θ -= lr·√(1-β2ᵗ)/(1-β1ᵗ) · m / (√v + ε̂)`. A parameter without a gradient
/// entry sees a zero gradient. Moment arithmetic runs in `f64`.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &NamedGrads,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Internal(format!("gradient for unknown parameter {name:?}")))?;
        if p.value.shape() != g.shape() {
            return Err(Error::Internal(format!(
                "gradient shape {:?} does not match parameter {name:?} shape {:?}",
                g.shape(),
                p.value.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let step = lr * (1.0 - cfg.beta2.powi(t)).sqrt() / (1.0 - cfg.beta1.powi(t));
    for (name, p) in params.iter_mut() {
        if p.frozen {
            continue;
        }
        let shape = p.value.shape().to_vec();
        let m = state.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(shape.clone()));
        let v = state.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(shape.clone()));
        let g = grads.get(name).map(Tensor::data);
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, theta) in p.value.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i] as f64);
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            *theta = (*theta as f64 - step * mi / (vi.sqrt() + cfg.epsilon_hat)) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Adversarial {
    Off,
    /// Each batch also trains on `clip(x + ε·sign(∇ₓL), 0, 1)`; the loss is
    /// `(1 - mix)·L_clean + mix·L_adv`.
    Fgsm { epsilon: f32, mix: f32 },
}

impl Adversarial {
    pub const DEFAULT_EPSILON: f32 = 0.01;
    pub const DEFAULT_MIX: f32 = 0.5;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    pub adversarial: Adversarial,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            decay: 0.1,
            decay_every: 5,
            batch: 32,
            epochs: 50,
            patience: 10,
            adam: AdamConfig::default(),
            adversarial: Adversarial::Off,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("lr decay {} must be in (0, 1]", self.decay));
        }
        if self.decay_every == 0 || self.batch == 0 || self.epochs == 0 {
            return bad("decay interval, batch size and epoch count must be positive".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.epsilon_hat.is_nan() || a.epsilon_hat <= 0.0 {
            return bad(format!("invalid Adam settings {a:?}"));
        }
        if let Adversarial::Fgsm { epsilon, mix } = self.adversarial {
            if !(epsilon.is_finite() && epsilon >= 0.0) {
                return bad(format!("FGSM epsilon {epsilon} must be nonnegative"));
            }
            if !(0.0..=1.0).contains(&mix) {
                return bad(format!("adversarial mix {mix} must be in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// `lr · decay^⌊epoch / decay_every⌋` for a 0-based epoch, rounded to 12
/// significant digits so decimal settings give decimal rates (`0.1²` is not
/// exactly `0.01` in binary).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = (epoch / cfg.decay_every.max(1)) as i32;
    let lr = cfg.lr * cfg.decay.powi(k);
    format!("{lr:.11e}").parse().unwrap_or(lr)
}

/// `clip(x + ε·sign(g), 0, 1)` with `sign(0) = 0`, never more than `ε` from `x`.
pub fn fgsm_perturb(x: &Tensor, grad_x: &Tensor, epsilon: f32) -> Result<Tensor> {
    if x.shape() != grad_x.shape() {
        return Err(Error::dim("fgsm", x.shape(), grad_x.shape()));
    }
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::Config(format!("FGSM epsilon {epsilon} must be nonnegative")));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_x.data())
        .map(|(&v, &g)| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            let mut y = (v + epsilon * s).clamp(0.0, 1.0);
            // `v + ε` can round one ulp past the budget
            while (y - v).abs() > epsilon {
                y = if y > v { y.next_down() } else { y.next_up() };
            }
            y
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// One row per completed epoch; `epoch` counts from 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<EpochRow>,
    /// 1-based epoch with the lowest validation loss (earliest on ties).
    pub best_epoch: usize,
}

impl TrainHistory {
    /// `epoch,lr,train_loss,train_acc,val_loss,val_acc`, six significant digits.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Internal(format!("history CSV: {e}"));
        w.write_record(["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc"])
            .map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                sig(r.lr, 6),
                sig(r.train_loss, 6),
                sig(r.train_acc, 6),
                sig(r.val_loss, 6),
                sig(r.val_acc, 6),
            ])
            .map_err(err)?;
        }
        w.into_inner().map_err(|e| Error::Internal(format!("history CSV: {e}")))
    }
}

/// Metrics of one epoch as reported by an [`EpochRunner`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// What [`fit_loop`] drives.
pub trait EpochRunner {
    /// Train one epoch (0-based) at `lr` and report its metrics.
    fn run_epoch(&mut self, epoch: usize, lr: f64) -> Result<EpochMetrics>;
    /// Called right after an epoch sets a new best validation loss.
    fn mark_best(&mut self, epoch: usize);
}

/// Runs up to `cfg.epochs` epochs, stopping once validation loss has failed
/// to improve strictly for `cfg.patience` consecutive epochs.
pub fn fit_loop(cfg: &TrainConfig, runner: &mut impl EpochRunner) -> Result<TrainHistory> {
    let mut history = TrainHistory::default();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let m = runner.run_epoch(epoch, lr)?;
        history.rows.push(EpochRow {
            epoch: epoch + 1,
            lr,
            train_loss: m.train_loss,
            train_acc: m.train_acc,
            val_loss: m.val_loss,
            val_acc: m.val_acc,
        });
        log::info!(
            "epoch {:>3} lr {} loss {} acc {} val_loss {} val_acc {}",
            epoch + 1,
            sig(lr, 3),
            sig(m.train_loss, 4),
            sig(m.train_acc, 4),
            sig(m.val_loss, 4),
            sig(m.val_acc, 4)
        );
        if m.val_loss < best {
            best = m.val_loss;
            history.best_epoch = epoch + 1;
            stale = 0;
            runner.mark_best(epoch + 1);
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("no val_loss improvement for {stale} epochs, stopping");
                break;
            }
        }
    }
    if history.best_epoch == 0 {
        return Err(Error::Numeric("validation loss was never finite".into()));
    }
    Ok(history)
}

/// Stacks samples into an `N×C×H×W` batch plus labels.
pub fn batch_of(samples: &[&Sample]) -> Result<(Tensor, Vec<usize>)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    Ok((Tensor::stack(&images)?, samples.iter().map(|s| s.label).collect()))
}

/// Gradients of the loss on one batch.
pub struct BatchGrads {
    pub loss: f64,
    pub probabilities: Tensor,
    pub params: NamedGrads,
    pub input: Tensor,
}

fn trainable_grads(params: &ModelParams, ids: &ParamIds, grads: &crate::GradientMap) -> NamedGrads {
    ids.iter()
        .filter(|(name, _)| params.get(name).is_some_and(|p| !p.frozen))
        .filter_map(|(name, id)| grads.get(id).map(|g| (name.to_string(), g.clone())))
        .collect()
}

/// Training-mode forward and backward on one batch, with gradients for the
/// unfrozen parameters and the input.
pub fn batch_gradients<R: Rng + ?Sized>(
    params: &ModelParams,
    spec: &ModelSpec,
    x: &Tensor,
    labels: &[usize],
    training: bool,
    rng: &mut R,
) -> Result<BatchGrads> {
    let mut g = Graph::<f32>::new();
    let ids = params.register(&mut g, Track::Trainable);
    let xi = g.leaf(x.clone());
    let nodes = forward_graph(&mut g, spec, &ids, xi, training, rng, None)?;
    let loss = g.sparse_cross_entropy(nodes.probabilities, labels)?;
    let grads = g.backward(loss)?;
    Ok(BatchGrads {
        loss: g.value(loss).data()[0] as f64,
        probabilities: g.value(nodes.probabilities).clone(),
        params: trainable_grads(params, &ids, &grads),
        input: grads
            .get(xi)
            .cloned()
            .ok_or_else(|| Error::Internal("no gradient reached the input".into()))?,
    })
}

fn blend(clean: NamedGrads, adv: &NamedGrads, mix: f32) -> NamedGrads {
    clean
        .into_iter()
        .map(|(name, c)| {
            let a = adv.get(&name);
            let data = c
                .data()
                .iter()
                .enumerate()
                .map(|(i, &cv)| (1.0 - mix) * cv + mix * a.map_or(0.0, |a| a.data()[i]))
                .collect();
            (name, Tensor::new(c.shape().to_vec(), data).expect("same shape"))
        })
        .collect()
}

/// Inference-mode evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean clamped cross-entropy.
    pub loss: f64,
    pub accuracy: f64,
    /// `N×K`, rows in sample order.
    pub probabilities: Tensor,
}

/// Per-sample `-ln(max(p[label], 1e-7))`.
pub fn per_sample_loss(probabilities: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let (n, k) = probabilities.dims2("per_sample_loss")?;
    if labels.len() != n {
        return Err(Error::dim("per_sample_loss", probabilities.shape(), &[labels.len()]));
    }
    labels
        .iter()
        .enumerate()
        .map(|(r, &l)| {
            if l >= k {
                return Err(Error::Data(format!("label {l} out of range for {k} classes")));
            }
            Ok(-(probabilities.data()[r * k + l].max(PROB_FLOOR) as f64).ln())
        })
        .collect()
}

pub fn evaluate(params: &ModelParams, spec: &ModelSpec, samples: &[Sample], batch: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty set".into()));
    }
    let mut rows = Vec::with_capacity(samples.len() * spec.classes);
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, _) = batch_of(&refs)?;
        rows.extend_from_slice(predict_proba(params, spec, &x)?.data());
    }
    let probabilities = Tensor::new(vec![samples.len(), spec.classes], rows)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let losses = per_sample_loss(&probabilities, &labels)?;
    let pred = predict(&probabilities)?;
    let correct = pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(Evaluation {
        loss: losses.iter().sum::<f64>() / samples.len() as f64,
        accuracy: correct as f64 / samples.len() as f64,
        probabilities,
    })
}

struct Trainer<'a> {
    spec: &'a ModelSpec,
    cfg: &'a TrainConfig,
    train: &'a [Sample],
    val: &'a [Sample],
    params: ModelParams,
    best: ModelParams,
    adam: AdamState,
    rng: ChaCha8Rng,
    order: Vec<usize>,
}

impl EpochRunner for Trainer<'_> {
    fn run_epoch(&mut self, _epoch: usize, lr: f64) -> Result<EpochMetrics> {
        self.order.shuffle(&mut self.rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in self.order.chunks(self.cfg.batch) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &self.train[i]).collect();
            let (x, labels) = batch_of(&refs)?;
            let clean = batch_gradients(&self.params, self.spec, &x, &labels, true, &mut self.rng)?;
            let pred = predict(&clean.probabilities)?;
            correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
            let (loss, grads) = match self.cfg.adversarial {
                Adversarial::Off => (clean.loss, clean.params),
                Adversarial::Fgsm { epsilon, mix } => {
                    let x_adv = fgsm_perturb(&x, &clean.input, epsilon)?;
                    let adv = batch_gradients(&self.params, self.spec, &x_adv, &labels, true, &mut self.rng)?;
                    let m = mix as f64;
                    ((1.0 - m) * clean.loss + m * adv.loss, blend(clean.params, &adv.params, mix))
                }
            };
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("training loss became {loss}")));
            }
            loss_sum += loss * chunk.len() as f64;
            adam_step(&mut self.params, &grads, &mut self.adam, lr, &self.cfg.adam)?;
        }
        let n = self.train.len() as f64;
        let val = evaluate(&self.params, self.spec, self.val, self.cfg.batch)?;
        Ok(EpochMetrics {
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss: val.loss,
            val_acc: val.accuracy,
        })
    }

    fn mark_best(&mut self, _epoch: usize) {
        self.best = self.params.clone();
    }
}

/// Trains from `params` and returns the parameters of the best epoch. The
/// shuffle order and dropout masks come from one stream seeded by `cfg.seed`.
/// Train accuracy and loss in the history are running means over the
/// epoch's training-mode batches.
pub fn train(
    spec: &ModelSpec,
    params: ModelParams,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    check_params(spec, &params)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Usage(format!(
            "training needs nonempty splits (train {}, val {})",
            train.len(),
            val.len()
        )));
    }
    for s in train.iter().chain(val) {
        if s.label >= spec.classes {
            return Err(Error::Data(format!("{}: label {} out of range", s.source, s.label)));
        }
    }
    let mut t = Trainer {
        spec,
        cfg,
        train,
        val,
        best: params.clone(),
        params,
        adam: AdamState::default(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        order: (0..train.len()).collect(),
    };
    let history = fit_loop(cfg, &mut t)?;
    Ok((t.best, history))
}
