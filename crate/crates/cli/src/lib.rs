//! The `leafcam` command line: synthetic data, training, evaluation and Grad-CAM.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use leafcam_core::data::{load_dataset, split, synth_dataset, write_synth, SplitRatios, DEFAULT_SIZE};
use leafcam_core::explain::{explain, ClassChoice, DEFAULT_ALPHA};
use leafcam_core::fsutil::write_atomic;
use leafcam_core::image::{encode_ppm, preprocess};
use leafcam_core::metrics::{build_report, emit_report};
use leafcam_core::model::{apply_freeze, build_model, predict, soft_vote, FEATURES};
use leafcam_core::train::{evaluate, train, Adversarial};
use leafcam_core::{
    load_checkpoint, save_checkpoint, AttentionKind, Backbone, Checkpoint, Dataset, Error, FreezePolicy, ModelSpec,
    Result, Split, SynthSpec, Tensor, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "leafcam", version, about = "Attention CNN leaf-disease classifiers with Grad-CAM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic image tree with known blob boxes.
    Synth(SynthArgs),
    /// Train one model and write its checkpoint.
    Train(TrainArgs),
    /// Evaluate one model or a soft-voting ensemble on a split.
    Eval(EvalArgs),
    /// Render a Grad-CAM heatmap and overlay for one image.
    Gradcam(GradcamArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub per_class: usize,
    #[arg(long, default_value_t = DEFAULT_SIZE)]
    pub size: usize,
    #[arg(long)]
    pub seed: u64,
    /// Per-channel noise half-width in 0..=255 units.
    #[arg(long, default_value_t = 24.0)]
    pub noise: f32,
    /// Write into an existing non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub arch: Backbone,
    #[arg(long)]
    pub attention: AttentionKind,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Learning-rate multiplier applied every `--decay-every` epochs.
    #[arg(long, default_value_t = 0.1)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 5)]
    pub decay_every: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    /// Augment every batch with FGSM examples.
    #[arg(long)]
    pub adv_train: bool,
    #[arg(long, requires = "adv_train", default_value_t = Adversarial::DEFAULT_EPSILON)]
    pub epsilon: f32,
    #[arg(long, requires = "adv_train", default_value_t = Adversarial::DEFAULT_MIX)]
    pub adv_mix: f32,
    /// none, paper-default (train only the last conv and everything after it) or all.
    #[arg(long, default_value = "none")]
    pub freeze: FreezePolicy,
    /// Square input size the images are resized to.
    #[arg(long, default_value_t = DEFAULT_SIZE)]
    pub size: usize,
    #[arg(long)]
    pub seed: u64,
    /// Seed of the train/val/test split; defaults to `--seed`.
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint; repeat for a soft-voting ensemble.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    /// One nonnegative weight per model.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f32>>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub report: PathBuf,
    /// Seed of the split; must match the one used for training.
    #[arg(long)]
    pub seed: u64,
    /// CSV of every member's probabilities: `member,file,label,<classes>`.
    #[arg(long)]
    pub dump_probs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// `auto` for the predicted class, or a class index.
    #[arg(long, default_value = "auto")]
    pub class: ClassChoice,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f32,
    /// Spatial layer to explain.
    #[arg(long, default_value = FEATURES)]
    pub layer: String,
    /// Writes `<out>.heatmap.ppm` and `<out>.overlay.ppm`.
    #[arg(long)]
    pub out: PathBuf,
}

/// 1 for usage and configuration errors, 2 for data, I/O and checkpoint errors.
pub fn exit_code(e: &Error) -> u8 {
    if e.is_usage() {
        1
    } else {
        2
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => run_synth(&a),
        Command::Train(a) => run_train(&a),
        Command::Eval(a) => run_eval(&a),
        Command::Gradcam(a) => run_gradcam(&a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn run_synth(a: &SynthArgs) -> Result<()> {
    let mut spec = SynthSpec::new(a.classes, a.per_class, a.size, a.seed);
    spec.noise = a.noise;
    let synth = synth_dataset(&spec)?;
    if a.out.exists() {
        let mut entries = std::fs::read_dir(&a.out).map_err(io_err(&a.out))?;
        if entries.next().is_some() && !a.force {
            return Err(Error::Usage(format!(
                "{} exists and is not empty; pass --force to write into it",
                a.out.display()
            )));
        }
    }
    std::fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    write_synth(&synth, &a.out)?;
    for (name, n) in synth.dataset.class_names.iter().zip(synth.dataset.class_counts()) {
        println!("{name} {n}");
    }
    println!("{} images written to {}", synth.dataset.len(), a.out.display());
    Ok(())
}

fn split_sets(ds: &Dataset, seed: u64) -> Result<[Dataset; 3]> {
    let parts = split(ds, SplitRatios::default(), seed)?;
    Ok([Split::Train, Split::Val, Split::Test].map(|t| ds.subset(&parts.indices(t))))
}

pub fn run_train(a: &TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        lr: a.lr,
        decay: a.lr_decay,
        decay_every: a.decay_every,
        batch: a.batch,
        epochs: a.epochs,
        patience: a.patience,
        adversarial: if a.adv_train {
            Adversarial::Fgsm {
                epsilon: a.epsilon,
                mix: a.adv_mix,
            }
        } else {
            Adversarial::Off
        },
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let ds = load_dataset(&a.data, a.size)?;
    let mut spec = ModelSpec::new(a.arch, a.attention, ds.class_names.len());
    spec.input = [3, a.size, a.size];
    spec.validate()?;
    let [tr, va, _] = split_sets(&ds, a.split_seed.unwrap_or(a.seed))?;
    log::info!(
        "{} images in {} classes; train {}, val {}",
        ds.len(),
        ds.class_names.len(),
        tr.len(),
        va.len()
    );
    let init = apply_freeze(&build_model(&spec, a.seed)?, a.freeze);
    let (best, history) = train(&spec, init, &tr.samples, &va.samples, &cfg)?;
    for r in &history.rows {
        log::info!(
            "epoch {:>3} lr {:.1e} train_loss {:.4} train_acc {:.4} val_loss {:.4} val_acc {:.4}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.train_acc,
            r.val_loss,
            r.val_acc
        );
    }
    save_checkpoint(&best, &spec, &ds.class_names, &a.out)?;
    if let Some(path) = &a.history {
        write_atomic(path, &history.to_csv()?)?;
    }
    let best_row = history.rows[history.best_epoch - 1];
    println!(
        "best epoch {} of {}: val_loss {:.4} val_acc {:.4}; wrote {}",
        history.best_epoch,
        history.rows.len(),
        best_row.val_loss,
        best_row.val_acc,
        a.out.display()
    );
    Ok(())
}

fn model_label(spec: &ModelSpec) -> String {
    format!("{}+{}", spec.backbone, spec.attention)
}

/// Checkpoints that agree on class table and input size.
fn load_members(paths: &[PathBuf]) -> Result<Vec<Checkpoint>> {
    let members = paths.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
    let first = &members[0];
    for (m, p) in members.iter().zip(paths).skip(1) {
        if m.class_names != first.class_names {
            return Err(Error::Usage(format!(
                "{} has class table {:?}, but {} has {:?}",
                p.display(),
                m.class_names,
                paths[0].display(),
                first.class_names
            )));
        }
        if m.spec.input != first.spec.input {
            return Err(Error::Usage(format!(
                "{} expects input {:?}, but {} expects {:?}",
                p.display(),
                m.spec.input,
                paths[0].display(),
                first.spec.input
            )));
        }
    }
    Ok(members)
}

fn dump_probs(path: &Path, members: &[Tensor], samples: &Dataset) -> Result<()> {
    let mut out = String::from("member,file,label");
    for name in &samples.class_names {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    let k = samples.class_names.len();
    for (m, probs) in members.iter().enumerate() {
        for (s, row) in samples.samples.iter().zip(probs.data().chunks_exact(k)) {
            let _ = write!(out, "{m},{},{}", s.source, s.label);
            for v in row {
                // shortest representation that reads back to the same f32
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
    }
    write_atomic(path, out.as_bytes())
}

pub fn run_eval(a: &EvalArgs) -> Result<()> {
    let members = load_members(&a.models)?;
    if let Some(w) = &a.weights {
        if w.len() != members.len() {
            return Err(Error::Usage(format!("{} weights for {} models", w.len(), members.len())));
        }
    }
    let first = &members[0];
    let ds = load_dataset(&a.data, first.spec.input[1])?;
    if ds.class_names != first.class_names {
        return Err(Error::Data(format!(
            "{} has classes {:?}, but the model was trained on {:?}",
            a.data.display(),
            ds.class_names,
            first.class_names
        )));
    }
    let [tr, va, te] = split_sets(&ds, a.seed)?;
    let set = match a.split {
        Split::Train => tr,
        Split::Val => va,
        Split::Test => te,
    };
    if set.is_empty() {
        return Err(Error::Data(format!("the {:?} split is empty", a.split)));
    }
    let probs = members
        .iter()
        .map(|m| evaluate(&m.params, &m.spec, &set.samples, 32).map(|e| e.probabilities))
        .collect::<Result<Vec<_>>>()?;
    if let Some(path) = &a.dump_probs {
        dump_probs(path, &probs, &set)?;
    }
    let (label, combined) = if members.len() == 1 {
        (model_label(&first.spec), probs[0].clone())
    } else {
        let names: Vec<String> = members.iter().map(|m| model_label(&m.spec)).collect();
        (format!("ensemble({})", names.join(",")), soft_vote(&probs, a.weights.as_deref())?)
    };
    let truth: Vec<usize> = set.samples.iter().map(|s| s.label).collect();
    let report = build_report(&label, &first.class_names, &combined, &truth)?;
    emit_report(&report, &a.report)?;
    let pred = predict(&combined)?;
    let correct = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
    println!(
        "{label}: accuracy {:.4} ({correct}/{}) on {:?}; wrote {}",
        report.accuracy,
        truth.len(),
        a.split,
        a.report.display()
    );
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn run_gradcam(a: &GradcamArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.model)?;
    let bytes = std::fs::read(&a.image).map_err(io_err(&a.image))?;
    let [c, h, w] = ckpt.spec.input;
    if h != w {
        return Err(Error::Usage(format!("model input {h}x{w} is not square")));
    }
    let x = preprocess(&bytes, h)
        .map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", a.image.display())),
            other => other,
        })?
        .reshape(vec![1, c, h, w])?;
    let ex = explain(&ckpt.params, &ckpt.spec, &x, a.class, &a.layer, a.alpha)?;
    let heat_path = with_suffix(&a.out, ".heatmap.ppm");
    let overlay_path = with_suffix(&a.out, ".overlay.ppm");
    write_atomic(&heat_path, &encode_ppm(&ex.heat_image))?;
    write_atomic(&overlay_path, &encode_ppm(&ex.overlay_image))?;
    let class = ex.heatmap.class;
    println!(
        "class {class} ({}){}; wrote {} and {}",
        ckpt.class_names[class],
        if ex.heatmap.degenerate { ", all-zero map" } else { "" },
        heat_path.display(),
        overlay_path.display()
    );
    Ok(())
}
