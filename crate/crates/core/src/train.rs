//! Momentum SGD with a step schedule, epoch loops, top-k evaluation and
//! classifier replacement for fine-tuning.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::{stack, Dataset, Preprocess, Split};
use crate::error::{Error, Result};
use crate::layers::{Linear, TensorKind};
use crate::model::Model;
use crate::ops::softmax_xent;
use crate::tensor::{Scalar, Tensor};
use crate::zoo::init_tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub step_epochs: usize,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    /// Desk-scale schedule: 30 epochs of batch 32, decayed every 10.
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            step_epochs: 10,
            gamma: 0.1,
            epochs: 30,
            batch_size: 32,
        }
    }
}

/// Keys read by [`SgdConfig::from_config`].
pub const SGD_KEYS: [&str; 7] = [
    "lr",
    "momentum",
    "weight_decay",
    "step_epochs",
    "gamma",
    "epochs",
    "batch_size",
];

impl SgdConfig {
    /// The ImageNet-scale schedule: batch 256, decay by 0.1 every 30 of 100
    /// epochs.
    pub fn imagenet() -> Self {
        Self {
            step_epochs: 30,
            epochs: 100,
            batch_size: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.base_lr > 0.0
            && self.momentum >= 0.0
            && self.weight_decay >= 0.0
            && self.step_epochs > 0
            && self.epochs > 0
            && self.batch_size > 0;
        if !positive {
            return Err(Error::Config(format!("invalid SGD settings {self:?}")));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma {} must lie in (0, 1)", self.gamma)));
        }
        Ok(())
    }

    /// Reads overrides on top of the desk-scale defaults.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            base_lr: cfg.parse_or("lr", d.base_lr)?,
            momentum: cfg.parse_or("momentum", d.momentum)?,
            weight_decay: cfg.parse_or("weight_decay", d.weight_decay)?,
            step_epochs: cfg.parse_or("step_epochs", d.step_epochs)?,
            gamma: cfg.parse_or("gamma", d.gamma)?,
            epochs: cfg.parse_or("epochs", d.epochs)?,
            batch_size: cfg.parse_or("batch_size", d.batch_size)?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// `base_lr · gamma^⌊epoch / step_epochs⌋`, rounded to 12 significant
/// digits so decimal schedules come out exact.
pub fn lr_at_epoch(epoch: usize, cfg: &SgdConfig) -> f64 {
    let k = (epoch / cfg.step_epochs) as i32;
    let lr = cfg.base_lr * cfg.gamma.powi(k);
    format!("{lr:.11e}").parse().unwrap_or(lr)
}

/// Momentum buffers keyed by parameter name, plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState<T: Scalar = f32> {
    pub velocities: Vec<(String, Tensor<T>)>,
    pub step: u64,
}

/// `v ← m·v + g + wd·w; w ← w − lr·v` for every trainable parameter.
/// Running batch-norm statistics are not parameters and are never touched.
pub fn sgd_step<T: Scalar>(model: &mut Model<T>, state: &mut OptimState<T>, cfg: &SgdConfig, lr: f64) -> Result<()> {
    let params = model.trainable_params_mut();
    if state.velocities.is_empty() {
        state.velocities = params
            .iter()
            .map(|(n, p)| (n.clone(), Tensor::zeros(p.shape())))
            .collect();
    }
    if state.velocities.len() != params.len()
        || state.velocities.iter().zip(&params).any(|((a, _), (b, _))| a != b)
    {
        return Err(Error::Arch("optimizer state does not match the trainable parameters".into()));
    }
    for ((name, p), (_, v)) in params.iter().zip(&state.velocities) {
        v.expect_shape(p.shape(), "optimizer velocity")?;
        p.grad.ensure_finite(&format!("gradient of {name}"))?;
    }
    let (m, wd, lr) = (T::from_f64(cfg.momentum), T::from_f64(cfg.weight_decay), T::from_f64(lr));
    for ((_, p), (_, v)) in params.into_iter().zip(state.velocities.iter_mut()) {
        let (w, g) = (p.value.data_mut(), p.grad.data());
        for ((w, &g), v) in w.iter_mut().zip(g).zip(v.data_mut()) {
            *v = m * *v + g + wd * *w;
            *w -= lr * *v;
        }
    }
    state.step += 1;
    Ok(())
}

/// Rank of `label` among the logits of one sample: the number of classes
/// scoring higher, counting equal scores at lower indices as higher.
pub fn label_rank<T: Scalar>(row: &[T], label: usize) -> usize {
    let t = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > t || (v == t && j < label))
        .count()
}

/// Counts of samples whose label falls outside the top-1 and top-5 sets.
fn topk_misses<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (usize, usize) {
    let k = logits.shape().per_sample();
    let mut miss = (0, 0);
    for (b, &l) in labels.iter().enumerate() {
        let r = label_rank(&logits.data()[b * k..(b + 1) * k], l);
        miss.0 += (r >= 1) as usize;
        miss.1 += (r >= 5) as usize;
    }
    miss
}

/// Top-1 and top-5 error percentages of a logit batch. Top-5 is an error
/// with fewer than five classes.
pub fn topk_errors<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, f64)> {
    let classes = logits.shape().per_sample();
    if classes < 5 {
        return Err(Error::TopKTooLarge { k: 5, classes });
    }
    let (m1, m5) = topk_misses(logits, labels);
    let n = labels.len().max(1) as f64;
    Ok((100.0 * m1 as f64 / n, 100.0 * m5 as f64 / n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub top1_error: f64,
    /// `None` when the model has fewer than five classes.
    pub top5_error: Option<f64>,
    pub samples: usize,
}

impl Evaluation {
    pub fn top1_accuracy(&self) -> f64 {
        100.0 - self.top1_error
    }
}

/// Deterministic per-sample stream for augmentation.
fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

fn batch_tensor(data: &Dataset, idx: &[usize], pre: &Preprocess, split: Split, seed: u64, epoch: usize) -> Result<(Tensor<f32>, Vec<usize>)> {
    let mut items = Vec::with_capacity(idx.len());
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = &data.samples[i];
        items.push(pre.apply(&s.image, split, &mut sample_rng(seed, epoch, i))?);
        labels.push(s.label);
    }
    Ok((stack(&items)?, labels))
}

/// Single-crop evaluation with eval-mode batch norm.
pub fn evaluate(model: &mut Model<f32>, data: &Dataset, pre: &Preprocess, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    let classes = model.num_classes();
    if let Some(s) = data.samples.iter().find(|s| s.label >= classes) {
        return Err(Error::LabelOutOfRange { label: s.label, classes });
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let (mut m1, mut m5) = (0, 0);
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, labels) = batch_tensor(data, chunk, pre, Split::Eval, 0, 0)?;
        let logits = model.forward(&x, false)?;
        logits.ensure_finite("logits")?;
        let (a, b) = topk_misses(&logits, &labels);
        m1 += a;
        m5 += b;
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        top1_error: 100.0 * m1 as f64 / n,
        top5_error: (classes >= 5).then(|| 100.0 * m5 as f64 / n),
        samples: data.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub lr: f64,
    pub mean_loss: f64,
    /// Running top-1 error over the epoch's training batches, percent.
    pub top1_error: f64,
    /// Loss of every step in order.
    pub losses: Vec<f64>,
}

/// One shuffled pass over `data`. The shuffle and every augmentation draw
/// derive from `(seed, epoch)`, so equal seeds give equal traces.
pub fn train_epoch(
    model: &mut Model<f32>,
    data: &Dataset,
    pre: &Preprocess,
    cfg: &SgdConfig,
    state: &mut OptimState<f32>,
    epoch: usize,
    seed: u64,
) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let lr = lr_at_epoch(epoch, cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(u64::MAX - epoch as u64);
    order.shuffle(&mut shuffle_rng);

    let mut losses = Vec::new();
    let (mut weighted, mut misses) = (0.0, 0);
    for chunk in order.chunks(cfg.batch_size) {
        let (x, labels) = batch_tensor(data, chunk, pre, Split::Train, seed, epoch)?;
        model.zero_grad();
        let logits = model.forward(&x, true)?;
        let (loss, grad) = softmax_xent(&logits, &labels)?;
        misses += topk_misses(&logits, &labels).0;
        model.backward(&grad)?;
        sgd_step(model, state, cfg, lr)?;
        losses.push(loss as f64);
        weighted += loss as f64 * chunk.len() as f64;
    }
    model.clear_cache();
    Ok(EpochMetrics {
        lr,
        mean_loss: weighted / data.len() as f64,
        top1_error: 100.0 * misses as f64 / data.len() as f64,
        losses,
    })
}

/// One row of the metrics stream.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_top1: Option<f64>,
    pub val_top5: Option<f64>,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_top1,val_top1,val_top5,wall_seconds";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
        format!(
            "{},{},{:.6},{:.4},{},{},{:.3}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.train_top1,
            opt(self.val_top1),
            opt(self.val_top5),
            self.wall_seconds
        )
    }
}

pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Options for [`fit`].
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub seed: u64,
    /// Record elapsed time; off by default so metrics files are
    /// reproducible byte for byte.
    pub wall_clock: bool,
    /// First epoch index, for resumed runs.
    pub start_epoch: usize,
}

/// Trains for `cfg.epochs` epochs, evaluating on `val` after each. The
/// callback sees every record and the model after that epoch.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    model: &mut Model<f32>,
    train: &Dataset,
    val: Option<&Dataset>,
    pre: &Preprocess,
    cfg: &SgdConfig,
    state: &mut OptimState<f32>,
    opts: &FitOptions,
    mut on_epoch: impl FnMut(&EpochRecord, &Model<f32>) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let start = Instant::now();
    let mut records = Vec::new();
    for epoch in opts.start_epoch..opts.start_epoch + cfg.epochs {
        let m = train_epoch(model, train, pre, cfg, state, epoch, opts.seed)?;
        let eval = val.map(|v| evaluate(model, v, pre, cfg.batch_size)).transpose()?;
        let rec = EpochRecord {
            epoch,
            lr: m.lr,
            train_loss: m.mean_loss,
            train_top1: m.top1_error,
            val_top1: eval.as_ref().map(|e| e.top1_error),
            val_top5: eval.and_then(|e| e.top5_error),
            wall_seconds: if opts.wall_clock { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        on_epoch(&rec, model)?;
        records.push(rec);
    }
    Ok(records)
}

/// Replaces the classifier with a freshly initialized `new_classes`-way
/// layer. With `freeze_features`, later updates touch only the classifier
/// and the feature extractor runs in inference mode.
pub fn finetune_prepare<T: Scalar>(model: &mut Model<T>, new_classes: usize, freeze_features: bool, seed: u64) -> Result<()> {
    if new_classes < 2 {
        return Err(Error::Config(format!("fine-tuning needs at least two classes, got {new_classes}")));
    }
    let mut head = Linear::new(model.feature_dim(), new_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_tensor(TensorKind::Weight, &mut head.weight.value, &mut rng);
    model.classifier = head;
    model.spec.num_classes = new_classes;
    model.freeze_features = freeze_features;
    Ok(())
}

/// L2 norms of the feature and classifier parameters.
pub fn parameter_norms<T: Scalar>(model: &Model<T>) -> (f64, f64) {
    let mut feat = 0.0;
    let mut head = 0.0;
    let prefix = format!("{}.", model.classifier_name);
    for t in model.named_tensors().iter().filter(|t| t.kind.is_param()) {
        let sq: f64 = t.tensor.data().iter().map(|v| v.as_f64() * v.as_f64()).sum();
        if t.name.starts_with(&prefix) {
            head += sq;
        } else {
            feat += sq;
        }
    }
    (feat.sqrt(), head.sqrt())
}
