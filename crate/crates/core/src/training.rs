//! Training loop: batching with pathology mix-up, the joint loss, Adam,
//! the log-linear learning-rate schedule, checkpoints and logs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::{pathology_mixup, PairSampler, DEFAULT_FOREGROUND, DEFAULT_Z_TOLERANCE};
use crate::data_io::{DatasetManifest, SliceSample};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, DiceReport, CLASS_NAMES};
use crate::losses::{total_loss, total_loss_grad, LossBreakdown, PenaltyConfig, WeightVector, DEFAULT_COEFF_NP};
use crate::model::layers::{softmax_backward, softmax_channels};
use crate::model::{image_tensor, Checkpoint, Model, ModelConfig, Parameterized};
use crate::probmap::{ProbMap, NUM_CLASSES};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "ckpt_best";

/// Number of partial gradient sums per batch. Fixed so that the summation
/// order, and hence the result, does not depend on the thread count.
const GRAD_CHUNKS: usize = 4;

pub fn epoch_checkpoint_name(completed_epochs: usize) -> String {
    format!("ckpt_epoch_{completed_epochs}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub coeff_np: f64,
    pub use_awce: bool,
    pub use_penalty: bool,
    pub penalty: PenaltyConfig,
    pub mixup_probability: f64,
    pub z_tolerance: f64,
    pub seed: u64,
    /// Save `ckpt_epoch_<k>` every this many epochs (the last epoch is always saved).
    pub checkpoint_every: usize,
    /// Architecture; `model.use_attention` is the attention flag of the run.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 400,
            lr_start: 1e-2,
            lr_end: 1e-6,
            coeff_np: DEFAULT_COEFF_NP,
            use_awce: true,
            use_penalty: true,
            penalty: PenaltyConfig::default(),
            mixup_probability: 0.5,
            z_tolerance: DEFAULT_Z_TOLERANCE,
            seed: 0,
            checkpoint_every: 10,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn use_attention(&self) -> bool {
        self.model.use_attention
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return bad(format!(
                "learning rates must satisfy lr_start >= lr_end > 0 (got {} and {})",
                self.lr_start, self.lr_end
            ));
        }
        if !(0.0..=1.0).contains(&self.mixup_probability) {
            return bad(format!("mixup_probability {} not in [0, 1]", self.mixup_probability));
        }
        if self.z_tolerance.is_nan() || self.z_tolerance < 0.0 {
            return bad(format!("z_tolerance {} must be >= 0", self.z_tolerance));
        }
        if !(self.coeff_np >= 0.0 && self.coeff_np.is_finite()) {
            return bad(format!("coeff_np {} must be >= 0", self.coeff_np));
        }
        if self.checkpoint_every < 1 {
            return bad("checkpoint_every must be >= 1".into());
        }
        self.penalty.validate()?;
        self.model.validate()
    }

    /// Coefficient actually applied to the neighbouring loss.
    pub fn effective_coeff_np(&self) -> f64 {
        if self.use_penalty {
            self.coeff_np
        } else {
            0.0
        }
    }
}

/// `lr_start · (lr_end/lr_start)^(epoch/(epochs−1))`, hitting both ends exactly.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> Result<f64> {
    let epochs = config.epochs;
    if epoch >= epochs {
        return Err(Error::Range { epoch, epochs });
    }
    if epoch == 0 || epochs == 1 {
        return Ok(config.lr_start);
    }
    if epoch == epochs - 1 {
        return Ok(config.lr_end);
    }
    let t = epoch as f64 / (epochs - 1) as f64;
    Ok((config.lr_start.ln() + t * (config.lr_end.ln() - config.lr_start.ln())).exp())
}

/// Adam with the usual defaults; moments are flat vectors in parameter
/// visiting order and persist across learning-rate changes.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    /// One update. Tensors whose name starts with a prefix in `frozen` keep
    /// their values and moments.
    pub fn update(&mut self, model: &mut Model, grads: &Model, lr: f64, frozen: &[&str]) {
        let g = grads.flatten();
        assert_eq!(g.len(), self.m.len(), "gradient/optimizer size mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut off = 0;
        model.visit_mut("", &mut |name, p| {
            let n = p.len();
            if !frozen.iter().any(|f| name.starts_with(f)) {
                for (k, pk) in p.iter_mut().enumerate() {
                    let i = off + k;
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    *pk -= lr * mh / (vh.sqrt() + eps);
                }
            }
            off += n;
        });
    }
}

/// One training example: an image and a (possibly soft) target.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub image: Array2<f64>,
    pub target: ProbMap,
    /// Mixing coefficient when the item came from mix-up.
    pub lambda: Option<f64>,
}

/// Builds items for `indices` of `train_set`; each is independently mixed
/// with probability `mixup_probability` (fixed = the indexed slice).
pub fn build_batch<R: Rng + ?Sized>(
    train_set: &[SliceSample],
    sampler: &PairSampler,
    indices: &[usize],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<BatchItem>> {
    let can_mix = sampler.num_eligible() >= 2;
    indices
        .iter()
        .map(|&i| {
            let s = train_set
                .get(i)
                .ok_or_else(|| Error::InsufficientData(format!("slice index {i} out of range")))?;
            let u: f64 = rng.random();
            if can_mix && u < config.mixup_probability && sampler.is_eligible(i) {
                let j = sampler.partner(i, config.z_tolerance, rng)?;
                let lambda: f64 = rng.random();
                let mix = pathology_mixup(s, &train_set[j], lambda)?;
                Ok(BatchItem {
                    image: mix.image,
                    target: mix.target,
                    lambda: Some(lambda),
                })
            } else {
                Ok(BatchItem {
                    image: s.image.clone(),
                    target: ProbMap::one_hot(s.labels.view(), NUM_CLASSES)?,
                    lambda: None,
                })
            }
        })
        .collect()
}

/// `batch_size` slices drawn uniformly with replacement, then [`build_batch`].
pub fn make_batch<R: Rng + ?Sized>(
    train_set: &[SliceSample],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<BatchItem>> {
    if train_set.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    let sampler = PairSampler::new(train_set, &DEFAULT_FOREGROUND);
    let idx: Vec<usize> = (0..config.batch_size)
        .map(|_| rng.random_range(0..train_set.len()))
        .collect();
    build_batch(train_set, &sampler, &idx, config, rng)
}

/// Loss of one item and accumulation of `scale ·` its gradient into `grads`.
fn accumulate_item(
    model: &Model,
    item: &BatchItem,
    config: &TrainConfig,
    scale: f64,
    grads: &mut Model,
) -> Result<LossBreakdown> {
    let x = image_tensor(item.image.view());
    let seg = model.segmentation.forward_train(&x);
    let probs = softmax_channels(&seg.logits);
    let pred = ProbMap::from_array_unchecked(probs);
    let (w, wcache) = if config.use_awce {
        let (w, c) = model.weight_generator.forward_train(&x);
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalDivergence { epoch: 0, batch: 0 });
        }
        (WeightVector::new(w)?, Some(c))
    } else {
        (WeightVector::uniform(NUM_CLASSES), None)
    };
    let coeff = config.effective_coeff_np();
    let breakdown = total_loss(&pred, &item.target, &w, &config.penalty, coeff)?;
    let g = total_loss_grad(&pred, &item.target, &w, &config.penalty, coeff)?;
    let d_logits = softmax_backward(pred.values(), &(g.pred * scale));
    model.segmentation.backward(&seg, &d_logits, &mut grads.segmentation);
    if let Some(c) = wcache {
        let dw: Vec<f64> = g.weights.iter().map(|v| v * scale).collect();
        model.weight_generator.backward(&c, &dw, &mut grads.weight_generator);
    }
    Ok(breakdown)
}

fn add_into(dst: &mut Model, src: &Model) {
    let flat = src.flatten();
    let mut off = 0;
    dst.visit_mut("", &mut |_, p| {
        let n = p.len();
        for (a, b) in p.iter_mut().zip(&flat[off..off + n]) {
            *a += b;
        }
        off += n;
    });
}

/// Mean loss over the batch and the gradient of that mean.
pub fn batch_gradient(model: &Model, batch: &[BatchItem], config: &TrainConfig) -> Result<(LossBreakdown, Model)> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let chunk = batch.len().div_ceil(GRAD_CHUNKS.min(batch.len()));
    let parts: Vec<Result<(Vec<LossBreakdown>, Model)>> = batch
        .par_chunks(chunk)
        .map(|items| {
            let mut g = model.zeros_like();
            let losses = items
                .iter()
                .map(|it| accumulate_item(model, it, config, scale, &mut g))
                .collect::<Result<Vec<_>>>()?;
            Ok((losses, g))
        })
        .collect();
    let mut losses = Vec::with_capacity(batch.len());
    let mut total: Option<Model> = None;
    for p in parts {
        let (l, g) = p?;
        losses.extend(l);
        match &mut total {
            None => total = Some(g),
            Some(t) => add_into(t, &g),
        }
    }
    let mean = LossBreakdown::mean(&losses).expect("non-empty batch");
    Ok((mean, total.expect("non-empty batch")))
}

/// Parameter-name prefixes left untouched by a step under `config`.
pub fn frozen_prefixes(config: &TrainConfig) -> &'static [&'static str] {
    if config.use_awce {
        &[]
    } else {
        &["weight_gen"]
    }
}

/// One Adam step on a batch; returns the loss before the update.
pub fn train_step(
    model: &mut Model,
    batch: &[BatchItem],
    optimizer: &mut Adam,
    config: &TrainConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    let (loss, grads) = batch_gradient(model, batch, config)?;
    if !loss.total.is_finite() || grads.flatten().iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalDivergence { epoch: 0, batch: 0 });
    }
    optimizer.update(model, &grads, lr, frozen_prefixes(config));
    Ok(loss)
}

/// Validation Dice of one epoch, keyed by class name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValDice {
    #[serde(rename = "LV")]
    pub lv: Option<f64>,
    #[serde(rename = "Myo")]
    pub myo: Option<f64>,
    #[serde(rename = "Inf")]
    pub inf: Option<f64>,
    #[serde(rename = "NoR")]
    pub nor: Option<f64>,
}

impl ValDice {
    fn from_report(r: &DiceReport) -> Self {
        let get = |i: usize| r.mean_of(crate::evaluation::EVAL_CLASSES[i]);
        debug_assert_eq!(CLASS_NAMES, ["LV", "Myo", "Inf", "NoR"]);
        Self {
            lv: get(0),
            myo: get(1),
            inf: get(2),
            nor: get(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// Zero-based epoch index.
    pub epoch: usize,
    /// Mean over the epoch's batches.
    pub losses: LossBreakdown,
    pub lr: f64,
    pub steps: usize,
    pub val_dice: ValDice,
    /// Mean of the available foreground Dice means (selection score).
    pub val_score: Option<f64>,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    pub logs: Vec<EpochLog>,
    /// Model with the best validation score (the final model without validation data).
    pub best_model: Model,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunMetadata {
    train_config: TrainConfig,
    split: DatasetManifest,
    best_epoch: Option<usize>,
    best_score: Option<f64>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn make_checkpoint(model: &Model, epoch: usize, opt: &Adam, meta: &RunMetadata) -> Result<Checkpoint> {
    Ok(Checkpoint {
        model: model.clone(),
        epoch,
        optimizer_step: opt.step,
        adam_m: opt.m.clone(),
        adam_v: opt.v.clone(),
        metadata: serde_json::to_value(meta)?,
    })
}

/// Configuration and split recorded in a checkpoint by [`train`].
pub fn checkpoint_run_info(ckpt: &Checkpoint) -> Result<(TrainConfig, DatasetManifest)> {
    let meta: RunMetadata = serde_json::from_value(ckpt.metadata.clone())
        .map_err(|e| Error::Checkpoint(format!("missing training metadata: {e}")))?;
    Ok((meta.train_config, meta.split))
}

fn rewrite_log_prefix(path: &Path, keep_before: usize) -> Result<()> {
    let mut kept = String::new();
    if path.exists() {
        for line in fs::read_to_string(path)?.lines() {
            let v: serde_json::Value = serde_json::from_str(line)?;
            if v["epoch"].as_u64().is_some_and(|e| (e as usize) < keep_before) {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

/// Reads `train_log.jsonl`.
pub fn read_train_log(path: &Path) -> Result<Vec<EpochLog>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Runs (or resumes) training on the split described by `manifest`.
///
/// With `out_dir`, appends one line per epoch to `train_log.jsonl` and writes
/// `ckpt_epoch_<k>` / `ckpt_best`. Divergence aborts with the checkpoints
/// written so far left in place.
pub fn train(
    config: &TrainConfig,
    slices: &[SliceSample],
    manifest: &DatasetManifest,
    out_dir: Option<&Path>,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_set: Vec<SliceSample> = manifest.train_samples(slices).into_iter().cloned().collect();
    if train_set.is_empty() {
        return Err(Error::InsufficientData("training split is empty".into()));
    }
    for s in &train_set {
        config.model.check_input(s.image.nrows(), s.image.ncols())?;
    }
    let val_set = manifest.validation_samples(slices);
    let sampler = PairSampler::new(&train_set, &DEFAULT_FOREGROUND);

    let mut meta = RunMetadata {
        train_config: config.clone(),
        split: manifest.clone(),
        best_epoch: None,
        best_score: None,
    };
    let (mut model, mut opt, start) = match resume {
        Some(ck) => {
            if ck.model.config != config.model {
                return Err(Error::ConfigMismatch(
                    "model configuration differs from the checkpoint".into(),
                ));
            }
            if let Ok(prev) = serde_json::from_value::<RunMetadata>(ck.metadata.clone()) {
                if prev.split.train != manifest.train || prev.split.validation != manifest.validation {
                    return Err(Error::ConfigMismatch("data split differs from the checkpoint".into()));
                }
                meta.best_epoch = prev.best_epoch;
                meta.best_score = prev.best_score;
            }
            if ck.epoch > config.epochs {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint has {} completed epochs but the run has {}",
                    ck.epoch, config.epochs
                )));
            }
            let n = ck.model.num_parameters();
            let mut opt = Adam::new(n);
            if !ck.adam_m.is_empty() {
                opt.m = ck.adam_m;
                opt.v = ck.adam_v;
            }
            opt.step = ck.optimizer_step;
            (ck.model, opt, ck.epoch)
        }
        None => {
            let model = Model::new(config.model.clone(), config.seed)?;
            let n = model.num_parameters();
            (model, Adam::new(n), 0)
        }
    };

    let log_path: Option<PathBuf> = out_dir.map(|d| d.join(TRAIN_LOG));
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
    }
    if let Some(p) = &log_path {
        rewrite_log_prefix(p, start)?;
    }
    let mut best_model = match (out_dir, meta.best_epoch) {
        (Some(d), Some(_)) if d.join(BEST_CHECKPOINT).exists() => Checkpoint::load(&d.join(BEST_CHECKPOINT))?.model,
        _ => model.clone(),
    };

    let mut logs = Vec::new();
    for epoch in start..config.epochs {
        let t0 = Instant::now();
        let lr = lr_schedule(epoch, config)?;
        let mut rng = epoch_rng(config.seed, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch = build_batch(&train_set, &sampler, idx, config, &mut rng)?;
            let loss = train_step(&mut model, &batch, &mut opt, config, lr).map_err(|e| match e {
                Error::NumericalDivergence { .. } => Error::NumericalDivergence { epoch, batch: b },
                other => other,
            })?;
            batch_losses.push(loss);
        }
        let losses = LossBreakdown::mean(&batch_losses).expect("at least one batch");

        let (val_dice, val_score) = if val_set.is_empty() {
            (ValDice::default(), None)
        } else {
            let r = evaluate(&model, &val_set, "validation")?;
            (ValDice::from_report(&r), Some(r.foreground_score()))
        };
        let improved = match (val_score, meta.best_score) {
            (Some(s), Some(b)) => s > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            meta.best_epoch = Some(epoch);
            meta.best_score = val_score;
            best_model = model.clone();
        }
        let entry = EpochLog {
            epoch,
            losses,
            lr,
            steps: order.len().div_ceil(config.batch_size),
            val_dice,
            val_score,
            wall_time: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {}/{} loss {:.5} (awce {:.5}, nb {:.5}) lr {:.3e} val {:?}",
            epoch + 1,
            config.epochs,
            entry.losses.total,
            entry.losses.awce,
            entry.losses.neighboring,
            lr,
            val_score
        );
        if let Some(d) = out_dir {
            let completed = epoch + 1;
            if improved {
                make_checkpoint(&model, completed, &opt, &meta)?.save(&d.join(BEST_CHECKPOINT))?;
            }
            if completed % config.checkpoint_every == 0 || completed == config.epochs {
                make_checkpoint(&model, completed, &opt, &meta)?.save(&d.join(epoch_checkpoint_name(completed)))?;
            }
            if let Some(p) = &log_path {
                let mut f = fs::OpenOptions::new().create(true).append(true).open(p)?;
                writeln!(f, "{}", serde_json::to_string(&entry)?)?;
            }
        }
        logs.push(entry);
    }

    let final_checkpoint = make_checkpoint(&model, config.epochs, &opt, &meta)?;
    Ok(TrainOutcome {
        final_checkpoint,
        logs,
        best_model,
        best_epoch: meta.best_epoch,
    })
}

/// Gradient of the batch-mean total loss with respect to the logits, exposed
/// for gradient checks.
pub fn logits_gradient(logits: &Array3<f64>, target: &ProbMap, w: &WeightVector, config: &TrainConfig) -> Result<Array3<f64>> {
    let pred = ProbMap::from_array_unchecked(softmax_channels(logits));
    let g = total_loss_grad(&pred, target, w, &config.penalty, config.effective_coeff_np())?;
    Ok(softmax_backward(pred.values(), &g.pred))
}
