//! Distillation and supervised fine-tuning loops.
//!
//! One thread owns the parameters and optimizer state. Per-sample forward
//! and backward passes run in parallel over fixed-size chunks of each batch;
//! in deterministic mode the chunk gradients are summed in chunk order, so
//! results do not depend on the number of worker threads.

pub mod adamw;
pub mod schedule;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adamw::{adamw_step, AdamWConfig, OptimizerState};
pub use schedule::{cosine_lr, warmup_steps};

use crate::data::{self, AugmentParams, LabeledImage};
use crate::distill::{total_loss_with_grad, DistillWeights, LossBreakdown};
use crate::distortions::{self, DistortionSpec};
use crate::encoder::{self, checkpoint, attach_head, OutputGrad, ParamSet, ViTConfig};
use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, Scalar};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Label-free teacher-student distillation.
    Distill,
    /// Supervised training of a distilled (or otherwise pretrained) encoder.
    Finetune,
    /// The same supervised procedure, used as the baseline arm.
    Supervised,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Distill => "distill",
            Mode::Finetune => "finetune",
            Mode::Supervised => "supervised",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// When set, the number of epochs is `round(sample_budget / n)` (at
    /// least 1) for a run over `n` samples, so runs on differently sized
    /// subsets take the same number of sample visits.
    #[serde(default)]
    pub sample_budget: Option<usize>,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    /// Fraction of all steps spent in linear warmup; 0 disables warmup.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub distortion: DistortionSpec,
    pub weights: DistillWeights,
    pub mode: Mode,
    pub augment: AugmentParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk_distill()
    }
}

impl TrainConfig {
    /// Desk-scale distillation: 30 epochs of batch 64.
    pub fn desk_distill() -> Self {
        Self {
            epochs: 30,
            sample_budget: None,
            batch_size: 64,
            peak_lr: 5e-4,
            min_lr: 0.0,
            warmup_frac: 0.05,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            deterministic: true,
            distortion: DistortionSpec::mask(0.9, 0),
            weights: DistillWeights::default(),
            mode: Mode::Distill,
            augment: AugmentParams::default(),
        }
    }

    /// Desk-scale fine-tuning: 20 epochs at peak learning rate 1e-4.
    pub fn desk_finetune() -> Self {
        Self {
            epochs: 20,
            peak_lr: 1e-4,
            mode: Mode::Finetune,
            ..Self::desk_distill()
        }
    }

    /// Full-scale recipe: 25 epochs, batch 128, peak learning rate 1e-5,
    /// weight decay 1e-4.
    pub fn paper() -> Self {
        Self {
            epochs: 25,
            batch_size: 128,
            peak_lr: 1e-5,
            weight_decay: 1e-4,
            ..Self::desk_distill()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk_distill()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }

    /// Epoch count for a run over `n` samples.
    pub fn epochs_for(&self, n: usize) -> usize {
        match self.sample_budget {
            Some(b) if n > 0 => ((b as f64 / n as f64).round() as usize).max(1),
            _ => self.epochs,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.peak_lr > self.min_lr && self.min_lr >= 0.0) {
            return Err(Error::Config(format!(
                "need peak_lr > min_lr >= 0, got {} and {}",
                self.peak_lr, self.min_lr
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("warmup_frac {} not in [0, 1)", self.warmup_frac)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("epsilon must be > 0 and weight_decay >= 0".into()));
        }
        self.distortion.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.weights.validate()?;
        self.augment.validate()
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u32,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_patch: f64,
    pub loss_attn: f64,
    pub mode: String,
}

/// `-log softmax(logits)[label]` and its gradient `softmax - onehot`.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let lse = log_sum_exp(logits);
    let mut g: Vec<T> = logits.iter().map(|&z| (z - lse).exp()).collect();
    g[label] -= T::one();
    Ok((lse - logits[label], g))
}

const CHUNK: usize = 8;

/// Sums per-sample gradients over `items`, scaled by `1 / items.len()`.
/// Returns the gradient and the per-sample results in input order.
fn batch_grad<I, R, F>(
    params: &ParamSet<f32>,
    items: &[I],
    deterministic: bool,
    per_sample: F,
) -> Result<(ParamSet<f32>, Vec<R>)>
where
    I: Sync,
    R: Send,
    F: Fn(&I, &mut ParamSet<f32>) -> Result<R> + Sync,
{
    let chunk_fn = |chunk: &[I]| -> Result<(ParamSet<f32>, Vec<R>)> {
        let mut g = params.zeros_like();
        let rs = chunk
            .iter()
            .map(|it| per_sample(it, &mut g))
            .collect::<Result<Vec<R>>>()?;
        Ok((g, rs))
    };
    let (mut grads, results) = if deterministic {
        let parts = items
            .par_chunks(CHUNK)
            .map(chunk_fn)
            .collect::<Result<Vec<_>>>()?;
        let mut iter = parts.into_iter();
        let (mut g, mut rs) = iter.next().unwrap_or_else(|| (params.zeros_like(), Vec::new()));
        for (pg, prs) in iter {
            g.add_assign(&pg);
            rs.extend(prs);
        }
        (g, rs)
    } else {
        items
            .par_chunks(CHUNK)
            .map(chunk_fn)
            .try_reduce(
                || (params.zeros_like(), Vec::new()),
                |(mut ga, mut ra), (gb, rb)| {
                    ga.add_assign(&gb);
                    ra.extend(rb);
                    Ok((ga, ra))
                },
            )?
    };
    if !items.is_empty() {
        grads.scale(1.0 / items.len() as f32);
    }
    Ok((grads, results))
}

struct RunSink {
    dir: std::path::PathBuf,
    metrics: BufWriter<File>,
}

impl RunSink {
    fn open(dir: &Path, model: &ViTConfig, train: &TrainConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("config.json");
        let echo = serde_json::json!({ "model": model, "train": train });
        std::fs::write(&cfg_path, serde_json::to_vec_pretty(&echo)?)
            .map_err(|e| Error::io(&cfg_path, e))?;
        let mpath = dir.join("metrics.jsonl");
        let f = File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: BufWriter::new(f),
        })
    }

    fn record(&mut self, r: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(r)?;
        writeln!(self.metrics, "{line}").map_err(|e| Error::io(self.dir.join("metrics.jsonl"), e))
    }

    fn checkpoint(&mut self, epoch: usize, cfg: &ViTConfig, params: &ParamSet<f32>) -> Result<()> {
        self.metrics
            .flush()
            .map_err(|e| Error::io(self.dir.join("metrics.jsonl"), e))?;
        checkpoint::save(&self.dir.join(format!("{epoch}.ckpt")), cfg, params)
    }
}

/// Shared optimization loop: shuffles `n` sample positions each epoch,
/// asks `step_fn` for the batch gradient, applies AdamW under the cosine
/// schedule, and writes metrics and per-epoch checkpoints.
fn run_loop<F>(
    mut params: ParamSet<f32>,
    model_cfg: &ViTConfig,
    tc: &TrainConfig,
    n: usize,
    out: Option<&Path>,
    mut step_fn: F,
) -> Result<(ParamSet<f32>, Vec<StepRecord>)>
where
    F: FnMut(&ParamSet<f32>, &[usize], u64) -> Result<(ParamSet<f32>, LossBreakdown)>,
{
    let mut sink = out.map(|d| RunSink::open(d, model_cfg, tc)).transpose()?;
    let mut records = Vec::new();
    let epochs = tc.epochs_for(n);
    if epochs == 0 {
        return Ok((params, records));
    }
    if n == 0 {
        return Err(Error::Config("no training samples".into()));
    }
    let spe = n.div_ceil(tc.batch_size);
    let total = epochs * spe;
    let warm = warmup_steps(total, tc.warmup_frac);
    let opt_cfg = tc.adamw();
    let mut opt = OptimizerState::new(&params);
    let mut step = 0usize;
    for epoch in 1..=epochs {
        let perm = data::epoch_permutation(n, tc.seed, epoch as u64);
        for batch in perm.chunks(tc.batch_size) {
            let lr = cosine_lr(step, total, tc.peak_lr, tc.min_lr, warm);
            let (grads, loss) = step_fn(&params, batch, epoch as u64)?;
            if !loss.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss became {} at step {step} (epoch {epoch})",
                    loss.total
                )));
            }
            adamw_step(&mut params, &grads, &mut opt, lr, &opt_cfg)?;
            let rec = StepRecord {
                step: step as u64,
                epoch: epoch as u32,
                lr,
                loss_total: loss.total,
                loss_cls: loss.cls,
                loss_patch: loss.patch,
                loss_attn: loss.attn,
                mode: tc.mode.to_string(),
            };
            if let Some(s) = sink.as_mut() {
                s.record(&rec)?;
            }
            records.push(rec);
            step += 1;
        }
        if let Some(s) = sink.as_mut() {
            s.checkpoint(epoch, model_cfg, &params)?;
        }
    }
    debug_assert_eq!(opt.step as usize, step);
    Ok((params, records))
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: ParamSet<f32>,
    pub records: Vec<StepRecord>,
}

/// Trains `student` to match the frozen `teacher`: the teacher encodes the
/// clean view and the student the distorted view of each pair; labels are
/// never read. The teacher is only borrowed immutably.
pub fn distill_run(
    teacher: &ParamSet<f32>,
    student: ParamSet<f32>,
    cfg: &ViTConfig,
    tc: &TrainConfig,
    data: &[LabeledImage],
    out: Option<&Path>,
) -> Result<DistillOutcome> {
    tc.validate()?;
    if cfg.num_classes.is_some() {
        return Err(Error::Config("distillation operates on encoders without a head".into()));
    }
    teacher.check_layout(cfg).map_err(|e| Error::Config(format!("teacher: {e}")))?;
    student.check_layout(cfg).map_err(|e| Error::Config(format!("student: {e}")))?;
    let w = tc.weights;
    let (student, records) = run_loop(student, cfg, tc, data.len(), out, |params, batch, epoch| {
        let pairs = data::make_pair_batch(data, &tc.distortion, batch, &tc.augment, tc.seed, epoch)?;
        let items: Vec<usize> = (0..pairs.len()).collect();
        let (grads, losses) = batch_grad(params, &items, tc.deterministic, |&i, g| {
            let target = encoder::forward(teacher, cfg, &pairs.clean[i])?;
            let mut bd = LossBreakdown::default();
            encoder::accumulate_grad(
                params,
                cfg,
                &pairs.distorted[i],
                |o| {
                    let (v, b, grad) = total_loss_with_grad(&target, o, &w)?;
                    bd = b;
                    Ok((v, grad))
                },
                g,
            )?;
            Ok(bd)
        })?;
        Ok((grads, LossBreakdown::mean(&losses)))
    })?;
    Ok(DistillOutcome { student, records })
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: ParamSet<f32>,
    pub config: ViTConfig,
    pub records: Vec<StepRecord>,
    /// Indices of the labeled training samples actually used.
    pub subset: Vec<usize>,
}

/// Attaches a fresh classifier head to `encoder_params` and trains all
/// parameters with cross-entropy on distorted, augmented images from a
/// class-stratified `label_fraction` subset of `train`.
pub fn finetune_run(
    encoder_params: &ParamSet<f32>,
    cfg: &ViTConfig,
    tc: &TrainConfig,
    train: &[LabeledImage],
    num_classes: usize,
    label_fraction: f64,
    out: Option<&Path>,
) -> Result<FinetuneOutcome> {
    tc.validate()?;
    if num_classes == 0 {
        return Err(Error::Config("num_classes must be set for fine-tuning".into()));
    }
    if let Some(bad) = train.iter().find(|s| s.label >= num_classes) {
        return Err(Error::Input(format!("label {} >= num_classes {num_classes}", bad.label)));
    }
    let backbone = encoder_params.backbone();
    let base_cfg = ViTConfig {
        num_classes: None,
        ..cfg.clone()
    };
    backbone
        .check_layout(&base_cfg)
        .map_err(|e| Error::Config(format!("encoder: {e}")))?;
    let (params, head_cfg) = attach_head(&backbone, &base_cfg, num_classes, rng::mix(tc.seed, &[0x4e]))?;
    let subset = data::stratified_subset(train, label_fraction, tc.seed)?;
    let (params, records) = run_loop(params, &head_cfg, tc, subset.len(), out, |params, batch, epoch| {
        let idx: Vec<usize> = batch.iter().map(|&b| subset[b]).collect();
        let pairs = data::make_pair_batch(train, &tc.distortion, &idx, &tc.augment, tc.seed, epoch)?;
        let labels = pairs.labels.as_ref().expect("labels carried");
        let items: Vec<usize> = (0..pairs.len()).collect();
        let (grads, losses) = batch_grad(params, &items, tc.deterministic, |&i, g| {
            encoder::accumulate_grad(
                params,
                &head_cfg,
                &pairs.distorted[i],
                |o| {
                    let logits = o.logits.as_ref().expect("head attached");
                    let (v, dl) = cross_entropy(logits, labels[i])?;
                    Ok((
                        v,
                        OutputGrad {
                            logits: Some(dl),
                            ..Default::default()
                        },
                    ))
                },
                g,
            )
            .map(|v| v as f64)
        })?;
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        Ok((
            grads,
            LossBreakdown {
                total: mean,
                ..Default::default()
            },
        ))
    })?;
    Ok(FinetuneOutcome {
        params,
        config: head_cfg,
        records,
        subset,
    })
}

/// Mean distillation loss over a fixed set of pairs without updating
/// anything; used for before/after comparisons.
pub fn evaluate_distill_loss(
    teacher: &ParamSet<f32>,
    student: &ParamSet<f32>,
    cfg: &ViTConfig,
    spec: &DistortionSpec,
    weights: &DistillWeights,
    data: &[LabeledImage],
) -> Result<LossBreakdown> {
    let losses = data
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let t = encoder::forward(teacher, cfg, &s.image)?;
            let d = distortions::apply(spec, &s.image, i as u64)?;
            let st = encoder::forward(student, cfg, &d)?;
            crate::distill::total_loss(&t, &st, weights)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::mean(&losses))
}
