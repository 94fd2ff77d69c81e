//! Attribution classifiers: a small convolutional network trained with Adam
//! and a color-histogram logistic-regression baseline.

pub mod checkpoint;
pub mod convnet;
pub mod gradcheck;
pub mod hist;
pub mod layers;
pub mod optim;
pub mod scalar;
pub mod tensor;

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use convnet::SmallConvNetConfig;
pub use scalar::{Precision, Real};
pub use tensor::Tensor;

use crate::dataset::{class_labels, ClassKey, ManifestRow};
use crate::error::{Error, Result};
use crate::imageio::{self, FloatImage, CANONICAL_SIDE};
use crate::key;
use crate::seed;
use crate::transforms::{apply_transform, ImageRef, TransformSpec};

/// Examples per parallel work item. Fixed so that the reduction order, and
/// therefore the result, does not depend on the worker count.
pub const MICRO_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    ConvNet(SmallConvNetConfig),
    HistBaseline { bins: usize },
}

impl Architecture {
    pub fn hist() -> Self {
        Architecture::HistBaseline { bins: hist::HIST_BINS }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::ConvNet(_) => "convnet",
            Architecture::HistBaseline { .. } => "hist",
        }
    }

    pub fn param_count(&self, n_classes: usize) -> usize {
        match self {
            Architecture::ConvNet(cfg) => cfg.param_count(n_classes),
            Architecture::HistBaseline { bins } => n_classes * (3 * bins + 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::ConvNet(cfg) => cfg.validate(),
            Architecture::HistBaseline { bins: 0 } => Err(Error::config("arch.bins", "must be positive")),
            Architecture::HistBaseline { .. } => Ok(()),
        }
    }
}

/// Fields omitted from a config file take their [`TrainConfig::desk`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default = "TrainConfig::desk", deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Permits batch sizes outside 32..=256.
    pub allow_any_batch_size: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup_epochs: 2,
            epochs: 200,
            batch_size: 64,
            seed: 0,
            allow_any_batch_size: false,
            precision: Precision::Single,
        }
    }
}

impl TrainConfig {
    /// Default settings with the epoch count reduced for desk-scale runs.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if self.batch_size == 0 || (!self.allow_any_batch_size && !(32..=256).contains(&self.batch_size)) {
            return Err(Error::config(
                "train.batch_size",
                format!("{} outside 32..=256 (set allow_any_batch_size to override)", self.batch_size),
            ));
        }
        Ok(())
    }

    pub fn schedule(&self, n_examples: usize) -> optim::LrSchedule {
        let steps = n_examples.div_ceil(self.batch_size);
        optim::LrSchedule {
            lr: self.lr,
            warmup_steps: self.warmup_epochs * steps,
            total_steps: self.epochs * steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub final_train_loss: f64,
    /// Mean training loss per epoch (per iteration for the baseline).
    pub loss_trace: Vec<f64>,
    /// Learning rate used at every optimizer step.
    pub lr_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Params {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Params {
    pub fn len(&self) -> usize {
        match self {
            Params::F32(p) => p.len(),
            Params::F64(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn precision(&self) -> Precision {
        match self {
            Params::F32(_) => Precision::Single,
            Params::F64(_) => Precision::Double,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Params::F32(p) => p.iter().map(|&v| v as f64).collect(),
            Params::F64(p) => p.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: Architecture,
    pub n_classes: usize,
    pub labels: Vec<String>,
    pub meta: TrainMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub arch: Architecture,
    pub n_classes: usize,
    pub labels: Vec<String>,
    pub params: Params,
    pub meta: TrainMeta,
}

impl ModelCheckpoint {
    pub fn from_parts(header: CheckpointHeader, params: Params) -> Result<Self> {
        header.arch.validate()?;
        if header.labels.len() != header.n_classes {
            return Err(Error::Checkpoint(format!(
                "{} labels for {} classes",
                header.labels.len(),
                header.n_classes
            )));
        }
        let expected = header.arch.param_count(header.n_classes);
        if params.len() != expected {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match architecture ({expected})",
                params.len()
            )));
        }
        Ok(Self {
            arch: header.arch,
            n_classes: header.n_classes,
            labels: header.labels,
            params,
            meta: header.meta,
        })
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            arch: self.arch.clone(),
            n_classes: self.n_classes,
            labels: self.labels.clone(),
            meta: self.meta.clone(),
        }
    }

    /// Logits of a `[B, 3, S, S]` batch (convnet checkpoints only).
    pub fn forward<T: Real>(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let Architecture::ConvNet(cfg) = &self.arch else {
            return Err(Error::Checkpoint("forward needs a convnet checkpoint".into()));
        };
        let params: Vec<T> = self.params.to_f64().into_iter().map(T::from_f64).collect();
        convnet::forward(cfg, &params, self.n_classes, batch)
    }
}

/// Decoded, canonicalized and transformed image at the canonical side.
pub fn load_transformed(root: &Path, row: &ManifestRow, transform: &TransformSpec) -> Result<FloatImage> {
    let rel = Path::new(&row.path);
    let img = imageio::read_image(&root.join(rel))?.to_float();
    let canonical = if img.width() == CANONICAL_SIDE && img.height() == CANONICAL_SIDE {
        img
    } else {
        imageio::resize_bilinear(&img, CANONICAL_SIDE, CANONICAL_SIDE)
    };
    apply_transform(transform, &canonical, ImageRef { id: &row.id, rel_path: rel })
}

/// Model-ready inputs for a list of rows, computed once and reused across
/// epochs.
#[derive(Debug, Clone, PartialEq)]
pub enum Prepared {
    /// `[n, 3, side, side]` planar values.
    Planar { side: usize, data: Vec<f32> },
    Hist(Vec<Vec<f64>>),
}

impl Prepared {
    pub fn len(&self) -> usize {
        match self {
            Prepared::Planar { side, data } => data.len() / (3 * side * side),
            Prepared::Hist(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inputs for a subset of rows, by index.
    pub fn select(&self, indices: &[usize]) -> Prepared {
        match self {
            Prepared::Planar { side, data } => {
                let n = 3 * side * side;
                let mut out = Vec::with_capacity(indices.len() * n);
                for &i in indices {
                    out.extend_from_slice(&data[i * n..(i + 1) * n]);
                }
                Prepared::Planar { side: *side, data: out }
            }
            Prepared::Hist(f) => Prepared::Hist(indices.iter().map(|&i| f[i].clone()).collect()),
        }
    }
}

pub fn prepare(arch: &Architecture, root: &Path, rows: &[ManifestRow], transform: &TransformSpec) -> Result<Prepared> {
    transform.validate()?;
    match arch {
        Architecture::ConvNet(cfg) => {
            let side = cfg.input_side;
            let per: Vec<Vec<f32>> = rows
                .par_iter()
                .map(|r| {
                    let img = load_transformed(root, r, transform)?;
                    Ok(imageio::resize_bilinear(&img, side, side).to_planar())
                })
                .collect::<Result<_>>()?;
            Ok(Prepared::Planar { side, data: per.concat() })
        }
        &Architecture::HistBaseline { bins } => {
            let feats = rows
                .par_iter()
                .map(|r| Ok(hist::hist_features_with(&load_transformed(root, r, transform)?, bins)))
                .collect::<Result<_>>()?;
            Ok(Prepared::Hist(feats))
        }
    }
}

/// Trains on `rows`, labeling each by `class_key`; classes are the sorted
/// distinct labels.
pub fn train(
    root: &Path,
    rows: &[ManifestRow],
    class_key: ClassKey,
    transform: &TransformSpec,
    tc: &TrainConfig,
    arch: &Architecture,
) -> Result<ModelCheckpoint> {
    let labels = class_labels(rows, class_key);
    if labels.len() < 2 {
        return Err(Error::SingleClass(labels.len()));
    }
    let targets = label_indices(rows, class_key, &labels)?;
    let inputs = prepare(arch, root, rows, transform)?;
    train_prepared(&inputs, &targets, labels, tc, arch)
}

pub fn label_indices(rows: &[ManifestRow], class_key: ClassKey, labels: &[String]) -> Result<Vec<usize>> {
    rows.iter()
        .map(|r| {
            r.label(class_key)
                .and_then(|l| labels.iter().position(|x| x == l))
                .ok_or_else(|| Error::config("labels", format!("row `{}` has no known {} label", r.id, class_key.as_str())))
        })
        .collect()
}

pub fn train_prepared(
    inputs: &Prepared,
    targets: &[usize],
    labels: Vec<String>,
    tc: &TrainConfig,
    arch: &Architecture,
) -> Result<ModelCheckpoint> {
    arch.validate()?;
    let n_classes = labels.len();
    let present: std::collections::BTreeSet<usize> = targets.iter().copied().collect();
    if present.len() < 2 {
        return Err(Error::SingleClass(present.len()));
    }
    if let Some(&label) = targets.iter().find(|&&t| t >= n_classes) {
        return Err(Error::Label { label, n_classes });
    }
    if inputs.len() != targets.len() {
        return Err(Error::Shape {
            expected: format!("{} inputs", targets.len()),
            got: format!("{}", inputs.len()),
        });
    }
    let (params, meta) = match (arch, inputs) {
        (Architecture::ConvNet(cfg), Prepared::Planar { side, data }) if *side == cfg.input_side => {
            tc.validate()?;
            match tc.precision {
                Precision::Single => {
                    let (p, m) = train_convnet::<f32>(cfg, data, targets, n_classes, tc)?;
                    (Params::F32(p), m)
                }
                Precision::Double => {
                    let (p, m) = train_convnet::<f64>(cfg, data, targets, n_classes, tc)?;
                    (Params::F64(p), m)
                }
            }
        }
        (Architecture::HistBaseline { .. }, Prepared::Hist(features)) => {
            let fit = hist::fit(features, targets, n_classes, hist::HIST_LR, hist::HIST_ITERATIONS);
            let meta = TrainMeta {
                seed: tc.seed,
                epochs_run: hist::HIST_ITERATIONS,
                final_train_loss: *fit.loss_trace.last().expect("non-empty trace"),
                loss_trace: fit.loss_trace,
                lr_trace: Vec::new(),
            };
            (Params::F64(fit.params), meta)
        }
        _ => {
            return Err(Error::Shape {
                expected: format!("inputs prepared for {}", arch.name()),
                got: "mismatched inputs".into(),
            })
        }
    };
    ModelCheckpoint::from_parts(
        CheckpointHeader {
            arch: arch.clone(),
            n_classes,
            labels,
            meta,
        },
        params,
    )
}

fn gather<T: Real>(data: &[f32], plane: usize, idx: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(idx.len() * plane);
    for &i in idx {
        out.extend(data[i * plane..(i + 1) * plane].iter().map(|&v| T::from_f32(v)));
    }
    out
}

fn train_convnet<T: Real>(
    cfg: &SmallConvNetConfig,
    data: &[f32],
    targets: &[usize],
    n_classes: usize,
    tc: &TrainConfig,
) -> Result<(Vec<T>, TrainMeta)> {
    let n = targets.len();
    let plane = 3 * cfg.input_side * cfg.input_side;
    let mut params: Vec<T> = convnet::init_params(cfg, n_classes, &mut seed::keyed_rng(tc.seed, key!["init"]));
    let mut opt = optim::Adam::<T>::new(params.len());
    let schedule = tc.schedule(n);
    let mut lr_trace = Vec::with_capacity(schedule.total_steps);
    let mut loss_trace = Vec::with_capacity(tc.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..tc.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::keyed_rng(tc.seed, key!["epoch", epoch as u64]));
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(tc.batch_size).enumerate() {
            let lr = schedule.lr_at(step);
            let scale = T::from_f64(1.0 / batch.len() as f64);
            let parts: Vec<(T, Vec<T>)> = batch
                .par_chunks(MICRO_CHUNK)
                .map(|chunk| {
                    let x = gather::<T>(data, plane, chunk);
                    let y: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
                    convnet::chunk_loss_and_grad(cfg, &params, n_classes, &x, &y, scale)
                })
                .collect();
            let mut loss = T::zero();
            let mut grad = vec![T::zero(); params.len()];
            for (l, g) in parts {
                loss += l;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += *b;
                }
            }
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    lr,
                });
            }
            opt.step(&mut params, &grad, lr);
            lr_trace.push(lr);
            epoch_loss += loss * batch.len() as f64;
            step += 1;
        }
        loss_trace.push(epoch_loss / n as f64);
        log::debug!("epoch {epoch}: loss {:.4}", epoch_loss / n as f64);
    }
    let meta = TrainMeta {
        seed: tc.seed,
        epochs_run: tc.epochs,
        final_train_loss: *loss_trace.last().expect("epochs > 0"),
        loss_trace,
        lr_trace,
    };
    Ok((params, meta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub predicted: Vec<usize>,
    /// Softmax posterior per row.
    pub posteriors: Vec<Vec<f64>>,
}

impl Predictions {
    pub fn accuracy(&self, targets: &[usize]) -> f64 {
        let hits = self.predicted.iter().zip(targets).filter(|(a, b)| a == b).count();
        hits as f64 / targets.len().max(1) as f64
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax_f64(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn predict(ckpt: &ModelCheckpoint, root: &Path, rows: &[ManifestRow], transform: &TransformSpec) -> Result<Predictions> {
    let inputs = prepare(&ckpt.arch, root, rows, transform)?;
    predict_prepared(ckpt, &inputs)
}

fn convnet_logits<T: Real>(cfg: &SmallConvNetConfig, params: &[T], n_classes: usize, data: &[f32]) -> Result<Vec<Vec<f64>>> {
    let plane = 3 * cfg.input_side * cfg.input_side;
    let n = data.len() / plane;
    let idx: Vec<usize> = (0..n).collect();
    let chunks: Vec<Vec<Vec<f64>>> = idx
        .par_chunks(32)
        .map(|chunk| {
            let x = Tensor::new(vec![chunk.len(), 3, cfg.input_side, cfg.input_side], gather::<T>(data, plane, chunk))?;
            let z = convnet::forward(cfg, params, n_classes, &x)?;
            Ok((0..chunk.len()).map(|i| z.row(i).iter().map(|v| v.as_f64()).collect()).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

pub fn predict_prepared(ckpt: &ModelCheckpoint, inputs: &Prepared) -> Result<Predictions> {
    if ckpt.labels.is_empty() {
        return Err(Error::Checkpoint("checkpoint has no labels".into()));
    }
    let logits = match (&ckpt.arch, inputs, &ckpt.params) {
        (Architecture::ConvNet(cfg), Prepared::Planar { side, data }, params) if *side == cfg.input_side => match params {
            Params::F32(p) => convnet_logits(cfg, p, ckpt.n_classes, data)?,
            Params::F64(p) => convnet_logits(cfg, p, ckpt.n_classes, data)?,
        },
        (Architecture::HistBaseline { .. }, Prepared::Hist(features), params) => {
            let p = params.to_f64();
            features.iter().map(|x| hist::logits(&p, ckpt.n_classes, x)).collect()
        }
        _ => {
            return Err(Error::Shape {
                expected: format!("inputs prepared for {}", ckpt.arch.name()),
                got: "mismatched inputs".into(),
            })
        }
    };
    let posteriors: Vec<Vec<f64>> = logits.iter().map(|z| softmax_f64(z)).collect();
    let predicted = logits.iter().map(|z| argmax(z)).collect();
    Ok(Predictions { predicted, posteriors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn batch_size_range() {
        let mut tc = TrainConfig::default();
        assert!(tc.validate().is_ok());
        tc.batch_size = 16;
        assert!(tc.validate().is_err());
        tc.allow_any_batch_size = true;
        assert!(tc.validate().is_ok());
        tc.batch_size = 512;
        assert!(tc.validate().is_ok());
    }

    #[test]
    fn schedule_warmup_reaches_lr_at_epoch_two() {
        let tc = TrainConfig::default();
        let s = tc.schedule(640);
        assert_eq!(s.warmup_steps, 20);
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(10) - 5e-4).abs() < 1e-15);
        assert_eq!(s.lr_at(20), 1e-3);
    }
}
