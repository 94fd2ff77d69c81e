//! SmallConvNet: stages of (3x3 conv, rectifier, 2x2 mean pool), then global
//! mean pool and an affine head.
//!
//! Flat parameter layout: for each stage `W[c_out, c_in, 3, 3]` then
//! `b[c_out]`; finally the head `W[n_classes, c_last]` and `b[n_classes]`.

use serde::{Deserialize, Serialize};

use super::layers::{self, ConvShape};
use super::scalar::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmallConvNetConfig {
    pub input_side: usize,
    pub stage_channels: Vec<usize>,
}

impl Default for SmallConvNetConfig {
    fn default() -> Self {
        Self {
            input_side: 64,
            stage_channels: vec![16, 32, 64, 128],
        }
    }
}

impl SmallConvNetConfig {
    pub fn with_side(input_side: usize) -> Self {
        Self {
            input_side,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::config("arch.stage_channels", "needs at least one non-zero stage"));
        }
        let div = 1usize << self.stage_channels.len();
        if self.input_side == 0 || !self.input_side.is_multiple_of(div) {
            return Err(Error::config(
                "arch.input_side",
                format!("{} is not divisible by 2^{}", self.input_side, self.stage_channels.len()),
            ));
        }
        Ok(())
    }

    pub fn last_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated non-empty")
    }

    /// Offsets of every parameter block.
    pub fn layout(&self, n_classes: usize) -> ParamLayout {
        let mut stages = Vec::new();
        let mut offset = 0;
        let mut c_in = 3;
        for &c_out in &self.stage_channels {
            let w = offset;
            offset += c_out * c_in * 9;
            let b = offset;
            offset += c_out;
            stages.push(StageLayout {
                c_in,
                c_out,
                weight: w,
                bias: b,
            });
            c_in = c_out;
        }
        let head_weight = offset;
        offset += n_classes * c_in;
        let head_bias = offset;
        offset += n_classes;
        ParamLayout {
            stages,
            head_weight,
            head_bias,
            n_classes,
            total: offset,
        }
    }

    pub fn param_count(&self, n_classes: usize) -> usize {
        self.layout(n_classes).total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageLayout {
    pub c_in: usize,
    pub c_out: usize,
    pub weight: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub stages: Vec<StageLayout>,
    pub head_weight: usize,
    pub head_bias: usize,
    pub n_classes: usize,
    pub total: usize,
}

/// Fan-in-scaled uniform init: conv weights `U(±sqrt(6/fan_in))`, head
/// weights `U(±1/sqrt(fan_in))`, zero biases.
pub fn init_params<T: Real>(cfg: &SmallConvNetConfig, n_classes: usize, rng: &mut impl rand::Rng) -> Vec<T> {
    let layout = cfg.layout(n_classes);
    let mut params = vec![T::zero(); layout.total];
    for st in &layout.stages {
        let bound = (6.0 / (st.c_in * 9) as f64).sqrt();
        for v in &mut params[st.weight..st.bias] {
            *v = T::from_f64(rng.random_range(-bound..bound));
        }
    }
    let c = cfg.last_channels();
    let bound = 1.0 / (c as f64).sqrt();
    for v in &mut params[layout.head_weight..layout.head_bias] {
        *v = T::from_f64(rng.random_range(-bound..bound));
    }
    params
}

struct StageCache<T> {
    shape: ConvShape,
    col: Vec<T>,
    activated: Vec<T>,
}

struct ForwardCache<T> {
    stages: Vec<StageCache<T>>,
    last_plane: usize,
    features: Vec<T>,
    logits: Vec<T>,
}

/// `[B, 3, S, S]` -> `[3, B, S, S]`.
fn to_channel_major<T: Real>(batch: &[T], b: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch.len()];
    for bi in 0..b {
        for c in 0..3 {
            let src = &batch[(bi * 3 + c) * plane..(bi * 3 + c + 1) * plane];
            out[(c * b + bi) * plane..(c * b + bi + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

fn forward_cached<T: Real>(cfg: &SmallConvNetConfig, params: &[T], batch: &[T], b: usize, n_classes: usize) -> ForwardCache<T> {
    let layout = cfg.layout(n_classes);
    let mut side = cfg.input_side;
    let mut x = to_channel_major(batch, b, side * side);
    let mut stages = Vec::with_capacity(layout.stages.len());
    for st in &layout.stages {
        let shape = ConvShape {
            c_in: st.c_in,
            c_out: st.c_out,
            batch: b,
            height: side,
            width: side,
        };
        let (mut y, col) = layers::conv_forward(
            &x,
            &params[st.weight..st.bias],
            &params[st.bias..st.bias + st.c_out],
            &shape,
        );
        layers::relu_forward(&mut y);
        x = layers::pool_forward(&y, st.c_out * b, side, side);
        stages.push(StageCache {
            shape,
            col,
            activated: y,
        });
        side /= 2;
    }
    let c = cfg.last_channels();
    let last_plane = side * side;
    let features = layers::global_pool_forward(&x, c, b, last_plane);
    let logits = layers::affine_forward(
        &features,
        &params[layout.head_weight..layout.head_bias],
        &params[layout.head_bias..layout.head_bias + n_classes],
        c,
        b,
        n_classes,
    );
    ForwardCache {
        stages,
        last_plane,
        features,
        logits,
    }
}

fn check_batch<T: Copy + Default>(cfg: &SmallConvNetConfig, batch: &Tensor<T>) -> Result<usize> {
    let s = cfg.input_side;
    match batch.shape() {
        [b, 3, h, w] if *h == s && *w == s => Ok(*b),
        other => Err(Error::Shape {
            expected: format!("[B, 3, {s}, {s}]"),
            got: format!("{other:?}"),
        }),
    }
}

fn check_params(cfg: &SmallConvNetConfig, params: &[impl Sized], n_classes: usize) -> Result<()> {
    let expected = cfg.param_count(n_classes);
    if params.len() != expected {
        return Err(Error::Shape {
            expected: format!("{expected} parameters"),
            got: format!("{}", params.len()),
        });
    }
    Ok(())
}

/// Logits `[B, n_classes]`.
pub fn forward<T: Real>(cfg: &SmallConvNetConfig, params: &[T], n_classes: usize, batch: &Tensor<T>) -> Result<Tensor<T>> {
    let b = check_batch(cfg, batch)?;
    check_params(cfg, params, n_classes)?;
    let cache = forward_cached(cfg, params, batch.data(), b, n_classes);
    Tensor::new(vec![b, n_classes], cache.logits)
}

/// Summed loss and gradient of one chunk, with per-example terms scaled by
/// `scale` (1/B_total for a mean over the full batch).
pub fn chunk_loss_and_grad<T: Real>(
    cfg: &SmallConvNetConfig,
    params: &[T],
    n_classes: usize,
    batch: &[T],
    labels: &[usize],
    scale: T,
) -> (T, Vec<T>) {
    let b = labels.len();
    let layout = cfg.layout(n_classes);
    let cache = forward_cached(cfg, params, batch, b, n_classes);
    let (loss, dlogits) = layers::softmax_ce(&cache.logits, labels, n_classes, scale);
    let mut grad = vec![T::zero(); layout.total];
    let c = cfg.last_channels();
    let head = layers::affine_backward(
        &dlogits,
        &cache.features,
        &params[layout.head_weight..layout.head_bias],
        c,
        b,
        n_classes,
    );
    grad[layout.head_weight..layout.head_bias].copy_from_slice(&head.weight);
    grad[layout.head_bias..layout.head_bias + n_classes].copy_from_slice(&head.bias);
    let mut dx = layers::global_pool_backward(&head.input, c, b, cache.last_plane);
    for (i, (st, sc)) in layout.stages.iter().zip(&cache.stages).enumerate().rev() {
        let side = sc.shape.height;
        let mut dy = layers::pool_backward(&dx, st.c_out * b, side, side);
        layers::relu_backward(&mut dy, &sc.activated);
        let g = layers::conv_backward(&dy, &sc.col, &params[st.weight..st.bias], &sc.shape, i > 0);
        grad[st.weight..st.bias].copy_from_slice(&g.weight);
        grad[st.bias..st.bias + st.c_out].copy_from_slice(&g.bias);
        if let Some(input) = g.input {
            dx = input;
        }
    }
    (loss * scale, grad)
}

/// Mean cross-entropy over the batch and its gradient.
pub fn loss_and_grad<T: Real>(
    cfg: &SmallConvNetConfig,
    params: &[T],
    n_classes: usize,
    batch: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Vec<T>)> {
    let b = check_batch(cfg, batch)?;
    check_params(cfg, params, n_classes)?;
    if labels.len() != b {
        return Err(Error::Shape {
            expected: format!("{b} labels"),
            got: format!("{}", labels.len()),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Label { label, n_classes });
    }
    let scale = T::from_f64(1.0 / b as f64);
    Ok(chunk_loss_and_grad(cfg, params, n_classes, batch.data(), labels, scale))
}

/// Mean loss only.
pub fn loss<T: Real>(cfg: &SmallConvNetConfig, params: &[T], n_classes: usize, batch: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let logits = forward(cfg, params, n_classes, batch)?;
    let (l, _) = layers::softmax_ce(logits.data(), labels, n_classes, T::one());
    Ok(l / T::from_f64(labels.len() as f64))
}

/// Logits plus the on/off state of every rectifier unit, so callers can tell
/// when two nearby inputs straddle a kink.
pub fn forward_with_pattern<T: Real>(
    cfg: &SmallConvNetConfig,
    params: &[T],
    n_classes: usize,
    batch: &Tensor<T>,
) -> Result<(Vec<T>, Vec<bool>)> {
    let b = check_batch(cfg, batch)?;
    check_params(cfg, params, n_classes)?;
    let cache = forward_cached(cfg, params, batch.data(), b, n_classes);
    let pattern = cache
        .stages
        .iter()
        .flat_map(|s| s.activated.iter().map(|&v| v > T::zero()))
        .collect();
    Ok((cache.logits, pattern))
}
