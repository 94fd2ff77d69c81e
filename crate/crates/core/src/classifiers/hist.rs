//! Color-histogram features and a multinomial logistic-regression baseline.

use crate::imageio::FloatImage;

pub const HIST_BINS: usize = 32;
pub const HIST_LR: f64 = 0.1;
pub const HIST_ITERATIONS: usize = 500;

/// Per-channel `bins`-bin histograms, each L1-normalized, concatenated.
pub fn hist_features_with(img: &FloatImage, bins: usize) -> Vec<f64> {
    let mut counts = vec![0u64; 3 * bins];
    for px in img.data().chunks_exact(3) {
        for (c, &v) in px.iter().enumerate() {
            let b = ((v.clamp(0.0, 1.0) * bins as f32) as usize).min(bins - 1);
            counts[c * bins + b] += 1;
        }
    }
    let n = (img.width() * img.height()).max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

pub fn hist_features(img: &FloatImage) -> Vec<f64> {
    hist_features_with(img, HIST_BINS)
}

/// Row-wise logits `x W^T + b` for a `[N, dim]` weight block followed by bias.
pub fn logits(params: &[f64], n_classes: usize, x: &[f64]) -> Vec<f64> {
    let dim = x.len();
    let (w, b) = params.split_at(n_classes * dim);
    (0..n_classes)
        .map(|k| b[k] + w[k * dim..(k + 1) * dim].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect()
}

pub struct HistFit {
    pub params: Vec<f64>,
    /// Mean cross-entropy before each update, then after the last one.
    pub loss_trace: Vec<f64>,
}

fn mean_loss_and_grad(params: &[f64], n_classes: usize, features: &[Vec<f64>], labels: &[usize]) -> (f64, Vec<f64>) {
    let dim = features[0].len();
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let inv = 1.0 / features.len() as f64;
    for (x, &y) in features.iter().zip(labels) {
        let z = logits(params, n_classes, x);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += lse - z[y];
        for k in 0..n_classes {
            let d = ((z[k] - lse).exp() - if k == y { 1.0 } else { 0.0 }) * inv;
            for (g, v) in grad[k * dim..(k + 1) * dim].iter_mut().zip(x) {
                *g += d * v;
            }
            grad[n_classes * dim + k] += d;
        }
    }
    (loss * inv, grad)
}

/// Full-batch gradient descent from zero.
pub fn fit(features: &[Vec<f64>], labels: &[usize], n_classes: usize, lr: f64, iterations: usize) -> HistFit {
    let dim = features[0].len();
    let mut params = vec![0.0; n_classes * (dim + 1)];
    let mut loss_trace = Vec::with_capacity(iterations + 1);
    for _ in 0..iterations {
        let (loss, grad) = mean_loss_and_grad(&params, n_classes, features, labels);
        loss_trace.push(loss);
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= lr * g;
        }
    }
    loss_trace.push(mean_loss_and_grad(&params, n_classes, features, labels).0);
    HistFit { params, loss_trace }
}
