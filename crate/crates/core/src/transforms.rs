//! Corruption and structural-perturbation battery, plus analysis proxies.
//!
//! All transforms run on the canonical 224x224 float input. Randomness comes
//! from a ChaCha stream keyed by `(seed, kind, image id)`, so results do not
//! depend on evaluation order or thread count.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{self, FloatImage};
use crate::key;
use crate::seed;

/// Luminance weights (Rec. 601), shared by edge maps and hue rotation.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

const EDGE_THRESHOLD: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    None,
    ColorJitter,
    GaussianNoise,
    GaussianBlur,
    ResizeCorrupt,
    PixelShuffle,
    ExternalDir,
}

impl TransformKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TransformKind::None => "none",
            TransformKind::ColorJitter => "color_jitter",
            TransformKind::GaussianNoise => "gaussian_noise",
            TransformKind::GaussianBlur => "gaussian_blur",
            TransformKind::ResizeCorrupt => "resize_corrupt",
            TransformKind::PixelShuffle => "pixel_shuffle",
            TransformKind::ExternalDir => "external_dir",
        }
    }
}

/// How the per-image random stream is keyed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    /// Independent stream per image id.
    #[default]
    PerImage,
    /// One stream shared by every image (e.g. a single fixed pixel permutation).
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    /// Jitter strength, noise std, blur radius or resize side, depending on `kind`.
    #[serde(default)]
    pub strength: f64,
    #[serde(default)]
    pub seed_policy: SeedPolicy,
    #[serde(default)]
    pub seed: u64,
    /// Root of pre-transformed images for `external_dir`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl TransformSpec {
    pub fn none() -> Self {
        Self::new(TransformKind::None, 0.0)
    }

    pub fn new(kind: TransformKind, strength: f64) -> Self {
        Self {
            kind,
            strength,
            seed_policy: SeedPolicy::PerImage,
            seed: 0,
            dir: None,
        }
    }

    pub fn color_jitter(s: f64) -> Self {
        Self::new(TransformKind::ColorJitter, s)
    }

    pub fn gaussian_noise(std: f64) -> Self {
        Self::new(TransformKind::GaussianNoise, std)
    }

    pub fn gaussian_blur(radius: f64) -> Self {
        Self::new(TransformKind::GaussianBlur, radius)
    }

    pub fn resize_corrupt(side: usize) -> Self {
        Self::new(TransformKind::ResizeCorrupt, side as f64)
    }

    pub fn pixel_shuffle() -> Self {
        Self::new(TransformKind::PixelShuffle, 0.0)
    }

    pub fn external_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            ..Self::new(TransformKind::ExternalDir, 0.0)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Short stable label, e.g. `gaussian_noise(0.2)`.
    pub fn label(&self) -> String {
        match self.kind {
            TransformKind::None | TransformKind::PixelShuffle => self.kind.as_str().to_string(),
            TransformKind::ExternalDir => format!(
                "external_dir({})",
                self.dir
                    .as_deref()
                    .and_then(Path::file_name)
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            ),
            TransformKind::ResizeCorrupt => format!("resize_corrupt({})", self.strength as usize),
            _ => format!("{}({})", self.kind.as_str(), self.strength),
        }
    }

    /// Checks the strength against the supported range of each kind: the
    /// tested grid plus moderate extrapolation.
    pub fn validate(&self) -> Result<()> {
        let s = self.strength;
        let bad = |range: &str| {
            Err(Error::config(
                "strength",
                format!("{} strength {s} outside {range}", self.kind.as_str()),
            ))
        };
        if !s.is_finite() {
            return bad("finite values");
        }
        match self.kind {
            TransformKind::None | TransformKind::PixelShuffle => Ok(()),
            TransformKind::ColorJitter if !(0.0..=2.5).contains(&s) => bad("[0, 2.5]"),
            TransformKind::GaussianNoise if !(0.0..=0.5).contains(&s) => bad("[0, 0.5]"),
            TransformKind::GaussianBlur if !(0.0..=10.0).contains(&s) => bad("[0, 10]"),
            TransformKind::ResizeCorrupt
                if !(4.0..=imageio::CANONICAL_SIDE as f64).contains(&s) || s.fract() != 0.0 =>
            {
                bad("integers in [4, 224]")
            }
            TransformKind::ExternalDir if self.dir.is_none() => {
                Err(Error::config("dir", "external_dir needs a directory"))
            }
            _ => Ok(()),
        }
    }
}

/// The corruption grid: uncorrupted reference plus two strengths per kind.
pub fn corruption_grid() -> Vec<TransformSpec> {
    vec![
        TransformSpec::none(),
        TransformSpec::color_jitter(1.0),
        TransformSpec::color_jitter(2.0),
        TransformSpec::gaussian_noise(0.2),
        TransformSpec::gaussian_noise(0.3),
        TransformSpec::gaussian_blur(3.0),
        TransformSpec::gaussian_blur(5.0),
        TransformSpec::resize_corrupt(64),
        TransformSpec::resize_corrupt(32),
    ]
}

/// Identifies one image for keyed randomness and external lookups.
#[derive(Debug, Clone, Copy)]
pub struct ImageRef<'a> {
    pub id: &'a str,
    /// Path relative to the corpus root.
    pub rel_path: &'a Path,
}

pub fn apply_transform(spec: &TransformSpec, img: &FloatImage, image: ImageRef<'_>) -> Result<FloatImage> {
    spec.validate()?;
    let id_part = match spec.seed_policy {
        SeedPolicy::PerImage => image.id,
        SeedPolicy::Shared => "",
    };
    let mut rng = seed::keyed_rng(spec.seed, key!["transform", spec.kind.as_str(), id_part]);
    let out = match spec.kind {
        TransformKind::None => img.clone(),
        TransformKind::ColorJitter => {
            let s = spec.strength as f32;
            let lo = (1.0 - 0.4 * s).max(0.0);
            let hi = 1.0 + 0.4 * s;
            let b = sample_range(&mut rng, lo, hi);
            let c = sample_range(&mut rng, lo, hi);
            let h = sample_range(&mut rng, -0.1 * s, 0.1 * s);
            color_jitter(img, b, c, h)
        }
        TransformKind::GaussianNoise => {
            let mut out = img.clone();
            if spec.strength > 0.0 {
                let normal = Normal::new(0.0f32, spec.strength as f32).expect("validated std");
                for v in out.data_mut() {
                    *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            out
        }
        TransformKind::GaussianBlur => gaussian_blur(img, spec.strength / 2.0),
        TransformKind::ResizeCorrupt => {
            let n = spec.strength as usize;
            let small = imageio::resize_bilinear(img, n, n);
            imageio::resize_bilinear(&small, img.width(), img.height())
        }
        TransformKind::PixelShuffle => {
            let n = img.width() * img.height();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let src = img.data();
            let mut data = vec![0.0; src.len()];
            for (dst, &from) in perm.iter().enumerate() {
                data[dst * 3..dst * 3 + 3].copy_from_slice(&src[from * 3..from * 3 + 3]);
            }
            FloatImage::new(img.width(), img.height(), data)?
        }
        TransformKind::ExternalDir => {
            let dir = spec.dir.as_ref().expect("validated");
            let path = dir.join(image.rel_path);
            if !path.exists() {
                return Err(Error::MissingExternal {
                    id: image.id.to_string(),
                    path,
                });
            }
            let ext = imageio::read_image(&path)?.to_float();
            imageio::resize_bilinear(&ext, img.width(), img.height())
        }
    };
    Ok(out)
}

fn sample_range(rng: &mut impl Rng, lo: f32, hi: f32) -> f32 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Brightness scale, contrast about the mean luminance, then hue rotation;
/// clamped after each step.
pub fn color_jitter(img: &FloatImage, brightness: f32, contrast: f32, hue_turns: f32) -> FloatImage {
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }
    let n = (out.width() * out.height()) as f64;
    let mean = out
        .data()
        .chunks_exact(3)
        .map(|p| f64::from(luma(p)))
        .sum::<f64>()
        / n;
    let mean = mean as f32;
    for v in out.data_mut() {
        *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
    }
    for px in out.data_mut().chunks_exact_mut(3) {
        let rotated = hue_rotate([px[0], px[1], px[2]], hue_turns);
        for c in 0..3 {
            px[c] = rotated[c].clamp(0.0, 1.0);
        }
    }
    out
}

#[inline]
pub fn luma(px: &[f32]) -> f32 {
    LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]
}

/// Rotates chroma in the YIQ plane by `turns` of a full circle. Luminance
/// is untouched (before any clamping).
pub fn hue_rotate(rgb: [f32; 3], turns: f32) -> [f32; 3] {
    if turns == 0.0 {
        return rgb;
    }
    let [r, g, b] = rgb;
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let i = 0.595_716 * r - 0.274_453 * g - 0.321_263 * b;
    let q = 0.211_456 * r - 0.522_591 * g + 0.311_135 * b;
    let (s, c) = (turns * std::f32::consts::TAU).sin_cos();
    let i2 = i * c - q * s;
    let q2 = i * s + q * c;
    [
        y + 0.956_3 * i2 + 0.621_0 * q2,
        y - 0.272_1 * i2 - 0.647_4 * q2,
        y - 1.107_0 * i2 + 1.704_6 * q2,
    ]
}

/// Normalized 1-D Gaussian kernel with std `sigma`, truncated at `±ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| (w / total) as f32).collect()
}

/// Separable isotropic Gaussian blur with edge-replicate padding.
pub fn gaussian_blur(img: &FloatImage, sigma: f64) -> FloatImage {
    let kernel = gaussian_kernel(sigma);
    if kernel.len() == 1 {
        return img.clone();
    }
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (img.width(), img.height());
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let src = img.data();
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (k, &wt) in kernel.iter().enumerate() {
                let sx = clampi(x as isize + k as isize - r, w);
                let i = (y * w + sx) * 3;
                acc[0] += wt * src[i];
                acc[1] += wt * src[i + 1];
                acc[2] += wt * src[i + 2];
            }
            tmp[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&acc);
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (k, &wt) in kernel.iter().enumerate() {
                let sy = clampi(y as isize + k as isize - r, h);
                let i = (sy * w + x) * 3;
                acc[0] += wt * tmp[i];
                acc[1] += wt * tmp[i + 1];
                acc[2] += wt * tmp[i + 2];
            }
            out[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&acc);
        }
    }
    FloatImage::new(w, h, out).expect("same dims")
}

/// Binarized luminance gradient magnitude: central differences with
/// replicated borders, normalized by the maximum, thresholded at 0.1.
/// Returned with the map repeated in all three channels.
pub fn edge_proxy(img: &FloatImage) -> FloatImage {
    let (w, h) = (img.width(), img.height());
    let lum: Vec<f32> = img.data().chunks_exact(3).map(luma).collect();
    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        lum[yc * w + xc]
    };
    let mut mag = vec![0.0f32; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(x + 1, y) - at(x - 1, y)) * 0.5;
            let gy = (at(x, y + 1) - at(x, y - 1)) * 0.5;
            mag[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = mag.iter().cloned().fold(0.0f32, f32::max);
    let mut data = Vec::with_capacity(w * h * 3);
    for &m in &mag {
        let v = if max > 0.0 && m / max > EDGE_THRESHOLD { 1.0 } else { 0.0 };
        data.extend_from_slice(&[v, v, v]);
    }
    FloatImage::new(w, h, data).expect("same dims")
}
