//! Procedural generators with independently parameterized style and content.
//!
//! A [`GeneratorSignature`] plays the role of one generator "model": palette,
//! texture grain, a motif overlay, background habits and sharpness. A
//! [`ContentSpec`] picks the scene: one of ten disjoint scene families
//! (the semantic domain), a prompt id that seeds the layout, and a language id.
//!
//! Rendering order: layout (content + seed only), palette lookup through the
//! domain's foreground window with per-image hue jitter, value-noise texture, motif overlay, optional language artifact,
//! final Gaussian softening.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ManifestRow;
use crate::error::{Error, Result};
use crate::imageio::{self, FloatImage, ImageBuffer};
use crate::key;
use crate::seed;
use crate::transforms::{gaussian_blur, hue_rotate};

pub const DOMAIN_NAMES: [&str; 10] = [
    "animals",
    "vehicles",
    "arts_and_works",
    "landscapes",
    "food_and_drinks",
    "clothing",
    "interior_spaces",
    "household_items",
    "buildings",
    "people",
];

/// Prompt languages, indexed by `language_id`.
pub const LANGUAGE_CODES: [&str; 5] = ["en", "es", "ja", "tr", "zh"];

pub const MAX_SIGNATURES: usize = 16;

/// Bumped whenever rendering output changes for some input, so cached corpora
/// can tell they are stale.
pub const RENDER_REVISION: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotifKind {
    None,
    CornerGlyph,
    BorderFrame,
    Vignette,
}

/// How a signature reacts to specific prompt languages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode", content = "languages")]
pub enum LanguageEffect {
    #[default]
    None,
    /// Ignore the prompt for these languages and draw the signature's fixed
    /// abstract blob scene.
    OverrideScene(Vec<u32>),
    /// Draw a fixed tower figure over the scene for these languages.
    OverlayFigure(Vec<u32>),
}

impl LanguageEffect {
    pub fn languages(&self) -> &[u32] {
        match self {
            LanguageEffect::None => &[],
            LanguageEffect::OverrideScene(l) | LanguageEffect::OverlayFigure(l) => l,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSignature {
    pub name: String,
    /// Anchor colors; index 0 is the background color.
    pub palette: Vec<[f32; 3]>,
    /// Std of the per-image chroma rotation, in turns.
    pub palette_jitter: f32,
    /// Value-noise lattice spacing in pixels.
    pub noise_grain: f32,
    /// Texture amplitude in `[0, 0.5]`.
    pub noise_amp: f32,
    pub motif_kind: MotifKind,
    pub motif_strength: f32,
    /// Probability that the background is drawn flat and untextured.
    pub background_emptiness: f32,
    /// Blur std in pixels applied at the end of rendering.
    pub sharpness: f32,
    #[serde(default)]
    pub language_effect: LanguageEffect,
}

impl GeneratorSignature {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, m: &str| Err(Error::config(format!("signature.{}.{f}", self.name), m));
        if self.palette.len() < 2 {
            return field("palette", "needs at least 2 anchor colors");
        }
        if self
            .palette
            .iter()
            .flatten()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return field("palette", "anchor channels must be in [0, 1]");
        }
        if !(0.0..=0.5).contains(&self.noise_amp) {
            return field("noise_amp", "must be in [0, 0.5]");
        }
        if !(1.0..).contains(&self.noise_grain) {
            return field("noise_grain", "must be >= 1 pixel");
        }
        if !(0.0..=1.0).contains(&self.motif_strength) {
            return field("motif_strength", "must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.background_emptiness) {
            return field("background_emptiness", "must be in [0, 1]");
        }
        if !(0.0..).contains(&self.palette_jitter) || !(0.0..).contains(&self.sharpness) {
            return field("palette_jitter", "jitter and sharpness must be non-negative");
        }
        if self
            .language_effect
            .languages()
            .iter()
            .any(|&l| l as usize >= LANGUAGE_CODES.len())
        {
            return field("language_effect", "language id out of range");
        }
        Ok(())
    }

    /// Distinctness rule: palettes differ by L2 > 0.05 (or in size), motif
    /// kinds differ, or grains differ by a ratio above 1.5.
    pub fn is_distinct_from(&self, other: &GeneratorSignature) -> bool {
        let palette_apart = self.palette.len() != other.palette.len() || {
            let d2: f32 = self
                .palette
                .iter()
                .flatten()
                .zip(other.palette.iter().flatten())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2.sqrt() > 0.05
        };
        let grain_ratio = (self.noise_grain / other.noise_grain).max(other.noise_grain / self.noise_grain);
        palette_apart || self.motif_kind != other.motif_kind || grain_ratio > 1.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentSpec {
    pub domain_id: u32,
    pub prompt_id: u64,
    pub language_id: u32,
}

/// Shape primitives available to scene grammars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Primitive {
    Ellipse,
    Circle,
    Rect,
    Triangle,
    Ridge,
    Ring,
    Stripe,
    Line,
    Dot,
    SkyGradient,
    TileGrid,
}

/// A scene grammar: the primitive set one domain draws from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneFamily {
    pub domain_id: Option<u32>,
    pub name: &'static str,
    pub primitives: &'static [Primitive],
}

const GRAMMARS: [&[Primitive]; 10] = {
    use Primitive::*;
    [
        &[Ellipse, Circle, Line],       // animals: body, head, legs
        &[Rect, Circle, Stripe],        // vehicles: body, wheels, road
        &[TileGrid, Triangle, Dot],     // arts and works: mosaic
        &[SkyGradient, Ridge, Circle],  // landscapes: sky, hills, sun
        &[Ring, Circle, Dot],           // food and drinks: plates
        &[Triangle, Rect, Line],        // clothing: garments, straps
        &[SkyGradient, Rect, Line],     // interior spaces: wall, furniture, perspective
        &[Rect, Ellipse, Stripe],       // household items: table, objects
        &[Rect, TileGrid, SkyGradient], // buildings: towers, windows, sky
        &[Circle, Rect, Ellipse],       // people: heads, torsos
    ]
};

impl SceneFamily {
    pub const EMPTY: SceneFamily = SceneFamily {
        domain_id: None,
        name: "empty",
        primitives: &[],
    };

    pub fn for_domain(domain_id: u32) -> Result<SceneFamily> {
        let idx = domain_id as usize;
        if idx >= GRAMMARS.len() {
            return Err(Error::config(
                "domain_id",
                format!("{domain_id} outside the {} scene families", GRAMMARS.len()),
            ));
        }
        Ok(SceneFamily {
            domain_id: Some(domain_id),
            name: DOMAIN_NAMES[idx],
            primitives: GRAMMARS[idx],
        })
    }

    /// Maps a foreground draw `u` in `[0, 1)` into this family's half-width
    /// window of the palette's foreground anchors. Each domain favors its own
    /// stretch of a model's colors; the empty family keeps the full range.
    pub fn fg_window(&self, u: f32) -> f32 {
        match self.domain_id {
            None => u,
            Some(d) => {
                let offset = (d as f32 * 0.618_034).fract();
                (offset + 0.5 * u).fract()
            }
        }
    }

    pub fn all() -> Vec<SceneFamily> {
        (0..GRAMMARS.len() as u32)
            .map(|d| SceneFamily::for_domain(d).expect("in range"))
            .collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn sig(
    name: &str,
    palette: &[[f32; 3]],
    palette_jitter: f32,
    noise_grain: f32,
    noise_amp: f32,
    motif_kind: MotifKind,
    motif_strength: f32,
    background_emptiness: f32,
    sharpness: f32,
    language_effect: LanguageEffect,
) -> GeneratorSignature {
    GeneratorSignature {
        name: name.to_string(),
        palette: palette.to_vec(),
        palette_jitter,
        noise_grain,
        noise_amp,
        motif_kind,
        motif_strength,
        background_emptiness,
        sharpness,
        language_effect,
    }
}

const DEFAULT_PALETTES: [[[f32; 3]; 4]; 5] = [
    [[0.80, 0.62, 0.42], [0.75, 0.35, 0.20], [0.55, 0.25, 0.15], [0.85, 0.70, 0.30]],
    [[0.30, 0.45, 0.65], [0.20, 0.30, 0.55], [0.55, 0.70, 0.80], [0.15, 0.20, 0.35]],
    [[0.35, 0.55, 0.35], [0.55, 0.35, 0.60], [0.25, 0.40, 0.20], [0.70, 0.75, 0.45]],
    [[0.82, 0.80, 0.78], [0.60, 0.65, 0.75], [0.75, 0.60, 0.65], [0.55, 0.60, 0.55]],
    [[0.20, 0.55, 0.55], [0.80, 0.20, 0.25], [0.85, 0.75, 0.20], [0.15, 0.25, 0.30]],
];

fn wheel_palette(i: usize) -> [[f32; 3]; 4] {
    // Entries past the hand-tuned five: hue-wheel palettes, golden-angle spaced.
    let base = (i as f32 * 0.618_034).fract();
    let mut out = [[0.0; 3]; 4];
    for (k, slot) in out.iter_mut().enumerate() {
        let h = (base + k as f32 * 0.19).fract();
        let v = 0.35 + 0.12 * (k as f32);
        let grey = [v, v, v];
        let tinted = hue_rotate([v + 0.15, v - 0.05, v - 0.1], h);
        for c in 0..3 {
            slot[c] = (0.6 * tinted[c] + 0.4 * grey[c]).clamp(0.1, 0.9);
        }
    }
    out
}

/// The frozen signature table. Entries 0-4 are hand-tuned; entry 3 ignores
/// ja/tr prompts and entry 4 stamps a figure on ja/zh images.
pub fn default_signatures(n: usize) -> Result<Vec<GeneratorSignature>> {
    if n == 0 || n > MAX_SIGNATURES {
        return Err(Error::config(
            "signatures",
            format!("count {n} outside [1, {MAX_SIGNATURES}]"),
        ));
    }
    use MotifKind::*;
    let p = &DEFAULT_PALETTES;
    let mut table = vec![
        sig("gen00", &p[0], 0.02, 12.0, 0.06, None, 0.0, 0.3, 0.0, LanguageEffect::None),
        sig("gen01", &p[1], 0.02, 3.0, 0.07, CornerGlyph, 0.9, 0.2, 0.0, LanguageEffect::None),
        sig("gen02", &p[2], 0.03, 6.0, 0.05, BorderFrame, 0.8, 0.2, 0.6, LanguageEffect::None),
        sig(
            "gen03",
            &p[3],
            0.02,
            5.0,
            0.03,
            Vignette,
            0.6,
            0.85,
            0.3,
            LanguageEffect::OverrideScene(vec![2, 3]),
        ),
        sig(
            "gen04",
            &p[4],
            0.03,
            20.0,
            0.08,
            None,
            0.0,
            0.4,
            1.2,
            LanguageEffect::OverlayFigure(vec![2, 4]),
        ),
    ];
    let motifs = [CornerGlyph, BorderFrame, Vignette, None];
    for i in 5..MAX_SIGNATURES {
        let name = format!("gen{i:02}");
        table.push(sig(
            &name,
            &wheel_palette(i),
            0.02,
            [3.0, 8.0, 20.0][i % 3],
            0.05,
            motifs[i % 4],
            0.7,
            0.25,
            [0.0, 0.5, 1.0][i % 3],
            LanguageEffect::None,
        ));
    }
    table.truncate(n);
    Ok(table)
}

/// Signatures that differ only in palette (A-style dissociation probe).
pub fn palette_only_signatures(n: usize) -> Result<Vec<GeneratorSignature>> {
    let base = default_signatures(MAX_SIGNATURES)?;
    check_count(n)?;
    Ok((0..n)
        .map(|i| {
            let palette = if i < DEFAULT_PALETTES.len() {
                DEFAULT_PALETTES[i].to_vec()
            } else {
                base[i].palette.clone()
            };
            GeneratorSignature {
                name: format!("pal{i:02}"),
                palette,
                ..sig("", &DEFAULT_PALETTES[0], 0.02, 8.0, 0.05, MotifKind::None, 0.0, 0.3, 0.5, LanguageEffect::None)
            }
        })
        .collect())
}

/// Signatures sharing one palette and differing only in texture grain, so the
/// per-pixel color distribution is nearly identical across them.
pub fn structure_only_signatures(n: usize) -> Result<Vec<GeneratorSignature>> {
    check_count(n)?;
    Ok((0..n)
        .map(|i| GeneratorSignature {
            name: format!("str{i:02}"),
            noise_grain: 4.0 * 1.6f32.powi(i as i32),
            ..sig("", &DEFAULT_PALETTES[0], 0.0, 4.0, 0.10, MotifKind::None, 0.0, 0.0, 0.0, LanguageEffect::None)
        })
        .collect())
}

/// `n` copies of the first default signature under distinct names.
pub fn identical_signatures(n: usize) -> Result<Vec<GeneratorSignature>> {
    check_count(n)?;
    let base = default_signatures(1)?.remove(0);
    Ok((0..n)
        .map(|i| GeneratorSignature {
            name: format!("same{i:02}"),
            ..base.clone()
        })
        .collect())
}

fn check_count(n: usize) -> Result<()> {
    if n == 0 || n > MAX_SIGNATURES {
        return Err(Error::config(
            "signatures",
            format!("count {n} outside [1, {MAX_SIGNATURES}]"),
        ));
    }
    Ok(())
}

/// Named signature tables selectable from configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SignatureSet {
    #[default]
    Default,
    PaletteOnly,
    StructureOnly,
    Identical,
}

impl SignatureSet {
    pub fn build(self, n: usize) -> Result<Vec<GeneratorSignature>> {
        match self {
            SignatureSet::Default => default_signatures(n),
            SignatureSet::PaletteOnly => palette_only_signatures(n),
            SignatureSet::StructureOnly => structure_only_signatures(n),
            SignatureSet::Identical => identical_signatures(n),
        }
    }
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

/// Palette reference resolved once the signature is known: `Fg(u)` maps to
/// anchor `1 + floor(w(u) * (K - 1))`, where `w` is the scene family's
/// foreground window (see [`SceneFamily::fg_window`]).
#[derive(Debug, Clone, Copy)]
enum Slot {
    Background,
    Fg(f32),
}

#[derive(Debug, Clone, Copy)]
enum Geometry {
    Ellipse { cx: f32, cy: f32, rx: f32, ry: f32, angle: f32 },
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Triangle { p: [(f32, f32); 3] },
    Ridge { base: f32, amp: f32, freq: f32, phase: f32 },
    Ring { cx: f32, cy: f32, r_in: f32, r_out: f32 },
    Line { x0: f32, y0: f32, x1: f32, y1: f32, half_width: f32 },
    Tiles { x0: f32, y0: f32, x1: f32, y1: f32, nx: u32, ny: u32, gap: f32 },
}

#[derive(Debug, Clone, Copy)]
enum Fill {
    Solid(Slot),
    /// Vertical blend from `top` at `y0` to `bottom` at `y1`.
    Vertical { top: Slot, bottom: Slot, y0: f32, y1: f32 },
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    geometry: Geometry,
    fill: Fill,
}

impl Geometry {
    fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Geometry::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let dx = x - cx;
                let dy = y - cy;
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Geometry::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Geometry::Triangle { p } => {
                let edge = |a: (f32, f32), b: (f32, f32)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let d0 = edge(p[0], p[1]);
                let d1 = edge(p[1], p[2]);
                let d2 = edge(p[2], p[0]);
                let neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                !(neg && pos)
            }
            Geometry::Ridge { base, amp, freq, phase } => {
                y >= base + amp * (freq * x * std::f32::consts::TAU + phase).sin()
            }
            Geometry::Ring { cx, cy, r_in, r_out } => {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                d >= r_in && d <= r_out
            }
            Geometry::Line { x0, y0, x1, y1, half_width } => {
                let (dx, dy) = (x1 - x0, y1 - y0);
                let len2 = dx * dx + dy * dy;
                let t = if len2 > 0.0 {
                    (((x - x0) * dx + (y - y0) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (px, py) = (x0 + t * dx, y0 + t * dy);
                (x - px).powi(2) + (y - py).powi(2) <= half_width * half_width
            }
            Geometry::Tiles { x0, y0, x1, y1, nx, ny, gap } => {
                if x < x0 || x > x1 || y < y0 || y > y1 {
                    return false;
                }
                let fx = (x - x0) / (x1 - x0) * nx as f32;
                let fy = (y - y0) / (y1 - y0) * ny as f32;
                fx.fract() > gap && fy.fract() > gap
            }
        }
    }
}

struct LayoutRng(ChaCha8Rng);

impl LayoutRng {
    fn u(&mut self) -> f32 {
        self.0.random::<f32>()
    }
    fn range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.u()
    }
    fn count(&mut self, lo: u32, hi: u32) -> u32 {
        self.0.random_range(lo..=hi)
    }
    fn fg(&mut self) -> Fill {
        Fill::Solid(Slot::Fg(self.u()))
    }
}

fn primitive_shapes(prim: Primitive, rng: &mut LayoutRng) -> Vec<Shape> {
    let solid = |geometry: Geometry, fill: Fill| Shape { geometry, fill };
    let mut shapes = Vec::new();
    match prim {
        Primitive::SkyGradient => {
            let y1 = rng.range(0.45, 0.7);
            shapes.push(solid(
                Geometry::Rect { x0: 0.0, y0: 0.0, x1: 1.0, y1 },
                Fill::Vertical {
                    top: Slot::Fg(rng.u()),
                    bottom: Slot::Background,
                    y0: 0.0,
                    y1,
                },
            ));
        }
        Primitive::Ridge => {
            for _ in 0..rng.count(1, 3) {
                let g = Geometry::Ridge {
                    base: rng.range(0.5, 0.8),
                    amp: rng.range(0.03, 0.12),
                    freq: rng.range(0.5, 2.5),
                    phase: rng.range(0.0, std::f32::consts::TAU),
                };
                let fill = rng.fg();
                shapes.push(solid(g, fill));
            }
        }
        Primitive::TileGrid => {
            let x0 = rng.range(0.05, 0.4);
            let y0 = rng.range(0.05, 0.4);
            let g = Geometry::Tiles {
                x0,
                y0,
                x1: x0 + rng.range(0.3, 0.55),
                y1: y0 + rng.range(0.3, 0.55),
                nx: rng.count(2, 6),
                ny: rng.count(2, 6),
                gap: rng.range(0.1, 0.3),
            };
            let fill = rng.fg();
            shapes.push(solid(g, fill));
        }
        Primitive::Rect => {
            for _ in 0..rng.count(1, 4) {
                let x0 = rng.range(0.0, 0.75);
                let y0 = rng.range(0.1, 0.75);
                let g = Geometry::Rect {
                    x0,
                    y0,
                    x1: x0 + rng.range(0.1, 0.4),
                    y1: y0 + rng.range(0.1, 0.45),
                };
                let fill = rng.fg();
                shapes.push(solid(g, fill));
            }
        }
        Primitive::Ellipse => {
            for _ in 0..rng.count(1, 3) {
                let g = Geometry::Ellipse {
                    cx: rng.range(0.2, 0.8),
                    cy: rng.range(0.3, 0.8),
                    rx: rng.range(0.08, 0.25),
                    ry: rng.range(0.05, 0.18),
                    angle: rng.range(-0.6, 0.6),
                };
                let fill = rng.fg();
                shapes.push(solid(g, fill));
            }
        }
        Primitive::Circle => {
            for _ in 0..rng.count(1, 3) {
                let r = rng.range(0.05, 0.15);
                let g = Geometry::Ellipse {
                    cx: rng.range(0.15, 0.85),
                    cy: rng.range(0.15, 0.85),
                    rx: r,
                    ry: r,
                    angle: 0.0,
                };
                let fill = rng.fg();
                shapes.push(solid(g, fill));
            }
        }
        Primitive::Triangle => {
            for _ in 0..rng.count(1, 3) {
                let cx = rng.range(0.2, 0.8);
                let cy = rng.range(0.25, 0.75);
                let s = rng.range(0.1, 0.3);
                let g = Geometry::Triangle {
                    p: [
                        (cx, cy - s),
                        (cx - s * rng.range(0.6, 1.2), cy + s * 0.8),
                        (cx + s * rng.range(0.6, 1.2), cy + s * 0.8),
                    ],
                };
                let fill = rng.fg();
                shapes.push(solid(g, fill));
            }
        }
        Primitive::Ring => {
            for _ in 0..rng.count(1, 2) {
                let r_out = rng.range(0.15, 0.35);
                let g = Geometry::Ring {
                    cx: rng.range(0.3, 0.7),
                    cy: rng.range(0.3, 0.7),
                    r_in: r_out * rng.range(0.55, 0.85),
                    r_out,
                };
                let fill = rng.fg();
                shapes.push(solid(g, fill));
            }
        }
        Primitive::Stripe => {
            let y0 = rng.range(0.6, 0.85);
            let g = Geometry::Rect {
                x0: 0.0,
                y0,
                x1: 1.0,
                y1: y0 + rng.range(0.05, 0.15),
            };
            let fill = rng.fg();
            shapes.push(solid(g, fill));
        }
        Primitive::Line => {
            for _ in 0..rng.count(2, 4) {
                let g = Geometry::Line {
                    x0: rng.range(0.05, 0.95),
                    y0: rng.range(0.05, 0.95),
                    x1: rng.range(0.05, 0.95),
                    y1: rng.range(0.05, 0.95),
                    half_width: rng.range(0.01, 0.03),
                };
                let fill = rng.fg();
                shapes.push(solid(g, fill));
            }
        }
        Primitive::Dot => {
            for _ in 0..rng.count(3, 8) {
                let r = rng.range(0.015, 0.04);
                let g = Geometry::Ellipse {
                    cx: rng.range(0.05, 0.95),
                    cy: rng.range(0.05, 0.95),
                    rx: r,
                    ry: r,
                    angle: 0.0,
                };
                let fill = rng.fg();
                shapes.push(solid(g, fill));
            }
        }
    }
    shapes
}

fn scene_layout(family: &SceneFamily, rng: &mut LayoutRng) -> Vec<Shape> {
    let mut shapes = Vec::new();
    for &prim in family.primitives {
        shapes.extend(primitive_shapes(prim, rng));
    }
    shapes
}

fn blob_layout(rng: &mut LayoutRng) -> Vec<Shape> {
    (0..rng.count(4, 7))
        .map(|_| Shape {
            geometry: Geometry::Ellipse {
                cx: rng.range(0.2, 0.8),
                cy: rng.range(0.2, 0.8),
                rx: rng.range(0.12, 0.3),
                ry: rng.range(0.12, 0.3),
                angle: rng.range(-1.5, 1.5),
            },
            fill: rng.fg(),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Seeded lattice value noise in `[0, 1]` with smoothstep interpolation.
pub fn value_noise(key: u64, x: f32, y: f32, grain: f32) -> f32 {
    let fx = x / grain;
    let fy = y / grain;
    let ix = fx.floor();
    let iy = fy.floor();
    let tx = smoothstep(fx - ix);
    let ty = smoothstep(fy - iy);
    let lattice = |i: f32, j: f32| {
        let c = ((i as i64 as u64) << 32) ^ (j as i64 as u64 & 0xffff_ffff);
        seed::unit_from(key, c) as f32
    };
    let v00 = lattice(ix, iy);
    let v10 = lattice(ix + 1.0, iy);
    let v01 = lattice(ix, iy + 1.0);
    let v11 = lattice(ix + 1.0, iy + 1.0);
    let a = v00 + (v10 - v00) * tx;
    let b = v01 + (v11 - v01) * tx;
    a + (b - a) * ty
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn scale3(a: [f32; 3], s: f32) -> [f32; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Render one image. Layout depends only on `(content, seed)`; everything
/// else on the signature plus a style stream derived from `seed`.
pub fn render(sig: &GeneratorSignature, content: ContentSpec, seed: u64, size: usize) -> Result<ImageBuffer> {
    Ok(render_float(sig, content, seed, size)?.to_buffer())
}

/// [`render`] before 8-bit quantization.
pub fn render_float(sig: &GeneratorSignature, content: ContentSpec, seed: u64, size: usize) -> Result<FloatImage> {
    let family = SceneFamily::for_domain(content.domain_id)?;
    render_family(sig, &family, content, seed, size)
}

/// Renders with an explicit scene family, before quantization.
pub fn render_family(
    sig: &GeneratorSignature,
    family: &SceneFamily,
    content: ContentSpec,
    seed: u64,
    size: usize,
) -> Result<FloatImage> {
    if size < 32 {
        return Err(Error::config("size", format!("render size {size} below 32")));
    }
    sig.validate()?;
    let lang = content.language_id;
    let mut layout_rng = LayoutRng(seed::keyed_rng(
        seed,
        key!["layout", u64::from(content.domain_id), content.prompt_id, u64::from(lang)],
    ));
    let overridden = matches!(&sig.language_effect, LanguageEffect::OverrideScene(l) if l.contains(&lang));
    let shapes = if overridden {
        // One scene per signature, whatever the prompt or image seed.
        let mut blob_rng = LayoutRng(seed::keyed_rng(0, key!["blob-scene", sig.name.as_str()]));
        blob_layout(&mut blob_rng)
    } else {
        scene_layout(family, &mut layout_rng)
    };

    let mut style_rng = seed::keyed_rng(seed, key!["style"]);
    let jitter = if sig.palette_jitter > 0.0 {
        Normal::new(0.0f32, sig.palette_jitter)
            .expect("validated")
            .sample(&mut style_rng)
    } else {
        0.0
    };
    let flat_background = style_rng.random::<f32>() < sig.background_emptiness;
    let noise_key: u64 = style_rng.random();
    let palette: Vec<[f32; 3]> = sig.palette.iter().map(|&c| hue_rotate(c, jitter)).collect();
    let k = palette.len();
    let color_of = |slot: Slot| match slot {
        Slot::Background => palette[0],
        Slot::Fg(u) => palette[(1 + (family.fg_window(u) * (k - 1) as f32) as usize).min(k - 1)],
    };

    let n = size as f32;
    let backdrop_lo = scale3(palette[0], 0.85);
    let mut img = FloatImage::filled(size, size, palette[0]);
    for py in 0..size {
        for px in 0..size {
            let x = (px as f32 + 0.5) / n;
            let y = (py as f32 + 0.5) / n;
            let mut color = if flat_background {
                palette[0]
            } else {
                lerp3(palette[0], backdrop_lo, y)
            };
            let mut foreground = false;
            for shape in &shapes {
                if shape.geometry.contains(x, y) {
                    foreground = true;
                    color = match shape.fill {
                        Fill::Solid(s) => color_of(s),
                        Fill::Vertical { top, bottom, y0, y1 } => {
                            let t = ((y - y0) / (y1 - y0)).clamp(0.0, 1.0);
                            lerp3(color_of(top), color_of(bottom), t)
                        }
                    };
                }
            }
            if sig.noise_amp > 0.0 && (foreground || !flat_background) {
                let v = value_noise(noise_key, px as f32, py as f32, sig.noise_grain);
                let d = sig.noise_amp * (2.0 * v - 1.0);
                color = [color[0] + d, color[1] + d, color[2] + d];
            }
            img.set_pixel(px, py, color);
        }
    }

    apply_motif(&mut img, sig, &palette);
    if matches!(&sig.language_effect, LanguageEffect::OverlayFigure(l) if l.contains(&lang)) {
        draw_figure(&mut img, palette[k - 1]);
    }
    img.clamp_unit();
    if sig.sharpness > 0.0 {
        img = gaussian_blur(&img, f64::from(sig.sharpness));
    }
    Ok(img)
}

fn apply_motif(img: &mut FloatImage, sig: &GeneratorSignature, palette: &[[f32; 3]]) {
    let size = img.width();
    let n = size as f32;
    let alpha = sig.motif_strength;
    if alpha <= 0.0 {
        return;
    }
    let k = palette.len();
    match sig.motif_kind {
        MotifKind::None => {}
        MotifKind::CornerGlyph => {
            // A small house: square body plus roof, bottom-left corner.
            let ink = scale3(palette[k - 1], 0.35);
            let body = Geometry::Rect { x0: 0.05, y0: 0.82, x1: 0.19, y1: 0.95 };
            let roof = Geometry::Triangle {
                p: [(0.12, 0.70), (0.03, 0.82), (0.21, 0.82)],
            };
            for py in 0..size {
                for px in 0..size {
                    let x = (px as f32 + 0.5) / n;
                    let y = (py as f32 + 0.5) / n;
                    if body.contains(x, y) || roof.contains(x, y) {
                        let c = img.pixel(px, py);
                        img.set_pixel(px, py, lerp3(c, ink, alpha));
                    }
                }
            }
        }
        MotifKind::BorderFrame => {
            let ink = scale3(palette[0], 0.3);
            let w = (size / 16).max(2);
            for py in 0..size {
                for px in 0..size {
                    if px < w || py < w || px >= size - w || py >= size - w {
                        let c = img.pixel(px, py);
                        img.set_pixel(px, py, lerp3(c, ink, alpha));
                    }
                }
            }
        }
        MotifKind::Vignette => {
            for py in 0..size {
                for px in 0..size {
                    let x = (px as f32 + 0.5) / n - 0.5;
                    let y = (py as f32 + 0.5) / n - 0.5;
                    let r2 = (x * x + y * y) / 0.5;
                    let c = img.pixel(px, py);
                    img.set_pixel(px, py, scale3(c, 1.0 - alpha * 0.7 * r2));
                }
            }
        }
    }
}

fn draw_figure(img: &mut FloatImage, ink: [f32; 3]) {
    let size = img.width();
    let n = size as f32;
    let shaft = Geometry::Rect { x0: 0.44, y0: 0.35, x1: 0.56, y1: 0.92 };
    let top = Geometry::Triangle {
        p: [(0.5, 0.12), (0.38, 0.36), (0.62, 0.36)],
    };
    let ink = lerp3(ink, [1.0, 1.0, 1.0], 0.3);
    for py in 0..size {
        for px in 0..size {
            let x = (px as f32 + 0.5) / n;
            let y = (py as f32 + 0.5) / n;
            if shaft.contains(x, y) || top.contains(x, y) {
                img.set_pixel(px, py, ink);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub domains: usize,
    pub languages: usize,
    pub per_cell: usize,
    pub size: usize,
    pub seed: u64,
}

/// Per-image seed: `seed ⊕ hash(model, domain, language, prompt_id)`.
pub fn image_seed(seed: u64, model: &str, domain: &str, language: &str, prompt_id: u64) -> u64 {
    seed::derive(seed, key![model, domain, language, prompt_id])
}

/// Writes `n_sig * D * L * per_cell` images under
/// `out_dir/<model>/<domain>/<language>/<prompt_id>.png` and a
/// `manifest.jsonl` at the root. Prompt ids are global (`d * per_cell + j`)
/// and shared by every model and language.
pub fn generate_corpus(signatures: &[GeneratorSignature], spec: &CorpusSpec, out_dir: &Path) -> Result<Vec<ManifestRow>> {
    if spec.per_cell == 0 {
        return Err(Error::config("per_cell", "must be at least 1"));
    }
    if spec.domains == 0 || spec.domains > DOMAIN_NAMES.len() {
        return Err(Error::config("domains", format!("must be in [1, {}]", DOMAIN_NAMES.len())));
    }
    if spec.languages == 0 || spec.languages > LANGUAGE_CODES.len() {
        return Err(Error::config(
            "languages",
            format!("must be in [1, {}]", LANGUAGE_CODES.len()),
        ));
    }
    let mut names = std::collections::BTreeSet::new();
    for s in signatures {
        s.validate()?;
        if !names.insert(s.name.as_str()) {
            return Err(Error::config("signatures", format!("duplicate name {}", s.name)));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut jobs = Vec::new();
    for sig in signatures {
        for d in 0..spec.domains {
            for l in 0..spec.languages {
                for j in 0..spec.per_cell {
                    jobs.push((sig, d as u32, l as u32, (d * spec.per_cell + j) as u64));
                }
            }
        }
    }
    let mut rows: Vec<ManifestRow> = jobs
        .par_iter()
        .map(|&(sig, d, l, prompt_id)| {
            let domain = DOMAIN_NAMES[d as usize];
            let language = LANGUAGE_CODES[l as usize];
            let seed = image_seed(spec.seed, &sig.name, domain, language, prompt_id);
            let content = ContentSpec {
                domain_id: d,
                prompt_id,
                language_id: l,
            };
            let img = render(sig, content, seed, spec.size)?;
            let id = format!("{}/{domain}/{language}/{prompt_id}", sig.name);
            let rel = format!("{id}.png");
            imageio::write_image(&out_dir.join(&rel), &img)?;
            Ok(ManifestRow::new(id, rel, &sig.name, Some(domain), Some(language), prompt_id))
        })
        .collect::<Result<_>>()?;
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    crate::dataset::write_manifest(&out_dir.join("manifest.jsonl"), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::edge_proxy;

    fn content(d: u32, p: u64) -> ContentSpec {
        ContentSpec {
            domain_id: d,
            prompt_id: p,
            language_id: 0,
        }
    }

    #[test]
    fn default_table_properties() {
        let five = default_signatures(5).unwrap();
        assert_eq!(five.len(), 5);
        for i in 0..5 {
            for j in i + 1..5 {
                assert!(five[i].is_distinct_from(&five[j]), "{i} vs {j}");
            }
        }
        assert_eq!(default_signatures(1).unwrap()[0], five[0]);
        assert_eq!(default_signatures(5).unwrap(), five);
        let all = default_signatures(16).unwrap();
        for i in 0..16 {
            all[i].validate().unwrap();
            for j in i + 1..16 {
                assert!(all[i].is_distinct_from(&all[j]), "{i} vs {j}");
            }
        }
        assert!(default_signatures(0).is_err());
        assert!(default_signatures(17).is_err());
    }

    #[test]
    fn language_effects_on_table() {
        let s = default_signatures(5).unwrap();
        assert!(s[..3].iter().all(|g| g.language_effect == LanguageEffect::None));
        assert_eq!(s[3].language_effect, LanguageEffect::OverrideScene(vec![2, 3]));
        assert_eq!(s[4].language_effect, LanguageEffect::OverlayFigure(vec![2, 4]));
    }

    #[test]
    fn grammars_pairwise_not_subsets() {
        let fams = SceneFamily::all();
        assert_eq!(fams.len(), 10);
        for a in &fams {
            for b in &fams {
                if a.domain_id == b.domain_id {
                    continue;
                }
                let subset = a.primitives.iter().all(|p| b.primitives.contains(p));
                assert!(!subset, "{} is a subset of {}", a.name, b.name);
            }
        }
    }

    #[test]
    fn render_is_deterministic() {
        let s = &default_signatures(3).unwrap()[2];
        let a = render(s, content(4, 17), 99, 64).unwrap();
        let b = render(s, content(4, 17), 99, 64).unwrap();
        assert_eq!(a, b);
        let c = render(s, content(4, 17), 100, 64).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_scene_is_flat() {
        let s = GeneratorSignature {
            background_emptiness: 1.0,
            motif_kind: MotifKind::None,
            ..default_signatures(1).unwrap().remove(0)
        };
        let img = render_family(&s, &SceneFamily::EMPTY, content(0, 0), 5, 48).unwrap();
        let first = img.pixel(0, 0);
        assert!(img.data().chunks(3).all(|p| p == first));
    }

    #[test]
    fn render_rejects_small_size() {
        let s = &default_signatures(1).unwrap()[0];
        assert!(render(s, content(0, 0), 0, 31).is_err());
        assert!(render(s, content(10, 0), 0, 64).is_err());
    }

    /// Shifts an anchor along a direction orthogonal to the luma weights.
    fn luma_matched(c: [f32; 3], amount: f32) -> [f32; 3] {
        let dir = [0.587f32, -0.299, 0.0];
        [c[0] + amount * dir[0], c[1] + amount * dir[1], c[2]]
    }

    #[test]
    fn palette_swap_keeps_edges_changes_means() {
        let base = default_signatures(5).unwrap();
        let mut checked = 0;
        for (i, s) in base.iter().enumerate() {
            let sharp = GeneratorSignature { sharpness: 0.0, ..s.clone() };
            let swapped = GeneratorSignature {
                palette: sharp.palette.iter().map(|&c| luma_matched(c, 0.15)).collect(),
                ..sharp.clone()
            };
            for p in 0..4u64 {
                let c = content((i as u32 + p as u32) % 10, p);
                let a = render_float(&sharp, c, 1000 + p, 64).unwrap();
                let b = render_float(&swapped, c, 1000 + p, 64).unwrap();
                let mean = |im: &FloatImage, ch: usize| im.data()[ch..].iter().step_by(3).map(|&v| f64::from(v)).sum::<f64>();
                assert!((mean(&a, 0) - mean(&b, 0)).abs() > 1.0);
                let ea = edge_proxy(&a);
                let eb = edge_proxy(&b);
                let differing = ea.data().iter().zip(eb.data()).filter(|(x, y)| x != y).count();
                assert_eq!(differing, 0, "signature {i} prompt {p}");
                checked += 1;
            }
        }
        assert_eq!(checked, 20);
    }

    #[test]
    fn corpus_counts_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let sigs = default_signatures(5).unwrap();
        let spec = CorpusSpec {
            domains: 1,
            languages: 1,
            per_cell: 10,
            size: 32,
            seed: 3,
        };
        let rows = generate_corpus(&sigs, &spec, dir.path()).unwrap();
        assert_eq!(rows.len(), 50);
        for s in &sigs {
            assert_eq!(rows.iter().filter(|r| r.model == s.name).count(), 10);
        }
        assert!(dir.path().join("gen02/animals/en/7.png").exists());
        let manifest = std::fs::read(dir.path().join("manifest.jsonl")).unwrap();
        let bytes = std::fs::read(dir.path().join("gen02/animals/en/7.png")).unwrap();

        let dir2 = tempfile::tempdir().unwrap();
        let rows2 = generate_corpus(&sigs, &spec, dir2.path()).unwrap();
        assert_eq!(rows, rows2);
        assert_eq!(manifest, std::fs::read(dir2.path().join("manifest.jsonl")).unwrap());
        assert_eq!(bytes, std::fs::read(dir2.path().join("gen02/animals/en/7.png")).unwrap());
    }

    #[test]
    fn prompt_grid_shared_across_models() {
        let dir = tempfile::tempdir().unwrap();
        let sigs = default_signatures(2).unwrap();
        let spec = CorpusSpec {
            domains: 2,
            languages: 2,
            per_cell: 3,
            size: 32,
            seed: 1,
        };
        let rows = generate_corpus(&sigs, &spec, dir.path()).unwrap();
        let prompts = |m: &str| {
            let mut v: Vec<_> = rows
                .iter()
                .filter(|r| r.model == m)
                .map(|r| (r.domain.clone(), r.language.clone(), r.prompt_id))
                .collect();
            v.sort();
            v
        };
        assert_eq!(prompts("gen00"), prompts("gen01"));
    }
}
