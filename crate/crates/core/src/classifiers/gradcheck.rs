//! Central finite-difference verification of every layer's backward pass and
//! of the end-to-end loss gradient.
//!
//! Each layer `y = f(x)` is checked through the scalar probe `L = <r, f(x)>`
//! with a random `r`, so the analytic gradient is the layer's backward pass
//! applied to `r`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::convnet::{self, SmallConvNetConfig};
use super::layers::{self, ConvShape};
use super::scalar::{Precision, Real};
use super::tensor::Tensor;
use crate::key;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckSettings {
    /// Step is `h_rel * max(1, |x|)`.
    pub h_rel: f64,
    /// Denominator floor of the per-coordinate diagnostic.
    pub floor: f64,
    pub coords: usize,
    pub tolerance: f64,
}

impl GradCheckSettings {
    pub fn for_precision(p: Precision) -> Self {
        match p {
            Precision::Single => Self {
                h_rel: 1e-2,
                floor: 1e-3,
                coords: 50,
                tolerance: 1e-3,
            },
            Precision::Double => Self {
                h_rel: 1e-4,
                floor: 1e-6,
                coords: 50,
                tolerance: 1e-6,
            },
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// `|a - n| / max(|a|, |n|)` over the vector of checked coordinates.
    pub rel_error: f64,
    pub max_coord_error: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.rel_error < self.tolerance
    }
}

fn uniform<T: Real>(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<T> {
    (0..n).map(|_| T::from_f64(rng.random_range(lo..hi))).collect()
}

fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

/// Compares `analytic` against central differences of `f` at randomly drawn
/// coordinates of `x`. `f` also reports the on/off state of every rectifier it
/// evaluates; a coordinate whose two probes disagree on that state straddles a
/// kink, has no derivative there and is redrawn.
fn check_coords<T: Real>(
    name: &str,
    x: &[T],
    analytic: &[T],
    f: impl Fn(&[T]) -> (f64, Vec<bool>),
    s: &GradCheckSettings,
    rng: &mut impl Rng,
) -> CheckResult {
    let mut x = x.to_vec();
    let mut worst: f64 = 0.0;
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let mut checked = 0;
    let mut attempts = 0;
    let exhaustive = x.len() <= s.coords;
    while checked < s.coords.min(x.len()) && attempts < 20 * s.coords {
        let i = if exhaustive { attempts % x.len() } else { rng.random_range(0..x.len()) };
        attempts += 1;
        let orig = x[i];
        let h = T::from_f64(s.h_rel * orig.as_f64().abs().max(1.0));
        let (hi, lo) = (orig + h, orig - h);
        x[i] = hi;
        let (up, up_pattern) = f(&x);
        x[i] = lo;
        let (down, down_pattern) = f(&x);
        x[i] = orig;
        if up_pattern != down_pattern {
            continue;
        }
        let numeric = (up - down) / (hi.as_f64() - lo.as_f64());
        let a = analytic[i].as_f64();
        worst = worst.max(rel_error(a, numeric, s.floor));
        diff2 += (a - numeric).powi(2);
        a2 += a * a;
        n2 += numeric * numeric;
        checked += 1;
    }
    CheckResult {
        name: name.to_string(),
        rel_error: diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(f64::MIN_POSITIVE),
        max_coord_error: worst,
        checked,
        tolerance: s.tolerance,
    }
}

fn smooth(v: f64) -> (f64, Vec<bool>) {
    (v, Vec::new())
}

/// Mean cross-entropy of logits evaluated in double precision.
fn mean_ce<T: Real>(logits: &[T], labels: &[usize], k: usize) -> f64 {
    let z: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
    layers::softmax_ce(&z, labels, k, 1.0).0 / labels.len() as f64
}

/// A random small network configuration and batch.
#[derive(Debug, Clone)]
pub struct RandomCase {
    pub cfg: SmallConvNetConfig,
    pub batch: usize,
    pub n_classes: usize,
}

impl RandomCase {
    pub fn draw(rng: &mut impl Rng) -> Self {
        let stages = rng.random_range(1..=3);
        let stage_channels = (0..stages).map(|_| rng.random_range(2..=5)).collect();
        let input_side = (1usize << stages) * rng.random_range(1..=3);
        Self {
            cfg: SmallConvNetConfig {
                input_side: input_side.max(4),
                stage_channels,
            },
            batch: rng.random_range(1..=3),
            n_classes: rng.random_range(2..=5),
        }
    }
}

/// Runs every layer check and the end-to-end check for one random case.
pub fn check_case<T: Real>(seed_v: u64, case_index: u64) -> Vec<CheckResult> {
    let s = GradCheckSettings::for_precision(T::PRECISION);
    let mut rng: ChaCha8Rng = seed::keyed_rng(seed_v, key!["gradcheck", case_index]);
    let case = RandomCase::draw(&mut rng);
    let mut out = Vec::new();
    let (b, side) = (case.batch, case.cfg.input_side);

    // Convolution: input, weights and bias.
    let shape = ConvShape {
        c_in: rng.random_range(1..=3),
        c_out: rng.random_range(1..=4),
        batch: b,
        height: side,
        width: side + 1,
    };
    let x: Vec<T> = uniform(&mut rng, shape.c_in * shape.columns(), -1.0, 1.0);
    let w: Vec<T> = uniform(&mut rng, shape.weight_len(), -0.5, 0.5);
    let bias: Vec<T> = uniform(&mut rng, shape.c_out, -0.5, 0.5);
    let r: Vec<T> = uniform(&mut rng, shape.c_out * shape.columns(), -1.0, 1.0);
    let (_, col) = layers::conv_forward(&x, &w, &bias, &shape);
    let g = layers::conv_backward(&r, &col, &w, &shape, true);
    let probe = |x: &[T], w: &[T], bias: &[T]| smooth(dot(&layers::conv_forward(x, w, bias, &shape).0, &r));
    out.push(check_coords("conv.input", &x, g.input.as_ref().unwrap(), |v| probe(v, &w, &bias), &s, &mut rng));
    out.push(check_coords("conv.weight", &w, &g.weight, |v| probe(&x, v, &bias), &s, &mut rng));
    out.push(check_coords("conv.bias", &bias, &g.bias, |v| probe(&x, &w, v), &s, &mut rng));

    // Rectifier.
    let n = b * 3 * side * side;
    let x: Vec<T> = uniform(&mut rng, n, -1.0, 1.0);
    let r: Vec<T> = uniform(&mut rng, n, -1.0, 1.0);
    let mut y = x.clone();
    layers::relu_forward(&mut y);
    let mut dx = r.clone();
    layers::relu_backward(&mut dx, &y);
    let relu = |v: &[T]| {
        let mut y = v.to_vec();
        let pattern = v.iter().map(|&a| a > T::zero()).collect();
        layers::relu_forward(&mut y);
        (dot(&y, &r), pattern)
    };
    out.push(check_coords("relu", &x, &dx, relu, &s, &mut rng));

    // 2x2 mean pool.
    let planes = b * 2;
    let x: Vec<T> = uniform(&mut rng, planes * side * side, -1.0, 1.0);
    let r: Vec<T> = uniform(&mut rng, planes * (side / 2) * (side / 2), -1.0, 1.0);
    let dx = layers::pool_backward(&r, planes, side, side);
    let pool = |v: &[T]| smooth(dot(&layers::pool_forward(v, planes, side, side), &r));
    out.push(check_coords("pool", &x, &dx, pool, &s, &mut rng));

    // Global mean pool.
    let c = 3;
    let plane = side * side;
    let x: Vec<T> = uniform(&mut rng, c * b * plane, -1.0, 1.0);
    let r: Vec<T> = uniform(&mut rng, c * b, -1.0, 1.0);
    let dx = layers::global_pool_backward(&r, c, b, plane);
    let gpool = |v: &[T]| smooth(dot(&layers::global_pool_forward(v, c, b, plane), &r));
    out.push(check_coords("global_pool", &x, &dx, gpool, &s, &mut rng));

    // Affine head.
    let (c, k) = (rng.random_range(2..=6), case.n_classes);
    let feat: Vec<T> = uniform(&mut rng, c * b, -1.0, 1.0);
    let w: Vec<T> = uniform(&mut rng, k * c, -1.0, 1.0);
    let bias: Vec<T> = uniform(&mut rng, k, -1.0, 1.0);
    let r: Vec<T> = uniform(&mut rng, b * k, -1.0, 1.0);
    let g = layers::affine_backward(&r, &feat, &w, c, b, k);
    let probe = |f: &[T], w: &[T], bias: &[T]| smooth(dot(&layers::affine_forward(f, w, bias, c, b, k), &r));
    out.push(check_coords("affine.input", &feat, &g.input, |v| probe(v, &w, &bias), &s, &mut rng));
    out.push(check_coords("affine.weight", &w, &g.weight, |v| probe(&feat, v, &bias), &s, &mut rng));
    out.push(check_coords("affine.bias", &bias, &g.bias, |v| probe(&feat, &w, v), &s, &mut rng));

    // Softmax cross-entropy.
    let logits: Vec<T> = uniform(&mut rng, b * k, -2.0, 2.0);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
    let (_, dz) = layers::softmax_ce(&logits, &labels, k, T::from_f64(1.0 / b as f64));
    let ce = |v: &[T]| smooth(mean_ce(v, &labels, k));
    out.push(check_coords("softmax_ce", &logits, &dz, ce, &s, &mut rng));

    // End to end.
    let mut params: Vec<T> = convnet::init_params(&case.cfg, case.n_classes, &mut rng);
    // Zero biases behind a dead channel put pre-activations exactly on the
    // rectifier's kink, where no derivative exists.
    let layout = case.cfg.layout(case.n_classes);
    for st in &layout.stages {
        for v in &mut params[st.bias..st.bias + st.c_out] {
            *v = T::from_f64(rng.random_range(-0.1..0.1));
        }
    }
    let data: Vec<T> = uniform(&mut rng, b * 3 * side * side, 0.0, 1.0);
    let batch = Tensor::new(vec![b, 3, side, side], data).expect("consistent shape");
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..case.n_classes)).collect();
    let (_, grad) = convnet::loss_and_grad(&case.cfg, &params, case.n_classes, &batch, &labels).expect("valid case");
    let e2e = |p: &[T]| {
        let (logits, pattern) = convnet::forward_with_pattern(&case.cfg, p, case.n_classes, &batch).expect("valid case");
        (mean_ce(&logits, &labels, case.n_classes), pattern)
    };
    out.push(check_coords("end_to_end", &params, &grad, e2e, &s, &mut rng));
    out
}
