//! Layer kernels with explicit backward passes.
//!
//! Activations use a channel-major layout `[C, B, H, W]`: each channel is one
//! contiguous block of `B*H*W` values, which is exactly the column layout a
//! convolution GEMM produces.

use super::scalar::Real;

/// 3x3 stride-1 convolution with replicate padding of 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvShape {
    pub fn columns(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn patch(&self) -> usize {
        self.c_in * 9
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.patch()
    }
}

#[inline]
fn clamp_idx(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// `dst[x] = src[clamp(x + kx - 1)]` for one image row.
#[inline]
fn shifted_copy<T: Real>(dst: &mut [T], src: &[T], kx: usize) {
    let w = src.len();
    match kx {
        0 => {
            dst[0] = src[0];
            dst[1..].copy_from_slice(&src[..w - 1]);
        }
        1 => dst.copy_from_slice(src),
        _ => {
            dst[..w - 1].copy_from_slice(&src[1..]);
            dst[w - 1] = src[w - 1];
        }
    }
}

/// Adjoint of [`shifted_copy`]: `dst[clamp(x + kx - 1)] += src[x]`.
#[inline]
fn shifted_add<T: Real>(dst: &mut [T], src: &[T], kx: usize) {
    let w = src.len();
    let add = |d: &mut [T], s: &[T]| d.iter_mut().zip(s).for_each(|(a, &b)| *a += b);
    match kx {
        0 => {
            dst[0] += src[0];
            add(&mut dst[..w - 1], &src[1..]);
        }
        1 => add(dst, src),
        _ => {
            add(&mut dst[1..], &src[..w - 1]);
            dst[w - 1] += src[w - 1];
        }
    }
}

/// Patch matrix `[C_in*9, B*H*W]` with replicated borders.
pub fn im2col<T: Real>(x: &[T], s: &ConvShape) -> Vec<T> {
    let (h, w) = (s.height, s.width);
    let n = s.columns();
    let plane = h * w;
    let mut col = vec![T::zero(); s.patch() * n];
    for ci in 0..s.c_in {
        for ky in 0..3 {
            for kx in 0..3 {
                let r = ci * 9 + ky * 3 + kx;
                let dst_row = &mut col[r * n..(r + 1) * n];
                for bi in 0..s.batch {
                    let src = &x[(ci * s.batch + bi) * plane..(ci * s.batch + bi + 1) * plane];
                    for y in 0..h {
                        let sy = clamp_idx(y as isize + ky as isize - 1, h);
                        let src_row = &src[sy * w..(sy + 1) * w];
                        let dst = &mut dst_row[(bi * h + y) * w..(bi * h + y + 1) * w];
                        shifted_copy(dst, src_row, kx);
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch gradients back, accumulating the
/// contributions of replicated border reads onto the edge pixels.
pub fn col2im<T: Real>(dcol: &[T], s: &ConvShape) -> Vec<T> {
    let (h, w) = (s.height, s.width);
    let n = s.columns();
    let plane = h * w;
    let mut dx = vec![T::zero(); s.c_in * n];
    for ci in 0..s.c_in {
        for ky in 0..3 {
            for kx in 0..3 {
                let r = ci * 9 + ky * 3 + kx;
                let src_row = &dcol[r * n..(r + 1) * n];
                for bi in 0..s.batch {
                    let dst = &mut dx[(ci * s.batch + bi) * plane..(ci * s.batch + bi + 1) * plane];
                    for y in 0..h {
                        let sy = clamp_idx(y as isize + ky as isize - 1, h);
                        let src = &src_row[(bi * h + y) * w..(bi * h + y + 1) * w];
                        shifted_add(&mut dst[sy * w..(sy + 1) * w], src, kx);
                    }
                }
            }
        }
    }
    dx
}

/// Returns the output `[C_out, B, H, W]` and the patch matrix for backward.
pub fn conv_forward<T: Real>(x: &[T], weight: &[T], bias: &[T], s: &ConvShape) -> (Vec<T>, Vec<T>) {
    let n = s.columns();
    let k = s.patch();
    let col = im2col(x, s);
    let mut y = vec![T::zero(); s.c_out * n];
    for (co, row) in y.chunks_exact_mut(n).enumerate() {
        row.fill(bias[co]);
    }
    T::gemm(s.c_out, k, n, T::one(), weight, k, 1, &col, n, 1, T::one(), &mut y, n, 1);
    (y, col)
}

pub struct ConvGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub input: Option<Vec<T>>,
}

/// Gradients of a convolution given the upstream gradient `dy`.
/// The input gradient is skipped when `need_input` is false.
pub fn conv_backward<T: Real>(dy: &[T], col: &[T], weight: &[T], s: &ConvShape, need_input: bool) -> ConvGrads<T> {
    let n = s.columns();
    let k = s.patch();
    let mut dw = vec![T::zero(); s.weight_len()];
    // dW = dY * col^T
    T::gemm(s.c_out, n, k, T::one(), dy, n, 1, col, 1, n, T::zero(), &mut dw, k, 1);
    let db = dy.chunks_exact(n).map(|row| row.iter().copied().sum()).collect();
    let input = need_input.then(|| {
        let mut dcol = vec![T::zero(); k * n];
        // dcol = W^T * dY
        T::gemm(k, s.c_out, n, T::one(), weight, 1, k, dy, n, 1, T::zero(), &mut dcol, n, 1);
        col2im(&dcol, s)
    });
    ConvGrads {
        weight: dw,
        bias: db,
        input,
    }
}

pub fn relu_forward<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` in place by the rectifier's output (positive entries pass).
pub fn relu_backward<T: Real>(dy: &mut [T], activated: &[T]) {
    for (g, &a) in dy.iter_mut().zip(activated) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 mean pooling over `planes` planes of `h x w`.
pub fn pool_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            let r0 = &src[2 * y * w..(2 * y + 1) * w];
            let r1 = &src[(2 * y + 1) * w..(2 * y + 2) * w];
            for xo in 0..wo {
                dst[y * wo + xo] = (r0[2 * xo] + r0[2 * xo + 1] + r1[2 * xo] + r1[2 * xo + 1]) * quarter;
            }
        }
    }
    out
}

pub fn pool_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xi in 0..w {
                dst[y * w + xi] = src[(y / 2) * wo + xi / 2] * quarter;
            }
        }
    }
    dx
}

/// Global mean over each `[B, H*W]` channel block: returns `[C, B]`.
pub fn global_pool_forward<T: Real>(x: &[T], channels: usize, batch: usize, plane: usize) -> Vec<T> {
    let scale = T::from_f64(1.0 / plane as f64);
    let mut out = vec![T::zero(); channels * batch];
    for c in 0..channels {
        for b in 0..batch {
            let start = (c * batch + b) * plane;
            out[c * batch + b] = x[start..start + plane].iter().copied().sum::<T>() * scale;
        }
    }
    out
}

pub fn global_pool_backward<T: Real>(dy: &[T], channels: usize, batch: usize, plane: usize) -> Vec<T> {
    let scale = T::from_f64(1.0 / plane as f64);
    let mut dx = vec![T::zero(); channels * batch * plane];
    for c in 0..channels {
        for b in 0..batch {
            let g = dy[c * batch + b] * scale;
            let start = (c * batch + b) * plane;
            dx[start..start + plane].fill(g);
        }
    }
    dx
}

/// `out[B, N] = feat^T W^T + b` for `feat: [C, B]`, `W: [N, C]`.
pub fn affine_forward<T: Real>(feat: &[T], weight: &[T], bias: &[T], c: usize, batch: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * n];
    for row in out.chunks_exact_mut(n) {
        row.copy_from_slice(bias);
    }
    // out = feat^T (B x C) * W^T (C x N)
    T::gemm(batch, c, n, T::one(), feat, 1, batch, weight, 1, c, T::one(), &mut out, n, 1);
    out
}

pub struct AffineGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub input: Vec<T>,
}

pub fn affine_backward<T: Real>(dout: &[T], feat: &[T], weight: &[T], c: usize, batch: usize, n: usize) -> AffineGrads<T> {
    let mut dw = vec![T::zero(); n * c];
    // dW (N x C) = dout^T (N x B) * feat^T (B x C)
    T::gemm(n, batch, c, T::one(), dout, 1, n, feat, 1, batch, T::zero(), &mut dw, c, 1);
    let mut db = vec![T::zero(); n];
    for row in dout.chunks_exact(n) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    let mut dfeat = vec![T::zero(); c * batch];
    // dfeat (C x B) = W^T (C x N) * dout^T (N x B)
    T::gemm(c, n, batch, T::one(), weight, 1, c, dout, 1, n, T::zero(), &mut dfeat, batch, 1);
    AffineGrads {
        weight: dw,
        bias: db,
        input: dfeat,
    }
}

/// Numerically stable softmax of one logit row.
pub fn softmax_row<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Sum over rows of `-log softmax(logits)[label]`, and its gradient with
/// respect to the logits scaled by `scale`.
pub fn softmax_ce<T: Real>(logits: &[T], labels: &[usize], n: usize, scale: T) -> (T, Vec<T>) {
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (i, (row, &label)) in logits.chunks_exact(n).zip(labels).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
        loss += lse - row[label];
        for (j, &z) in row.iter().enumerate() {
            let p = (z - lse).exp();
            let target = if j == label { T::one() } else { T::zero() };
            grad[i * n + j] = (p - target) * scale;
        }
    }
    (loss, grad)
}
