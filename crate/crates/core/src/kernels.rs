//! Slice-level numeric kernels shared by the autodiff graph and plain inference.
//!
//! Every reduction runs in a fixed index order, so results are bit-identical
//! across runs.

use crate::tensor::Real;

/// `out[m×n] = a[m×k] · b[k×n]`, row-major.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    assert!(a.len() == m * k && b.len() == k * n, "matmul operand sizes");
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, (a, k as isize, 1), (b, n as isize, 1), T::zero(), &mut out, n as isize);
    out
}

/// `out[m×k] = g[m×n] · b[k×n]ᵀ`, the left-operand gradient of `matmul`.
pub fn matmul_nt<T: Real>(g: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    assert!(g.len() == m * n && b.len() == k * n, "matmul_nt operand sizes");
    let mut out = vec![T::zero(); m * k];
    T::gemm(m, n, k, (g, n as isize, 1), (b, 1, n as isize), T::zero(), &mut out, k as isize);
    out
}

/// `out[k×n] = a[m×k]ᵀ · g[m×n]`, the right-operand gradient of `matmul`.
pub fn matmul_tn<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    assert!(a.len() == m * k && g.len() == m * n, "matmul_tn operand sizes");
    let mut out = vec![T::zero(); k * n];
    T::gemm(k, m, n, (a, 1, k as isize), (g, n as isize, 1), T::zero(), &mut out, n as isize);
    out
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Row-wise softmax of `x + mask`.
///
/// `mask` is either absent, the same size as `x`, or one row broadcast to
/// every row. A row whose entries are all `-inf` yields zeros; the number of
/// such rows is returned alongside the probabilities.
pub fn softmax_rows<T: Real>(x: &[T], cols: usize, mask: Option<&[T]>) -> (Vec<T>, usize) {
    let mut out = vec![T::zero(); x.len()];
    let mut dead_rows = 0;
    if cols == 0 {
        return (out, 0);
    }
    for (r, (xrow, orow)) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
        for (j, o) in orow.iter_mut().enumerate() {
            *o = xrow[j]
                + match mask {
                    None => T::zero(),
                    Some(m) if m.len() == cols => m[j],
                    Some(m) => m[r * cols + j],
                };
        }
        let max = orow.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        if max == T::neg_infinity() {
            orow.iter_mut().for_each(|o| *o = T::zero());
            dead_rows += 1;
            continue;
        }
        let mut sum = T::zero();
        for o in orow.iter_mut() {
            *o = (*o - max).exp();
            sum += *o;
        }
        let inv = T::one() / sum;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    (out, dead_rows)
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Row-wise layer normalisation. Returns `(y, xhat, rstd)`.
pub fn layernorm<T: Real>(x: &[T], cols: usize, gain: &[T], bias: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / cols;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let n = T::lit(cols as f64);
    let eps = T::lit(LAYERNORM_EPS);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..cols {
            let h = (row[j] - mean) * rs;
            xhat[r * cols + j] = h;
            y[r * cols + j] = h * gain[j] + bias[j];
        }
    }
    (y, xhat, rstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn huber<T: Real>(x: T, delta: T) -> T {
    let a = x.abs();
    if a <= delta {
        T::lit(0.5) * x * x
    } else {
        delta * (a - T::lit(0.5) * delta)
    }
}

#[inline]
pub fn huber_grad<T: Real>(x: T, delta: T) -> T {
    if x.abs() <= delta {
        x
    } else {
        delta * x.signum()
    }
}

#[inline]
pub fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Gather indices that rearrange a `(gh·gw) × (s·s·c)` block layout (one row
/// per grid cell, each holding an `s×s` sub-pixel patch of `c` channels) into
/// a `(gh·s · gw·s) × c` pixel-major map. This is the reshuffle after a
/// stride-`s`, kernel-`s` transposed convolution expressed as a matmul.
pub fn pixel_shuffle_index(gh: usize, gw: usize, s: usize, c: usize) -> Vec<usize> {
    let (h, w) = (gh * s, gw * s);
    let mut idx = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let cell = (y / s) * gw + (x / s);
            let sub = (y % s) * s + (x % s);
            for ch in 0..c {
                idx.push(cell * (s * s * c) + sub * c + ch);
            }
        }
    }
    idx
}

/// Cuts a `3×H×W` image into non-overlapping `p×p` patches, one row per
/// patch (row-major over the patch grid), flattened as `(channel, dy, dx)`.
pub fn patchify<T: Real>(image: &[T], h: usize, w: usize, p: usize) -> Vec<T> {
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(image.len());
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..3 {
                for dy in 0..p {
                    let row = &image[c * h * w + (py * p + dy) * w + px * p..][..p];
                    out.extend_from_slice(row);
                }
            }
        }
    }
    out
}
