//! Slice-level numeric kernels. Row-parallel work is split so that every
//! output element is produced by a single thread in a fixed order, so results
//! do not depend on the thread count.

use rayon::prelude::*;

use super::Float;

const PAR_THRESHOLD: usize = 1 << 15;
const ROW_BLOCK: usize = 64;
const SMALL_GEMM: usize = 1 << 13;

/// Read-only matrix view with row and column strides.
#[derive(Debug, Clone, Copy)]
pub struct Strided<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> Strided<'a, T> {
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `[rows, cols]` buffer.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }

    pub fn covers(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.rs + (cols - 1) * self.cs < self.data.len()
    }

    fn skip_rows(self, r: usize) -> Self {
        Self { data: &self.data[r * self.rs..], ..self }
    }
}

/// `c[m,n] += a[m,k] * b[k,n]` with `c` row-major. Large products are split
/// into fixed 64-row blocks, so the arithmetic per element is the same for
/// any thread count.
pub fn gemm_strided<T: Float>(m: usize, k: usize, n: usize, a: Strided<'_, T>, b: Strided<'_, T>, c: &mut [T]) {
    debug_assert_eq!(c.len(), m * n);
    if m * k * n >= PAR_THRESHOLD && m > ROW_BLOCK {
        c.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(|(blk, cb)| {
            T::gemm(cb.len() / n, k, n, a.skip_rows(blk * ROW_BLOCK), b, cb);
        });
    } else if m * k * n <= SMALL_GEMM {
        gemm_small(m, k, n, a, b, c);
    } else {
        T::gemm(m, k, n, a, b, c);
    }
}

/// Direct loops for products too small to amortize packing.
fn gemm_small<T: Float>(m: usize, k: usize, n: usize, a: Strided<'_, T>, b: Strided<'_, T>, c: &mut [T]) {
    assert!(a.covers(m, k) && b.covers(k, n) && c.len() >= m * n, "gemm operand extents");
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * a.rs + p * a.cs];
            let boff = p * b.rs;
            if b.cs == 1 {
                for (cv, &bv) in row.iter_mut().zip(&b.data[boff..boff + n]) {
                    *cv += av * bv;
                }
            } else {
                for (j, cv) in row.iter_mut().enumerate() {
                    *cv += av * b.data[boff + j * b.cs];
                }
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`, all row-major.
pub fn gemm_acc<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    gemm_strided(m, k, n, Strided::row_major(a, k), Strided::row_major(b, n), c);
}

/// Softmax over the middle axis of an `[outer, dim, inner]` view.
pub(crate) fn softmax<T: Float>(x: &[T], outer: usize, dim: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * dim * inner;
        for i in 0..inner {
            let at = |d: usize| base + d * inner + i;
            let mut max = x[at(0)];
            for d in 1..dim {
                max = max.max(x[at(d)]);
            }
            let mut total = T::zero();
            for d in 0..dim {
                let e = (x[at(d)] - max).exp();
                y[at(d)] = e;
                total += e;
            }
            let inv = T::one() / total;
            for d in 0..dim {
                y[at(d)] *= inv;
            }
        }
    }
    y
}

/// `dx += y * (dy - sum(dy * y))` along the softmax axis.
pub(crate) fn softmax_backward<T: Float>(
    y: &[T],
    dy: &[T],
    dx: &mut [T],
    outer: usize,
    dim: usize,
    inner: usize,
) {
    for o in 0..outer {
        let base = o * dim * inner;
        for i in 0..inner {
            let at = |d: usize| base + d * inner + i;
            let mut dot = T::zero();
            for d in 0..dim {
                dot += dy[at(d)] * y[at(d)];
            }
            for d in 0..dim {
                dx[at(d)] += y[at(d)] * (dy[at(d)] - dot);
            }
        }
    }
}

/// Layer norm over rows of length `d`. Returns `(y, xhat, rstd)`.
pub(crate) fn layer_norm<T: Float>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    d: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::one() / T::of(d as f64);
    for r in 0..rows {
        let xs = &x[r * d..(r + 1) * d];
        let mean = xs.iter().copied().sum::<T>() * inv_d;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xs[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, xhat, rstd)
}

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub(crate) fn gelu<T: Float>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub(crate) fn gelu_grad<T: Float>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}
