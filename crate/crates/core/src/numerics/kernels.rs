//! Row-independent compute kernels.
//!
//! Every kernel produces output row `i` from input row `i` (plus shared
//! operands) with a fixed accumulation order, so evaluating one row at a time
//! gives bitwise the same numbers as evaluating a whole matrix. Incremental
//! decoding relies on this.

use crate::numerics::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Output tile accumulated in registers: `RB` rows by `JB` columns.
const JB: usize = 16;
const RB: usize = 4;

/// Accumulates rows `rows` of `c = a·b` for the column tile starting at `j0`.
/// `a_at(r, p)` reads element `p` of output row `r`'s left operand.
#[inline(always)]
fn tile<T: Scalar, const R: usize>(
    a_at: impl Fn(usize, usize) -> T,
    b: &[T],
    c: &mut [T],
    i0: usize,
    j0: usize,
    k: usize,
    n: usize,
) {
    let mut acc = [[T::zero(); JB]; R];
    for p in 0..k {
        let bs = &b[p * n + j0..p * n + j0 + JB];
        for (r, row) in acc.iter_mut().enumerate() {
            let av = a_at(i0 + r, p);
            for t in 0..JB {
                row[t] += av * bs[t];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i0 + r) * n + j0..(i0 + r) * n + j0 + JB].copy_from_slice(row);
    }
}

/// Shared driver: every output element is `Σ_p a(i,p)·b[p][j]` summed from
/// zero in ascending `p`, whatever the tiling, so results do not depend on
/// how many rows are computed at once.
#[inline(always)]
fn product<T: Scalar>(a_at: impl Fn(usize, usize) -> T + Copy, b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let full = n - n % JB;
    let mut i0 = 0;
    while i0 + RB <= m {
        for j0 in (0..full).step_by(JB) {
            tile::<T, RB>(a_at, b, &mut c, i0, j0, k, n);
        }
        i0 += RB;
    }
    for i in i0..m {
        for j0 in (0..full).step_by(JB) {
            tile::<T, 1>(a_at, b, &mut c, i, j0, k, n);
        }
    }
    for i in 0..m {
        for j in full..n {
            let mut s = T::zero();
            for p in 0..k {
                s += a_at(i, p) * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// `c[m×n] = a[m×k] · b[k×n]`, accumulating over `k` in ascending order.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    product(|i, p| a[i * k + p], b, m, k, n)
}

/// `c[m×n] = aᵀ · b` with `a: [k×m]`, `b: [k×n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    product(|i, p| a[p * m + i], b, m, k, n)
}

/// `c[m×n] = a · bᵀ` with `a: [m×k]`, `b: [n×k]`. Same accumulation order
/// as [`dot`] on each row pair.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut bt = vec![T::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul(a, &bt, m, k, n)
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Adds `bias` to every row of `x` in place.
pub fn add_bias<T: Scalar>(x: &mut [T], bias: &[T]) {
    let n = bias.len();
    for row in x.chunks_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Normalizes one row. Returns `(xhat, rstd)` for the backward pass.
pub fn layer_norm_row<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], out: &mut [T], xhat: &mut [T]) -> T {
    let n = T::from_usize(x.len());
    let mean = x.iter().copied().sum::<T>() / n;
    let mut var = T::zero();
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    let rstd = T::one() / (var + T::lit(LAYER_NORM_EPS)).sqrt();
    for i in 0..x.len() {
        let h = (x[i] - mean) * rstd;
        xhat[i] = h;
        out[i] = h * gamma[i] + beta[i];
    }
    rstd
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `tanh` through a single exponential, which is much cheaper than the libm
/// routine and accurate to a few ulps.
#[inline]
pub fn fast_tanh<T: Scalar>(u: T) -> T {
    let e = (T::lit(-2.0) * u.abs()).exp();
    let t = (T::one() - e) / (T::one() + e);
    if u < T::zero() {
        -t
    } else {
        t
    }
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let inner = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + fast_tanh(inner))
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let x2 = x * x;
    let inner = c * (x + T::lit(0.044715) * x2 * x);
    let th = fast_tanh(inner);
    let sech2 = T::one() - th * th;
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * sech2 * c * (T::one() + T::lit(3.0 * 0.044715) * x2)
}

/// Max-subtracted softmax over a contiguous slice, in place.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mut max = T::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Multi-head attention for a single query row against `visible` key/value rows.
///
/// `keys` and `values` are row-major `[≥visible × d]`. Keys beyond `visible`
/// are masked; skipping them is bitwise identical to adding a −1e9 bias since
/// their softmax weight underflows to exactly zero. When `probs` is given it
/// receives the `[heads × visible]` attention weights.
pub fn attention_row<T: Scalar>(
    q: &[T],
    keys: &[T],
    values: &[T],
    visible: usize,
    heads: usize,
    out: &mut [T],
    mut probs: Option<&mut [T]>,
) {
    let d = q.len();
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).sqrt();
    let mut scores = vec![T::zero(); visible];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(qh, &keys[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
        }
        softmax_in_place(&mut scores);
        let oh = &mut out[h * dh..(h + 1) * dh];
        oh.iter_mut().for_each(|v| *v = T::zero());
        for (j, &p) in scores.iter().enumerate() {
            let vj = &values[j * d + h * dh..j * d + (h + 1) * dh];
            for (o, &v) in oh.iter_mut().zip(vj) {
                *o += p * v;
            }
        }
        if let Some(pr) = probs.as_deref_mut() {
            pr[h * visible..(h + 1) * visible].copy_from_slice(&scores);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_rows_are_independent() {
        let a: Vec<f32> = (0..12).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..20).map(|i| (i as f32 * 0.11).cos()).collect();
        let full = matmul(&a, &b, 3, 4, 5);
        for i in 0..3 {
            let one = matmul(&a[i * 4..(i + 1) * 4], &b, 1, 4, 5);
            assert_eq!(&full[i * 5..(i + 1) * 5], &one[..]);
        }
    }

    #[test]
    fn transposed_products_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 - 2.0).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sqrt()).collect(); // 3×4
        let c = matmul(&a, &b, 2, 3, 4);
        let at: Vec<f64> = vec![a[0], a[3], a[1], a[4], a[2], a[5]];
        assert_eq!(matmul_tn(&at, &b, 3, 2, 4), c);
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let c2 = matmul_nt(&a, &bt, 2, 3, 4);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fast_tanh_matches_libm() {
        for i in -400..=400 {
            let u = i as f64 * 0.025;
            assert!((fast_tanh(u) - u.tanh()).abs() < 1e-15);
            let uf = u as f32;
            assert!((fast_tanh(uf) - uf.tanh()).abs() < 3e-7);
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
