//! Stateless tensor functions shared by the graph and inference paths.

use crate::error::{arg_err, Result};
use crate::numerics::{kernels, Scalar, Tensor};

/// `(outer, len, inner)` strides for reducing along `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Softmax along `axis`, stabilized by subtracting the maximum.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return arg_err(format!("axis {axis} invalid for shape {:?}", x.shape()));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = x.clone();
    let mut buf = vec![T::zero(); len];
    let d = out.data_mut();
    for o in 0..outer {
        for j in 0..inner {
            for (l, b) in buf.iter_mut().enumerate() {
                *b = d[(o * len + l) * inner + j];
            }
            kernels::softmax_in_place(&mut buf);
            for (l, &b) in buf.iter().enumerate() {
                d[(o * len + l) * inner + j] = b;
            }
        }
    }
    Ok(out)
}

/// Returns `(mean loss, row softmax, counted rows)`.
pub(crate) fn cross_entropy_parts<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    ignore: usize,
) -> Result<(T, Vec<T>, usize)> {
    if logits.rank() != 2 {
        return arg_err("cross_entropy expects [T × V] logits");
    }
    let (rows, v) = (logits.rows(), logits.cols());
    if targets.len() != rows {
        return arg_err(format!("{} targets for {rows} rows", targets.len()));
    }
    let mut probs = logits.data().to_vec();
    let mut total = T::zero();
    let mut count = 0usize;
    for (r, &t) in targets.iter().enumerate() {
        let row = &mut probs[r * v..(r + 1) * v];
        if t == ignore {
            kernels::softmax_in_place(row);
            continue;
        }
        if t >= v {
            return arg_err(format!("target {t} out of range for {v} classes"));
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
        total += lse - row[t];
        count += 1;
        kernels::softmax_in_place(row);
    }
    let loss = if count == 0 {
        T::zero()
    } else {
        total / T::from_usize(count)
    };
    Ok((loss, probs, count))
}

/// Mean negative log-likelihood over rows whose target is not `ignore`.
/// Returns zero when every row is ignored.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize], ignore: usize) -> Result<T> {
    Ok(cross_entropy_parts(logits, targets, ignore)?.0)
}

pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    t_in: usize,
    c_in: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
) -> Vec<T> {
    let width = kernel * c_in;
    let mut cols = vec![T::zero(); t_out * width];
    for t in 0..t_out {
        for tap in 0..kernel {
            let src = (t * stride + tap) as isize - pad as isize;
            if src < 0 || src as usize >= t_in {
                continue;
            }
            let s = src as usize;
            cols[t * width + tap * c_in..t * width + (tap + 1) * c_in]
                .copy_from_slice(&x[s * c_in..(s + 1) * c_in]);
        }
    }
    cols
}

pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    t_in: usize,
    c_in: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
) -> Vec<T> {
    let width = kernel * c_in;
    let mut x = vec![T::zero(); t_in * c_in];
    for t in 0..t_out {
        for tap in 0..kernel {
            let src = (t * stride + tap) as isize - pad as isize;
            if src < 0 || src as usize >= t_in {
                continue;
            }
            let s = src as usize;
            for c in 0..c_in {
                x[s * c_in + c] += cols[t * width + tap * c_in + c];
            }
        }
    }
    x
}
