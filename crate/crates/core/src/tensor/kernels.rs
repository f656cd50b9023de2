//! Slice-level numeric kernels shared by the eager ops and the tape.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `out += a · b` for `a: m×k`, `b: k×n`.
pub fn gemm_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * b_pj;
            }
        }
    }
}

/// `out += a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn gemm_bt_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = F::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                s = s + x * y;
            }
            out[i * n + j] = out[i * n + j] + s;
        }
    }
}

/// `out += aᵀ · b` for `a: m×k`, `b: m×n`, giving `k×n`.
pub fn gemm_at_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == F::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &b_ij) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * b_ij;
            }
        }
    }
}

/// In-place max-shifted softmax of one row. Entries equal to `-inf` get weight exactly 0.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = if *v == F::neg_infinity() {
            F::zero()
        } else {
            (*v - max).exp()
        };
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Numerically stable `ln Σ exp(row)`.
pub fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let s: F = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

/// Standard matrix product of two 2-D tensors.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::dim("matmul expects matrices"));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {m}x{k} by {k2}x{n}"
        )));
    }
    let mut out = vec![F::zero(); m * n];
    gemm_acc(a.values(), b.values(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

pub fn softmax<F: Scalar>(x: &[F]) -> Result<Vec<F>> {
    if x.is_empty() {
        return Err(Error::dim("softmax of an empty row"));
    }
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// `gain ⊙ (x − mean)/sqrt(var + eps) + bias` over one row, with the biased variance.
pub fn layer_norm<F: Scalar>(x: &[F], gain: &[F], bias: &[F], eps: F) -> Result<Vec<F>> {
    if gain.len() != x.len() || bias.len() != x.len() || x.is_empty() {
        return Err(Error::dim(format!(
            "layer_norm width {} with gain {} and bias {}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    let mut out = vec![F::zero(); x.len()];
    layer_norm_row(x, gain, bias, eps, &mut out);
    Ok(out)
}

/// Normalizes one row into `out` and returns `1/sqrt(var + eps)`.
pub(crate) fn layer_norm_row<F: Scalar>(
    x: &[F],
    gain: &[F],
    bias: &[F],
    eps: F,
    out: &mut [F],
) -> F {
    let n = F::of_usize(x.len());
    let mean = x.iter().copied().sum::<F>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let inv_std = F::one() / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = gain[i] * (x[i] - mean) * inv_std + bias[i];
    }
    inv_std
}

/// Cross-entropy of `logits` against the target distribution that puts
/// `1 − eps_ls` on `target` and spreads `eps_ls` uniformly over all classes.
///
/// Returns the loss and its gradient with respect to the logits.
pub fn cross_entropy_label_smoothed<F: Scalar>(
    logits: &[F],
    target: usize,
    eps_ls: F,
) -> Result<(F, Vec<F>)> {
    let v = logits.len();
    if target >= v {
        return Err(Error::Index {
            index: target,
            size: v,
        });
    }
    if eps_ls < F::zero() || eps_ls >= F::one() {
        return Err(Error::Config(format!(
            "label smoothing {eps_ls} outside [0, 1)"
        )));
    }
    let lse = log_sum_exp(logits);
    let uniform = eps_ls / F::of_usize(v);
    let mut loss = F::zero();
    let mut grad = Vec::with_capacity(v);
    for (i, &z) in logits.iter().enumerate() {
        let q = if i == target {
            F::one() - eps_ls + uniform
        } else {
            uniform
        };
        let log_p = z - lse;
        if q > F::zero() {
            loss = loss - q * log_p;
        }
        grad.push(log_p.exp() - q);
    }
    Ok((loss, grad))
}
