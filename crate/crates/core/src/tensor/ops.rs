//! Forward and backward kernels. Every tensor here is viewed as a matrix
//! (a rank-1 tensor is one row); the only broadcast is bias over rows.

use super::{Real, Tensor};
use crate::error::{RammError, Result};

fn dim_err<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> RammError {
    RammError::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

// Raw kernels, i-k-j order so the inner loop streams contiguous rows.

fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[m×n] += a[m×k] · b[n×k]ᵀ
fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

// out[k×n] += a[m×k]ᵀ · b[m×n]
fn gemm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(dim_err("matmul", a, b));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_nn(a.data(), b.data(), out.data_mut(), m, k, n);
    Ok(out)
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    if b.cols() != k {
        return Err(dim_err("matmul_nt", a, b));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_nt(a.data(), b.data(), out.data_mut(), m, k, n);
    Ok(out)
}

/// `a[m×k]ᵀ · b[m×n]`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != m {
        return Err(dim_err("matmul_tn", a, b));
    }
    let mut out = Tensor::zeros(&[k, n]);
    gemm_tn(a.data(), b.data(), out.data_mut(), m, k, n);
    Ok(out)
}

/// Gradients of `C = A·B`: `(dC·Bᵀ, Aᵀ·dC)`.
pub fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((matmul_nt(d_out, b)?, matmul_tn(a, d_out)?))
}

pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

/// Jacobian-vector product of the row softmax, given its output `y`.
pub fn softmax_rows_backward<T: Real>(y: &Tensor<T>, d_y: &Tensor<T>) -> Result<Tensor<T>> {
    y.check_same_shape(d_y, "softmax_rows_backward")?;
    let mut dx = Tensor::zeros(y.shape());
    for i in 0..y.rows() {
        let (yr, dyr) = (y.row(i), d_y.row(i));
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((o, &a), &b) in dx.row_mut(i).iter_mut().zip(yr).zip(dyr) {
            *o = a * (b - dot);
        }
    }
    Ok(dx)
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    pub probs: Tensor<T>,
}

/// `softmax(Q·Kᵀ/√d_k)·V`.
pub fn scaled_dot_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    if q.cols() != k.cols() {
        return Err(dim_err("attention(q,k)", q, k));
    }
    if k.rows() != v.rows() {
        return Err(dim_err("attention(k,v)", k, v));
    }
    let scale = T::one() / T::lit(q.cols() as f64).sqrt();
    let mut scores = matmul_nt(q, k)?;
    scores.data_mut().iter_mut().for_each(|s| *s *= scale);
    let probs = softmax_rows(&scores);
    let out = matmul(&probs, v)?;
    Ok((out, AttentionCache { probs }))
}

/// Returns `(dQ, dK, dV)`.
pub fn scaled_dot_attention_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cache: &AttentionCache<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let scale = T::one() / T::lit(q.cols() as f64).sqrt();
    let d_v = matmul_tn(&cache.probs, d_out)?;
    let d_probs = matmul_nt(d_out, v)?;
    let mut d_scores = softmax_rows_backward(&cache.probs, &d_probs)?;
    d_scores.data_mut().iter_mut().for_each(|s| *s *= scale);
    let d_q = matmul(&d_scores, k)?;
    let d_k = matmul_tn(&d_scores, q)?;
    Ok((d_q, d_k, d_v))
}

/// `x·W + b`, bias broadcast over rows.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if b.len() != w.cols() {
        return Err(dim_err("linear(bias)", w, b));
    }
    let mut out = matmul(x, w)?;
    let bias = b.data();
    for i in 0..out.rows() {
        out.row_mut(i)
            .iter_mut()
            .zip(bias)
            .for_each(|(o, &bv)| *o += bv);
    }
    Ok(out)
}

/// Returns `(dx, dW, db)`.
pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d_x = matmul_nt(d_out, w)?;
    let d_w = matmul_tn(x, d_out)?;
    let mut d_b = Tensor::zeros(&[w.cols()]);
    for i in 0..d_out.rows() {
        d_b.data_mut()
            .iter_mut()
            .zip(d_out.row(i))
            .for_each(|(a, &g)| *a += g);
    }
    Ok((d_x, d_w, d_b))
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(dim_err("layer_norm", x, gain));
    }
    let n = T::lit(d as f64);
    let mut normalized = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        inv_std.push(rstd);
        let nrow = normalized.row_mut(i);
        for (o, &v) in nrow.iter_mut().zip(row) {
            *o = (v - mean) * rstd;
        }
        let nrow = normalized.row(i).to_vec();
        for (((o, &h), &g), &b) in out
            .row_mut(i)
            .iter_mut()
            .zip(&nrow)
            .zip(gain.data())
            .zip(bias.data())
        {
            *o = h * g + b;
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Returns `(dx, d_gain, d_bias)`.
pub fn layer_norm_backward<T: Real>(
    gain: &Tensor<T>,
    cache: &LayerNormCache<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    cache.normalized.check_same_shape(d_out, "layer_norm_backward")?;
    let d = d_out.cols();
    let n = T::lit(d as f64);
    let mut d_x = Tensor::zeros(d_out.shape());
    let mut d_gain = Tensor::zeros(&[d]);
    let mut d_bias = Tensor::zeros(&[d]);
    let mut d_hat = vec![T::zero(); d];
    for i in 0..d_out.rows() {
        let (dy, xh) = (d_out.row(i), cache.normalized.row(i));
        let mut mean_dh = T::zero();
        let mut mean_dh_xh = T::zero();
        for j in 0..d {
            d_gain.data_mut()[j] += dy[j] * xh[j];
            d_bias.data_mut()[j] += dy[j];
            d_hat[j] = dy[j] * gain.data()[j];
            mean_dh += d_hat[j];
            mean_dh_xh += d_hat[j] * xh[j];
        }
        mean_dh /= n;
        mean_dh_xh /= n;
        let rstd = cache.inv_std[i];
        for (j, o) in d_x.row_mut(i).iter_mut().enumerate() {
            *o = rstd * (d_hat[j] - mean_dh - xh[j] * mean_dh_xh);
        }
    }
    Ok((d_x, d_gain, d_bias))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    x.map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
}

pub fn gelu_backward<T: Real>(x: &Tensor<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    let three = T::lit(3.0);
    x.zip_map(d_out, |v, g| {
        let u = c * (v + a * v * v * v);
        let t = u.tanh();
        let du = c * (T::one() + three * a * v * v);
        g * (half * (T::one() + t) + half * v * (T::one() - t * t) * du)
    })
}

/// Mean negative log-likelihood of `targets`; returns `(loss, d_logits)`.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Tensor<T>)> {
    let (m, c) = (logits.rows(), logits.cols());
    if targets.len() != m {
        return Err(RammError::Dimension {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let inv_m = T::one() / T::lit(m as f64);
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(logits.shape());
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(RammError::Index {
                what: "target class",
                index: t,
                bound: c,
            });
        }
        let logp = log_softmax_row(logits.row(i));
        loss -= logp[t];
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let onehot = if j == t { T::one() } else { T::zero() };
            *g = (logp[j].exp() - onehot) * inv_m;
        }
    }
    Ok((loss * inv_m, grad))
}

/// Cross-entropy against soft target distributions (rows of `targets` sum to 1).
pub fn soft_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    logits.check_same_shape(targets, "soft_cross_entropy")?;
    let inv_m = T::one() / T::lit(logits.rows() as f64);
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(logits.shape());
    for i in 0..logits.rows() {
        let logp = log_softmax_row(logits.row(i));
        let tr = targets.row(i);
        let tsum: T = tr.iter().copied().sum();
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            loss -= tr[j] * logp[j];
            *g = (logp[j].exp() * tsum - tr[j]) * inv_m;
        }
    }
    Ok((loss * inv_m, grad))
}

/// Mean over rows of `KL(softmax(p) ‖ softmax(q))`.
pub fn kl_divergence<T: Real>(p_logits: &Tensor<T>, q_logits: &Tensor<T>) -> Result<T> {
    Ok(kl_divergence_with_grad(p_logits, q_logits)?.0)
}

/// KL value with gradients with respect to both logit tensors.
pub fn kl_divergence_with_grad<T: Real>(
    p_logits: &Tensor<T>,
    q_logits: &Tensor<T>,
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    p_logits.check_same_shape(q_logits, "kl_divergence")?;
    let inv_m = T::one() / T::lit(p_logits.rows() as f64);
    let mut total = T::zero();
    let mut d_p = Tensor::zeros(p_logits.shape());
    let mut d_q = Tensor::zeros(q_logits.shape());
    for i in 0..p_logits.rows() {
        let lp = log_softmax_row(p_logits.row(i));
        let lq = log_softmax_row(q_logits.row(i));
        let kl: T = lp
            .iter()
            .zip(&lq)
            .map(|(&a, &b)| a.exp() * (a - b))
            .sum();
        total += kl;
        for j in 0..lp.len() {
            let (pj, qj) = (lp[j].exp(), lq[j].exp());
            d_p.row_mut(i)[j] = pj * ((lp[j] - lq[j]) - kl) * inv_m;
            d_q.row_mut(i)[j] = (qj - pj) * inv_m;
        }
    }
    Ok((total * inv_m, d_p, d_q))
}

/// `(KL(p‖q) + KL(q‖p)) / 2` with gradients for both arguments.
pub fn symmetric_kl_with_grad<T: Real>(
    p_logits: &Tensor<T>,
    q_logits: &Tensor<T>,
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    let (a, dp1, dq1) = kl_divergence_with_grad(p_logits, q_logits)?;
    let (b, dq2, dp2) = kl_divergence_with_grad(q_logits, p_logits)?;
    let half = T::lit(0.5);
    let d_p = dp1.add(&dp2)?.scale(half);
    let d_q = dq1.add(&dq2)?.scale(half);
    Ok(((a + b) * half, d_p, d_q))
}

pub fn symmetric_kl<T: Real>(p_logits: &Tensor<T>, q_logits: &Tensor<T>) -> Result<T> {
    Ok(symmetric_kl_with_grad(p_logits, q_logits)?.0)
}

/// L2-normalize a vector; `eps` sits inside the norm so zero input stays finite.
pub fn l2_normalize<T: Real>(x: &Tensor<T>, eps: T) -> (Tensor<T>, T) {
    let norm = (x.data().iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
    (x.map(|v| v / norm), norm)
}

/// Backward of `y = x / ‖x‖`, given `y` and the norm used.
pub fn l2_normalize_backward<T: Real>(y: &Tensor<T>, norm: T, d_y: &Tensor<T>) -> Result<Tensor<T>> {
    let dot: T = y.data().iter().zip(d_y.data()).map(|(&a, &b)| a * b).sum();
    y.zip_map(d_y, |yi, gi| (gi - yi * dot) / norm)
}
