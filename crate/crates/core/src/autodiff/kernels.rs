//! Forward/backward kernels for the fused tape ops.

use crate::tensor::Scalar;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

/// Row-wise layer normalisation. Returns `(y, mean, rstd)`.
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    width: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / width;
    let n = T::of(width as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for (xr, yr) in x.chunks_exact(width).zip(y.chunks_exact_mut(width)) {
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..width {
            yr[j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    g: &[T],
    x: &[T],
    gamma: &[T],
    means: &[T],
    rstds: &[T],
    width: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = T::of(width as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); width];
    let mut dbeta = vec![T::zero(); width];
    let mut dxhat = vec![T::zero(); width];
    let mut xhat = vec![T::zero(); width];
    for (r, ((gr, xr), dxr)) in g
        .chunks_exact(width)
        .zip(x.chunks_exact(width))
        .zip(dx.chunks_exact_mut(width))
        .enumerate()
    {
        let (mean, rstd) = (means[r], rstds[r]);
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for j in 0..width {
            xhat[j] = (xr[j] - mean) * rstd;
            dxhat[j] = gr[j] * gamma[j];
            dgamma[j] = dgamma[j] + gr[j] * xhat[j];
            dbeta[j] = dbeta[j] + gr[j];
            sum_d = sum_d + dxhat[j];
            sum_dx = sum_dx + dxhat[j] * xhat[j];
        }
        let mean_d = sum_d / n;
        let mean_dx = sum_dx / n;
        for j in 0..width {
            dxr[j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    }
    (dx, dgamma, dbeta)
}

/// Shape bookkeeping for fused causal attention over a packed `[B, T, 3D]` input.
#[derive(Debug, Clone, Copy)]
pub struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub d_model: usize,
    pub heads: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
    fn q(&self, b: usize, t: usize, h: usize) -> usize {
        (b * self.seq + t) * 3 * self.d_model + h * self.head_dim()
    }
    fn k(&self, b: usize, t: usize, h: usize) -> usize {
        self.q(b, t, h) + self.d_model
    }
    fn v(&self, b: usize, t: usize, h: usize) -> usize {
        self.q(b, t, h) + 2 * self.d_model
    }
    fn o(&self, b: usize, t: usize, h: usize) -> usize {
        (b * self.seq + t) * self.d_model + h * self.head_dim()
    }
    fn p(&self, b: usize, h: usize, i: usize) -> usize {
        ((b * self.heads + h) * self.seq + i) * self.seq
    }
}

/// Returns `(out [B,T,D], probs [B,H,T,T])`.
pub fn attention_forward<T: Scalar>(qkv: &[T], dims: AttnDims) -> (Vec<T>, Vec<T>) {
    let AttnDims {
        batch, seq, heads, ..
    } = dims;
    let dh = dims.head_dim();
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); batch * seq * dims.d_model];
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..seq {
                let qi = &qkv[dims.q(b, i, h)..dims.q(b, i, h) + dh];
                let prow = &mut probs[dims.p(b, h, i)..dims.p(b, h, i) + seq];
                let mut max = T::neg_infinity();
                for j in 0..=i {
                    let kj = &qkv[dims.k(b, j, h)..dims.k(b, j, h) + dh];
                    let s = qi.iter().zip(kj).map(|(&a, &c)| a * c).sum::<T>() * scale;
                    prow[j] = s;
                    max = max.max(s);
                }
                let mut z = T::zero();
                for p in prow.iter_mut().take(i + 1) {
                    *p = (*p - max).exp();
                    z = z + *p;
                }
                let o = dims.o(b, i, h);
                for j in 0..=i {
                    prow[j] = prow[j] / z;
                    let vj = &qkv[dims.v(b, j, h)..dims.v(b, j, h) + dh];
                    for (d, &vv) in vj.iter().enumerate() {
                        out[o + d] = out[o + d] + prow[j] * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradient w.r.t. the packed `qkv` input.
pub fn attention_backward<T: Scalar>(g: &[T], qkv: &[T], probs: &[T], dims: AttnDims) -> Vec<T> {
    let AttnDims {
        batch, seq, heads, ..
    } = dims;
    let dh = dims.head_dim();
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dqkv = vec![T::zero(); qkv.len()];
    let mut dp = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..seq {
                let prow = &probs[dims.p(b, h, i)..dims.p(b, h, i) + seq];
                let go = &g[dims.o(b, i, h)..dims.o(b, i, h) + dh];
                let mut dot = T::zero();
                for j in 0..=i {
                    let vj = dims.v(b, j, h);
                    let mut acc = T::zero();
                    for d in 0..dh {
                        acc = acc + go[d] * qkv[vj + d];
                        dqkv[vj + d] = dqkv[vj + d] + prow[j] * go[d];
                    }
                    dp[j] = acc;
                    dot = dot + acc * prow[j];
                }
                let qi = dims.q(b, i, h);
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    let kj = dims.k(b, j, h);
                    for d in 0..dh {
                        dqkv[qi + d] = dqkv[qi + d] + ds * qkv[kj + d];
                        dqkv[kj + d] = dqkv[kj + d] + ds * qkv[qi + d];
                    }
                }
            }
        }
    }
    dqkv
}

/// Mean token cross-entropy over rows with a target. Returns `(loss, softmax probs)`.
pub fn cross_entropy_forward<T: Scalar>(
    logits: &[T],
    vocab: usize,
    targets: &[Option<usize>],
) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    let mut count = 0usize;
    for ((row, prow), target) in logits
        .chunks_exact(vocab)
        .zip(probs.chunks_exact_mut(vocab))
        .zip(targets)
    {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (p, &l) in prow.iter_mut().zip(row) {
            *p = (l - max).exp();
            z = z + *p;
        }
        prow.iter_mut().for_each(|p| *p = *p / z);
        if let Some(t) = *target {
            total = total + (z.ln() + max - row[t]);
            count += 1;
        }
    }
    let loss = if count == 0 {
        T::zero()
    } else {
        total / T::of(count as f64)
    };
    (loss, probs)
}

pub fn cross_entropy_backward<T: Scalar>(
    g: T,
    probs: &[T],
    vocab: usize,
    targets: &[Option<usize>],
) -> Vec<T> {
    let count = targets.iter().filter(|t| t.is_some()).count().max(1);
    let w = g / T::of(count as f64);
    let mut d = vec![T::zero(); probs.len()];
    for ((drow, prow), target) in d
        .chunks_exact_mut(vocab)
        .zip(probs.chunks_exact(vocab))
        .zip(targets)
    {
        if let Some(t) = *target {
            for (dv, &p) in drow.iter_mut().zip(prow) {
                *dv = p * w;
            }
            drow[t] = drow[t] - w;
        }
    }
    d
}
