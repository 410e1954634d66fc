//! Transformer kernels: softmax, GeLU, layer norm, residual, dropout and a
//! plain (non-fused) multi-head self-attention. Every kernel here is local
//! to a row of the leading dimension or to one sequence of `seq` rows, which
//! is what makes batch-dimension slicing exact.

use super::{matmul, matmul_backward_input, matmul_backward_weight, DropoutMask, Result, Tensor, TensorError};

fn row_view(t: &Tensor) -> (usize, usize) {
    let c = t.cols();
    (t.len() / c, c)
}

pub fn softmax_lastdim(t: &Tensor) -> Tensor {
    let (rows, c) = row_view(t);
    let mut out = t.clone();
    let d = out.data_mut();
    for r in 0..rows {
        softmax_in_place(&mut d[r * c..(r + 1) * c]);
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Gradient through `y = softmax(x)` given the forward output `y`.
pub fn softmax_backward(y: &Tensor, d_y: &Tensor) -> Result<Tensor> {
    y.ensure_same_shape(d_y, "softmax_backward")?;
    let (rows, c) = row_view(y);
    let mut out = Tensor::zeros(y.shape());
    for r in 0..rows {
        let yr = &y.data()[r * c..(r + 1) * c];
        let dr = &d_y.data()[r * c..(r + 1) * c];
        let inner: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for (j, o) in out.data_mut()[r * c..(r + 1) * c].iter_mut().enumerate() {
            *o = yr[j] * (dr[j] - inner);
        }
    }
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GeLU.
pub fn gelu(t: &Tensor) -> Tensor {
    t.map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
}

pub fn gelu_backward(x: &Tensor, d_y: &Tensor) -> Result<Tensor> {
    x.zip_map(d_y, "gelu_backward", |x, g| {
        let u = GELU_C * (x + GELU_A * x * x * x);
        let th = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
        g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
    })
}

/// Saved state for [`layernorm_backward`].
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
}

pub fn layernorm(t: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layernorm_cached(t, gamma, beta, eps).map(|(y, _)| y)
}

/// Layer norm over the last dimension. A constant row normalizes to exact
/// zeros before the affine transform.
pub fn layernorm_cached(
    t: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    if eps <= 0.0 || eps.is_nan() {
        return Err(TensorError::InvalidEps(eps));
    }
    let (rows, c) = row_view(t);
    for p in [gamma, beta] {
        if p.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                left: t.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
    }
    let mut xhat = Tensor::zeros(t.shape());
    let mut y = Tensor::zeros(t.shape());
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &t.data()[r * c..(r + 1) * c];
        let mean = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd.push(rs);
        let constant = xr.iter().all(|&v| v == xr[0]);
        let hr = &mut xhat.data_mut()[r * c..(r + 1) * c];
        if !constant {
            for (h, &v) in hr.iter_mut().zip(xr) {
                *h = (v - mean) * rs;
            }
        }
        let hr = &xhat.data()[r * c..(r + 1) * c];
        for (j, o) in y.data_mut()[r * c..(r + 1) * c].iter_mut().enumerate() {
            *o = hr[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((y, LayerNormCache { xhat, rstd }))
}

/// Returns `(dx, dgamma, dbeta)`; the parameter grads have `gamma`'s shape.
pub fn layernorm_backward(
    d_y: &Tensor,
    cache: &LayerNormCache,
    gamma: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    d_y.ensure_same_shape(&cache.xhat, "layernorm_backward")?;
    let (rows, c) = row_view(d_y);
    let mut dx = Tensor::zeros(d_y.shape());
    let mut dgamma = Tensor::zeros(gamma.shape());
    let mut dbeta = Tensor::zeros(gamma.shape());
    let mut dxhat = vec![0.0; c];
    for r in 0..rows {
        let dr = &d_y.data()[r * c..(r + 1) * c];
        let hr = &cache.xhat.data()[r * c..(r + 1) * c];
        for j in 0..c {
            dxhat[j] = dr[j] * gamma.data()[j];
            dgamma.data_mut()[j] += dr[j] * hr[j];
            dbeta.data_mut()[j] += dr[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
        let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        let rs = cache.rstd[r];
        for (j, o) in dx.data_mut()[r * c..(r + 1) * c].iter_mut().enumerate() {
            *o = rs * (dxhat[j] - mean_d - hr[j] * mean_dh);
        }
    }
    Ok((dx, dgamma, dbeta))
}

pub fn residual_add(t: &Tensor, r: &Tensor) -> Result<Tensor> {
    t.zip_map(r, "residual_add", |a, b| a + b)
}

/// Inverted dropout: kept elements are scaled by `1 / (1 - rate)`.
pub fn dropout(t: &Tensor, mask: &DropoutMask) -> Result<Tensor> {
    let s = mask.keep_scale();
    t.zip_map(mask.mask(), "dropout", |v, m| v * m * s)
}

pub fn dropout_backward(d_y: &Tensor, mask: &DropoutMask) -> Result<Tensor> {
    dropout(d_y, mask)
}

/// Projection weights for `heads` attention heads laid out block-diagonally:
/// head `i` owns columns `[i * d_k, (i + 1) * d_k)` of each projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub heads: usize,
    pub d_k: usize,
}

impl AttentionWeights {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, heads: usize) -> Result<Self> {
        let err = |m: String| TensorError::Attention(m);
        w_q.ensure_matrix("attention")?;
        w_q.ensure_same_shape(&w_k, "attention")?;
        w_q.ensure_same_shape(&w_v, "attention")?;
        if heads == 0 || w_q.cols() % heads != 0 {
            return Err(err(format!(
                "{} projection columns not divisible into {heads} heads",
                w_q.cols()
            )));
        }
        let d_k = w_q.cols() / heads;
        Ok(Self { w_q, w_k, w_v, heads, d_k })
    }

    pub fn hidden(&self) -> usize {
        self.w_q.rows()
    }

    /// Width of the concatenated head outputs.
    pub fn inner(&self) -> usize {
        self.w_q.cols()
    }
}

/// Saved activations of one attention forward.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Row-stochastic probabilities, one `seq × seq` block per (sample, head).
    pub probs: Vec<f64>,
    pub seq: usize,
    pub heads: usize,
    pub d_k: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub d_x: Tensor,
    pub d_w_q: Tensor,
    pub d_w_k: Tensor,
    pub d_w_v: Tensor,
}

/// `softmax(Q Kᵀ / √d_k) V` per sequence and head, for `x` of shape
/// `(batch * seq, hidden)`.
pub fn attention_forward(x: &Tensor, w: &AttentionWeights, seq: usize) -> Result<Tensor> {
    attention_forward_cached(x, w, seq).map(|(y, _)| y)
}

pub fn attention_forward_cached(
    x: &Tensor,
    w: &AttentionWeights,
    seq: usize,
) -> Result<(Tensor, AttentionCache)> {
    let (rows, hidden) = x.ensure_matrix("attention_forward")?;
    if hidden != w.hidden() {
        return Err(TensorError::ShapeMismatch {
            op: "attention_forward",
            left: x.shape().to_vec(),
            right: w.w_q.shape().to_vec(),
        });
    }
    if seq == 0 || rows % seq != 0 {
        return Err(TensorError::Attention(format!(
            "{rows} rows do not hold whole sequences of length {seq}"
        )));
    }
    let q = matmul(x, &w.w_q)?;
    let k = matmul(x, &w.w_k)?;
    let v = matmul(x, &w.w_v)?;
    let (heads, dk, inner) = (w.heads, w.d_k, w.inner());
    let batch = rows / seq;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut probs = vec![0.0; batch * heads * seq * seq];
    let mut out = Tensor::zeros(&[rows, inner]);
    for b in 0..batch {
        for h in 0..heads {
            let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            for i in 0..seq {
                let qi = &q.data()[(b * seq + i) * inner + h * dk..][..dk];
                for j in 0..seq {
                    let kj = &k.data()[(b * seq + j) * inner + h * dk..][..dk];
                    p[i * seq + j] = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                }
                softmax_in_place(&mut p[i * seq..(i + 1) * seq]);
            }
            for i in 0..seq {
                let orow = &mut out.data_mut()[(b * seq + i) * inner + h * dk..][..dk];
                for j in 0..seq {
                    let pij = p[i * seq + j];
                    let vj = &v.data()[(b * seq + j) * inner + h * dk..][..dk];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += pij * vv;
                    }
                }
            }
        }
    }
    let cache = AttentionCache { q, k, v, probs, seq, heads, d_k: dk };
    Ok((out, cache))
}

/// Gradients with respect to the projected `Q`, `K`, `V`.
pub fn attention_core_backward(d_out: &Tensor, cache: &AttentionCache) -> Result<(Tensor, Tensor, Tensor)> {
    d_out.ensure_same_shape(&cache.q, "attention_core_backward")?;
    let (seq, heads, dk) = (cache.seq, cache.heads, cache.d_k);
    let inner = heads * dk;
    let batch = d_out.rows() / seq;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = Tensor::zeros(cache.q.shape());
    let mut dk_t = Tensor::zeros(cache.k.shape());
    let mut dv = Tensor::zeros(cache.v.shape());
    let mut dp = vec![0.0; seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let p = &cache.probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            let off = |r: usize| (b * seq + r) * inner + h * dk;
            for i in 0..seq {
                let gi = &d_out.data()[off(i)..][..dk];
                for j in 0..seq {
                    let vj = &cache.v.data()[off(j)..][..dk];
                    dp[i * seq + j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                    let pij = p[i * seq + j];
                    for (d, &g) in dv.data_mut()[off(j)..][..dk].iter_mut().zip(gi) {
                        *d += pij * g;
                    }
                }
            }
            for i in 0..seq {
                let pr = &p[i * seq..(i + 1) * seq];
                let dr = &mut dp[i * seq..(i + 1) * seq];
                let inner_sum: f64 = pr.iter().zip(dr.iter()).map(|(a, c)| a * c).sum();
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - inner_sum) * scale;
                }
            }
            for i in 0..seq {
                for j in 0..seq {
                    let ds = dp[i * seq + j];
                    if ds == 0.0 {
                        continue;
                    }
                    for t in 0..dk {
                        dq.data_mut()[off(i) + t] += ds * cache.k.data()[off(j) + t];
                        dk_t.data_mut()[off(j) + t] += ds * cache.q.data()[off(i) + t];
                    }
                }
            }
        }
    }
    Ok((dq, dk_t, dv))
}

/// Full attention backward: core gradients followed by the input gradient
/// and the three projection weight gradients.
pub fn attention_backward(
    d_out: &Tensor,
    cache: &AttentionCache,
    x: &Tensor,
    w: &AttentionWeights,
) -> Result<AttentionGrads> {
    let (dq, dk, dv) = attention_core_backward(d_out, cache)?;
    let mut d_x = matmul_backward_input(&dq, &w.w_q)?;
    d_x.add_assign(&matmul_backward_input(&dk, &w.w_k)?)?;
    d_x.add_assign(&matmul_backward_input(&dv, &w.w_v)?)?;
    Ok(AttentionGrads {
        d_x,
        d_w_q: matmul_backward_weight(x, &dq)?,
        d_w_k: matmul_backward_weight(x, &dk)?,
        d_w_v: matmul_backward_weight(x, &dv)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_weights(hidden: usize, heads: usize, dk: usize, r: &mut ChaCha8Rng) -> AttentionWeights {
        let s = 1.0 / (hidden as f64).sqrt();
        AttentionWeights::new(
            Tensor::random(&[hidden, heads * dk], s, r),
            Tensor::random(&[hidden, heads * dk], s, r),
            Tensor::random(&[hidden, heads * dk], s, r),
            heads,
        )
        .unwrap()
    }

    #[test]
    fn softmax_uniform_row() {
        let t = Tensor::full(&[1, 4], 3.0);
        assert_eq!(softmax_lastdim(&t).data(), &[0.25; 4]);
    }

    #[test]
    fn layernorm_constant_row_is_zero_and_bad_eps_rejected() {
        let t = Tensor::full(&[2, 5], 0.1);
        let g = Tensor::full(&[5], 1.0);
        let b = Tensor::zeros(&[5]);
        assert_eq!(layernorm(&t, &g, &b, 1e-5).unwrap(), Tensor::zeros(&[2, 5]));
        assert_eq!(layernorm(&t, &g, &b, 0.0).unwrap_err(), TensorError::InvalidEps(0.0));
        assert!(layernorm(&t, &Tensor::zeros(&[4]), &b, 1e-5).is_err());
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let t = Tensor::random(&[3, 3], 1.0, &mut rng(1));
        let m = DropoutMask::generate(9, &[3, 3], 0.0).unwrap();
        assert_eq!(dropout(&t, &m).unwrap(), t);
    }

    #[test]
    fn attention_single_token_is_value_projection() {
        let mut r = rng(2);
        let w = random_weights(4, 2, 3, &mut r);
        let x = Tensor::random(&[3, 4], 1.0, &mut r);
        let y = attention_forward(&x, &w, 1).unwrap();
        assert!(y.max_abs_diff(&matmul(&x, &w.w_v).unwrap()) < 1e-15);
    }

    #[test]
    fn attention_batch_rows_are_independent() {
        let mut r = rng(3);
        let w = random_weights(4, 2, 2, &mut r);
        let x = Tensor::random(&[6, 4], 1.0, &mut r);
        let both = attention_forward(&x, &w, 3).unwrap();
        let first = attention_forward(&x.rows_slice(0, 3).unwrap(), &w, 3).unwrap();
        assert_eq!(both.rows_slice(0, 3).unwrap(), first);
    }

    /// Independent scalar evaluation of single-head attention on a 2×2 toy.
    #[test]
    fn attention_toy_matches_scalar_reference() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2], vec![0.8, 0.5]]).unwrap();
        let wq = Tensor::from_rows(&[vec![0.1, 0.4], vec![-0.7, 0.2]]).unwrap();
        let wk = Tensor::from_rows(&[vec![0.5, -0.3], vec![0.9, 0.6]]).unwrap();
        let wv = Tensor::from_rows(&[vec![1.1, -0.2], vec![0.3, 0.7]]).unwrap();
        let w = AttentionWeights::new(wq.clone(), wk.clone(), wv.clone(), 1).unwrap();
        let y = attention_forward(&x, &w, 2).unwrap();

        let proj = |m: &Tensor, i: usize, j: usize| x.at(i, 0) * m.at(0, j) + x.at(i, 1) * m.at(1, j);
        let mut expect = [[0.0; 2]; 2];
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| (proj(&wq, i, 0) * proj(&wk, j, 0) + proj(&wq, i, 1) * proj(&wk, j, 1)) / 2f64.sqrt())
                .collect();
            let z = s[0].exp() + s[1].exp();
            for c in 0..2 {
                expect[i][c] = (s[0].exp() * proj(&wv, 0, c) + s[1].exp() * proj(&wv, 1, c)) / z;
            }
        }
        for i in 0..2 {
            for c in 0..2 {
                assert!((y.at(i, c) - expect[i][c]).abs() < 1e-12);
            }
        }
    }

    fn fd_check(params: &mut [f64], analytic: &[f64], mut loss: impl FnMut(&[f64]) -> f64) {
        let eps = 1e-5;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + eps;
            let lp = loss(params);
            params[i] = orig - eps;
            let lm = loss(params);
            params[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(rel < 1e-6, "index {i}: fd {fd} vs analytic {}", analytic[i]);
        }
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let mut r = rng(4);
        let w = random_weights(4, 2, 2, &mut r);
        let x = Tensor::random(&[4, 4], 1.0, &mut r);
        let g = Tensor::random(&[4, 4], 1.0, &mut r);
        let (_, cache) = attention_forward_cached(&x, &w, 2).unwrap();
        let grads = attention_backward(&g, &cache, &x, &w).unwrap();
        let loss = |x: &Tensor, w: &AttentionWeights| g.dot(&attention_forward(x, w, 2).unwrap()).unwrap();

        let mut xs = x.data().to_vec();
        fd_check(&mut xs, grads.d_x.data(), |p| loss(&Tensor::new(vec![4, 4], p.to_vec()).unwrap(), &w));
        let mut q = w.w_q.data().to_vec();
        fd_check(&mut q, grads.d_w_q.data(), |p| {
            let mut w2 = w.clone();
            w2.w_q = Tensor::new(vec![4, 4], p.to_vec()).unwrap();
            loss(&x, &w2)
        });
        let mut k = w.w_k.data().to_vec();
        fd_check(&mut k, grads.d_w_k.data(), |p| {
            let mut w2 = w.clone();
            w2.w_k = Tensor::new(vec![4, 4], p.to_vec()).unwrap();
            loss(&x, &w2)
        });
        let mut v = w.w_v.data().to_vec();
        fd_check(&mut v, grads.d_w_v.data(), |p| {
            let mut w2 = w.clone();
            w2.w_v = Tensor::new(vec![4, 4], p.to_vec()).unwrap();
            loss(&x, &w2)
        });
    }

    #[test]
    fn layernorm_gelu_softmax_backward_match_finite_differences() {
        let mut r = rng(5);
        let x = Tensor::random(&[3, 5], 1.0, &mut r);
        let gamma = Tensor::random(&[5], 1.0, &mut r);
        let beta = Tensor::random(&[5], 1.0, &mut r);
        let g = Tensor::random(&[3, 5], 1.0, &mut r);

        let (_, cache) = layernorm_cached(&x, &gamma, &beta, 1e-5).unwrap();
        let (dx, dgamma, dbeta) = layernorm_backward(&g, &cache, &gamma).unwrap();
        let ln = |x: &Tensor, ga: &Tensor, be: &Tensor| g.dot(&layernorm(x, ga, be, 1e-5).unwrap()).unwrap();
        let mut xs = x.data().to_vec();
        fd_check(&mut xs, dx.data(), |p| ln(&Tensor::new(vec![3, 5], p.to_vec()).unwrap(), &gamma, &beta));
        let mut gs = gamma.data().to_vec();
        fd_check(&mut gs, dgamma.data(), |p| ln(&x, &Tensor::new(vec![5], p.to_vec()).unwrap(), &beta));
        let mut bs = beta.data().to_vec();
        fd_check(&mut bs, dbeta.data(), |p| ln(&x, &gamma, &Tensor::new(vec![5], p.to_vec()).unwrap()));

        let dg = gelu_backward(&x, &g).unwrap();
        let mut xs = x.data().to_vec();
        fd_check(&mut xs, dg.data(), |p| g.dot(&gelu(&Tensor::new(vec![3, 5], p.to_vec()).unwrap())).unwrap());

        let y = softmax_lastdim(&x);
        let ds = softmax_backward(&y, &g).unwrap();
        let mut xs = x.data().to_vec();
        fd_check(&mut xs, ds.data(), |p| {
            g.dot(&softmax_lastdim(&Tensor::new(vec![3, 5], p.to_vec()).unwrap())).unwrap()
        });
    }
}
