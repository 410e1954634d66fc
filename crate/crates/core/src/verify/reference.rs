//! Unsharded, unsplit block stack written with plain scalar loops.
//!
//! Nothing here calls the tensor kernels: products, layer norm, GeLU and
//! attention are re-derived element by element so the oracle does not share
//! code paths with the engine.

use crate::engine::{BlockParams, EngineConfig, EngineError, Result};
use crate::schedule::BlockLayout;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
struct Mat {
    r: usize,
    c: usize,
    d: Vec<f64>,
}

impl Mat {
    fn zeros(r: usize, c: usize) -> Self {
        Self { r, c, d: vec![0.0; r * c] }
    }

    fn of(t: &Tensor) -> Self {
        let c = t.cols();
        Self { r: t.len() / c, c, d: t.data().to_vec() }
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.d[i * self.c + j] = v;
    }

    fn tensor(&self, shape: &[usize]) -> Tensor {
        Tensor::new(shape.to_vec(), self.d.clone()).expect("sizes agree")
    }

    fn plus(&self, o: &Mat) -> Mat {
        let mut out = self.clone();
        for (a, b) in out.d.iter_mut().zip(&o.d) {
            *a += b;
        }
        out
    }
}

/// `a · b`, or with `ta` / `tb` the transposed operand.
fn mm(a: &Mat, ta: bool, b: &Mat, tb: bool) -> Mat {
    let (m, ka) = if ta { (a.c, a.r) } else { (a.r, a.c) };
    let (kb, n) = if tb { (b.c, b.r) } else { (b.r, b.c) };
    assert_eq!(ka, kb, "inner dimensions");
    let mut out = Mat::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..ka {
                let x = if ta { a.get(t, i) } else { a.get(i, t) };
                let y = if tb { b.get(j, t) } else { b.get(t, j) };
                acc += x * y;
            }
            out.set(i, j, acc);
        }
    }
    out
}

struct Ln {
    xhat: Mat,
    rstd: Vec<f64>,
}

fn ln_fwd(x: &Mat, g: &[f64], b: &[f64], eps: f64) -> (Mat, Ln) {
    let mut y = Mat::zeros(x.r, x.c);
    let mut xhat = Mat::zeros(x.r, x.c);
    let mut rstd = Vec::with_capacity(x.r);
    for i in 0..x.r {
        let mut mean = 0.0;
        for j in 0..x.c {
            mean += x.get(i, j);
        }
        mean /= x.c as f64;
        let mut var = 0.0;
        for j in 0..x.c {
            let d = x.get(i, j) - mean;
            var += d * d;
        }
        var /= x.c as f64;
        let rs = 1.0 / (var + eps).sqrt();
        for j in 0..x.c {
            let h = (x.get(i, j) - mean) * rs;
            xhat.set(i, j, h);
            y.set(i, j, h * g[j] + b[j]);
        }
        rstd.push(rs);
    }
    (y, Ln { xhat, rstd })
}

fn ln_bwd(dy: &Mat, c: &Ln, g: &[f64], dg: &mut [f64], db: &mut [f64]) -> Mat {
    let n = dy.c as f64;
    let mut dx = Mat::zeros(dy.r, dy.c);
    for i in 0..dy.r {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for j in 0..dy.c {
            let dh = dy.get(i, j) * g[j];
            s1 += dh;
            s2 += dh * c.xhat.get(i, j);
            dg[j] += dy.get(i, j) * c.xhat.get(i, j);
            db[j] += dy.get(i, j);
        }
        for j in 0..dy.c {
            let dh = dy.get(i, j) * g[j];
            dx.set(i, j, c.rstd[i] * (dh - s1 / n - c.xhat.get(i, j) * s2 / n));
        }
    }
    dx
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + 0.044715 * v * v * v)).tanh())
}

fn gelu_grad(v: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * v * v)
}

fn drop(x: &Mat, mask: &[f64], scale: f64) -> Mat {
    let mut out = x.clone();
    for (o, m) in out.d.iter_mut().zip(mask) {
        *o *= m * scale;
    }
    out
}

struct Attn {
    q: Mat,
    k: Mat,
    v: Mat,
    /// Probabilities indexed `[sample][head][i][j]`, flattened.
    p: Vec<f64>,
}

fn attn_fwd(a: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, seq: usize, heads: usize) -> (Mat, Attn) {
    let q = mm(a, false, wq, false);
    let k = mm(a, false, wk, false);
    let v = mm(a, false, wv, false);
    let width = q.c;
    let dk = width / heads;
    let samples = a.r / seq;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut p = vec![0.0; samples * heads * seq * seq];
    let mut out = Mat::zeros(a.r, width);
    for s in 0..samples {
        for h in 0..heads {
            let base = (s * heads + h) * seq * seq;
            for i in 0..seq {
                let mut row = vec![0.0; seq];
                for (j, r) in row.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for t in 0..dk {
                        acc += q.get(s * seq + i, h * dk + t) * k.get(s * seq + j, h * dk + t);
                    }
                    *r = acc * scale;
                }
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|r| (r - mx).exp()).sum();
                for j in 0..seq {
                    p[base + i * seq + j] = (row[j] - mx).exp() / z;
                }
                for t in 0..dk {
                    let mut acc = 0.0;
                    for j in 0..seq {
                        acc += p[base + i * seq + j] * v.get(s * seq + j, h * dk + t);
                    }
                    out.set(s * seq + i, h * dk + t, acc);
                }
            }
        }
    }
    (out, Attn { q, k, v, p })
}

fn attn_bwd(d_out: &Mat, c: &Attn, seq: usize, heads: usize) -> (Mat, Mat, Mat) {
    let width = c.q.c;
    let dk = width / heads;
    let samples = d_out.r / seq;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = Mat::zeros(d_out.r, width);
    let mut dkm = Mat::zeros(d_out.r, width);
    let mut dv = Mat::zeros(d_out.r, width);
    for s in 0..samples {
        for h in 0..heads {
            let base = (s * heads + h) * seq * seq;
            let col = |t: usize| h * dk + t;
            for i in 0..seq {
                let mut dp = vec![0.0; seq];
                for (j, d) in dp.iter_mut().enumerate() {
                    for t in 0..dk {
                        *d += d_out.get(s * seq + i, col(t)) * c.v.get(s * seq + j, col(t));
                    }
                }
                let mut dot = 0.0;
                for (j, d) in dp.iter().enumerate() {
                    dot += c.p[base + i * seq + j] * d;
                }
                for j in 0..seq {
                    let pij = c.p[base + i * seq + j];
                    let ds = pij * (dp[j] - dot) * scale;
                    for t in 0..dk {
                        let (ri, rj) = (s * seq + i, s * seq + j);
                        dv.set(rj, col(t), dv.get(rj, col(t)) + pij * d_out.get(ri, col(t)));
                        dq.set(ri, col(t), dq.get(ri, col(t)) + ds * c.k.get(rj, col(t)));
                        dkm.set(rj, col(t), dkm.get(rj, col(t)) + ds * c.q.get(ri, col(t)));
                    }
                }
            }
        }
    }
    (dq, dkm, dv)
}

struct BlockCache {
    x: Mat,
    ln_in: Option<Ln>,
    a: Mat,
    attn: Attn,
    core: Mat,
    ln_mid: Ln,
    m_in: Mat,
    pre: Mat,
    act: Mat,
    ln_out: Option<Ln>,
}

struct P {
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
    w1: Mat,
    w2: Mat,
    g1: Vec<f64>,
    b1: Vec<f64>,
    g2: Vec<f64>,
    b2: Vec<f64>,
}

impl P {
    fn of(p: &BlockParams) -> Self {
        Self {
            wq: Mat::of(&p.w_q),
            wk: Mat::of(&p.w_k),
            wv: Mat::of(&p.w_v),
            wo: Mat::of(&p.w_o),
            w1: Mat::of(&p.w_1),
            w2: Mat::of(&p.w_2),
            g1: p.ln1_gamma.data().to_vec(),
            b1: p.ln1_beta.data().to_vec(),
            g2: p.ln2_gamma.data().to_vec(),
            b2: p.ln2_beta.data().to_vec(),
        }
    }
}

/// Output, input gradient and parameter gradients of the oracle.
#[derive(Debug, Clone)]
pub struct Reference {
    pub y: Tensor,
    pub d_x: Tensor,
    pub grads: Vec<BlockParams>,
}

/// Forward of the whole stack, then the backward pass for output gradient
/// `d_out`, with the dropout masks `cfg` defines.
pub fn single_device_reference(cfg: &EngineConfig, params: &[BlockParams], x: &Tensor, d_out: &Tensor) -> Result<Reference> {
    let s = &cfg.shape;
    if params.len() != s.layers || x.shape() != [s.rows(), s.hidden] || d_out.shape() != x.shape() {
        return Err(EngineError::Shard("reference inputs do not match the block shape".into()));
    }
    let masks = cfg.masks()?;
    let pre_norm = s.layout == BlockLayout::PreNorm;
    let ps: Vec<P> = params.iter().map(P::of).collect();
    let mut h = Mat::of(x);
    let mut caches = Vec::with_capacity(s.layers);
    for (b, p) in ps.iter().enumerate() {
        let x_in = h.clone();
        let (a, ln_in) = if pre_norm {
            let (y, c) = ln_fwd(&x_in, &p.g1, &p.b1, cfg.eps);
            (y, Some(c))
        } else {
            (x_in.clone(), None)
        };
        let (core, attn) = attn_fwd(&a, &p.wq, &p.wk, &p.wv, s.seq, s.heads);
        let o = mm(&core, false, &p.wo, false);
        let m1 = &masks[b][0];
        let u = x_in.plus(&drop(&o, m1.mask().data(), m1.keep_scale()));
        let (res, m_in, ln_mid) = if pre_norm {
            let (y, c) = ln_fwd(&u, &p.g2, &p.b2, cfg.eps);
            (u, y, c)
        } else {
            let (y, c) = ln_fwd(&u, &p.g1, &p.b1, cfg.eps);
            (y.clone(), y, c)
        };
        let pre = mm(&m_in, false, &p.w1, false);
        let mut act = pre.clone();
        for v in &mut act.d {
            *v = gelu(*v);
        }
        let z = mm(&act, false, &p.w2, false);
        let m2 = &masks[b][1];
        let v = res.plus(&drop(&z, m2.mask().data(), m2.keep_scale()));
        let ln_out = if pre_norm {
            h = v;
            None
        } else {
            let (y, c) = ln_fwd(&v, &p.g2, &p.b2, cfg.eps);
            h = y;
            Some(c)
        };
        caches.push(BlockCache { x: x_in, ln_in, a, attn, core, ln_mid, m_in, pre, act, ln_out });
    }
    let y = h.tensor(x.shape());

    let mut grads: Vec<BlockParams> = Vec::with_capacity(s.layers);
    let mut dy = Mat::of(d_out);
    for b in (0..s.layers).rev() {
        let (p, c) = (&ps[b], &caches[b]);
        let mut dg1 = vec![0.0; s.hidden];
        let mut db1 = vec![0.0; s.hidden];
        let mut dg2 = vec![0.0; s.hidden];
        let mut db2 = vec![0.0; s.hidden];
        let dv = match &c.ln_out {
            Some(lc) => ln_bwd(&dy, lc, &p.g2, &mut dg2, &mut db2),
            None => dy.clone(),
        };
        let m2 = &masks[b][1];
        let dz = drop(&dv, m2.mask().data(), m2.keep_scale());
        let dw2 = mm(&c.act, true, &dz, false);
        let mut dpre = mm(&dz, false, &p.w2, true);
        for (d, &v) in dpre.d.iter_mut().zip(&c.pre.d) {
            *d *= gelu_grad(v);
        }
        let dw1 = mm(&c.m_in, true, &dpre, false);
        let dm = mm(&dpre, false, &p.w1, true);
        let du = if pre_norm {
            dv.plus(&ln_bwd(&dm, &c.ln_mid, &p.g2, &mut dg2, &mut db2))
        } else {
            ln_bwd(&dv.plus(&dm), &c.ln_mid, &p.g1, &mut dg1, &mut db1)
        };
        let m1 = &masks[b][0];
        let d_o = drop(&du, m1.mask().data(), m1.keep_scale());
        let dwo = mm(&c.core, true, &d_o, false);
        let d_core = mm(&d_o, false, &p.wo, true);
        let (dq, dk, dvv) = attn_bwd(&d_core, &c.attn, s.seq, s.heads);
        let dwq = mm(&c.a, true, &dq, false);
        let dwk = mm(&c.a, true, &dk, false);
        let dwv = mm(&c.a, true, &dvv, false);
        let da = mm(&dq, false, &p.wq, true).plus(&mm(&dk, false, &p.wk, true)).plus(&mm(&dvv, false, &p.wv, true));
        dy = match &c.ln_in {
            Some(lc) => du.plus(&ln_bwd(&da, lc, &p.g1, &mut dg1, &mut db1)),
            None => du.plus(&da),
        };
        debug_assert_eq!(c.x.r, dy.r);
        let hd = [s.hidden];
        grads.push(BlockParams {
            w_q: dwq.tensor(&[s.hidden, s.hidden]),
            w_k: dwk.tensor(&[s.hidden, s.hidden]),
            w_v: dwv.tensor(&[s.hidden, s.hidden]),
            w_o: dwo.tensor(&[s.hidden, s.hidden]),
            w_1: dw1.tensor(&[s.hidden, s.ffn]),
            w_2: dw2.tensor(&[s.ffn, s.hidden]),
            ln1_gamma: Tensor::new(hd.to_vec(), dg1)?,
            ln1_beta: Tensor::new(hd.to_vec(), db1)?,
            ln2_gamma: Tensor::new(hd.to_vec(), dg2)?,
            ln2_beta: Tensor::new(hd.to_vec(), db2)?,
        });
    }
    grads.reverse();
    Ok(Reference { y, d_x: dy.tensor(x.shape()), grads })
}
