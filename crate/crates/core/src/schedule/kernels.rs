//! Kernel lists of the compute events of one block, per worker.
//!
//! Sizes are those of a single worker's shard: the attention inner width and
//! the MLP width are divided by the group size, hidden width is not. The
//! per-head attention products of a worker are described as one batched
//! product over its whole inner width, which keeps the flop count exact when
//! the head count does not divide the group size.

use super::{BlockLayout, BlockShape, Kernel};

struct Dims {
    rows: u64,
    samples: u64,
    seq: u64,
    h: u64,
    inner: u64,
    /// Heads times sequence-squared score entries held by this worker.
    scores: u64,
    ffn: u64,
    dt: u64,
}

fn dims(s: &BlockShape, samples: usize) -> Dims {
    let n = s.n as u64;
    Dims {
        rows: (samples * s.seq) as u64,
        samples: samples as u64,
        seq: s.seq as u64,
        h: s.hidden as u64,
        inner: s.hidden as u64 / n,
        scores: (samples * s.heads * s.seq * s.seq) as u64 / n,
        ffn: s.ffn as u64 / n,
        dt: s.dtype_bytes as u64,
    }
}

fn ew(passes: u64, elems: u64, dt: u64) -> Kernel {
    Kernel::Elementwise { bytes: passes * elems * dt }
}

fn gemm(m: u64, n: u64, k: u64) -> Kernel {
    Kernel::Gemm { m, n, k, count: 1 }
}

fn layer_norm(d: &Dims) -> Kernel {
    ew(2, d.rows * d.h, d.dt)
}

fn dropout(d: &Dims) -> Kernel {
    ew(2, d.rows * d.h, d.dt)
}

fn residual(d: &Dims) -> Kernel {
    ew(3, d.rows * d.h, d.dt)
}

fn layer_norm_bwd(d: &Dims) -> Kernel {
    ew(4, d.rows * d.h, d.dt)
}

/// Elementwise ops before the attention projections.
pub fn attn_pre(s: &BlockShape, samples: usize) -> Vec<Kernel> {
    let d = dims(s, samples);
    match s.layout {
        BlockLayout::PreNorm => vec![layer_norm(&d)],
        BlockLayout::PostNorm => vec![],
    }
}

/// QKV projection and the attention core for this worker's heads.
pub fn attn_core(s: &BlockShape, samples: usize) -> Vec<Kernel> {
    let d = dims(s, samples);
    vec![
        gemm(d.rows, 3 * d.inner, d.h),
        Kernel::Gemm { m: d.seq, n: d.seq, k: d.inner, count: d.samples },
        ew(2, d.scores, d.dt),
        Kernel::Gemm { m: d.seq, n: d.inner, k: d.seq, count: d.samples },
    ]
}

/// Output projection of attention onto `cols` hidden columns.
pub fn attn_proj(s: &BlockShape, samples: usize, cols: usize) -> Vec<Kernel> {
    let d = dims(s, samples);
    vec![gemm(d.rows, cols as u64, d.inner)]
}

/// Dropout, residual and layer norm between the sub-layers.
pub fn mid(s: &BlockShape, samples: usize) -> Vec<Kernel> {
    let d = dims(s, samples);
    vec![dropout(&d), residual(&d), layer_norm(&d)]
}

/// First MLP matmul and activation.
pub fn mlp_up(s: &BlockShape, samples: usize) -> Vec<Kernel> {
    let d = dims(s, samples);
    vec![gemm(d.rows, d.ffn, d.h), ew(2, d.rows * d.ffn, d.dt)]
}

/// Second MLP matmul onto `cols` hidden columns.
pub fn mlp_proj(s: &BlockShape, samples: usize, cols: usize) -> Vec<Kernel> {
    let d = dims(s, samples);
    vec![gemm(d.rows, cols as u64, d.ffn)]
}

/// Dropout and residual after the MLP (plus the final norm under post-norm).
pub fn out(s: &BlockShape, samples: usize) -> Vec<Kernel> {
    let d = dims(s, samples);
    match s.layout {
        BlockLayout::PreNorm => vec![dropout(&d), residual(&d)],
        BlockLayout::PostNorm => vec![dropout(&d), residual(&d), layer_norm(&d)],
    }
}

/// Concat copy of a sub-layer output into its pre-sized buffer.
pub fn concat_copy(s: &BlockShape, samples: usize) -> Vec<Kernel> {
    let d = dims(s, samples);
    vec![Kernel::Memcpy { bytes: 2 * d.rows * d.h * d.dt }]
}

/// Backward of [`out`].
pub fn out_bwd(s: &BlockShape, samples: usize) -> Vec<Kernel> {
    let d = dims(s, samples);
    match s.layout {
        BlockLayout::PreNorm => vec![dropout(&d)],
        BlockLayout::PostNorm => vec![layer_norm_bwd(&d), dropout(&d)],
    }
}

/// MLP input-gradient kernels.
pub fn mlp_dgrad(s: &BlockShape, samples: usize) -> Vec<Kernel> {
    let d = dims(s, samples);
    vec![gemm(d.rows, d.ffn, d.h), ew(3, d.rows * d.ffn, d.dt), gemm(d.rows, d.h, d.ffn)]
}

/// MLP weight-gradient kernels.
pub fn mlp_wgrad(s: &BlockShape, samples: usize) -> Vec<Kernel> {
    let d = dims(s, samples);
    vec![gemm(d.ffn, d.h, d.rows), gemm(d.h, d.ffn, d.rows)]
}

/// Backward of [`mid`].
pub fn mid_bwd(s: &BlockShape, samples: usize) -> Vec<Kernel> {
    let d = dims(s, samples);
    match s.layout {
        BlockLayout::PreNorm => vec![layer_norm_bwd(&d), residual(&d), dropout(&d)],
        BlockLayout::PostNorm => vec![residual(&d), layer_norm_bwd(&d), dropout(&d)],
    }
}

/// Attention input-gradient kernels.
pub fn attn_dgrad(s: &BlockShape, samples: usize) -> Vec<Kernel> {
    let d = dims(s, samples);
    let head = Kernel::Gemm { m: d.seq, n: d.inner, k: d.seq, count: d.samples };
    vec![
        gemm(d.rows, d.inner, d.h),
        Kernel::Gemm { m: d.seq, n: d.seq, k: d.inner, count: d.samples },
        ew(3, d.scores, d.dt),
        head,
        head,
        head,
        gemm(d.rows, d.h, 3 * d.inner),
    ]
}

/// Attention weight-gradient kernels.
pub fn attn_wgrad(s: &BlockShape, samples: usize) -> Vec<Kernel> {
    let d = dims(s, samples);
    vec![gemm(d.inner, d.h, d.rows), gemm(d.h, 3 * d.inner, d.rows)]
}

/// Backward of [`attn_pre`] plus the residual gradient merge.
pub fn in_bwd(s: &BlockShape, samples: usize) -> Vec<Kernel> {
    let d = dims(s, samples);
    match s.layout {
        BlockLayout::PreNorm => vec![layer_norm_bwd(&d), residual(&d)],
        BlockLayout::PostNorm => vec![residual(&d)],
    }
}
