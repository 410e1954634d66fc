//! One sub-layer `Y = (X ⊗ A) · B` under each partition scheme.
//!
//! `X ⊗ A` is a plain product for an MLP-style layer and multi-head attention
//! for an attention layer. Elementwise ops are left out here; [`super::block`]
//! adds them.

use crate::collectives::{CollectiveHandle, TPGroup};
use crate::schedule::{PartitionPlan, Scheme};
use crate::tensor::{
    attention_core_backward, attention_forward_cached, concat_lastdim_into, concat_rows, matmul,
    matmul_backward_input, matmul_backward_weight, AttentionCache, AttentionWeights, Tensor,
};

use super::{BlockWeights, EngineError, Result};

/// The `A` operand of a sub-layer, full or sharded.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerOperand {
    Linear(Tensor),
    /// Attention projections; `seq` is the sequence length of the input rows.
    Attention { weights: AttentionWeights, seq: usize },
}

impl LayerOperand {
    /// Width of `X ⊗ A`.
    pub fn out_cols(&self) -> usize {
        match self {
            LayerOperand::Linear(a) => a.cols(),
            LayerOperand::Attention { weights, .. } => weights.inner(),
        }
    }

    /// Rows that make up one sample.
    fn sample_rows(&self) -> usize {
        match self {
            LayerOperand::Linear(_) => 1,
            LayerOperand::Attention { seq, .. } => *seq,
        }
    }

    fn apply(&self, x: &Tensor) -> Result<(Tensor, Option<AttentionCache>)> {
        Ok(match self {
            LayerOperand::Linear(a) => (matmul(x, a)?, None),
            LayerOperand::Attention { weights, seq } => {
                let (y, c) = attention_forward_cached(x, weights, *seq)?;
                (y, Some(c))
            }
        })
    }
}

/// Per-μ-batch, per-worker activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerSaved {
    pub plan: PartitionPlan,
    micro: Vec<Vec<MicroSaved>>,
}

#[derive(Debug, Clone)]
struct MicroSaved {
    x: Tensor,
    xa: Tensor,
    cache: Option<AttentionCache>,
}

/// Per-worker gradients of a sub-layer, in the shard layout of the weights.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub shards: Vec<BlockWeights>,
    /// Operations in the order they were issued, e.g. `dgrad[0]`, `ar[0]`,
    /// `wgrad[0]`.
    pub issue_order: Vec<String>,
}

fn check_weights(group: &TPGroup, weights: &[BlockWeights]) -> Result<()> {
    if weights.len() != group.n_workers() {
        return Err(EngineError::Shard(format!(
            "{} weight shards for a group of {}",
            weights.len(),
            group.n_workers()
        )));
    }
    Ok(())
}

/// Forward of one sub-layer under `plan`. Returns every worker's copy of `Y`.
pub fn layer_forward(
    group: &mut TPGroup,
    x: &Tensor,
    weights: &[BlockWeights],
    plan: &PartitionPlan,
) -> Result<(Vec<Tensor>, LayerSaved)> {
    check_weights(group, weights)?;
    let n = group.n_workers();
    let sample_rows = weights[0].a_shard.sample_rows();
    let (rows, _) = (x.rows(), x.cols());
    if rows % sample_rows != 0 {
        return Err(EngineError::Shard(format!("{rows} rows are not whole samples of {sample_rows}")));
    }
    let d = weights[0].b_shard.cols();
    plan.validate(rows / sample_rows, d)?;
    let (p1, p2) = (plan.p1, plan.p2);
    let micro_rows = rows / p1;
    let cols = d / p2;

    let mut saved = Vec::with_capacity(p1);
    let mut out_micro: Vec<Vec<Tensor>> = vec![Vec::with_capacity(p1); n];
    let mut handles: Vec<Vec<CollectiveHandle>> = Vec::with_capacity(p1);
    for m in 0..p1 {
        let x_m = x.rows_slice(m * micro_rows, micro_rows)?;
        let mut ms = Vec::with_capacity(n);
        for w in weights {
            let (xa, cache) = w.a_shard.apply(&x_m)?;
            ms.push(MicroSaved { x: x_m.clone(), xa, cache });
        }
        if plan.scheme == Scheme::Baseline {
            let partials = ms
                .iter()
                .zip(weights)
                .map(|(s, w)| matmul(&s.xa, &w.b_shard))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            for (w, y) in group.allreduce_sum_sync(partials)?.into_iter().enumerate() {
                out_micro[w].push(y);
            }
            handles.push(Vec::new());
        } else {
            let mut hs = Vec::with_capacity(p2);
            for j in 0..p2 {
                let partials = ms
                    .iter()
                    .zip(weights)
                    .map(|(s, w)| Ok(matmul(&s.xa, &w.b_shard.cols_slice(j * cols, cols)?)?))
                    .collect::<Result<Vec<_>>>()?;
                hs.push(group.allreduce_sum_async(&format!("layer.fwd[{m}.{j}]"), partials)?);
            }
            handles.push(hs);
        }
        saved.push(ms);
    }
    if plan.scheme != Scheme::Baseline {
        for hs in handles {
            let mut y: Vec<Tensor> = (0..n).map(|_| Tensor::zeros(&[micro_rows, d])).collect();
            for (j, h) in hs.into_iter().enumerate() {
                group.wait(&h)?;
                for (w, part) in group.take(h)?.into_iter().enumerate() {
                    concat_lastdim_into(&mut y[w], &part, j * cols)?;
                }
            }
            for (w, t) in y.into_iter().enumerate() {
                out_micro[w].push(t);
            }
        }
    }
    let out = out_micro.iter().map(|parts| concat_rows(parts)).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((out, LayerSaved { plan: *plan, micro: saved }))
}

/// Baseline tensor parallelism: one blocking AllReduce of the full output.
pub fn baseline_layer_forward(group: &mut TPGroup, x: &Tensor, weights: &[BlockWeights]) -> Result<Vec<Tensor>> {
    layer_forward(group, x, weights, &PartitionPlan::baseline()).map(|r| r.0)
}

/// Row split of the input into `p1` μ-batches, one async AllReduce each.
pub fn domino_row_forward(group: &mut TPGroup, x: &Tensor, weights: &[BlockWeights], p1: usize) -> Result<Vec<Tensor>> {
    let plan = if p1 == 1 { PartitionPlan::baseline() } else { PartitionPlan::row(p1) };
    layer_forward(group, x, weights, &plan).map(|r| r.0)
}

/// Column split of `B` into `p2` chunks whose reduced outputs are concatenated.
pub fn domino_col_forward(group: &mut TPGroup, x: &Tensor, weights: &[BlockWeights], p2: usize) -> Result<Vec<Tensor>> {
    let plan = if p2 == 1 { PartitionPlan::baseline() } else { PartitionPlan::col(p2) };
    layer_forward(group, x, weights, &plan).map(|r| r.0)
}

pub fn domino_hybrid_forward(
    group: &mut TPGroup,
    x: &Tensor,
    weights: &[BlockWeights],
    p1: usize,
    p2: usize,
) -> Result<Vec<Tensor>> {
    let plan = match (p1, p2) {
        (1, 1) => PartitionPlan::baseline(),
        (_, 1) => PartitionPlan::row(p1),
        (1, _) => PartitionPlan::col(p2),
        _ => PartitionPlan::hybrid(p1, p2),
    };
    layer_forward(group, x, weights, &plan).map(|r| r.0)
}

/// Backward of one sub-layer given the gradient of its (replicated) output.
///
/// Per μ-batch the input gradient is computed first and its AllReduce issued
/// before the weight gradients are computed, so the reduction can overlap
/// them. Returns every worker's copy of the input gradient.
pub fn layer_backward(
    group: &mut TPGroup,
    d_y: &Tensor,
    weights: &[BlockWeights],
    saved: &LayerSaved,
) -> Result<(Vec<Tensor>, LayerGrads)> {
    check_weights(group, weights)?;
    let n = group.n_workers();
    let p1 = saved.plan.p1;
    if saved.micro.len() != p1 || saved.micro.iter().any(|m| m.len() != n) {
        return Err(EngineError::MissingState("saved activations do not match the plan".into()));
    }
    let micro_rows = d_y.rows() / p1;
    let mut grads: Vec<BlockWeights> = weights
        .iter()
        .map(|w| BlockWeights {
            a_shard: match &w.a_shard {
                LayerOperand::Linear(a) => LayerOperand::Linear(Tensor::zeros(a.shape())),
                LayerOperand::Attention { weights: aw, seq } => LayerOperand::Attention {
                    weights: AttentionWeights {
                        w_q: Tensor::zeros(aw.w_q.shape()),
                        w_k: Tensor::zeros(aw.w_k.shape()),
                        w_v: Tensor::zeros(aw.w_v.shape()),
                        heads: aw.heads,
                        d_k: aw.d_k,
                    },
                    seq: *seq,
                },
            },
            b_shard: Tensor::zeros(w.b_shard.shape()),
        })
        .collect();
    let mut order = Vec::new();
    let mut handles = Vec::with_capacity(p1);
    for (m, ms) in saved.micro.iter().enumerate() {
        let dy_m = d_y.rows_slice(m * micro_rows, micro_rows)?;
        let mut d_xa = Vec::with_capacity(n);
        let mut partial = Vec::with_capacity(n);
        let mut qkv = Vec::with_capacity(n);
        for (s, w) in ms.iter().zip(weights) {
            let g = matmul_backward_input(&dy_m, &w.b_shard)?;
            match (&w.a_shard, &s.cache) {
                (LayerOperand::Linear(a), _) => {
                    partial.push(matmul_backward_input(&g, a)?);
                    qkv.push(None);
                }
                (LayerOperand::Attention { weights: aw, .. }, Some(cache)) => {
                    let (dq, dk, dv) = attention_core_backward(&g, cache)?;
                    let mut dx = matmul_backward_input(&dq, &aw.w_q)?;
                    dx.add_assign(&matmul_backward_input(&dk, &aw.w_k)?)?;
                    dx.add_assign(&matmul_backward_input(&dv, &aw.w_v)?)?;
                    partial.push(dx);
                    qkv.push(Some((dq, dk, dv)));
                }
                _ => return Err(EngineError::MissingState(format!("attention cache of μ-batch {m}"))),
            }
            d_xa.push(g);
        }
        order.push(format!("dgrad[{m}]"));
        handles.push(group.allreduce_sum_async(&format!("layer.bwd[{m}]"), partial)?);
        order.push(format!("ar[{m}]"));
        for (w, ((s, g), qkv)) in ms.iter().zip(&d_xa).zip(qkv).enumerate() {
            grads[w].b_shard.add_assign(&matmul_backward_weight(&s.xa, &dy_m)?)?;
            match (&mut grads[w].a_shard, qkv) {
                (LayerOperand::Linear(da), None) => da.add_assign(&matmul_backward_weight(&s.x, g)?)?,
                (LayerOperand::Attention { weights: da, .. }, Some((dq, dk, dv))) => {
                    da.w_q.add_assign(&matmul_backward_weight(&s.x, &dq)?)?;
                    da.w_k.add_assign(&matmul_backward_weight(&s.x, &dk)?)?;
                    da.w_v.add_assign(&matmul_backward_weight(&s.x, &dv)?)?;
                }
                _ => unreachable!("operand kinds fixed above"),
            }
        }
        order.push(format!("wgrad[{m}]"));
    }
    let mut dx_micro: Vec<Vec<Tensor>> = vec![Vec::with_capacity(p1); n];
    for h in handles {
        group.wait(&h)?;
        for (w, t) in group.take(h)?.into_iter().enumerate() {
            dx_micro[w].push(t);
        }
    }
    let dx = dx_micro.iter().map(|p| concat_rows(p)).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((dx, LayerGrads { shards: grads, issue_order: order }))
}

/// Backward of a row-split sub-layer; the split is taken from `saved`.
pub fn domino_row_backward(
    group: &mut TPGroup,
    d_y: &Tensor,
    weights: &[BlockWeights],
    saved: &LayerSaved,
) -> Result<(Vec<Tensor>, LayerGrads)> {
    if !matches!(saved.plan.scheme, Scheme::Baseline | Scheme::RowInput) {
        return Err(EngineError::Unsupported(format!("row backward of plan {}", saved.plan)));
    }
    layer_backward(group, d_y, weights, saved)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{shard_block_weights, unshard_block_weights};
    use crate::tensor::attention_forward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mlp_toy(n: usize, seed: u64) -> (Tensor, Tensor, Tensor, Vec<BlockWeights>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::random(&[2, 4], 1.0, &mut r);
        let a = Tensor::random(&[4, 4], 1.0, &mut r);
        let b = Tensor::random(&[4, 2], 1.0, &mut r);
        let w = shard_block_weights(&LayerOperand::Linear(a.clone()), &b, n).unwrap();
        (x, a, b, w)
    }

    #[test]
    fn single_worker_baseline_is_plain_product() {
        let (x, a, b, w) = mlp_toy(1, 1);
        let mut g = TPGroup::new(1, 0);
        let y = baseline_layer_forward(&mut g, &x, &w).unwrap();
        assert_eq!(y[0], matmul(&matmul(&x, &a).unwrap(), &b).unwrap());
        assert_eq!(g.records().len(), 1);
        assert_eq!(g.records()[0].total_sent(), 0);
    }

    #[test]
    fn mlp_toy_schemes_match_product() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::random(&[4, 4], 1.0, &mut r);
        let a = Tensor::random(&[4, 4], 1.0, &mut r);
        let b = Tensor::random(&[4, 2], 1.0, &mut r);
        let w = shard_block_weights(&LayerOperand::Linear(a.clone()), &b, 2).unwrap();
        let want = matmul(&matmul(&x, &a).unwrap(), &b).unwrap();
        let mut g = TPGroup::new(2, 9);
        let outs = [
            baseline_layer_forward(&mut g, &x, &w).unwrap(),
            domino_row_forward(&mut g, &x, &w, 2).unwrap(),
            domino_col_forward(&mut g, &x, &w, 2).unwrap(),
            domino_hybrid_forward(&mut g, &x, &w, 2, 2).unwrap(),
        ];
        for o in &outs {
            for y in o {
                assert!(y.max_abs_diff(&want) <= 1e-12);
            }
        }
    }

    #[test]
    fn row_split_issues_one_reduction_per_micro_batch() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::random(&[4, 4], 1.0, &mut r);
        let a = Tensor::random(&[4, 4], 1.0, &mut r);
        let b = Tensor::random(&[4, 2], 1.0, &mut r);
        let w = shard_block_weights(&LayerOperand::Linear(a), &b, 2).unwrap();
        let mut g = TPGroup::new(2, 1);
        baseline_layer_forward(&mut g, &x, &w).unwrap();
        let base = g.total_payload_bytes();
        g.clear_records();
        domino_row_forward(&mut g, &x, &w, 2).unwrap();
        assert_eq!(g.records().len(), 2);
        assert!(g.records().iter().all(|r| r.payload_bytes * 2 == base));
        g.clear_records();
        domino_hybrid_forward(&mut g, &x, &w, 2, 2).unwrap();
        assert_eq!(g.records().len(), 4);
        assert_eq!(g.total_payload_bytes(), base);
    }

    #[test]
    fn attention_row_split_matches_unsplit_rows() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let (seq, h, heads) = (4, 8, 4);
        let x = Tensor::random(&[2 * seq, h], 1.0, &mut r);
        let aw = AttentionWeights::new(
            Tensor::random(&[h, h], 0.5, &mut r),
            Tensor::random(&[h, h], 0.5, &mut r),
            Tensor::random(&[h, h], 0.5, &mut r),
            heads,
        )
        .unwrap();
        let b = Tensor::random(&[h, h], 0.5, &mut r);
        let want = matmul(&attention_forward(&x, &aw, seq).unwrap(), &b).unwrap();
        let a = LayerOperand::Attention { weights: aw, seq };
        let w = shard_block_weights(&a, &b, 2).unwrap();
        let mut g = TPGroup::new(2, 4);
        for y in baseline_layer_forward(&mut g, &x, &w).unwrap() {
            assert!(y.max_abs_diff(&want) <= 1e-9);
        }
        for y in domino_row_forward(&mut g, &x, &w, 2).unwrap() {
            assert!(y.max_abs_diff(&want) <= 1e-9);
        }
        // Splitting inside a sequence is rejected.
        assert!(domino_row_forward(&mut g, &x, &w, 4).is_err());
    }

    #[test]
    fn row_backward_issues_reduction_before_weight_grads() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::random(&[4, 4], 1.0, &mut r);
        let a = Tensor::random(&[4, 4], 1.0, &mut r);
        let b = Tensor::random(&[4, 2], 1.0, &mut r);
        let dy = Tensor::random(&[4, 2], 1.0, &mut r);
        let w = shard_block_weights(&LayerOperand::Linear(a.clone()), &b, 2).unwrap();
        let mut g = TPGroup::new(2, 5);
        let (_, saved) = layer_forward(&mut g, &x, &w, &PartitionPlan::row(2)).unwrap();
        let (dx, grads) = domino_row_backward(&mut g, &dy, &w, &saved).unwrap();
        assert_eq!(grads.issue_order, ["dgrad[0]", "ar[0]", "wgrad[0]", "dgrad[1]", "ar[1]", "wgrad[1]"]);
        // Y = X A B: dX = dY Bᵀ Aᵀ, dA = Xᵀ dY Bᵀ, dB = (XA)ᵀ dY.
        let g_xa = matmul(&dy, &b.transpose().unwrap()).unwrap();
        let want_dx = matmul(&g_xa, &a.transpose().unwrap()).unwrap();
        let want_da = matmul(&x.transpose().unwrap(), &g_xa).unwrap();
        let want_db = matmul(&matmul(&x, &a).unwrap().transpose().unwrap(), &dy).unwrap();
        assert!(dx[1].max_abs_diff(&want_dx) <= 1e-9);
        let (LayerOperand::Linear(da), db) = unshard_block_weights(&grads.shards).unwrap() else { panic!() };
        assert!(da.max_abs_diff(&want_da) <= 1e-9);
        assert!(db.max_abs_diff(&want_db) <= 1e-9);
    }
}
