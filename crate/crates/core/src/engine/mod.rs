//! Tensor-parallel execution of transformer blocks over a simulated group.
//!
//! Weights follow the usual two-matrix sharding: the first operand `A` of each
//! sub-layer (the QKV projections, the MLP up-projection) is split by columns
//! and the second operand `B` (attention output projection, MLP
//! down-projection) by rows, so every worker produces a partial sum of the
//! sub-layer output that one AllReduce completes.
//!
//! On top of that, a [`PartitionPlan`] slices the input rows into `p1`
//! μ-batches of whole samples and/or the columns of `B` into `p2` chunks. The
//! slices carry no data dependency on each other, so the collective of one
//! slice can run while another slice computes.
//!
//! [`layer`] holds the single sub-layer `X ⊗ A ⊗ B` operations and [`block`]
//! the full block stack with layer norms, dropout and residuals, forward and
//! backward, which also records the event DAG it actually executed.

pub mod block;
pub mod layer;

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::collectives::{CollectiveError, CollectiveHandle, TPGroup};
use crate::schedule::{BlockShape, PartitionPlan, ScheduleError, Scheme};
use crate::tensor::{concat_lastdim, concat_rows, split_lastdim, split_rows, Tensor, TensorError};

pub use block::{BlockRun, EngineConfig, TpEngine};
pub use layer::{
    baseline_layer_forward, domino_col_forward, domino_hybrid_forward, domino_row_backward,
    domino_row_forward, layer_backward, layer_forward, LayerGrads, LayerOperand, LayerSaved,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("cannot shard: {0}")]
    Shard(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("missing saved state: {0}")]
    MissingState(String),
    #[error("handle bridge: {0}")]
    Bridge(String),
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// Full (unsharded) parameters of one transformer block.
///
/// The same struct holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// Attention output projection, `hidden × hidden`.
    pub w_o: Tensor,
    /// MLP up-projection, `hidden × ffn`.
    pub w_1: Tensor,
    /// MLP down-projection, `ffn × hidden`.
    pub w_2: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

impl BlockParams {
    pub const NAMES: [&'static str; 10] = [
        "w_q", "w_k", "w_v", "w_o", "w_1", "w_2", "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
    ];

    pub fn random<R: Rng + ?Sized>(hidden: usize, ffn: usize, rng: &mut R) -> Self {
        let sh = 1.0 / (hidden as f64).sqrt();
        let sf = 1.0 / (ffn as f64).sqrt();
        let sq = [hidden, hidden];
        let mut gamma = Tensor::random(&[hidden], 0.2, rng);
        for g in gamma.data_mut() {
            *g += 1.0;
        }
        let mut gamma2 = Tensor::random(&[hidden], 0.2, rng);
        for g in gamma2.data_mut() {
            *g += 1.0;
        }
        Self {
            w_q: Tensor::random(&sq, sh, rng),
            w_k: Tensor::random(&sq, sh, rng),
            w_v: Tensor::random(&sq, sh, rng),
            w_o: Tensor::random(&sq, sh, rng),
            w_1: Tensor::random(&[hidden, ffn], sh, rng),
            w_2: Tensor::random(&[ffn, hidden], sf, rng),
            ln1_gamma: gamma,
            ln1_beta: Tensor::random(&[hidden], 0.1, rng),
            ln2_gamma: gamma2,
            ln2_beta: Tensor::random(&[hidden], 0.1, rng),
        }
    }

    pub fn zeros(hidden: usize, ffn: usize) -> Self {
        let sq = [hidden, hidden];
        Self {
            w_q: Tensor::zeros(&sq),
            w_k: Tensor::zeros(&sq),
            w_v: Tensor::zeros(&sq),
            w_o: Tensor::zeros(&sq),
            w_1: Tensor::zeros(&[hidden, ffn]),
            w_2: Tensor::zeros(&[ffn, hidden]),
            ln1_gamma: Tensor::zeros(&[hidden]),
            ln1_beta: Tensor::zeros(&[hidden]),
            ln2_gamma: Tensor::zeros(&[hidden]),
            ln2_beta: Tensor::zeros(&[hidden]),
        }
    }

    /// Tensors in [`NAMES`](Self::NAMES) order.
    pub fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.w_1, &self.w_2,
            &self.ln1_gamma, &self.ln1_beta, &self.ln2_gamma, &self.ln2_beta,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o, &mut self.w_1, &mut self.w_2,
            &mut self.ln1_gamma, &mut self.ln1_beta, &mut self.ln2_gamma, &mut self.ln2_beta,
        ]
    }

    /// Largest elementwise difference over all tensors.
    pub fn max_abs_diff(&self, other: &BlockParams) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// One worker's sub-layer weights: a column shard of `A` and a row shard of `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub a_shard: LayerOperand,
    pub b_shard: Tensor,
}

fn split_cols_checked(t: &Tensor, n: usize, what: &str) -> Result<Vec<Tensor>> {
    if t.cols() % n != 0 {
        return Err(EngineError::Shard(format!("{what} has {} columns, not divisible by {n}", t.cols())));
    }
    Ok(split_lastdim(t, n)?)
}

fn split_rows_checked(t: &Tensor, n: usize, what: &str) -> Result<Vec<Tensor>> {
    if t.rows() % n != 0 {
        return Err(EngineError::Shard(format!("{what} has {} rows, not divisible by {n}", t.rows())));
    }
    Ok(split_rows(t, n)?)
}

/// Shard a sub-layer over `n` workers.
///
/// For attention `A` the heads are dealt out in contiguous groups, which is a
/// column split of each projection because heads are laid out block-wise.
pub fn shard_block_weights(a_full: &LayerOperand, b_full: &Tensor, n: usize) -> Result<Vec<BlockWeights>> {
    if n == 0 {
        return Err(EngineError::Shard("group size must be positive".into()));
    }
    let a_shards: Vec<LayerOperand> = match a_full {
        LayerOperand::Linear(a) => split_cols_checked(a, n, "A")?.into_iter().map(LayerOperand::Linear).collect(),
        LayerOperand::Attention { weights, seq } => {
            if weights.heads % n != 0 {
                return Err(EngineError::Shard(format!("{} heads not divisible by {n} workers", weights.heads)));
            }
            let q = split_cols_checked(&weights.w_q, n, "W_q")?;
            let k = split_cols_checked(&weights.w_k, n, "W_k")?;
            let v = split_cols_checked(&weights.w_v, n, "W_v")?;
            let heads = weights.heads / n;
            q.into_iter()
                .zip(k)
                .zip(v)
                .map(|((q, k), v)| {
                    Ok(LayerOperand::Attention {
                        weights: crate::tensor::AttentionWeights::new(q, k, v, heads)?,
                        seq: *seq,
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    if b_full.rows() != a_full.out_cols() {
        return Err(EngineError::Shard(format!(
            "B has {} rows but A produces {} columns",
            b_full.rows(),
            a_full.out_cols()
        )));
    }
    let b_shards = split_rows_checked(b_full, n, "B")?;
    Ok(a_shards
        .into_iter()
        .zip(b_shards)
        .map(|(a_shard, b_shard)| BlockWeights { a_shard, b_shard })
        .collect())
}

/// Reassemble full sub-layer weights from shards.
pub fn unshard_block_weights(shards: &[BlockWeights]) -> Result<(LayerOperand, Tensor)> {
    let first = shards.first().ok_or_else(|| EngineError::Shard("no shards".into()))?;
    let b = concat_rows(&shards.iter().map(|s| s.b_shard.clone()).collect::<Vec<_>>())?;
    let a = match &first.a_shard {
        LayerOperand::Linear(_) => {
            let parts: Vec<Tensor> = shards
                .iter()
                .map(|s| match &s.a_shard {
                    LayerOperand::Linear(t) => Ok(t.clone()),
                    _ => Err(EngineError::Shard("mixed shard kinds".into())),
                })
                .collect::<Result<_>>()?;
            LayerOperand::Linear(concat_lastdim(&parts)?)
        }
        LayerOperand::Attention { seq, .. } => {
            let mut q = Vec::new();
            let mut k = Vec::new();
            let mut v = Vec::new();
            let mut heads = 0;
            for s in shards {
                let LayerOperand::Attention { weights, .. } = &s.a_shard else {
                    return Err(EngineError::Shard("mixed shard kinds".into()));
                };
                q.push(weights.w_q.clone());
                k.push(weights.w_k.clone());
                v.push(weights.w_v.clone());
                heads += weights.heads;
            }
            LayerOperand::Attention {
                weights: crate::tensor::AttentionWeights::new(
                    concat_lastdim(&q)?,
                    concat_lastdim(&k)?,
                    concat_lastdim(&v)?,
                    heads,
                )?,
                seq: *seq,
            }
        }
    };
    Ok((a, b))
}

/// Communication volume of one block (attention plus MLP) per iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommVolume {
    /// Payload of every AllReduce in issue order.
    pub allreduces: Vec<u64>,
}

impl CommVolume {
    pub fn count(&self) -> usize {
        self.allreduces.len()
    }

    pub fn total(&self) -> u64 {
        self.allreduces.iter().sum()
    }
}

/// AllReduce payloads of one block for `plan`: forward and backward of each
/// sub-layer, so four full-activation reductions for the baseline.
pub fn comm_volume(plan: &PartitionPlan, shape: &BlockShape) -> Result<CommVolume> {
    plan.validate(shape.batch, shape.hidden)?;
    let dt = shape.dtype_bytes as u64;
    let rows = ((shape.batch / plan.p1) * shape.seq) as u64;
    let full = rows * shape.hidden as u64 * dt;
    let chunk = rows * (shape.hidden / plan.p2) as u64 * dt;
    let chunked = matches!(plan.scheme, Scheme::ColWeight | Scheme::Hybrid);
    let mut allreduces = Vec::new();
    // Sub-layers: attention then MLP; forward chunk reductions, backward full
    // input-gradient reductions per μ-batch.
    for _ in 0..2 {
        for _ in 0..plan.p1 {
            if chunked {
                allreduces.extend(std::iter::repeat_n(chunk, plan.p2));
            } else {
                allreduces.push(full);
            }
        }
    }
    for _ in 0..2 {
        allreduces.extend(std::iter::repeat_n(full, plan.p1));
    }
    Ok(CommVolume { allreduces })
}

/// Volume of the rejected partition that splits `X` by columns.
///
/// Splitting `X = [X_1 … X_N]` along the hidden axis and `A` to match turns
/// one sub-layer into the products `X_i · A_ij · B_j` over all piece/shard
/// pairs. Each one has the full output shape, and all of them must be summed,
/// so every pair contributes a full-activation reduction.
pub fn wrong_axis_volume(shape: &BlockShape) -> u64 {
    let full = shape.activation_bytes();
    let per_pass: u64 = (0..shape.n)
        .flat_map(|i| (0..shape.n).map(move |j| (i, j)))
        .map(|_| full)
        .sum();
    // Forward and backward of the two sub-layers, as for the baseline.
    4 * per_pass
}

/// Placeholders for backward-pass collectives, created while the forward pass
/// runs.
///
/// The forward installs one slot per input-gradient reduction the backward
/// will issue. The backward deposits the handle right after issuing the
/// collective and claims it at the first consumer of the reduced gradient.
/// Claiming waits on the handle, so the wait happens exactly once and before
/// any read.
#[derive(Debug, Default)]
pub struct NoopBridge {
    slots: BTreeMap<String, SlotState>,
}

#[derive(Debug)]
enum SlotState {
    Installed,
    Holding(CollectiveHandle),
    Claimed,
}

impl NoopBridge {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn install(&mut self, key: &str) -> Result<()> {
        if self.slots.insert(key.to_string(), SlotState::Installed).is_some() {
            return Err(EngineError::Bridge(format!("slot `{key}` installed twice")));
        }
        Ok(())
    }

    pub fn deposit(&mut self, key: &str, handle: CollectiveHandle) -> Result<()> {
        match self.slots.get_mut(key) {
            Some(s @ SlotState::Installed) => {
                *s = SlotState::Holding(handle);
                Ok(())
            }
            Some(_) => Err(EngineError::Bridge(format!("slot `{key}` already used"))),
            None => Err(EngineError::Bridge(format!("no slot `{key}` was installed"))),
        }
    }

    /// Wait on the deposited handle and return the reduced per-worker buffers.
    pub fn claim(&mut self, key: &str, group: &mut TPGroup) -> Result<Vec<Tensor>> {
        let slot = self
            .slots
            .get_mut(key)
            .ok_or_else(|| EngineError::Bridge(format!("no slot `{key}` was installed")))?;
        match std::mem::replace(slot, SlotState::Claimed) {
            SlotState::Holding(h) => {
                group.wait(&h)?;
                Ok(group.take(h)?)
            }
            SlotState::Installed => {
                *slot = SlotState::Installed;
                Err(EngineError::Bridge(format!("slot `{key}` claimed before deposit")))
            }
            SlotState::Claimed => Err(EngineError::Bridge(format!("slot `{key}` claimed twice"))),
        }
    }

    /// Slots not yet claimed.
    pub fn unclaimed(&self) -> Vec<&str> {
        self.slots
            .iter()
            .filter(|(_, s)| !matches!(s, SlotState::Claimed))
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn finish(&self) -> Result<()> {
        let open = self.unclaimed();
        if open.is_empty() {
            Ok(())
        } else {
            Err(EngineError::Bridge(format!("unclaimed slots: {}", open.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::BlockLayout;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(batch: usize, seq: usize, hidden: usize, n: usize, dt: usize) -> BlockShape {
        BlockShape { layers: 1, batch, seq, hidden, heads: 4, ffn: 4 * hidden, n, dtype_bytes: dt, layout: BlockLayout::PreNorm }
    }

    #[test]
    fn sharding_round_trips() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::random(&[4, 6], 1.0, &mut r);
        let b = Tensor::random(&[6, 2], 1.0, &mut r);
        let one = shard_block_weights(&LayerOperand::Linear(a.clone()), &b, 1).unwrap();
        assert_eq!(one[0].a_shard, LayerOperand::Linear(a.clone()));
        assert_eq!(one[0].b_shard, b);
        let two = shard_block_weights(&LayerOperand::Linear(a.clone()), &b, 2).unwrap();
        let LayerOperand::Linear(a0) = &two[0].a_shard else { panic!() };
        assert_eq!(a0.shape(), &[4, 3]);
        let (a2, b2) = unshard_block_weights(&two).unwrap();
        assert_eq!(a2, LayerOperand::Linear(a));
        assert_eq!(b2, b);
    }

    #[test]
    fn sharding_rejects_indivisible_dims() {
        let a = Tensor::zeros(&[4, 6]);
        let b = Tensor::zeros(&[6, 2]);
        assert!(matches!(shard_block_weights(&LayerOperand::Linear(a), &b, 4), Err(EngineError::Shard(_))));
    }

    #[test]
    fn volume_examples() {
        let s = shape(4, 8, 16, 2, 4);
        let base = comm_volume(&PartitionPlan::baseline(), &s).unwrap();
        assert_eq!(base.allreduces, vec![2048; 4]);
        assert_eq!(base.total(), 8192);
        let row = comm_volume(&PartitionPlan::row(4), &s).unwrap();
        assert_eq!(row.count(), 16);
        assert!(row.allreduces.iter().all(|&b| b == 512));
        assert_eq!(row.total(), 8192);
        for plan in [PartitionPlan::col(2), PartitionPlan::col(4), PartitionPlan::hybrid(2, 4)] {
            assert_eq!(comm_volume(&plan, &s).unwrap().total(), 8192, "{plan}");
        }
        let s3 = shape(4, 8, 12, 3, 4);
        let b3 = comm_volume(&PartitionPlan::baseline(), &s3).unwrap().total();
        assert_eq!(wrong_axis_volume(&s3), 9 * b3);
    }

    #[test]
    fn bridge_claims_exactly_once() {
        let mut g = TPGroup::new(2, 3);
        let mut br = NoopBridge::new();
        br.install("x").unwrap();
        assert!(br.install("x").is_err());
        assert!(br.claim("x", &mut g).is_err());
        let h = g.allreduce_sum_async("x", vec![Tensor::full(&[2], 1.0), Tensor::full(&[2], 2.0)]).unwrap();
        br.deposit("x", h).unwrap();
        assert_eq!(br.unclaimed(), vec!["x"]);
        let out = br.claim("x", &mut g).unwrap();
        assert_eq!(out[1].data(), &[3.0, 3.0]);
        assert!(br.claim("x", &mut g).is_err());
        br.finish().unwrap();
    }
}
