//! A stack of transformer blocks run forward and backward under one mode.
//!
//! Each block is attention followed by an MLP, with layer norms, dropout and
//! residual connections in either pre-norm or post-norm layout. Workers hold
//! sharded weights and replicated activations; every sub-layer ends in an
//! AllReduce of partial sums, in the forward pass on the output and in the
//! backward pass on the input gradient.
//!
//! While running, the engine records every compute step, collective issue,
//! wait and barrier it performs into a [`ScheduleDag`]. Dependencies are
//! taken from the values each step actually consumed.

use crate::collectives::{CollectiveHandle, TPGroup};
use crate::schedule::{
    kernels as k, label, BlockLayout, BlockShape, EventId, EventKind, Kernel, Mode, PartitionPlan,
    ScheduleDag, Scheme,
};
use crate::tensor::{
    attention_core_backward, attention_forward_cached, concat_lastdim, concat_lastdim_into,
    concat_rows, dropout, dropout_backward, gelu, gelu_backward, layernorm_backward,
    layernorm_cached, matmul, matmul_backward_input, matmul_backward_weight, AttentionCache,
    AttentionWeights, DropoutMask, LayerNormCache, Tensor,
};

use super::{shard_block_weights, BlockParams, EngineError, LayerOperand, NoopBridge, Result};

/// Numeric configuration of a block stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    pub shape: BlockShape,
    pub dropout: f64,
    pub eps: f64,
    pub mask_seed: u64,
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if self.shape.heads % self.shape.n != 0 {
            return Err(EngineError::Shard(format!(
                "{} heads not divisible by {} workers",
                self.shape.heads, self.shape.n
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EngineError::Unsupported(format!("dropout rate {}", self.dropout)));
        }
        Ok(())
    }

    /// Dropout masks over the whole batch for the attention and MLP outputs of
    /// every block. μ-batches use row slices of these.
    pub fn masks(&self) -> Result<Vec<[DropoutMask; 2]>> {
        let s = &self.shape;
        let shape = [s.rows(), s.hidden];
        (0..s.layers)
            .map(|b| {
                Ok([
                    DropoutMask::generate(site_seed(self.mask_seed, b, 0), &shape, self.dropout)?,
                    DropoutMask::generate(site_seed(self.mask_seed, b, 1), &shape, self.dropout)?,
                ])
            })
            .collect()
    }
}

/// Seed of the dropout site `site` (0 attention, 1 MLP) of block `block`.
pub fn site_seed(mask_seed: u64, block: usize, site: usize) -> u64 {
    mask_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((2 * block + site) as u64 + 1)
        .rotate_left(17)
}

#[derive(Debug, Clone)]
struct WorkerBlock {
    attn: AttentionWeights,
    w_o: Tensor,
    w_1: Tensor,
    w_2: Tensor,
    ln1_gamma: Tensor,
    ln1_beta: Tensor,
    ln2_gamma: Tensor,
    ln2_beta: Tensor,
}

#[derive(Debug, Clone)]
struct WorkerGrads {
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
    w_1: Tensor,
    w_2: Tensor,
    ln1_gamma: Tensor,
    ln1_beta: Tensor,
    ln2_gamma: Tensor,
    ln2_beta: Tensor,
}

impl WorkerGrads {
    fn zeros(w: &WorkerBlock) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            w_q: z(&w.attn.w_q),
            w_k: z(&w.attn.w_k),
            w_v: z(&w.attn.w_v),
            w_o: z(&w.w_o),
            w_1: z(&w.w_1),
            w_2: z(&w.w_2),
            ln1_gamma: z(&w.ln1_gamma),
            ln1_beta: z(&w.ln1_beta),
            ln2_gamma: z(&w.ln2_gamma),
            ln2_beta: z(&w.ln2_beta),
        }
    }
}

/// Activations one worker keeps for one μ-batch of one block.
#[derive(Debug, Clone, Default)]
struct Saved {
    ln_in: Option<LayerNormCache>,
    a_in: Option<Tensor>,
    attn: Option<AttentionCache>,
    core: Option<Tensor>,
    ln_mid: Option<LayerNormCache>,
    m_in: Option<Tensor>,
    pre: Option<Tensor>,
    act: Option<Tensor>,
    ln_out: Option<LayerNormCache>,
}

fn need<'a, T>(v: &'a Option<T>, what: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| EngineError::MissingState(what.to_string()))
}

struct Trace {
    dag: ScheduleDag,
    last_compute: Option<EventId>,
}

impl Trace {
    fn compute(&mut self, name: String, m: usize, kernels: Vec<Kernel>, deps: Vec<EventId>) -> EventId {
        let id = self.dag.push(name, EventKind::Compute { kernels }, m, Some(m), deps);
        self.last_compute = Some(id);
        id
    }

    fn comm(&mut self, name: String, m: usize, bytes: u64) -> EventId {
        let deps = self.last_compute.into_iter().collect();
        self.dag.push(name, EventKind::Comm { bytes }, 0, Some(m), deps)
    }

    fn wait(&mut self, comm: EventId, m: usize) -> EventId {
        let name = label::wait(&self.dag.get(comm).label);
        self.dag.push(name, EventKind::Wait, m, Some(m), vec![comm])
    }

    fn barrier(&mut self, name: String, deps: Vec<EventId>) -> EventId {
        self.dag.push(name, EventKind::Barrier, 0, None, deps)
    }
}

enum Source {
    Handle(CollectiveHandle),
    /// Deposited in the handle bridge under this key.
    Bridge(String),
}

/// Reduced per-worker buffers, possibly still in flight.
enum Reduced {
    Flight { source: Source, comm: EventId, micro: usize },
    Ready { bufs: Vec<Tensor>, event: EventId },
}

struct Exec<'g> {
    group: &'g mut TPGroup,
    trace: Trace,
    bridge: NoopBridge,
    dt: usize,
    blocking: bool,
}

impl Exec<'_> {
    fn issue(&mut self, name: String, m: usize, bufs: Vec<Tensor>, via_bridge: bool) -> Result<Reduced> {
        let bytes = bufs[0].size_bytes(self.dt);
        let comm = self.trace.comm(name.clone(), m, bytes);
        let h = self.group.allreduce_sum_async(&name, bufs)?;
        let source = if via_bridge {
            self.bridge.deposit(&name, h)?;
            Source::Bridge(name)
        } else {
            Source::Handle(h)
        };
        let r = Reduced::Flight { source, comm, micro: m };
        if self.blocking {
            let (bufs, event) = self.resolve(r)?;
            Ok(Reduced::Ready { bufs, event })
        } else {
            Ok(r)
        }
    }

    fn collect(&mut self, source: Source) -> Result<Vec<Tensor>> {
        match source {
            Source::Handle(h) => {
                self.group.wait(&h)?;
                Ok(self.group.take(h)?)
            }
            Source::Bridge(key) => self.bridge.claim(&key, self.group),
        }
    }

    /// Wait if needed; returns the buffers and the event that made them ready.
    fn resolve(&mut self, r: Reduced) -> Result<(Vec<Tensor>, EventId)> {
        match r {
            Reduced::Ready { bufs, event } => Ok((bufs, event)),
            Reduced::Flight { source, comm, micro } => {
                let bufs = self.collect(source)?;
                Ok((bufs, self.trace.wait(comm, micro)))
            }
        }
    }

    /// Wait on all of `rs` at one synchronization point.
    fn barrier(&mut self, name: String, rs: Vec<Reduced>) -> Result<(Vec<Vec<Tensor>>, EventId)> {
        let mut deps = Vec::with_capacity(rs.len());
        let mut out = Vec::with_capacity(rs.len());
        for r in rs {
            match r {
                Reduced::Ready { bufs, event } => {
                    deps.push(event);
                    out.push(bufs);
                }
                Reduced::Flight { source, comm, .. } => {
                    deps.push(comm);
                    out.push(self.collect(source)?);
                }
            }
        }
        Ok((out, self.trace.barrier(name, deps)))
    }
}

/// Result of one forward and backward pass.
#[derive(Debug, Clone)]
pub struct BlockRun {
    /// Every worker's copy of the stack output.
    pub outputs: Vec<Tensor>,
    /// Every worker's copy of the gradient with respect to the stack input.
    pub d_input: Vec<Tensor>,
    /// Gradients of the full parameters, gathered from the shards.
    pub grads: Vec<BlockParams>,
    /// The events the engine executed, in issue order.
    pub dag: ScheduleDag,
    /// Sum of AllReduce payloads issued during the pass.
    pub payload_bytes: u64,
    pub collectives: usize,
    /// Whether replicated values are bit-identical on all workers.
    pub replicas_agree: bool,
}

impl BlockRun {
    pub fn output(&self) -> &Tensor {
        &self.outputs[0]
    }
}

/// Forward state handed to [`TpEngine::backward`].
pub struct ForwardPass<'g> {
    exec: Exec<'g>,
    plan: PartitionPlan,
    mode: Mode,
    saved: Vec<Vec<Vec<Saved>>>,
    outs: Vec<EventId>,
    outputs: Vec<Tensor>,
}

impl ForwardPass<'_> {
    pub fn outputs(&self) -> &[Tensor] {
        &self.outputs
    }
}

/// Sharded block stack bound to a simulated group.
#[derive(Debug)]
pub struct TpEngine {
    cfg: EngineConfig,
    blocks: Vec<Vec<WorkerBlock>>,
    masks: Vec<[DropoutMask; 2]>,
    group: TPGroup,
}

fn shard(p: &BlockParams, cfg: &EngineConfig) -> Result<Vec<WorkerBlock>> {
    let s = &cfg.shape;
    let attn = AttentionWeights::new(p.w_q.clone(), p.w_k.clone(), p.w_v.clone(), s.heads)?;
    if attn.hidden() != s.hidden || attn.inner() != s.hidden || p.w_1.shape() != [s.hidden, s.ffn] {
        return Err(EngineError::Shard("parameters do not match the block shape".into()));
    }
    let a = shard_block_weights(&LayerOperand::Attention { weights: attn, seq: s.seq }, &p.w_o, s.n)?;
    let m = shard_block_weights(&LayerOperand::Linear(p.w_1.clone()), &p.w_2, s.n)?;
    a.into_iter()
        .zip(m)
        .map(|(a, m)| {
            let (LayerOperand::Attention { weights, .. }, LayerOperand::Linear(w_1)) = (a.a_shard, m.a_shard) else {
                unreachable!("operand kinds chosen above")
            };
            Ok(WorkerBlock {
                attn: weights,
                w_o: a.b_shard,
                w_1,
                w_2: m.b_shard,
                ln1_gamma: p.ln1_gamma.clone(),
                ln1_beta: p.ln1_beta.clone(),
                ln2_gamma: p.ln2_gamma.clone(),
                ln2_beta: p.ln2_beta.clone(),
            })
        })
        .collect()
}

fn all_equal(ts: &[Tensor]) -> bool {
    ts.windows(2).all(|w| w[0] == w[1])
}

fn accumulate(dst: &mut Tensor, src: &Tensor) -> Result<()> {
    Ok(dst.add_assign(src)?)
}

impl TpEngine {
    /// Shard `params` (one entry per block) over a new group seeded with
    /// `group_seed`.
    pub fn new(cfg: EngineConfig, params: &[BlockParams], group_seed: u64) -> Result<Self> {
        cfg.validate()?;
        if params.len() != cfg.shape.layers {
            return Err(EngineError::Shard(format!("{} blocks of parameters for {} layers", params.len(), cfg.shape.layers)));
        }
        let blocks = params.iter().map(|p| shard(p, &cfg)).collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            blocks,
            masks: cfg.masks()?,
            group: TPGroup::with_dtype_bytes(cfg.shape.n, group_seed, cfg.shape.dtype_bytes),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn group(&self) -> &TPGroup {
        &self.group
    }

    /// Forward plus backward of the loss whose output gradient is `d_out`.
    pub fn run(&mut self, x: &Tensor, d_out: &Tensor, plan: &PartitionPlan, mode: Mode) -> Result<BlockRun> {
        self.group.clear_records();
        let cfg = self.cfg;
        let blocks = &self.blocks;
        let masks = &self.masks;
        let fwd = forward(&cfg, blocks, masks, &mut self.group, x, plan, mode)?;
        let (outputs, d_input, grads, dag, ok) = backward(&cfg, blocks, masks, fwd, d_out)?;
        Ok(BlockRun {
            outputs,
            d_input,
            grads,
            dag,
            payload_bytes: self.group.total_payload_bytes(),
            collectives: self.group.records().len(),
            replicas_agree: ok,
        })
    }

    /// Forward only; returns every worker's copy of the output.
    pub fn forward(&mut self, x: &Tensor, plan: &PartitionPlan, mode: Mode) -> Result<Vec<Tensor>> {
        let cfg = self.cfg;
        let fwd = forward(&cfg, &self.blocks, &self.masks, &mut self.group, x, plan, mode)?;
        // The backward slots stay unclaimed; nothing was deposited in them.
        Ok(fwd.outputs)
    }
}

fn forward<'g>(
    cfg: &EngineConfig,
    blocks: &[Vec<WorkerBlock>],
    masks: &[[DropoutMask; 2]],
    group: &'g mut TPGroup,
    x: &Tensor,
    plan: &PartitionPlan,
    mode: Mode,
) -> Result<ForwardPass<'g>> {
    let s = &cfg.shape;
    if mode == Mode::OptimalNoComm {
        return Err(EngineError::Unsupported("the no-communication reference has no numeric execution".into()));
    }
    if plan.scheme != mode.scheme() {
        return Err(EngineError::Unsupported(format!("{mode} cannot run plan {plan}")));
    }
    plan.validate(s.batch, s.hidden)?;
    if x.shape() != [s.rows(), s.hidden] {
        return Err(EngineError::Shard(format!("input shape {:?}, expected {:?}", x.shape(), [s.rows(), s.hidden])));
    }
    let n = s.n;
    let (p1, p2) = (plan.p1, plan.p2);
    let samples = s.batch / p1;
    let mrows = samples * s.seq;
    let cols = s.hidden / p2;
    let chunked = matches!(plan.scheme, Scheme::ColWeight | Scheme::Hybrid);
    let pre_norm = s.layout == BlockLayout::PreNorm;
    let mut ex = Exec {
        group,
        trace: Trace { dag: ScheduleDag::new(), last_compute: None },
        bridge: NoopBridge::new(),
        dt: s.dtype_bytes,
        blocking: mode == Mode::SyncBaseline,
    };

    let mut resid: Vec<Vec<Tensor>> = (0..p1)
        .map(|m| x.rows_slice(m * mrows, mrows).map(|t| vec![t; n]))
        .collect::<std::result::Result<_, _>>()?;
    let mut resid_ev: Vec<Option<EventId>> = vec![None; p1];
    let mut prev: Vec<Option<Reduced>> = (0..p1).map(|_| None).collect();
    let mut saved: Vec<Vec<Vec<Saved>>> = Vec::with_capacity(s.layers);

    // Residual update after the MLP of block `b`, in place on `h`.
    let block_out = |b: usize, m: usize, h: &mut Tensor, z: &Tensor, sv: &mut Saved, w: &WorkerBlock| -> Result<()> {
        let mask = masks[b][1].rows_slice(m * mrows, mrows)?;
        let u = h.add(&dropout(z, &mask)?)?;
        *h = if pre_norm {
            u
        } else {
            let (y, c) = layernorm_cached(&u, &w.ln2_gamma, &w.ln2_beta, cfg.eps)?;
            sv.ln_out = Some(c);
            y
        };
        Ok(())
    };

    for b in 0..s.layers {
        for m in 0..p1 {
            for key in ["bwd.ar.mlp", "bwd.ar.attn"] {
                ex.bridge.install(&label::micro(key, b, m))?;
            }
        }
        let mut bs: Vec<Vec<Saved>> = vec![vec![Saved::default(); n]; p1];

        // Attention.
        let mut stage: Vec<Option<Reduced>> = (0..p1).map(|_| None).collect();
        let mut flights = Vec::new();
        for m in 0..p1 {
            let mut deps = Vec::new();
            let mut kernels = Vec::new();
            if let Some(r) = prev[m].take() {
                let (z, ev) = ex.resolve(r)?;
                deps.push(ev);
                deps.extend(resid_ev[m]);
                kernels.extend(k::out(s, samples));
                let below = saved.last_mut().expect("previous block exists");
                for w in 0..n {
                    block_out(b - 1, m, &mut resid[m][w], &z[w], &mut below[m][w], &blocks[b - 1][w])?;
                }
            }
            kernels.extend(k::attn_pre(s, samples));
            kernels.extend(k::attn_core(s, samples));
            if !chunked {
                kernels.extend(k::attn_proj(s, samples, s.hidden));
            }
            let mut partials = Vec::with_capacity(n);
            for w in 0..n {
                let wb = &blocks[b][w];
                let sv = &mut bs[m][w];
                let x_in = &resid[m][w];
                let a_in = if pre_norm {
                    let (y, c) = layernorm_cached(x_in, &wb.ln1_gamma, &wb.ln1_beta, cfg.eps)?;
                    sv.ln_in = Some(c);
                    y
                } else {
                    x_in.clone()
                };
                let (core, cache) = attention_forward_cached(&a_in, &wb.attn, s.seq)?;
                if !chunked {
                    partials.push(matmul(&core, &wb.w_o)?);
                }
                sv.a_in = Some(a_in);
                sv.attn = Some(cache);
                sv.core = Some(core);
            }
            let c = ex.trace.compute(label::micro("fwd.attn", b, m), m, kernels, deps);
            if b > 0 {
                resid_ev[m] = Some(c);
            }
            if chunked {
                for j in 0..p2 {
                    let parts = (0..n)
                        .map(|w| {
                            let core = need(&bs[m][w].core, "attention core")?;
                            Ok(matmul(core, &blocks[b][w].w_o.cols_slice(j * cols, cols)?)?)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    ex.trace.compute(label::chunk("fwd.attn.proj", b, m, j), m, k::attn_proj(s, samples, cols), vec![c]);
                    flights.push(ex.issue(label::chunk("fwd.ar.attn", b, m, j), m, parts, false)?);
                }
            } else {
                stage[m] = Some(ex.issue(label::micro("fwd.ar.attn", b, m), m, partials, false)?);
            }
        }
        if chunked {
            concat_stage(&mut ex, &mut stage, flights, "fwd.attn", b, p2, cols, mrows, s, samples)?;
        }

        // Dropout, residual and layer norm between the sub-layers.
        for m in 0..p1 {
            let (attn_out, ev) = ex.resolve(stage[m].take().expect("every μ-batch staged"))?;
            let mut deps = vec![ev];
            deps.extend(resid_ev[m]);
            let mask = masks[b][0].rows_slice(m * mrows, mrows)?;
            for w in 0..n {
                let wb = &blocks[b][w];
                let sv = &mut bs[m][w];
                let u = resid[m][w].add(&dropout(&attn_out[w], &mask)?)?;
                let (h, m_in) = if pre_norm {
                    let (y, c) = layernorm_cached(&u, &wb.ln2_gamma, &wb.ln2_beta, cfg.eps)?;
                    sv.ln_mid = Some(c);
                    (u, y)
                } else {
                    let (y, c) = layernorm_cached(&u, &wb.ln1_gamma, &wb.ln1_beta, cfg.eps)?;
                    sv.ln_mid = Some(c);
                    (y.clone(), y)
                };
                resid[m][w] = h;
                sv.m_in = Some(m_in);
            }
            resid_ev[m] = Some(ex.trace.compute(label::micro("fwd.mid", b, m), m, k::mid(s, samples), deps));
        }

        // MLP.
        let mut flights = Vec::new();
        for m in 0..p1 {
            let deps = resid_ev[m].into_iter().collect();
            let mut kernels = k::mlp_up(s, samples);
            if !chunked {
                kernels.extend(k::mlp_proj(s, samples, s.hidden));
            }
            let mut partials = Vec::with_capacity(n);
            for w in 0..n {
                let wb = &blocks[b][w];
                let sv = &mut bs[m][w];
                let pre = matmul(need(&sv.m_in, "mlp input")?, &wb.w_1)?;
                let act = gelu(&pre);
                if !chunked {
                    partials.push(matmul(&act, &wb.w_2)?);
                }
                sv.pre = Some(pre);
                sv.act = Some(act);
            }
            let c = ex.trace.compute(label::micro("fwd.mlp", b, m), m, kernels, deps);
            if chunked {
                for j in 0..p2 {
                    let parts = (0..n)
                        .map(|w| {
                            let act = need(&bs[m][w].act, "mlp activation")?;
                            Ok(matmul(act, &blocks[b][w].w_2.cols_slice(j * cols, cols)?)?)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    ex.trace.compute(label::chunk("fwd.mlp.proj", b, m, j), m, k::mlp_proj(s, samples, cols), vec![c]);
                    flights.push(ex.issue(label::chunk("fwd.ar.mlp", b, m, j), m, parts, false)?);
                }
            } else {
                prev[m] = Some(ex.issue(label::micro("fwd.ar.mlp", b, m), m, partials, false)?);
            }
        }
        if chunked {
            concat_stage(&mut ex, &mut prev, flights, "fwd.mlp", b, p2, cols, mrows, s, samples)?;
        }
        saved.push(bs);
    }

    let last = s.layers - 1;
    let mut outs = Vec::with_capacity(p1);
    for m in 0..p1 {
        let (z, ev) = ex.resolve(prev[m].take().expect("at least one block"))?;
        let mut deps = vec![ev];
        deps.extend(resid_ev[m]);
        for w in 0..n {
            block_out(last, m, &mut resid[m][w], &z[w], &mut saved[last][m][w], &blocks[last][w])?;
        }
        outs.push(ex.trace.compute(label::micro("fwd.out", last, m), m, k::out(s, samples), deps));
    }
    let outputs = (0..n)
        .map(|w| concat_rows(&resid.iter().map(|r| r[w].clone()).collect::<Vec<_>>()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(ForwardPass { exec: ex, plan: *plan, mode, saved, outs, outputs })
}

/// Barrier on every chunk reduction of a sub-layer, then one strided copy per
/// μ-batch into a pre-sized output buffer.
#[allow(clippy::too_many_arguments)]
fn concat_stage(
    ex: &mut Exec<'_>,
    stage: &mut [Option<Reduced>],
    flights: Vec<Reduced>,
    name: &str,
    b: usize,
    p2: usize,
    cols: usize,
    mrows: usize,
    s: &BlockShape,
    samples: usize,
) -> Result<()> {
    let (parts, bar) = ex.barrier(label::sync(name, b), flights)?;
    for (m, slot) in stage.iter_mut().enumerate() {
        let n = parts[0].len();
        let mut bufs: Vec<Tensor> = (0..n).map(|_| Tensor::zeros(&[mrows, s.hidden])).collect();
        for j in 0..p2 {
            for (w, buf) in bufs.iter_mut().enumerate() {
                concat_lastdim_into(buf, &parts[m * p2 + j][w], j * cols)?;
            }
        }
        let cp = ex.trace.compute(label::micro(&format!("{name}.concat"), b, m), m, k::concat_copy(s, samples), vec![bar]);
        *slot = Some(Reduced::Ready { bufs, event: cp });
    }
    Ok(())
}

type BackwardOut = (Vec<Tensor>, Vec<Tensor>, Vec<BlockParams>, ScheduleDag, bool);

fn backward(
    cfg: &EngineConfig,
    blocks: &[Vec<WorkerBlock>],
    masks: &[[DropoutMask; 2]],
    fwd: ForwardPass<'_>,
    d_out: &Tensor,
) -> Result<BackwardOut> {
    let s = &cfg.shape;
    let ForwardPass { exec: mut ex, plan, mode, saved, outs, outputs } = fwd;
    if d_out.shape() != [s.rows(), s.hidden] {
        return Err(EngineError::Shard(format!("output gradient shape {:?}", d_out.shape())));
    }
    let n = s.n;
    let p1 = plan.p1;
    let samples = s.batch / p1;
    let mrows = samples * s.seq;
    let pre_norm = s.layout == BlockLayout::PreNorm;
    let hybrid = plan.scheme == Scheme::Hybrid;
    let sync_bwd = mode == Mode::SyncBaseline;
    let mut grads: Vec<Vec<WorkerGrads>> = blocks.iter().map(|bw| bw.iter().map(WorkerGrads::zeros).collect()).collect();

    // Gradient into block `b` from its attention input gradient and residual.
    let fold = |b: usize, w: usize, d_res: &Tensor, d_ain: &Tensor, sv: &Saved, g: &mut WorkerGrads| -> Result<Tensor> {
        if pre_norm {
            let (dx, dg, db) = layernorm_backward(d_ain, need(&sv.ln_in, "input layer norm")?, &blocks[b][w].ln1_gamma)?;
            accumulate(&mut g.ln1_gamma, &dg)?;
            accumulate(&mut g.ln1_beta, &db)?;
            Ok(d_res.add(&dx)?)
        } else {
            Ok(d_res.add(d_ain)?)
        }
    };

    let mut grad_prev: Vec<Option<(Reduced, EventId)>> = (0..p1).map(|_| None).collect();
    // Residual-path gradient leaving the block above, per μ-batch and worker.
    let mut d_res: Vec<Vec<Tensor>> = vec![Vec::new(); p1];
    for b in (0..s.layers).rev() {
        // MLP.
        let mut pending = Vec::with_capacity(p1);
        let mut dgrads = Vec::with_capacity(p1);
        let mut d_h: Vec<Vec<Tensor>> = Vec::with_capacity(p1);
        let mut d_mo: Vec<Vec<Tensor>> = Vec::with_capacity(p1);
        let mut d_pre: Vec<Vec<Tensor>> = Vec::with_capacity(p1);
        for m in 0..p1 {
            let mut deps = Vec::new();
            let mut kernels = Vec::new();
            let dy: Vec<Tensor> = match grad_prev[m].take() {
                Some((r, mid)) => {
                    let (d_ain, ev) = ex.resolve(r)?;
                    deps.push(ev);
                    deps.push(mid);
                    kernels.extend(k::in_bwd(s, samples));
                    (0..n)
                        .map(|w| fold(b + 1, w, &d_res[m][w], &d_ain[w], &saved[b + 1][m][w], &mut grads[b + 1][w]))
                        .collect::<Result<_>>()?
                }
                None => {
                    deps.push(outs[m]);
                    vec![d_out.rows_slice(m * mrows, mrows)?; n]
                }
            };
            kernels.extend(k::out_bwd(s, samples));
            kernels.extend(k::mlp_dgrad(s, samples));
            let mask = masks[b][1].rows_slice(m * mrows, mrows)?;
            let (mut dh_m, mut dmo_m, mut dpre_m, mut partial) = (vec![], vec![], vec![], vec![]);
            for w in 0..n {
                let wb = &blocks[b][w];
                let sv = &saved[b][m][w];
                let g = &mut grads[b][w];
                let dz = if pre_norm {
                    dy[w].clone()
                } else {
                    let (dx, dg, db) = layernorm_backward(&dy[w], need(&sv.ln_out, "output layer norm")?, &wb.ln2_gamma)?;
                    accumulate(&mut g.ln2_gamma, &dg)?;
                    accumulate(&mut g.ln2_beta, &db)?;
                    dx
                };
                let dmo = dropout_backward(&dz, &mask)?;
                let d_act = matmul_backward_input(&dmo, &wb.w_2)?;
                let dp = gelu_backward(need(&sv.pre, "mlp pre-activation")?, &d_act)?;
                partial.push(matmul_backward_input(&dp, &wb.w_1)?);
                dh_m.push(dz);
                dmo_m.push(dmo);
                dpre_m.push(dp);
            }
            let dg = ex.trace.compute(label::micro("bwd.mlp.dgrad", b, m), m, kernels, deps);
            let wname = label::micro("bwd.mlp.wgrad", b, m);
            let cname = label::micro("bwd.ar.mlp", b, m);
            let mut wgrad = |ex: &mut Exec<'_>| -> Result<()> {
                for w in 0..n {
                    let sv = &saved[b][m][w];
                    let g = &mut grads[b][w];
                    accumulate(&mut g.w_2, &matmul_backward_weight(need(&sv.act, "mlp activation")?, &dmo_m[w])?)?;
                    accumulate(&mut g.w_1, &matmul_backward_weight(need(&sv.m_in, "mlp input")?, &dpre_m[w])?)?;
                }
                ex.trace.compute(wname.clone(), m, k::mlp_wgrad(s, samples), vec![dg]);
                Ok(())
            };
            if sync_bwd {
                wgrad(&mut ex)?;
                pending.push(ex.issue(cname, m, partial, true)?);
            } else {
                pending.push(ex.issue(cname, m, partial, true)?);
                wgrad(&mut ex)?;
            }
            dgrads.push(dg);
            d_h.push(dh_m);
            d_mo.push(dmo_m);
            d_pre.push(dpre_m);
        }
        if hybrid {
            let (bufs, bar) = ex.barrier(label::sync("bwd.mlp", b), pending)?;
            pending = bufs.into_iter().map(|bufs| Reduced::Ready { bufs, event: bar }).collect();
        }
        let mut mids = Vec::with_capacity(p1);
        let mut d_attn: Vec<Vec<Tensor>> = Vec::with_capacity(p1);
        let mut pending = pending.into_iter();
        for m in 0..p1 {
            let (d_min, ev) = ex.resolve(pending.next().expect("one per μ-batch"))?;
            let deps = vec![ev, dgrads[m]];
            let mask = masks[b][0].rows_slice(m * mrows, mrows)?;
            let mut res_m = Vec::with_capacity(n);
            let mut att_m = Vec::with_capacity(n);
            for w in 0..n {
                let wb = &blocks[b][w];
                let sv = &saved[b][m][w];
                let g = &mut grads[b][w];
                let cache = need(&sv.ln_mid, "middle layer norm")?;
                let du = if pre_norm {
                    let (dx, dg, db) = layernorm_backward(&d_min[w], cache, &wb.ln2_gamma)?;
                    accumulate(&mut g.ln2_gamma, &dg)?;
                    accumulate(&mut g.ln2_beta, &db)?;
                    d_h[m][w].add(&dx)?
                } else {
                    let total = d_h[m][w].add(&d_min[w])?;
                    let (dx, dg, db) = layernorm_backward(&total, cache, &wb.ln1_gamma)?;
                    accumulate(&mut g.ln1_gamma, &dg)?;
                    accumulate(&mut g.ln1_beta, &db)?;
                    dx
                };
                att_m.push(dropout_backward(&du, &mask)?);
                res_m.push(du);
            }
            mids.push(ex.trace.compute(label::micro("bwd.mid", b, m), m, k::mid_bwd(s, samples), deps));
            d_res[m] = res_m;
            d_attn.push(att_m);
        }

        // Attention.
        let mut pending = Vec::with_capacity(p1);
        for m in 0..p1 {
            let mut partial = Vec::with_capacity(n);
            let mut qkv = Vec::with_capacity(n);
            for w in 0..n {
                let wb = &blocks[b][w];
                let sv = &saved[b][m][w];
                let d_core = matmul_backward_input(&d_attn[m][w], &wb.w_o)?;
                let (dq, dk, dv) = attention_core_backward(&d_core, need(&sv.attn, "attention cache")?)?;
                let mut dx = matmul_backward_input(&dq, &wb.attn.w_q)?;
                dx.add_assign(&matmul_backward_input(&dk, &wb.attn.w_k)?)?;
                dx.add_assign(&matmul_backward_input(&dv, &wb.attn.w_v)?)?;
                partial.push(dx);
                qkv.push((dq, dk, dv));
            }
            let dg = ex.trace.compute(label::micro("bwd.attn.dgrad", b, m), m, k::attn_dgrad(s, samples), vec![mids[m]]);
            let wname = label::micro("bwd.attn.wgrad", b, m);
            let cname = label::micro("bwd.ar.attn", b, m);
            let mut wgrad = |ex: &mut Exec<'_>| -> Result<()> {
                for (w, (dq, dk, dv)) in qkv.iter().enumerate() {
                    let sv = &saved[b][m][w];
                    let g = &mut grads[b][w];
                    let a_in = need(&sv.a_in, "attention input")?;
                    accumulate(&mut g.w_o, &matmul_backward_weight(need(&sv.core, "attention core")?, &d_attn[m][w])?)?;
                    accumulate(&mut g.w_q, &matmul_backward_weight(a_in, dq)?)?;
                    accumulate(&mut g.w_k, &matmul_backward_weight(a_in, dk)?)?;
                    accumulate(&mut g.w_v, &matmul_backward_weight(a_in, dv)?)?;
                }
                ex.trace.compute(wname.clone(), m, k::attn_wgrad(s, samples), vec![dg]);
                Ok(())
            };
            if sync_bwd {
                wgrad(&mut ex)?;
                pending.push(ex.issue(cname, m, partial, true)?);
            } else {
                pending.push(ex.issue(cname, m, partial, true)?);
                wgrad(&mut ex)?;
            }
        }
        if hybrid {
            let (bufs, bar) = ex.barrier(label::sync("bwd.attn", b), pending)?;
            pending = bufs.into_iter().map(|bufs| Reduced::Ready { bufs, event: bar }).collect();
        }
        grad_prev = pending.into_iter().zip(mids).map(Some).collect();
    }

    let mut d_in: Vec<Vec<Tensor>> = vec![Vec::with_capacity(p1); n];
    for m in 0..p1 {
        let (r, mid) = grad_prev[m].take().expect("at least one block");
        let (d_ain, ev) = ex.resolve(r)?;
        for (w, dst) in d_in.iter_mut().enumerate() {
            dst.push(fold(0, w, &d_res[m][w], &d_ain[w], &saved[0][m][w], &mut grads[0][w])?);
        }
        ex.trace.compute(label::micro("bwd.in", 0, m), m, k::in_bwd(s, samples), vec![ev, mid]);
    }
    ex.bridge.finish()?;
    let d_input = d_in.iter().map(|p| concat_rows(p)).collect::<std::result::Result<Vec<_>, _>>()?;

    let mut agree = all_equal(&outputs) && all_equal(&d_input);
    let mut full = Vec::with_capacity(s.layers);
    for g in &grads {
        let pick = |f: fn(&WorkerGrads) -> &Tensor| g.iter().map(f).cloned().collect::<Vec<_>>();
        let ln = [
            pick(|g| &g.ln1_gamma),
            pick(|g| &g.ln1_beta),
            pick(|g| &g.ln2_gamma),
            pick(|g| &g.ln2_beta),
        ];
        agree &= ln.iter().all(|t| all_equal(t));
        full.push(BlockParams {
            w_q: concat_lastdim(&pick(|g| &g.w_q))?,
            w_k: concat_lastdim(&pick(|g| &g.w_k))?,
            w_v: concat_lastdim(&pick(|g| &g.w_v))?,
            w_o: concat_rows(&pick(|g| &g.w_o))?,
            w_1: concat_lastdim(&pick(|g| &g.w_1))?,
            w_2: concat_rows(&pick(|g| &g.w_2))?,
            ln1_gamma: ln[0][0].clone(),
            ln1_beta: ln[1][0].clone(),
            ln2_gamma: ln[2][0].clone(),
            ln2_beta: ln[3][0].clone(),
        });
    }
    let dag = ex.trace.dag;
    dag.validate()?;
    Ok((outputs, d_input, full, dag, agree))
}
