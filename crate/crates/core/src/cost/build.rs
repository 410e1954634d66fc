//! Construction of the per-iteration event DAG for each execution mode.

use crate::schedule::{
    kernels as k, label, BlockShape, EventId, EventKind, Kernel, Mode, PartitionPlan, ScheduleDag,
    ScheduleError, Scheme,
};

/// Output of a collective that a consumer has not yet synchronized on.
#[derive(Debug, Clone, Copy)]
enum Pending {
    Comm { id: EventId, micro: usize },
    Ready(EventId),
}

struct Builder {
    dag: ScheduleDag,
    blocking: bool,
}

impl Builder {
    fn compute(&mut self, name: String, micro: usize, kernels: Vec<Kernel>, deps: Vec<EventId>) -> EventId {
        self.dag.push(name, EventKind::Compute { kernels }, micro, Some(micro), deps)
    }

    /// `after` is the last compute event issued before the collective: the
    /// communication stream waits for it at issue time.
    fn comm(&mut self, name: String, micro: usize, bytes: u64, after: EventId) -> Pending {
        let id = self.dag.push(name, EventKind::Comm { bytes }, 0, Some(micro), vec![after]);
        let mut p = Pending::Comm { id, micro };
        if self.blocking {
            self.resolve(&mut p);
        }
        p
    }

    /// Issue the wait of a pending collective if it has not been issued yet.
    fn resolve(&mut self, p: &mut Pending) -> EventId {
        match *p {
            Pending::Ready(id) => id,
            Pending::Comm { id, micro } => {
                let name = label::wait(&self.dag.get(id).label);
                let w = self.dag.push(name, EventKind::Wait, micro, Some(micro), vec![id]);
                *p = Pending::Ready(w);
                w
            }
        }
    }

    fn barrier(&mut self, name: String, pending: &[Pending]) -> EventId {
        let deps = pending
            .iter()
            .map(|p| match *p {
                Pending::Comm { id, .. } => id,
                Pending::Ready(id) => id,
            })
            .collect();
        self.dag.push(name, EventKind::Barrier, 0, None, deps)
    }
}

/// Event DAG of one forward and backward pass over `shape.layers` blocks.
///
/// `plan.scheme` must match `mode`; baseline modes use `p1 = p2 = 1`.
pub fn build_schedule(shape: &BlockShape, plan: &PartitionPlan, mode: Mode) -> Result<ScheduleDag, ScheduleError> {
    shape.validate()?;
    if plan.scheme != mode.scheme() {
        return Err(ScheduleError::InvalidPlan(format!("{mode} cannot run plan {plan}")));
    }
    plan.validate(shape.batch, shape.hidden)?;
    let mut b = Builder { dag: ScheduleDag::new(), blocking: mode == Mode::SyncBaseline };
    let s = shape;
    let (p1, p2) = (plan.p1, plan.p2);
    let chunked = matches!(plan.scheme, Scheme::ColWeight | Scheme::Hybrid);
    let hybrid = plan.scheme == Scheme::Hybrid;
    let samples = s.batch / p1;
    let cols = s.hidden / p2;
    let dt = s.dtype_bytes as u64;
    let rows = (samples * s.seq) as u64;
    let full_bytes = rows * s.hidden as u64 * dt;
    let chunk_bytes = rows * cols as u64 * dt;
    let ms = 0..p1;

    // Forward. `resid[m]` produces the residual stream of micro-batch m after
    // the previous sub-layer (None for the iteration input).
    let mut resid: Vec<Option<EventId>> = vec![None; p1];
    let mut prev: Vec<Option<Pending>> = vec![None; p1];
    for blk in 0..s.layers {
        for sub in ["attn", "mlp"] {
            let mut stage = Vec::with_capacity(p1);
            let mut pending = Vec::new();
            for m in ms.clone() {
                let mut deps = Vec::new();
                let mut kernels = Vec::new();
                if sub == "attn" {
                    if let Some(p) = prev[m].as_mut() {
                        deps.push(b.resolve(p));
                        deps.extend(resid[m]);
                        kernels.extend(k::out(s, samples));
                    }
                    kernels.extend(k::attn_pre(s, samples));
                    kernels.extend(k::attn_core(s, samples));
                    if !chunked {
                        kernels.extend(k::attn_proj(s, samples, s.hidden));
                    }
                } else {
                    deps.extend(resid[m]);
                    kernels.extend(k::mlp_up(s, samples));
                    if !chunked {
                        kernels.extend(k::mlp_proj(s, samples, s.hidden));
                    }
                }
                let name = format!("fwd.{sub}");
                let c = b.compute(label::micro(&name, blk, m), m, kernels, deps);
                if sub == "attn" && blk > 0 {
                    resid[m] = Some(c);
                }
                if chunked {
                    for j in 0..p2 {
                        let kern = if sub == "attn" {
                            k::attn_proj(s, samples, cols)
                        } else {
                            k::mlp_proj(s, samples, cols)
                        };
                        let pj = b.compute(label::chunk(&format!("fwd.{sub}.proj"), blk, m, j), m, kern, vec![c]);
                        pending.push(b.comm(label::chunk(&format!("fwd.ar.{sub}"), blk, m, j), m, chunk_bytes, pj));
                    }
                } else {
                    stage.push(b.comm(label::micro(&format!("fwd.ar.{sub}"), blk, m), m, full_bytes, c));
                }
            }
            if chunked {
                let bar = b.barrier(label::sync(&format!("fwd.{sub}"), blk), &pending);
                for m in ms.clone() {
                    let cp = b.compute(label::micro(&format!("fwd.{sub}.concat"), blk, m), m, k::concat_copy(s, samples), vec![bar]);
                    stage.push(Pending::Ready(cp));
                }
            }
            if sub == "attn" {
                for m in ms.clone() {
                    let mut deps = vec![b.resolve(&mut stage[m])];
                    deps.extend(resid[m]);
                    resid[m] = Some(b.compute(label::micro("fwd.mid", blk, m), m, k::mid(s, samples), deps));
                }
            } else {
                prev = stage.into_iter().map(Some).collect();
            }
        }
    }
    let last = s.layers - 1;
    let mut outs = Vec::with_capacity(p1);
    for m in ms.clone() {
        let p = prev[m].as_mut().expect("at least one block");
        let mut deps = vec![b.resolve(p)];
        deps.extend(resid[m]);
        outs.push(b.compute(label::micro("fwd.out", last, m), m, k::out(s, samples), deps));
    }

    // Backward. `grad_prev[m]` holds the pending input-gradient AllReduce of
    // the block above and the producer of its residual gradient.
    let mut grad_prev: Vec<Option<(Pending, EventId)>> = vec![None; p1];
    let sync_bwd = mode == Mode::SyncBaseline;
    for blk in (0..s.layers).rev() {
        let mut mids: Vec<EventId> = Vec::with_capacity(p1);
        for sub in ["mlp", "attn"] {
            let mut pending = Vec::with_capacity(p1);
            let mut dgrads = Vec::with_capacity(p1);
            for m in ms.clone() {
                let mut deps = Vec::new();
                let mut kernels = Vec::new();
                if sub == "mlp" {
                    match grad_prev[m].as_mut() {
                        Some((p, mid)) => {
                            deps.push(b.resolve(p));
                            deps.push(*mid);
                            kernels.extend(k::in_bwd(s, samples));
                        }
                        None => deps.push(outs[m]),
                    }
                    kernels.extend(k::out_bwd(s, samples));
                    kernels.extend(k::mlp_dgrad(s, samples));
                } else {
                    deps.push(mids[m]);
                    kernels.extend(k::attn_dgrad(s, samples));
                }
                let dg = b.compute(label::micro(&format!("bwd.{sub}.dgrad"), blk, m), m, kernels, deps);
                let wk = if sub == "mlp" { k::mlp_wgrad(s, samples) } else { k::attn_wgrad(s, samples) };
                let wname = label::micro(&format!("bwd.{sub}.wgrad"), blk, m);
                let cname = label::micro(&format!("bwd.ar.{sub}"), blk, m);
                if sync_bwd {
                    let wg = b.compute(wname, m, wk, vec![dg]);
                    pending.push(b.comm(cname, m, full_bytes, wg));
                } else {
                    pending.push(b.comm(cname, m, full_bytes, dg));
                    b.compute(wname, m, wk, vec![dg]);
                }
                dgrads.push(dg);
            }
            if hybrid {
                let bar = b.barrier(label::sync(&format!("bwd.{sub}"), blk), &pending);
                pending = vec![Pending::Ready(bar); p1];
            }
            if sub == "mlp" {
                for m in ms.clone() {
                    let deps = vec![b.resolve(&mut pending[m]), dgrads[m]];
                    mids.push(b.compute(label::micro("bwd.mid", blk, m), m, k::mid_bwd(s, samples), deps));
                }
            } else {
                grad_prev = pending.into_iter().zip(mids.iter().copied()).map(Some).collect();
            }
        }
    }
    for m in ms {
        let (p, mid) = grad_prev[m].as_mut().expect("at least one block");
        let deps = vec![b.resolve(p), *mid];
        b.compute(label::micro("bwd.in", 0, m), m, k::in_bwd(s, samples), deps);
    }
    let dag = b.dag;
    dag.validate()?;
    Ok(dag)
}
