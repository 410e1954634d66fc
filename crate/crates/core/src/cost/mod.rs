//! Analytic kernel and collective timing plus a discrete-event simulator
//! over [`ScheduleDag`]s.
//!
//! Compute streams are in-order queues that share one device executor, which
//! runs a single compute kernel at a time. Communication runs on its own
//! in-order stream concurrently with compute. Communication is "exposed"
//! while no compute kernel is running.

mod build;

pub use build::build_schedule;

use serde::{Deserialize, Serialize};

use crate::schedule::{BlockShape, EventKind, Kernel, Mode, PartitionPlan, ScheduleDag, ScheduleError};

/// GEMM efficiency as a function of the smallest matrix dimension: `flat` at
/// `knee` and above, `floor` at `floor_dim` and below, linear in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EfficiencyCurve {
    pub flat: f64,
    pub knee: u64,
    pub floor: f64,
    pub floor_dim: u64,
}

impl Default for EfficiencyCurve {
    fn default() -> Self {
        Self { flat: 0.45, knee: 128, floor: 0.10, floor_dim: 8 }
    }
}

impl EfficiencyCurve {
    pub fn constant(e: f64) -> Self {
        Self { flat: e, knee: 1, floor: e, floor_dim: 0 }
    }

    pub fn at(&self, m: u64, n: u64, k: u64) -> f64 {
        let d = m.min(n).min(k);
        if d >= self.knee {
            self.flat
        } else if d <= self.floor_dim {
            self.floor
        } else {
            let t = (d - self.floor_dim) as f64 / (self.knee - self.floor_dim) as f64;
            self.floor + t * (self.flat - self.floor)
        }
    }
}

/// Hardware model. Bandwidths are in GB/s (1e9 bytes), compute in TFLOP/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSpec {
    pub nodes: usize,
    pub devices_per_node: usize,
    pub intra_bw: f64,
    pub inter_bw: f64,
    pub link_latency: f64,
    pub peak_tflops: f64,
    pub gemm_efficiency: EfficiencyCurve,
    /// Device memory bandwidth for elementwise kernels and copies.
    pub mem_bw: f64,
    pub lane_count: usize,
    pub launch_overhead: f64,
    /// Fraction of the link bandwidth a ring AllReduce achieves, per regime.
    pub ring_efficiency_intra: f64,
    pub ring_efficiency_inter: f64,
    /// Graph-replay mode: cheaper launches, extra buffer copies.
    pub cuda_graph: bool,
    pub graph_launch_overhead: f64,
    pub graph_copy_factor: f64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self::dgx_h100(1)
    }
}

impl ClusterSpec {
    /// `nodes` DGX-H100 boxes with the tensor-parallel group spanning all GPUs.
    pub fn dgx_h100(nodes: usize) -> Self {
        Self {
            nodes,
            devices_per_node: 8,
            intra_bw: 900.0,
            inter_bw: 400.0,
            link_latency: 1e-6,
            peak_tflops: 989.0,
            gemm_efficiency: EfficiencyCurve::default(),
            mem_bw: 3350.0,
            lane_count: 2,
            launch_overhead: 5e-6,
            // The NVLink figure counts both directions; a ring uses one.
            ring_efficiency_intra: 0.5,
            ring_efficiency_inter: 1.0,
            cuda_graph: false,
            graph_launch_overhead: 0.5e-6,
            graph_copy_factor: 0.25,
        }
    }

    /// Tensor-parallel degree when the group spans the whole cluster.
    pub fn tp_degree(&self) -> usize {
        self.nodes * self.devices_per_node
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("intra_bw", self.intra_bw),
            ("inter_bw", self.inter_bw),
            ("peak_tflops", self.peak_tflops),
            ("mem_bw", self.mem_bw),
            ("ring_efficiency_intra", self.ring_efficiency_intra),
            ("ring_efficiency_inter", self.ring_efficiency_inter),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("link_latency", self.link_latency),
            ("launch_overhead", self.launch_overhead),
            ("graph_launch_overhead", self.graph_launch_overhead),
            ("graph_copy_factor", self.graph_copy_factor),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.nodes == 0 || self.devices_per_node == 0 || self.lane_count == 0 {
            return Err("nodes, devices_per_node and lane_count must be positive".into());
        }
        let e = &self.gemm_efficiency;
        if !(e.flat > 0.0 && e.flat <= 1.0 && e.floor > 0.0 && e.floor <= e.flat) {
            return Err("gemm efficiency must satisfy 0 < floor <= flat <= 1".into());
        }
        if e.floor_dim >= e.knee && e.floor != e.flat {
            return Err("gemm efficiency knee must exceed floor_dim".into());
        }
        Ok(())
    }

    fn launch(&self) -> f64 {
        if self.cuda_graph {
            self.graph_launch_overhead
        } else {
            self.launch_overhead
        }
    }
}

/// `2 m n k / (peak * efficiency) + launch_overhead`.
pub fn gemm_time(m: u64, n: u64, k: u64, cluster: &ClusterSpec) -> f64 {
    batched_gemm_time(m, n, k, 1, cluster)
}

fn batched_gemm_time(m: u64, n: u64, k: u64, count: u64, c: &ClusterSpec) -> f64 {
    let flops = 2.0 * m as f64 * n as f64 * k as f64 * count as f64;
    flops / (c.peak_tflops * 1e12 * c.gemm_efficiency.at(m, n, k)) + c.launch()
}

/// Ring AllReduce time of `bytes` over `group_size` workers. The link is the
/// intra-node one when the group fits a node, else the inter-node one.
pub fn allreduce_time(bytes: u64, group_size: usize, c: &ClusterSpec) -> f64 {
    if group_size <= 1 || bytes == 0 {
        return 0.0;
    }
    let n = group_size as f64;
    let bw = if group_size <= c.devices_per_node {
        c.intra_bw * c.ring_efficiency_intra
    } else {
        c.inter_bw * c.ring_efficiency_inter
    };
    2.0 * (n - 1.0) / n * bytes as f64 / (bw * 1e9) + 2.0 * (n - 1.0) * c.link_latency
}

pub fn kernel_time(kernel: &Kernel, c: &ClusterSpec) -> f64 {
    match *kernel {
        Kernel::Gemm { m, n, k, count } => batched_gemm_time(m, n, k, count, c),
        Kernel::Elementwise { bytes } | Kernel::Memcpy { bytes } => bytes as f64 / (c.mem_bw * 1e9) + c.launch(),
    }
}

fn compute_time(kernels: &[Kernel], c: &ClusterSpec) -> f64 {
    let mut t: f64 = kernels.iter().map(|k| kernel_time(k, c)).sum();
    if c.cuda_graph {
        let moved: u64 = kernels
            .iter()
            .map(|k| match *k {
                Kernel::Elementwise { bytes } | Kernel::Memcpy { bytes } => bytes,
                Kernel::Gemm { .. } => 0,
            })
            .sum();
        t += c.graph_copy_factor * moved as f64 / (c.mem_bw * 1e9);
    }
    t
}

/// Schedule of `mode`. The no-communication reference is the blocking
/// baseline schedule with every collective costed at zero bytes.
pub fn mode_schedule(shape: &BlockShape, plan: &PartitionPlan, mode: Mode) -> Result<ScheduleDag, ScheduleError> {
    match mode {
        Mode::OptimalNoComm => Ok(build_schedule(shape, plan, Mode::SyncBaseline)?.with_comm_zeroed()),
        _ => build_schedule(shape, plan, mode),
    }
}

/// Duration of each event of `dag` on `cluster`.
pub fn event_durations(dag: &ScheduleDag, c: &ClusterSpec) -> Vec<f64> {
    dag.events()
        .iter()
        .map(|e| match &e.kind {
            EventKind::Compute { kernels } => compute_time(kernels, c),
            EventKind::Comm { bytes } => allreduce_time(*bytes, c.tp_degree(), c),
            EventKind::Wait | EventKind::Barrier => 0.0,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub start: f64,
    pub finish: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimelineResult {
    pub iteration_time: f64,
    pub compute_total: f64,
    pub comm_total: f64,
    pub comm_exposed: f64,
    pub hidden_fraction: f64,
    /// Per-event start and finish times, indexed by event id.
    pub spans: Vec<Span>,
}

/// Longest dependency chain, ignoring stream order and executor contention.
pub fn critical_path(dag: &ScheduleDag, c: &ClusterSpec) -> Result<f64, ScheduleError> {
    dag.validate()?;
    let d = event_durations(dag, c);
    let mut finish = vec![f64::NAN; dag.len()];
    // Deps may point forward in id order; resolve by repeated relaxation in
    // topological order.
    let mut remaining: Vec<usize> = (0..dag.len()).collect();
    while !remaining.is_empty() {
        let before = remaining.len();
        remaining.retain(|&i| {
            let e = dag.get(i);
            if e.deps.iter().any(|&p| finish[p].is_nan()) {
                return true;
            }
            let start = e.deps.iter().map(|&p| finish[p]).fold(0.0, f64::max);
            finish[i] = start + d[i];
            false
        });
        if remaining.len() == before {
            return Err(ScheduleError::Cycle);
        }
    }
    Ok(finish.into_iter().fold(0.0, f64::max))
}

/// List-schedule `dag` on `cluster`.
///
/// Repeatedly commits, among the events at the head of each stream whose
/// dependencies have finished, the one that can start earliest (ties go to
/// the lower id). Compute events additionally wait for the executor.
pub fn simulate(dag: &ScheduleDag, c: &ClusterSpec) -> Result<TimelineResult, ScheduleError> {
    use std::collections::VecDeque;

    let n = dag.len();
    for e in dag.events() {
        if let Some(&d) = e.deps.iter().find(|&&d| d >= n) {
            return Err(ScheduleError::UnknownDep { event: e.id, dep: d });
        }
    }
    let dur = event_durations(dag, c);
    let lanes = c.lane_count;
    // Stream `lanes` is the communication stream.
    let mut queues: Vec<VecDeque<usize>> = vec![VecDeque::new(); lanes + 1];
    for e in dag.events() {
        let q = if e.is_comm() { lanes } else { e.lane % lanes };
        queues[q].push_back(e.id);
    }
    let mut finish: Vec<Option<f64>> = vec![None; n];
    let mut spans = vec![Span { start: 0.0, finish: 0.0 }; n];
    let mut stream_free = vec![0.0f64; lanes + 1];
    let mut executor_free = 0.0f64;
    let mut busy: Vec<Span> = Vec::new();
    let mut comm_spans: Vec<Span> = Vec::new();
    for _ in 0..n {
        let mut best: Option<(f64, usize, usize)> = None;
        for (q, queue) in queues.iter().enumerate() {
            let Some(&id) = queue.front() else { continue };
            let e = dag.get(id);
            let Some(ready) = e.deps.iter().try_fold(0.0f64, |acc, &d| finish[d].map(|f| acc.max(f))) else {
                continue;
            };
            let mut start = ready.max(stream_free[q]);
            if e.is_compute() {
                start = start.max(executor_free);
            }
            if best.is_none_or(|(t, bid, _)| start < t || (start == t && id < bid)) {
                best = Some((start, id, q));
            }
        }
        let Some((start, id, q)) = best else {
            return Err(ScheduleError::Cycle);
        };
        queues[q].pop_front();
        let span = Span { start, finish: start + dur[id] };
        finish[id] = Some(span.finish);
        spans[id] = span;
        stream_free[q] = span.finish;
        let e = dag.get(id);
        if e.is_compute() {
            executor_free = span.finish;
            busy.push(span);
        } else if e.is_comm() {
            comm_spans.push(span);
        }
    }
    let iteration_time = spans.iter().map(|s| s.finish).fold(0.0, f64::max);
    let compute_total = busy.iter().map(|s| s.finish - s.start).sum();
    let comm_total: f64 = comm_spans.iter().map(|s| s.finish - s.start).sum();
    let busy = merge(busy);
    let comm_exposed = exposed_time(&merge(comm_spans), &busy).clamp(0.0, comm_total);
    let hidden_fraction = if comm_total > 0.0 { (comm_total - comm_exposed) / comm_total } else { 1.0 };
    Ok(TimelineResult { iteration_time, compute_total, comm_total, comm_exposed, hidden_fraction, spans })
}

/// Union of possibly overlapping intervals, sorted by start.
fn merge(mut spans: Vec<Span>) -> Vec<Span> {
    spans.sort_by(|a, b| a.start.total_cmp(&b.start));
    let mut out: Vec<Span> = Vec::with_capacity(spans.len());
    for s in spans {
        match out.last_mut() {
            Some(l) if s.start <= l.finish => l.finish = l.finish.max(s.finish),
            _ => out.push(s),
        }
    }
    out
}

/// Total length of `comm` intervals not covered by any `busy` interval.
/// Both lists are disjoint and sorted by start.
fn exposed_time(comm: &[Span], busy: &[Span]) -> f64 {
    let mut exposed = 0.0;
    let mut j = 0;
    for c in comm {
        let mut covered = 0.0;
        while j < busy.len() && busy[j].finish <= c.start {
            j += 1;
        }
        let mut k = j;
        while k < busy.len() && busy[k].start < c.finish {
            covered += busy[k].finish.min(c.finish) - busy[k].start.max(c.start);
            k += 1;
        }
        exposed += (c.finish - c.start) - covered;
    }
    exposed
}

/// Exposed communication as a fraction of iteration time.
pub fn comm_ratio(r: &TimelineResult) -> f64 {
    if r.iteration_time > 0.0 {
        r.comm_exposed / r.iteration_time
    } else {
        0.0
    }
}

/// Speedup of `a` over `b`: `iter_time(b) / iter_time(a)`.
pub fn speedup(a: &TimelineResult, b: &TimelineResult) -> f64 {
    b.iteration_time / a.iteration_time
}

/// Parameter count `12 l h^2 + 13 l h + (vocab + seq_len) h` of a GPT-style
/// model, i.e. `(1 + 13/(12h) + (vocab + seq_len)/(12 h l)) * 12 l h^2`.
pub fn model_size(h: u64, l: u64, vocab: u64, seq_len: u64) -> Result<u128, String> {
    if h == 0 || l == 0 || vocab == 0 || seq_len == 0 {
        return Err("model_size inputs must be positive".into());
    }
    let (h, l, v, s) = (h as u128, l as u128, vocab as u128, seq_len as u128);
    Ok(12 * l * h * h + 13 * l * h + (v + s) * h)
}
