//! Timed event DAGs describing one training iteration of a block stack.
//!
//! Events are stored in issue order. Compute and wait/barrier events occupy
//! the compute stream given by their lane hint; communication events share a
//! single in-order communication stream. Edges are data dependencies only:
//! program order on each stream is implied by the event order.

pub mod kernels;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type EventId = usize;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("event {event} depends on unknown event {dep}")]
    UnknownDep { event: EventId, dep: EventId },
    #[error("schedule contains a dependency cycle or an unsatisfiable stream order")]
    Cycle,
    #[error("comm event `{label}` has {count} wait/barrier consumers, expected exactly one")]
    CommConsumers { label: String, count: usize },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
}

/// One kernel launch inside a compute event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    /// `count` independent `m x k` by `k x n` products in a single launch.
    Gemm { m: u64, n: u64, k: u64, count: u64 },
    /// Memory-bound pass moving `bytes` (reads plus writes).
    Elementwise { bytes: u64 },
    /// Copy of partial results into a pre-sized output buffer.
    Memcpy { bytes: u64 },
}

impl Kernel {
    pub fn flops(&self) -> u64 {
        match *self {
            Kernel::Gemm { m, n, k, count } => 2 * m * n * k * count,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    Compute { kernels: Vec<Kernel> },
    /// AllReduce of `bytes` payload bytes per worker.
    Comm { bytes: u64 },
    /// Completion wait on a single collective handle.
    Wait,
    /// Synchronization point over several collectives (concat barrier).
    Barrier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub id: EventId,
    pub label: String,
    pub kind: EventKind,
    pub lane: usize,
    /// Micro-batch the event belongs to, if it is micro-batch local.
    pub micro: Option<usize>,
    pub deps: Vec<EventId>,
}

impl Event {
    pub fn is_compute(&self) -> bool {
        matches!(self.kind, EventKind::Compute { .. })
    }

    pub fn is_comm(&self) -> bool {
        matches!(self.kind, EventKind::Comm { .. })
    }

    pub fn is_sync(&self) -> bool {
        matches!(self.kind, EventKind::Wait | EventKind::Barrier)
    }
}

/// Event DAG in issue order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScheduleDag {
    events: Vec<Event>,
}

impl ScheduleDag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn get(&self, id: EventId) -> &Event {
        &self.events[id]
    }

    pub fn find(&self, label: &str) -> Option<&Event> {
        self.events.iter().find(|e| e.label == label)
    }

    pub fn labels(&self) -> Vec<&str> {
        self.events.iter().map(|e| e.label.as_str()).collect()
    }

    /// Append an event; its id is its position in issue order.
    pub fn push(
        &mut self,
        label: impl Into<String>,
        kind: EventKind,
        lane: usize,
        micro: Option<usize>,
        deps: Vec<EventId>,
    ) -> EventId {
        let id = self.events.len();
        let mut deps = deps;
        deps.sort_unstable();
        deps.dedup();
        self.events.push(Event { id, label: label.into(), kind, lane, micro, deps });
        id
    }

    pub fn total_comm_bytes(&self) -> u64 {
        self.events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::Comm { bytes } => Some(bytes),
                _ => None,
            })
            .sum()
    }

    pub fn comm_count(&self) -> usize {
        self.events.iter().filter(|e| e.is_comm()).count()
    }

    /// Events that list `id` as a dependency.
    pub fn consumers(&self, id: EventId) -> Vec<EventId> {
        self.events.iter().filter(|e| e.deps.contains(&id)).map(|e| e.id).collect()
    }

    /// Same events with every communication payload removed.
    pub fn with_comm_zeroed(&self) -> Self {
        let mut out = self.clone();
        for e in &mut out.events {
            if let EventKind::Comm { bytes } = &mut e.kind {
                *bytes = 0;
            }
        }
        out
    }

    /// Checks that dependencies exist, the graph is acyclic, and every comm
    /// event has exactly one wait/barrier consumer.
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let n = self.events.len();
        let mut indeg = vec![0usize; n];
        let mut out: Vec<Vec<EventId>> = vec![Vec::new(); n];
        for e in &self.events {
            for &d in &e.deps {
                if d >= n {
                    return Err(ScheduleError::UnknownDep { event: e.id, dep: d });
                }
                indeg[e.id] += 1;
                out[d].push(e.id);
            }
        }
        let mut ready: Vec<EventId> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = ready.pop() {
            seen += 1;
            for &j in &out[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.push(j);
                }
            }
        }
        if seen != n {
            return Err(ScheduleError::Cycle);
        }
        for e in self.events.iter().filter(|e| e.is_comm()) {
            let count = out[e.id].iter().filter(|&&c| self.events[c].is_sync()).count();
            if count != 1 {
                return Err(ScheduleError::CommConsumers { label: e.label.clone(), count });
            }
        }
        Ok(())
    }
}

/// Transformer block layout: where the layer norms sit relative to the
/// residual connections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockLayout {
    #[default]
    PreNorm,
    PostNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Baseline,
    RowInput,
    ColWeight,
    Hybrid,
}

/// Slicing configuration: `p1` row (batch) partitions of the input and `p2`
/// column partitions of the second weight of each sub-layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub scheme: Scheme,
    pub p1: usize,
    pub p2: usize,
}

impl PartitionPlan {
    pub fn baseline() -> Self {
        Self { scheme: Scheme::Baseline, p1: 1, p2: 1 }
    }

    pub fn row(p1: usize) -> Self {
        Self { scheme: Scheme::RowInput, p1, p2: 1 }
    }

    pub fn col(p2: usize) -> Self {
        Self { scheme: Scheme::ColWeight, p1: 1, p2 }
    }

    pub fn hybrid(p1: usize, p2: usize) -> Self {
        Self { scheme: Scheme::Hybrid, p1, p2 }
    }

    /// Checks the scheme constraints and divisibility against `batch`
    /// samples and a weight output width of `out_cols`.
    pub fn validate(&self, batch: usize, out_cols: usize) -> Result<(), ScheduleError> {
        let bad = |m: String| Err(ScheduleError::InvalidPlan(m));
        let (p1, p2) = (self.p1, self.p2);
        if p1 == 0 || p2 == 0 {
            return bad("partition counts must be positive".into());
        }
        match self.scheme {
            Scheme::Baseline if p1 != 1 || p2 != 1 => return bad("baseline requires p1 = p2 = 1".into()),
            Scheme::RowInput if p2 != 1 => return bad("row split requires p2 = 1".into()),
            Scheme::ColWeight if p1 != 1 => return bad("column split requires p1 = 1".into()),
            Scheme::Hybrid if p1 < 2 || p2 < 2 => return bad("hybrid split requires p1, p2 >= 2".into()),
            _ => {}
        }
        if p1 > batch || batch % p1 != 0 {
            return bad(format!("batch {batch} not divisible into {p1} micro-batches"));
        }
        if p2 > out_cols || out_cols % p2 != 0 {
            return bad(format!("weight width {out_cols} not divisible into {p2} column chunks"));
        }
        Ok(())
    }
}

impl fmt::Display for PartitionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}(p1={}, p2={})", self.scheme, self.p1, self.p2)
    }
}

/// Execution modes compared by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    SyncBaseline,
    MegatronAsync,
    DominoRow,
    DominoCol,
    DominoHybrid,
    OptimalNoComm,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::SyncBaseline,
        Mode::MegatronAsync,
        Mode::DominoRow,
        Mode::DominoCol,
        Mode::DominoHybrid,
        Mode::OptimalNoComm,
    ];

    pub fn scheme(&self) -> Scheme {
        match self {
            Mode::SyncBaseline | Mode::MegatronAsync | Mode::OptimalNoComm => Scheme::Baseline,
            Mode::DominoRow => Scheme::RowInput,
            Mode::DominoCol => Scheme::ColWeight,
            Mode::DominoHybrid => Scheme::Hybrid,
        }
    }

    pub fn is_domino(&self) -> bool {
        matches!(self, Mode::DominoRow | Mode::DominoCol | Mode::DominoHybrid)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::SyncBaseline => "SyncBaseline",
            Mode::MegatronAsync => "MegatronAsync",
            Mode::DominoRow => "DominoRow",
            Mode::DominoCol => "DominoCol",
            Mode::DominoHybrid => "DominoHybrid",
            Mode::OptimalNoComm => "OptimalNoComm",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

/// Dimensions of a stack of identical transformer blocks as seen by one
/// tensor-parallel group of `n` workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub layers: usize,
    /// Samples in the micro-batch processed by the group.
    pub batch: usize,
    pub seq: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub n: usize,
    pub dtype_bytes: usize,
    pub layout: BlockLayout,
}

impl BlockShape {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let bad = |m: &str| Err(ScheduleError::InvalidPlan(m.to_string()));
        let dims = [self.layers, self.batch, self.seq, self.hidden, self.heads, self.ffn, self.n, self.dtype_bytes];
        if dims.contains(&0) {
            return bad("all block dimensions must be positive");
        }
        if self.hidden % self.heads != 0 {
            return bad("hidden size must be divisible by the head count");
        }
        if self.hidden % self.n != 0 || self.ffn % self.n != 0 {
            return bad("hidden and ffn width must be divisible by the group size");
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }

    /// Payload of one full activation AllReduce.
    pub fn activation_bytes(&self) -> u64 {
        (self.rows() * self.hidden * self.dtype_bytes) as u64
    }
}

/// Canonical event labels shared by the engine and the schedule builder.
pub mod label {
    pub fn micro(name: &str, block: usize, m: usize) -> String {
        format!("{name}[{block}.{m}]")
    }

    pub fn chunk(name: &str, block: usize, m: usize, j: usize) -> String {
        format!("{name}[{block}.{m}.{j}]")
    }

    pub fn block(name: &str, block: usize) -> String {
        format!("{name}[{block}]")
    }

    pub fn wait(comm: &str) -> String {
        format!("wait:{comm}")
    }

    pub fn sync(name: &str, block: usize) -> String {
        format!("sync:{name}[{block}]")
    }
}
