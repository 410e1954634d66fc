//! A simulated tensor-parallel group.
//!
//! Workers are cooperatively scheduled state machines driven by a single
//! controller. Which runnable worker advances next is drawn from a seeded
//! RNG, so interleavings vary with the seed yet every run is reproducible.
//! Messages between a fixed (sender, receiver) pair are delivered FIFO.

mod ring;

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;
use ring::{Message, Step, WorkerTask};

static NEXT_GROUP_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CollectiveError {
    #[error("group has {expected} workers but {got} buffers were supplied")]
    WorkerCount { expected: usize, got: usize },
    #[error("worker {worker} buffer shape {got:?} differs from worker 0 shape {expected:?}")]
    ShapeMismatch {
        worker: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("handle belongs to group {handle_group}, not group {group}")]
    ForeignHandle { handle_group: u64, group: u64 },
    #[error("unknown or already consumed handle {0}")]
    UnknownHandle(u64),
    #[error("buffer `{0}` already has an un-waited collective in flight")]
    DoubleIssue(String),
    #[error("buffer of handle {0} read before wait")]
    ReadBeforeWait(u64),
    #[error("collective {id} made no progress within {steps} scheduler steps")]
    Deadlock { id: u64, steps: usize },
    #[error("tensor error: {0}")]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, CollectiveError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollectiveOp {
    AllReduceSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandleState {
    Issued,
    Completed,
}

/// Token for an in-flight collective. Not `Clone`: exactly one owner decides
/// when the reduced buffers are taken.
#[derive(Debug, PartialEq, Eq)]
pub struct CollectiveHandle {
    group: u64,
    id: u64,
    op: CollectiveOp,
}

impl CollectiveHandle {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn op(&self) -> CollectiveOp {
        self.op
    }
}

/// Byte accounting for one collective.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollectiveRecord {
    pub id: u64,
    pub tag: String,
    pub payload_bytes: u64,
    pub bytes_sent: Vec<u64>,
}

impl CollectiveRecord {
    pub fn total_sent(&self) -> u64 {
        self.bytes_sent.iter().sum()
    }
}

#[derive(Debug)]
struct Slot {
    tag: String,
    shape: Vec<usize>,
    tasks: Vec<WorkerTask>,
    state: HandleState,
    waited: bool,
    /// What a worker would observe if it read the buffer now.
    visible: Vec<Tensor>,
    record_index: usize,
}

#[derive(Debug)]
pub struct TPGroup {
    id: u64,
    n: usize,
    dtype_bytes: usize,
    rng: ChaCha8Rng,
    mailboxes: Vec<VecDeque<Message>>,
    next_handle_id: u64,
    slots: BTreeMap<u64, Slot>,
    records: Vec<CollectiveRecord>,
    steps_taken: u64,
}

/// Sum of per-worker contributions accumulated in ascending rank order.
pub fn fixed_reduction_order(contributions: &[Tensor]) -> Result<Tensor> {
    let first = contributions.first().ok_or(CollectiveError::WorkerCount { expected: 1, got: 0 })?;
    for (worker, c) in contributions.iter().enumerate() {
        if c.shape() != first.shape() {
            return Err(CollectiveError::ShapeMismatch {
                worker,
                expected: first.shape().to_vec(),
                got: c.shape().to_vec(),
            });
        }
    }
    let parts: Vec<&[f64]> = contributions.iter().map(Tensor::data).collect();
    Ok(Tensor::new(first.shape().to_vec(), fixed_reduction_order_slices(&parts))?)
}

pub(crate) fn fixed_reduction_order_slices(parts: &[&[f64]]) -> Vec<f64> {
    let mut acc = parts[0].to_vec();
    for p in &parts[1..] {
        for (a, v) in acc.iter_mut().zip(p.iter()) {
            *a += v;
        }
    }
    acc
}

fn poisoned(shape: &[usize]) -> Tensor {
    if cfg!(debug_assertions) {
        Tensor::full(shape, f64::NAN)
    } else {
        Tensor::zeros(shape)
    }
}

impl TPGroup {
    /// Group of `n` workers whose scheduler interleaving is drawn from `seed`.
    /// Byte counters assume 8-byte (`f64`) elements.
    pub fn new(n: usize, seed: u64) -> Self {
        Self::with_dtype_bytes(n, seed, 8)
    }

    /// # Panics
    /// Panics if `n == 0`.
    pub fn with_dtype_bytes(n: usize, seed: u64, dtype_bytes: usize) -> Self {
        assert!(n > 0, "a group needs at least one worker");
        Self {
            id: NEXT_GROUP_ID.fetch_add(1, Ordering::Relaxed),
            n,
            dtype_bytes,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mailboxes: (0..n).map(|_| VecDeque::new()).collect(),
            next_handle_id: 0,
            slots: BTreeMap::new(),
            records: Vec::new(),
            steps_taken: 0,
        }
    }

    pub fn n_workers(&self) -> usize {
        self.n
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn records(&self) -> &[CollectiveRecord] {
        &self.records
    }

    pub fn clear_records(&mut self) {
        self.records.clear();
    }

    pub fn total_payload_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.payload_bytes).sum()
    }

    /// Scheduler steps executed so far, across all collectives.
    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    /// Handles issued but not yet taken.
    pub fn outstanding(&self) -> usize {
        self.slots.len()
    }

    fn validate(&self, buffers: &[Tensor]) -> Result<()> {
        if buffers.len() != self.n {
            return Err(CollectiveError::WorkerCount { expected: self.n, got: buffers.len() });
        }
        let shape = buffers[0].shape();
        for (worker, b) in buffers.iter().enumerate() {
            if b.shape() != shape {
                return Err(CollectiveError::ShapeMismatch {
                    worker,
                    expected: shape.to_vec(),
                    got: b.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Blocking AllReduce-sum: every returned tensor holds the elementwise sum.
    pub fn allreduce_sum_sync(&mut self, buffers: Vec<Tensor>) -> Result<Vec<Tensor>> {
        let tag = format!("sync#{}", self.next_handle_id);
        let h = self.allreduce_sum_async(&tag, buffers)?;
        self.wait(&h)?;
        self.take(h)
    }

    /// Issue an AllReduce-sum on the buffer tagged `tag` and return at once.
    /// The collective advances a seeded number of scheduler steps before the
    /// call returns; the rest happens in later [`progress`](Self::progress)
    /// or [`wait`](Self::wait) calls. With a single worker the reduction is
    /// the identity and completes immediately.
    pub fn allreduce_sum_async(&mut self, tag: &str, buffers: Vec<Tensor>) -> Result<CollectiveHandle> {
        self.validate(&buffers)?;
        if self.slots.values().any(|s| s.tag == tag && !s.waited) {
            return Err(CollectiveError::DoubleIssue(tag.to_string()));
        }
        let id = self.next_handle_id;
        self.next_handle_id += 1;
        let n = self.n;
        let shape = buffers[0].shape().to_vec();
        self.records.push(CollectiveRecord {
            id,
            tag: tag.to_string(),
            payload_bytes: buffers[0].size_bytes(self.dtype_bytes),
            bytes_sent: vec![0; n],
        });
        let record_index = self.records.len() - 1;
        let slot = if n == 1 {
            Slot {
                tag: tag.to_string(),
                shape,
                tasks: Vec::new(),
                state: HandleState::Completed,
                waited: false,
                visible: buffers,
                record_index,
            }
        } else {
            Slot {
                tag: tag.to_string(),
                tasks: buffers
                    .into_iter()
                    .enumerate()
                    .map(|(rank, b)| WorkerTask::new(rank, n, b.into_data()))
                    .collect(),
                visible: (0..n).map(|_| poisoned(&shape)).collect(),
                shape,
                state: HandleState::Issued,
                waited: false,
                record_index,
            }
        };
        self.slots.insert(id, slot);
        if n > 1 {
            let budget = self.rng.random_range(0..=2 * n);
            self.progress(budget);
        }
        Ok(CollectiveHandle { group: self.id, id, op: CollectiveOp::AllReduceSum })
    }

    /// Advance in-flight collectives by up to `steps` scheduler steps.
    /// Returns the number of steps that made progress.
    pub fn progress(&mut self, steps: usize) -> usize {
        let mut done = 0;
        for _ in 0..steps {
            if !self.step_once() {
                break;
            }
            done += 1;
        }
        done
    }

    /// One scheduler step: pick a runnable (collective, worker) pair at
    /// random and advance it. Returns false when nothing can progress.
    fn step_once(&mut self) -> bool {
        let ids: Vec<u64> = self
            .slots
            .iter()
            .filter(|(_, s)| s.state == HandleState::Issued)
            .map(|(id, _)| *id)
            .collect();
        let mut candidates: Vec<(u64, usize)> = ids
            .iter()
            .flat_map(|&id| {
                let slot = &self.slots[&id];
                (0..self.n).filter(move |&w| !slot.tasks[w].is_done()).map(move |w| (id, w))
            })
            .collect();
        // Try candidates in random order until one progresses.
        while !candidates.is_empty() {
            let pick = self.rng.random_range(0..candidates.len());
            let (id, w) = candidates.swap_remove(pick);
            let dtype = self.dtype_bytes;
            let slot = self.slots.get_mut(&id).expect("slot exists");
            if slot.tasks[w].step(id, &mut self.mailboxes, dtype) == Step::Progressed {
                self.steps_taken += 1;
                if slot.tasks.iter().all(WorkerTask::is_done) {
                    self.finish(id);
                }
                return true;
            }
        }
        false
    }

    fn finish(&mut self, id: u64) {
        let slot = self.slots.get_mut(&id).expect("slot exists");
        let tasks = std::mem::take(&mut slot.tasks);
        let rec = &mut self.records[slot.record_index];
        for (w, t) in tasks.iter().enumerate() {
            rec.bytes_sent[w] = t.bytes_sent;
        }
        slot.visible = tasks
            .into_iter()
            .map(|t| Tensor::new(slot.shape.clone(), t.into_buffer()).expect("shape preserved"))
            .collect();
        slot.state = HandleState::Completed;
    }

    fn check_handle(&self, h: &CollectiveHandle) -> Result<()> {
        if h.group != self.id {
            return Err(CollectiveError::ForeignHandle { handle_group: h.group, group: self.id });
        }
        if !self.slots.contains_key(&h.id) {
            return Err(CollectiveError::UnknownHandle(h.id));
        }
        Ok(())
    }

    pub fn state(&self, h: &CollectiveHandle) -> Result<HandleState> {
        self.check_handle(h)?;
        Ok(self.slots[&h.id].state)
    }

    /// Drive the collective to completion. Idempotent.
    pub fn wait(&mut self, h: &CollectiveHandle) -> Result<()> {
        self.check_handle(h)?;
        let mut steps = 0;
        while self.slots[&h.id].state == HandleState::Issued {
            // Other in-flight collectives may advance too while this one is waited on.
            if !self.step_once() {
                return Err(CollectiveError::Deadlock { id: h.id, steps });
            }
            steps += 1;
        }
        self.slots.get_mut(&h.id).expect("checked").waited = true;
        Ok(())
    }

    /// Worker `worker`'s view of the buffer. Fails until the handle is waited.
    pub fn read(&self, h: &CollectiveHandle, worker: usize) -> Result<&Tensor> {
        self.check_handle(h)?;
        let slot = &self.slots[&h.id];
        if !slot.waited {
            return Err(CollectiveError::ReadBeforeWait(h.id));
        }
        slot.visible.get(worker).ok_or(CollectiveError::WorkerCount { expected: self.n, got: worker })
    }

    /// The buffer as a worker would see it right now, without the wait check.
    /// In debug builds an in-flight buffer is poisoned with NaN.
    pub fn peek_unchecked(&self, h: &CollectiveHandle, worker: usize) -> Result<&Tensor> {
        self.check_handle(h)?;
        self.slots[&h.id]
            .visible
            .get(worker)
            .ok_or(CollectiveError::WorkerCount { expected: self.n, got: worker })
    }

    /// Consume a waited handle and return the per-worker reduced buffers.
    pub fn take(&mut self, h: CollectiveHandle) -> Result<Vec<Tensor>> {
        self.check_handle(&h)?;
        if !self.slots[&h.id].waited {
            return Err(CollectiveError::ReadBeforeWait(h.id));
        }
        Ok(self.slots.remove(&h.id).expect("checked").visible)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant(shape: &[usize], v: f64) -> Tensor {
        Tensor::full(shape, v)
    }

    #[test]
    fn single_worker_is_identity() {
        let mut g = TPGroup::new(1, 0);
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = g.allreduce_sum_sync(vec![x.clone()]).unwrap();
        assert_eq!(out, vec![x]);
        assert_eq!(g.records()[0].total_sent(), 0);
    }

    #[test]
    fn four_workers_of_rank_value_sum_to_six() {
        let mut g = TPGroup::new(4, 11);
        let bufs = (0..4).map(|i| constant(&[3, 5], i as f64)).collect();
        for t in g.allreduce_sum_sync(bufs).unwrap() {
            assert!(t.data().iter().all(|&v| v == 6.0));
        }
    }

    #[test]
    fn three_workers_bit_exact_in_rank_order() {
        let a = Tensor::new(vec![1, 4], vec![0.1, 1e16, -3.3, 0.7]).unwrap();
        let b = Tensor::new(vec![1, 4], vec![0.2, 1.0, 1e-9, 0.11]).unwrap();
        let c = Tensor::new(vec![1, 4], vec![0.3, -1e16, 2.2, 0.13]).unwrap();
        let expected: Vec<f64> = (0..4).map(|i| a.data()[i] + b.data()[i] + c.data()[i]).collect();
        for seed in 0..20 {
            let mut g = TPGroup::new(3, seed);
            for t in g.allreduce_sum_sync(vec![a.clone(), b.clone(), c.clone()]).unwrap() {
                assert_eq!(t.data(), expected.as_slice());
            }
        }
    }

    #[test]
    fn async_matches_sync_and_completes_in_either_order() {
        let mk = |k: f64| (0..4).map(|i| constant(&[2, 8], i as f64 + k)).collect::<Vec<_>>();
        let mut s = TPGroup::new(4, 5);
        let ref0 = s.allreduce_sum_sync(mk(0.0)).unwrap();
        let ref1 = s.allreduce_sum_sync(mk(10.0)).unwrap();
        for reverse in [false, true] {
            let mut g = TPGroup::new(4, 99);
            let h0 = g.allreduce_sum_async("a", mk(0.0)).unwrap();
            let h1 = g.allreduce_sum_async("b", mk(10.0)).unwrap();
            if reverse {
                g.wait(&h1).unwrap();
                g.wait(&h0).unwrap();
            } else {
                g.wait(&h0).unwrap();
                g.wait(&h1).unwrap();
            }
            assert_eq!(g.take(h0).unwrap(), ref0);
            assert_eq!(g.take(h1).unwrap(), ref1);
            assert_eq!(g.outstanding(), 0);
        }
    }

    #[test]
    fn handle_misuse_is_rejected() {
        let mut g = TPGroup::new(2, 1);
        let mut other = TPGroup::new(2, 1);
        let bufs = || vec![constant(&[64], 1.0), constant(&[64], 2.0)];
        let h = g.allreduce_sum_async("x", bufs()).unwrap();
        assert!(matches!(other.wait(&h), Err(CollectiveError::ForeignHandle { .. })));
        assert!(matches!(g.allreduce_sum_async("x", bufs()), Err(CollectiveError::DoubleIssue(_))));
        assert!(matches!(g.read(&h, 0), Err(CollectiveError::ReadBeforeWait(_))));
        g.wait(&h).unwrap();
        g.wait(&h).unwrap();
        assert!(g.read(&h, 1).unwrap().data().iter().all(|&v| v == 3.0));
        // Re-issuing a waited buffer tag is allowed.
        let h2 = g.allreduce_sum_async("x", bufs()).unwrap();
        g.wait(&h2).unwrap();
        let id = h.id();
        g.take(h).unwrap();
        let stale = CollectiveHandle { group: g.id(), id, op: CollectiveOp::AllReduceSum };
        assert_eq!(g.state(&stale), Err(CollectiveError::UnknownHandle(id)));
    }

    #[test]
    fn mismatched_buffers_rejected() {
        let mut g = TPGroup::new(2, 0);
        assert!(matches!(
            g.allreduce_sum_sync(vec![constant(&[2], 0.0)]),
            Err(CollectiveError::WorkerCount { expected: 2, got: 1 })
        ));
        assert!(matches!(
            g.allreduce_sum_sync(vec![constant(&[2], 0.0), constant(&[3], 0.0)]),
            Err(CollectiveError::ShapeMismatch { worker: 1, .. })
        ));
    }

    #[cfg(debug_assertions)]
    #[test]
    fn in_flight_buffer_is_poisoned() {
        let mut g = TPGroup::new(4, 3);
        let bufs = (0..4).map(|_| constant(&[16], 1.0)).collect();
        let h = g.allreduce_sum_async("p", bufs).unwrap();
        if g.state(&h).unwrap() == HandleState::Issued {
            assert!(g.peek_unchecked(&h, 0).unwrap().data()[0].is_nan());
        }
    }

    #[test]
    fn ring_byte_count_per_worker() {
        for n in [2usize, 3, 4, 8] {
            let len = 24 * n;
            let mut g = TPGroup::with_dtype_bytes(n, 7, 2);
            g.allreduce_sum_sync((0..n).map(|_| constant(&[len], 1.0)).collect()).unwrap();
            let rec = &g.records()[0];
            let payload = (len * 2) as u64;
            assert_eq!(rec.payload_bytes, payload);
            for &b in &rec.bytes_sent {
                assert_eq!(b * n as u64, 2 * (n as u64 - 1) * payload);
            }
        }
    }

    proptest! {
        #[test]
        fn prop_allreduce_equals_rank_order_sum(
            n in 1usize..6,
            len in 1usize..40,
            seed in any::<u64>(),
            vals in proptest::collection::vec(-1e3f64..1e3, 240),
        ) {
            let bufs: Vec<Tensor> = (0..n)
                .map(|w| Tensor::new(vec![len], vals[w * len..(w + 1) * len].to_vec()).unwrap())
                .collect();
            let expected = fixed_reduction_order(&bufs).unwrap();
            let mut g = TPGroup::new(n, seed);
            let pending: Vec<_> = (0..3)
                .map(|k| g.allreduce_sum_async(&format!("t{k}"), bufs.clone()).unwrap())
                .collect();
            // Waiting in reverse order must never deadlock within the step bound.
            for h in pending.iter().rev() {
                g.wait(h).unwrap();
            }
            prop_assert!(g.steps_taken() <= (3 * n * (3 * n)) as u64);
            for h in pending {
                for t in g.take(h).unwrap() {
                    prop_assert_eq!(&t, &expected);
                }
            }
        }
    }
}
