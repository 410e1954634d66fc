//! Per-worker state machines of one AllReduce-sum.
//!
//! Each worker's buffer is cut into `n` chunks (remainder on the last chunk).
//! Chunk `c` is owned by worker `c`: every other worker sends its copy of the
//! chunk straight to the owner, which accumulates the `n` contributions in
//! ascending rank order. The reduced chunks then circulate around the ring
//! (`w -> w + 1`) for `n - 1` steps until every worker holds all of them.
//! Every worker sends `(n - 1)` chunks per phase, so the traffic per worker is
//! `2 (n - 1) / n` of the payload when the chunks are even.

use std::collections::VecDeque;

use super::fixed_reduction_order_slices;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Phase {
    Scatter,
    Gather,
}

#[derive(Debug)]
pub(crate) struct Message {
    pub from: usize,
    pub collective: u64,
    pub phase: Phase,
    pub chunk: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
enum Action {
    Send { to: usize, chunk: usize, phase: Phase },
    /// Collect the scatter contributions of this worker's own chunk.
    Reduce,
    Recv { from: usize, phase: Phase },
}

/// Outcome of trying to advance one worker by one action.
#[derive(Debug, PartialEq, Eq)]
pub(crate) enum Step {
    Progressed,
    Blocked,
    Done,
}

pub(crate) fn chunk_bounds(len: usize, n: usize) -> Vec<(usize, usize)> {
    let each = len / n;
    (0..n)
        .map(|c| {
            let start = c * each;
            let end = if c + 1 == n { len } else { start + each };
            (start, end)
        })
        .collect()
}

#[derive(Debug)]
pub(crate) struct WorkerTask {
    rank: usize,
    buffer: Vec<f64>,
    bounds: Vec<(usize, usize)>,
    actions: VecDeque<Action>,
    /// Scatter contributions for the owned chunk, indexed by sender rank.
    contributions: Vec<Option<Vec<f64>>>,
    pub bytes_sent: u64,
}

impl WorkerTask {
    pub fn new(rank: usize, n: usize, buffer: Vec<f64>) -> Self {
        let bounds = chunk_bounds(buffer.len(), n);
        let mut actions = VecDeque::new();
        for to in (0..n).filter(|&c| c != rank) {
            actions.push_back(Action::Send { to, chunk: to, phase: Phase::Scatter });
        }
        actions.push_back(Action::Reduce);
        for t in 0..n.saturating_sub(1) {
            let chunk = (rank + n - t) % n;
            actions.push_back(Action::Send { to: (rank + 1) % n, chunk, phase: Phase::Gather });
            actions.push_back(Action::Recv { from: (rank + n - 1) % n, phase: Phase::Gather });
        }
        let mut contributions = vec![None; n];
        let (s, e) = bounds[rank];
        contributions[rank] = Some(buffer[s..e].to_vec());
        Self {
            rank,
            buffer,
            bounds,
            actions,
            contributions,
            bytes_sent: 0,
        }
    }

    pub fn is_done(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn into_buffer(self) -> Vec<f64> {
        self.buffer
    }

    /// Advance by at most one action. `mailboxes[r]` is worker `r`'s inbox.
    pub fn step(&mut self, id: u64, mailboxes: &mut [VecDeque<Message>], dtype_bytes: usize) -> Step {
        let Some(&action) = self.actions.front() else {
            return Step::Done;
        };
        match action {
            Action::Send { to, chunk, phase } => {
                let (s, e) = self.bounds[chunk];
                self.bytes_sent += ((e - s) * dtype_bytes) as u64;
                mailboxes[to].push_back(Message {
                    from: self.rank,
                    collective: id,
                    phase,
                    chunk,
                    data: self.buffer[s..e].to_vec(),
                });
            }
            Action::Reduce => {
                // Drain every scatter message already delivered for this collective.
                let inbox = &mut mailboxes[self.rank];
                let mut i = 0;
                while i < inbox.len() {
                    let m = &inbox[i];
                    if m.collective == id && m.phase == Phase::Scatter {
                        let m = inbox.remove(i).expect("index in range");
                        self.contributions[m.from] = Some(m.data);
                    } else {
                        i += 1;
                    }
                }
                if self.contributions.iter().any(Option::is_none) {
                    return Step::Blocked;
                }
                let parts: Vec<&[f64]> = self
                    .contributions
                    .iter()
                    .map(|c| c.as_deref().expect("checked above"))
                    .collect();
                let reduced = fixed_reduction_order_slices(&parts);
                let (s, e) = self.bounds[self.rank];
                self.buffer[s..e].copy_from_slice(&reduced);
                self.contributions.clear();
            }
            Action::Recv { from, phase } => {
                let inbox = &mut mailboxes[self.rank];
                let pos = inbox
                    .iter()
                    .position(|m| m.collective == id && m.from == from && m.phase == phase);
                let Some(pos) = pos else {
                    return Step::Blocked;
                };
                let m = inbox.remove(pos).expect("position is valid");
                let (s, e) = self.bounds[m.chunk];
                self.buffer[s..e].copy_from_slice(&m.data);
            }
        }
        self.actions.pop_front();
        Step::Progressed
    }
}
