//! Dynamic pipeline scheduling over the (chunk x microbatch) task matrix:
//! depth-first (DFC) and breadth-first (BFC) traversal, a best-effort BFC
//! mode bounded by an activation-memory cap, and the four-buffer/two-queue
//! asynchronous channel model used to overlap transfers with compute.
//!
//! The scheduler is modeled per pipeline rank: cross-rank effects enter
//! through the channel latency attached to chunk-crossing edges.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

/// Which half of training a task belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskPhase {
    Forward,
    Backward,
}

/// One cell of the computation grid: a model chunk applied to a microbatch
/// in one phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskId {
    pub chunk_id: u32,
    pub microbatch_id: u32,
    pub phase: TaskPhase,
}

impl TaskId {
    pub fn fwd(chunk_id: u32, microbatch_id: u32) -> Self {
        Self {
            chunk_id,
            microbatch_id,
            phase: TaskPhase::Forward,
        }
    }
    pub fn bwd(chunk_id: u32, microbatch_id: u32) -> Self {
        Self {
            chunk_id,
            microbatch_id,
            phase: TaskPhase::Backward,
        }
    }
}

/// The computation grid with per-task durations and per-(chunk, microbatch)
/// activation sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMatrix {
    pub chunks: u32,
    pub microbatches: u32,
    pub durations: BTreeMap<TaskId, u64>,
    pub activation_bytes: BTreeMap<(u32, u32), u64>,
}

impl TaskMatrix {
    /// Uniform durations and activation sizes across the whole grid.
    pub fn uniform(
        chunks: u32,
        microbatches: u32,
        forward_us: u64,
        backward_us: u64,
        activation: u64,
    ) -> Result<Self, DppError> {
        if chunks == 0 || microbatches == 0 {
            return Err(DppError::InvalidMatrix(
                "chunks and microbatches must be at least 1".into(),
            ));
        }
        if forward_us == 0 || backward_us == 0 {
            return Err(DppError::InvalidMatrix("durations must be positive".into()));
        }
        let mut durations = BTreeMap::new();
        let mut activation_bytes = BTreeMap::new();
        for c in 0..chunks {
            for m in 0..microbatches {
                durations.insert(TaskId::fwd(c, m), forward_us);
                durations.insert(TaskId::bwd(c, m), backward_us);
                activation_bytes.insert((c, m), activation);
            }
        }
        Ok(Self {
            chunks,
            microbatches,
            durations,
            activation_bytes,
        })
    }

    pub fn duration(&self, task: TaskId) -> u64 {
        *self.durations.get(&task).unwrap_or(&1)
    }

    pub fn activation(&self, chunk: u32, microbatch: u32) -> u64 {
        *self
            .activation_bytes
            .get(&(chunk, microbatch))
            .unwrap_or(&0)
    }

    pub fn task_count_per_phase(&self) -> usize {
        (self.chunks * self.microbatches) as usize
    }

    /// Peak activation memory of a pure depth-first traversal: microbatches
    /// run one at a time, so the peak is the heaviest single column.
    pub fn dfc_peak_bytes(&self) -> u64 {
        (0..self.microbatches)
            .map(|m| (0..self.chunks).map(|c| self.activation(c, m)).sum())
            .max()
            .unwrap_or(0)
    }

    /// Peak of a pure breadth-first traversal: every activation is live at
    /// the forward/backward boundary.
    pub fn bfc_peak_bytes(&self) -> u64 {
        self.activation_bytes.values().sum()
    }
}

/// Traversal strategy over the task matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePolicy {
    /// Depth-first: the same microbatch advances through the chunks first,
    /// so its backward starts early and activations are released sooner.
    Dfc,
    /// Breadth-first: all microbatches pass through one chunk first, so the
    /// chunk finishes its computation early and gradient sync can start.
    Bfc,
    /// Follow BFC as long as projected activation memory stays under the
    /// cap; fall back toward depth-first progress when it would not.
    BestEffortBfc { mem_cap_bytes: u64 },
}

#[derive(Debug, thiserror::Error)]
pub enum DppError {
    #[error("invalid task matrix: {0}")]
    InvalidMatrix(String),
    #[error("memory cap {cap} B below depth-first peak {dfc_peak} B: no schedule fits")]
    Infeasible { cap: u64, dfc_peak: u64 },
    #[error("scheduler stalled with {remaining} tasks pending")]
    Stalled { remaining: usize },
    #[error("channel backpressure: {0:?} buffer full")]
    Backpressure(TaskPhase),
}

/// Emits the policy's priority order over one phase of the matrix.
///
/// Forward traversals ascend the chunk axis; backward traversals descend it
/// (gradients flow from the last chunk down), with the microbatch axis
/// always ascending.
pub fn traversal_order(
    matrix: &TaskMatrix,
    policy: SchedulePolicy,
    phase: TaskPhase,
) -> Vec<TaskId> {
    let (c_count, m_count) = (matrix.chunks, matrix.microbatches);
    let chunk_axis: Vec<u32> = match phase {
        TaskPhase::Forward => (0..c_count).collect(),
        TaskPhase::Backward => (0..c_count).rev().collect(),
    };
    let mut out = Vec::with_capacity((c_count * m_count) as usize);
    match policy {
        SchedulePolicy::Dfc => {
            for m in 0..m_count {
                for &c in &chunk_axis {
                    out.push(TaskId {
                        chunk_id: c,
                        microbatch_id: m,
                        phase,
                    });
                }
            }
        }
        SchedulePolicy::Bfc | SchedulePolicy::BestEffortBfc { .. } => {
            for &c in &chunk_axis {
                for m in 0..m_count {
                    out.push(TaskId {
                        chunk_id: c,
                        microbatch_id: m,
                        phase,
                    });
                }
            }
        }
    }
    out
}

/// Full-iteration priority list merging both phases.
///
/// DFC interleaves per microbatch (forward climb, then backward descent) so
/// backwards run as early as possible; BFC finishes all forwards first.
pub fn combined_priority(matrix: &TaskMatrix, policy: SchedulePolicy) -> Vec<TaskId> {
    match policy {
        SchedulePolicy::Dfc => {
            let mut out = Vec::with_capacity(2 * matrix.task_count_per_phase());
            for m in 0..matrix.microbatches {
                for c in 0..matrix.chunks {
                    out.push(TaskId::fwd(c, m));
                }
                for c in (0..matrix.chunks).rev() {
                    out.push(TaskId::bwd(c, m));
                }
            }
            out
        }
        SchedulePolicy::Bfc | SchedulePolicy::BestEffortBfc { .. } => {
            let mut out = traversal_order(matrix, SchedulePolicy::Bfc, TaskPhase::Forward);
            out.extend(traversal_order(
                matrix,
                SchedulePolicy::Bfc,
                TaskPhase::Backward,
            ));
            out
        }
    }
}

/// Pipeline-legal ordering: a forward needs the previous chunk's forward
/// output; a backward needs the next chunk's backward and its own forward
/// activation.
#[derive(Debug, Clone, Copy, Default)]
pub struct PipelineDeps;

impl PipelineDeps {
    pub fn deps_of(&self, task: TaskId, chunks: u32) -> Vec<TaskId> {
        let mut deps = Vec::with_capacity(2);
        match task.phase {
            TaskPhase::Forward => {
                if task.chunk_id > 0 {
                    deps.push(TaskId::fwd(task.chunk_id - 1, task.microbatch_id));
                }
            }
            TaskPhase::Backward => {
                deps.push(TaskId::fwd(task.chunk_id, task.microbatch_id));
                if task.chunk_id + 1 < chunks {
                    deps.push(TaskId::bwd(task.chunk_id + 1, task.microbatch_id));
                }
            }
        }
        deps
    }
}

/// Which side of a transfer a queued task belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelSide {
    Send,
    Recv,
}

#[derive(Debug, Clone, Copy)]
struct InFlight {
    task: TaskId,
    side: ChannelSide,
    finish_at: u64,
}

/// Asynchronous P2P channel endpoint: four direction/phase buffers, a send
/// queue and a receive queue, and a monotone completion set the owning
/// thread polls.
#[derive(Debug, Clone, Default)]
pub struct ChannelState {
    latency_us: u64,
    capacity: Option<usize>,
    fwd_recv: Vec<InFlight>,
    fwd_send: Vec<InFlight>,
    bwd_recv: Vec<InFlight>,
    bwd_send: Vec<InFlight>,
    send_queue: VecDeque<TaskId>,
    recv_queue: VecDeque<TaskId>,
    completions: BTreeSet<(ChannelSide, TaskId)>,
}

impl ChannelState {
    pub fn new(latency_us: u64) -> Self {
        Self {
            latency_us,
            ..Default::default()
        }
    }

    /// Bounds each buffer to `capacity` in-flight transfers.
    pub fn with_capacity(latency_us: u64, capacity: usize) -> Self {
        Self {
            latency_us,
            capacity: Some(capacity),
            ..Default::default()
        }
    }

    fn buffer_mut(&mut self, side: ChannelSide, phase: TaskPhase) -> &mut Vec<InFlight> {
        match (side, phase) {
            (ChannelSide::Send, TaskPhase::Forward) => &mut self.fwd_send,
            (ChannelSide::Send, TaskPhase::Backward) => &mut self.bwd_send,
            (ChannelSide::Recv, TaskPhase::Forward) => &mut self.fwd_recv,
            (ChannelSide::Recv, TaskPhase::Backward) => &mut self.bwd_recv,
        }
    }

    fn post(
        &mut self,
        side: ChannelSide,
        task: TaskId,
        now: u64,
        latency_us: u64,
    ) -> Result<(), DppError> {
        let cap = self.capacity;
        let buffer = self.buffer_mut(side, task.phase);
        if let Some(cap) = cap {
            if buffer.len() >= cap {
                return Err(DppError::Backpressure(task.phase));
            }
        }
        buffer.push(InFlight {
            task,
            side,
            finish_at: now + latency_us,
        });
        match side {
            ChannelSide::Send => self.send_queue.push_back(task),
            ChannelSide::Recv => self.recv_queue.push_back(task),
        }
        Ok(())
    }

    /// Enqueues an outbound transfer without blocking.
    pub fn post_send(&mut self, task: TaskId, now: u64) -> Result<(), DppError> {
        self.post(ChannelSide::Send, task, now, self.latency_us)
    }

    /// Enqueues an awaited inbound transfer without blocking.
    pub fn post_recv(&mut self, task: TaskId, now: u64) -> Result<(), DppError> {
        self.post(ChannelSide::Recv, task, now, self.latency_us)
    }

    /// Posts with an explicit latency, for transfers whose cost differs
    /// from the channel default.
    pub fn post_send_with_latency(
        &mut self,
        task: TaskId,
        now: u64,
        latency_us: u64,
    ) -> Result<(), DppError> {
        self.post(ChannelSide::Send, task, now, latency_us)
    }

    pub fn post_recv_with_latency(
        &mut self,
        task: TaskId,
        now: u64,
        latency_us: u64,
    ) -> Result<(), DppError> {
        self.post(ChannelSide::Recv, task, now, latency_us)
    }

    /// Drains transfers finished by `now`, ordered by finish time. The
    /// returned set is also recorded in the monotone completion set.
    pub fn poll(&mut self, now: u64) -> Vec<(ChannelSide, TaskId)> {
        let mut done: Vec<InFlight> = Vec::new();
        for side in [ChannelSide::Send, ChannelSide::Recv] {
            for phase in [TaskPhase::Forward, TaskPhase::Backward] {
                let buffer = self.buffer_mut(side, phase);
                let mut i = 0;
                while i < buffer.len() {
                    if buffer[i].finish_at <= now {
                        done.push(buffer.remove(i));
                    } else {
                        i += 1;
                    }
                }
            }
        }
        done.sort_by_key(|f| (f.finish_at, f.side, f.task));
        let mut out = Vec::with_capacity(done.len());
        for f in done {
            match f.side {
                ChannelSide::Send => self.send_queue.retain(|t| *t != f.task),
                ChannelSide::Recv => self.recv_queue.retain(|t| *t != f.task),
            }
            self.completions.insert((f.side, f.task));
            out.push((f.side, f.task));
        }
        out
    }

    pub fn is_complete(&self, side: ChannelSide, task: TaskId) -> bool {
        self.completions.contains(&(side, task))
    }

    /// Earliest outstanding finish time, if any transfer is in flight.
    pub fn next_finish(&self) -> Option<u64> {
        [
            &self.fwd_recv,
            &self.fwd_send,
            &self.bwd_recv,
            &self.bwd_send,
        ]
        .into_iter()
        .flatten()
        .map(|f| f.finish_at)
        .min()
    }

    pub fn in_flight(&self) -> usize {
        self.send_queue.len() + self.recv_queue.len()
    }
}

/// Timeline and resource summary of one simulated schedule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleMetrics {
    pub makespan_us: u64,
    pub mem_peak_bytes: u64,
    /// Idle time on this stage's executor.
    pub bubble_us: u64,
    /// Per chunk, the earliest time all its backwards are complete, i.e.
    /// when its gradient synchronization may start.
    pub grad_sync_ready_us: BTreeMap<u32, u64>,
}

struct Executor<'a> {
    matrix: &'a TaskMatrix,
    policy: SchedulePolicy,
    priority: Vec<TaskId>,
    deps: PipelineDeps,
    channel: &'a mut ChannelState,
    completed: BTreeSet<TaskId>,
    fwd_depth: BTreeMap<u32, u32>, // microbatch -> forward chunks completed
    bwd_done: BTreeMap<u32, u32>,  // microbatch -> backwards completed
    mem: u64,
    peak: u64,
    now: u64,
    busy: u64,
    grad_ready: BTreeMap<u32, u64>,
    order: Vec<TaskId>,
}

impl<'a> Executor<'a> {
    fn new(
        matrix: &'a TaskMatrix,
        policy: SchedulePolicy,
        deps: PipelineDeps,
        channel: &'a mut ChannelState,
    ) -> Result<Self, DppError> {
        if let SchedulePolicy::BestEffortBfc { mem_cap_bytes } = policy {
            let dfc_peak = matrix.dfc_peak_bytes();
            if mem_cap_bytes < dfc_peak {
                return Err(DppError::Infeasible {
                    cap: mem_cap_bytes,
                    dfc_peak,
                });
            }
        }
        Ok(Self {
            matrix,
            policy,
            priority: combined_priority(matrix, policy),
            deps,
            channel,
            completed: BTreeSet::new(),
            fwd_depth: BTreeMap::new(),
            bwd_done: BTreeMap::new(),
            mem: 0,
            peak: 0,
            now: 0,
            busy: 0,
            grad_ready: BTreeMap::new(),
            order: Vec::new(),
        })
    }

    fn ready(&self, task: TaskId) -> bool {
        for dep in self.deps.deps_of(task, self.matrix.chunks) {
            if !self.completed.contains(&dep) {
                return false;
            }
            // Chunk-crossing inputs additionally need channel delivery.
            if dep.chunk_id != task.chunk_id && !self.channel.is_complete(ChannelSide::Recv, task) {
                return false;
            }
        }
        true
    }

    /// Best-effort guard: after executing this forward, every in-flight
    /// microbatch must still be retirable under the cap by draining them
    /// cheapest-first (finish the fewest remaining forwards, then run the
    /// backward chain, freeing that microbatch's activations).
    fn fits_cap(&self, task: TaskId, cap: u64) -> bool {
        debug_assert_eq!(task.phase, TaskPhase::Forward);
        let chunks = self.matrix.chunks;
        let mem_after = self.mem + self.matrix.activation(task.chunk_id, task.microbatch_id);
        if mem_after > cap {
            return false;
        }
        // (remaining forward bytes, live bytes) per in-flight microbatch
        // in the state after the move.
        let mut flights: Vec<(u64, u64)> = Vec::new();
        for m in 0..self.matrix.microbatches {
            let mut depth = self.fwd_depth.get(&m).copied().unwrap_or(0);
            if m == task.microbatch_id {
                depth += 1;
            }
            let done = self.bwd_done.get(&m).copied().unwrap_or(0);
            if depth == 0 || done == chunks {
                continue;
            }
            let need: u64 = (depth..chunks).map(|c| self.matrix.activation(c, m)).sum();
            // Backwards run top-down, so live activations are the chunks
            // below both frontiers.
            let live_top = depth.min(chunks - done);
            let live: u64 = (0..live_top).map(|c| self.matrix.activation(c, m)).sum();
            flights.push((need, live));
        }
        flights.sort();
        let mut run = mem_after;
        for (need, live) in flights {
            if run + need > cap {
                return false;
            }
            run -= live;
        }
        true
    }

    fn select(&self) -> Option<TaskId> {
        match self.policy {
            SchedulePolicy::Dfc | SchedulePolicy::Bfc => self
                .priority
                .iter()
                .copied()
                .find(|t| !self.completed.contains(t) && self.ready(*t)),
            SchedulePolicy::BestEffortBfc { mem_cap_bytes } => {
                for t in &self.priority {
                    if self.completed.contains(t) || !self.ready(*t) {
                        continue;
                    }
                    match t.phase {
                        TaskPhase::Forward => {
                            if self.fits_cap(*t, mem_cap_bytes) {
                                return Some(*t);
                            }
                        }
                        TaskPhase::Backward => return Some(*t),
                    }
                }
                // No forward fits: take the lowest-index ready backward,
                // which only releases memory.
                (0..self.matrix.chunks)
                    .flat_map(|c| (0..self.matrix.microbatches).map(move |m| TaskId::bwd(c, m)))
                    .find(|t| !self.completed.contains(t) && self.ready(*t))
            }
        }
    }

    fn run(mut self) -> Result<(ScheduleMetrics, Vec<TaskId>), DppError> {
        let total = 2 * self.matrix.task_count_per_phase();
        while self.completed.len() < total {
            self.channel.poll(self.now);
            let Some(task) = self.select() else {
                match self.channel.next_finish() {
                    Some(f) if f > self.now => {
                        self.now = f;
                        continue;
                    }
                    Some(_) => continue, // completions pending at `now`
                    None => {
                        return Err(DppError::Stalled {
                            remaining: total - self.completed.len(),
                        })
                    }
                }
            };
            let dur = self.matrix.duration(task);
            self.now += dur;
            self.busy += dur;
            self.completed.insert(task);
            self.order.push(task);
            let (c, m) = (task.chunk_id, task.microbatch_id);
            match task.phase {
                TaskPhase::Forward => {
                    // Activation charged when the forward completes.
                    self.mem += self.matrix.activation(c, m);
                    self.peak = self.peak.max(self.mem);
                    *self.fwd_depth.entry(m).or_insert(0) += 1;
                    if c + 1 < self.matrix.chunks {
                        self.channel.post_send(task, self.now)?;
                        self.channel.post_recv(TaskId::fwd(c + 1, m), self.now)?;
                    }
                }
                TaskPhase::Backward => {
                    self.mem = self.mem.saturating_sub(self.matrix.activation(c, m));
                    *self.bwd_done.entry(m).or_insert(0) += 1;
                    let entry = self.grad_ready.entry(c).or_insert(0);
                    *entry = (*entry).max(self.now);
                    if c > 0 {
                        self.channel.post_send(task, self.now)?;
                        self.channel.post_recv(TaskId::bwd(c - 1, m), self.now)?;
                    }
                }
            }
        }
        let metrics = ScheduleMetrics {
            makespan_us: self.now,
            mem_peak_bytes: self.peak,
            bubble_us: self.now - self.busy,
            grad_sync_ready_us: self.grad_ready,
        };
        Ok((metrics, self.order))
    }
}

/// Executes the matrix under the policy's priority order, skipping
/// not-ready tasks in favor of the next ready one, and reports the
/// resulting timeline metrics.
pub fn simulate_schedule(
    matrix: &TaskMatrix,
    policy: SchedulePolicy,
    deps: PipelineDeps,
    channel: &mut ChannelState,
) -> Result<ScheduleMetrics, DppError> {
    Executor::new(matrix, policy, deps, channel)
        .map(Executor::run)?
        .map(|(m, _)| m)
}

/// The task execution order the executor would realize with a zero-latency
/// channel; used to plan static per-rank schedules.
pub fn execution_plan(
    matrix: &TaskMatrix,
    policy: SchedulePolicy,
) -> Result<Vec<TaskId>, DppError> {
    let mut channel = ChannelState::new(0);
    Executor::new(matrix, policy, PipelineDeps, &mut channel)
        .map(Executor::run)?
        .map(|(_, order)| order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(c: u32, m: u32) -> TaskMatrix {
        TaskMatrix::uniform(c, m, 100, 100, 1).unwrap()
    }

    #[test]
    fn degenerate_matrix_orders_coincide() {
        for (c, m) in [(1, 5), (5, 1), (1, 1)] {
            let mx = uniform(c, m);
            assert_eq!(
                traversal_order(&mx, SchedulePolicy::Dfc, TaskPhase::Forward),
                traversal_order(&mx, SchedulePolicy::Bfc, TaskPhase::Forward)
            );
        }
    }

    #[test]
    fn dfc_forward_walks_chunks_within_a_microbatch() {
        let mx = uniform(2, 2);
        let order = traversal_order(&mx, SchedulePolicy::Dfc, TaskPhase::Forward);
        assert_eq!(
            order,
            vec![
                TaskId::fwd(0, 0),
                TaskId::fwd(1, 0),
                TaskId::fwd(0, 1),
                TaskId::fwd(1, 1)
            ]
        );
    }

    #[test]
    fn bfc_forward_walks_microbatches_within_a_chunk() {
        let mx = uniform(2, 2);
        let order = traversal_order(&mx, SchedulePolicy::Bfc, TaskPhase::Forward);
        assert_eq!(
            order,
            vec![
                TaskId::fwd(0, 0),
                TaskId::fwd(0, 1),
                TaskId::fwd(1, 0),
                TaskId::fwd(1, 1)
            ]
        );
    }

    #[test]
    fn eight_by_eight_has_64_tasks_per_phase() {
        let mx = uniform(8, 8);
        for policy in [SchedulePolicy::Dfc, SchedulePolicy::Bfc] {
            for phase in [TaskPhase::Forward, TaskPhase::Backward] {
                let order = traversal_order(&mx, policy, phase);
                assert_eq!(order.len(), 64);
                let unique: BTreeSet<_> = order.iter().collect();
                assert_eq!(unique.len(), 64, "order must be a permutation");
            }
        }
    }

    #[test]
    fn single_cell_metrics() {
        let mx = TaskMatrix::uniform(1, 1, 100, 150, 7).unwrap();
        let mut ch = ChannelState::new(0);
        let metrics = simulate_schedule(&mx, SchedulePolicy::Dfc, PipelineDeps, &mut ch).unwrap();
        assert_eq!(metrics.makespan_us, 250);
        assert_eq!(metrics.mem_peak_bytes, 7);
        assert_eq!(metrics.bubble_us, 0);
        assert_eq!(metrics.grad_sync_ready_us[&0], 250);
    }

    #[test]
    fn dfc_lowers_memory_bfc_syncs_earlier_4x4() {
        let mx = uniform(4, 4);
        let mut ch1 = ChannelState::new(0);
        let dfc = simulate_schedule(&mx, SchedulePolicy::Dfc, PipelineDeps, &mut ch1).unwrap();
        let mut ch2 = ChannelState::new(0);
        let bfc = simulate_schedule(&mx, SchedulePolicy::Bfc, PipelineDeps, &mut ch2).unwrap();
        assert!(dfc.mem_peak_bytes <= bfc.mem_peak_bytes);
        assert!(dfc.mem_peak_bytes == 4 && bfc.mem_peak_bytes == 16);
        for c in 0..4 {
            assert!(bfc.grad_sync_ready_us[&c] <= dfc.grad_sync_ready_us[&c]);
        }
        assert!(bfc.grad_sync_ready_us[&3] < dfc.grad_sync_ready_us[&3]);
    }

    #[test]
    fn best_effort_respects_cap_at_dfc_peak() {
        let mx = uniform(4, 4);
        let dfc_peak = mx.dfc_peak_bytes();
        let mut ch = ChannelState::new(0);
        let metrics = simulate_schedule(
            &mx,
            SchedulePolicy::BestEffortBfc {
                mem_cap_bytes: dfc_peak,
            },
            PipelineDeps,
            &mut ch,
        )
        .unwrap();
        assert!(metrics.mem_peak_bytes <= dfc_peak);
    }

    #[test]
    fn best_effort_below_dfc_peak_is_infeasible() {
        let mx = uniform(3, 3);
        let mut ch = ChannelState::new(0);
        let err = simulate_schedule(
            &mx,
            SchedulePolicy::BestEffortBfc { mem_cap_bytes: 2 },
            PipelineDeps,
            &mut ch,
        )
        .unwrap_err();
        assert!(matches!(err, DppError::Infeasible { .. }));
    }

    #[test]
    fn dependency_safety_holds_on_every_execution() {
        for policy in [
            SchedulePolicy::Dfc,
            SchedulePolicy::Bfc,
            SchedulePolicy::BestEffortBfc { mem_cap_bytes: 3 },
        ] {
            let mx = uniform(3, 3);
            let order = execution_plan(&mx, policy).unwrap();
            let mut done: BTreeSet<TaskId> = BTreeSet::new();
            for t in order {
                for dep in PipelineDeps.deps_of(t, 3) {
                    assert!(done.contains(&dep), "{policy:?}: {t:?} ran before {dep:?}");
                }
                done.insert(t);
            }
            assert_eq!(done.len(), 18);
        }
    }

    #[test]
    fn channel_zero_latency_completes_on_first_poll() {
        let mut ch = ChannelState::new(0);
        ch.post_send(TaskId::fwd(0, 0), 10).unwrap();
        let done = ch.poll(10);
        assert_eq!(done, vec![(ChannelSide::Send, TaskId::fwd(0, 0))]);
        assert!(ch.is_complete(ChannelSide::Send, TaskId::fwd(0, 0)));
    }

    #[test]
    fn poll_on_empty_queues_is_empty() {
        let mut ch = ChannelState::new(5);
        assert!(ch.poll(100).is_empty());
        assert_eq!(ch.in_flight(), 0);
    }

    #[test]
    fn concurrent_sends_complete_in_finish_order() {
        let mut ch = ChannelState::new(0);
        ch.post_send_with_latency(TaskId::fwd(0, 0), 0, 50).unwrap();
        ch.post_send_with_latency(TaskId::fwd(1, 0), 0, 20).unwrap();
        assert!(ch.poll(10).is_empty());
        let done = ch.poll(100);
        assert_eq!(
            done,
            vec![
                (ChannelSide::Send, TaskId::fwd(1, 0)),
                (ChannelSide::Send, TaskId::fwd(0, 0)),
            ]
        );
    }

    #[test]
    fn capacity_overflow_signals_backpressure() {
        let mut ch = ChannelState::with_capacity(10, 1);
        ch.post_send(TaskId::fwd(0, 0), 0).unwrap();
        let err = ch.post_send(TaskId::fwd(1, 0), 0).unwrap_err();
        assert!(matches!(err, DppError::Backpressure(TaskPhase::Forward)));
        ch.poll(10);
        ch.post_send(TaskId::fwd(1, 0), 10).unwrap();
    }
}
