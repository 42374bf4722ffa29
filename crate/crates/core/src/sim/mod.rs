//! Deterministic discrete-event simulation of 3D-parallel training.
//!
//! The simulator executes a pipeline-parallel training iteration (1F1B or a
//! dpp traversal policy) over a configurable topology, with injectable
//! faults (GPU downclock, link degradation, clock skew) and per-event
//! jitter, and emits per-rank traces on skewed local clocks together with
//! a ground-truth channel (true global timestamps and true communication
//! instance ids) used as the oracle for every analysis module.
//!
//! Timing model:
//! - Compute kernels and collectives occupy a rank sequentially; P2P
//!   transfers run asynchronously on their link.
//! - A collective completes when its latest member arrives, plus its
//!   duration; every member observes the same completion time.
//! - A transfer starts when its payload is ready and its directed link is
//!   free (receives are pre-posted, as with batched irecv), and lasts
//!   payload / effective bandwidth. The consuming task waits for it.
//! - Jitter is multiplicative uniform noise on compute durations, keyed by
//!   (seed, rank, task identity) so fault injection never shifts the
//!   jitter of unrelated events.

pub mod scenarios;

use crate::dpp::{self, SchedulePolicy, TaskId, TaskPhase};
use crate::model::{
    rank_to_coords, CollectiveOp, EventKind, EventMeta, ParallelTopology, Phase, RankId, RankTrace,
    TraceEvent,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Simulated trace timestamps start here so that negative clock offsets
/// still produce non-negative local timestamps.
pub const BASE_US: i64 = 1_000_000;

/// Which per-stage execution order the simulated ranks follow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimSchedule {
    /// Classic one-forward-one-backward; requires one chunk per stage.
    OneFOneB,
    Dfc,
    Bfc,
    BestEffortBfc {
        mem_cap_bytes: u64,
    },
}

/// Simulation parameters: topology, workload shape, timing constants, and
/// noise controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub topo: ParallelTopology,
    pub num_microbatches: u32,
    pub num_chunks_per_stage: u32,
    pub layers_per_chunk: u32,
    /// Baseline per-layer compute time; a task costs this times
    /// `layers_per_chunk`.
    pub compute_us_per_task: u64,
    pub tp_collective_us: u64,
    pub dp_allreduce_us: u64,
    pub p2p_payload_bytes: u64,
    pub link_bw_bytes_per_us: f64,
    /// Multiplicative compute noise amplitude in [0, 1).
    pub jitter_pct: f64,
    pub seed: u64,
    pub schedule: SimSchedule,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            topo: ParallelTopology::new(2, 2, 2).expect("valid topology"),
            num_microbatches: 8,
            num_chunks_per_stage: 1,
            layers_per_chunk: 1,
            compute_us_per_task: 1000,
            tp_collective_us: 150,
            dp_allreduce_us: 800,
            p2p_payload_bytes: 4 * 1024 * 1024,
            link_bw_bytes_per_us: 10_000.0,
            jitter_pct: 0.05,
            seed: 7,
            schedule: SimSchedule::OneFOneB,
        }
    }
}

/// Fault activity window in microseconds of elapsed simulation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    #[serde(default)]
    pub start_us: i64,
    #[serde(default = "window_end_default")]
    pub end_us: i64,
}

fn window_end_default() -> i64 {
    i64::MAX
}

impl Default for Window {
    fn default() -> Self {
        Self {
            start_us: 0,
            end_us: i64::MAX,
        }
    }
}

impl Window {
    pub fn contains(&self, elapsed_us: i64) -> bool {
        elapsed_us >= self.start_us && elapsed_us < self.end_us
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkDirection {
    Egress,
    Ingress,
}

/// An injected fault.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultSpec {
    /// Compute on `rank` runs `factor` times slower inside the window.
    Downclock {
        rank: RankId,
        factor: f64,
        #[serde(default)]
        window: Window,
    },
    /// Transfers touching `rank` in the given direction run at
    /// `bw_factor` of nominal bandwidth inside the window.
    LinkDegrade {
        rank: RankId,
        direction: LinkDirection,
        bw_factor: f64,
        #[serde(default)]
        window: Window,
    },
    /// `rank`'s local clock reads offset + (1 + drift) x elapsed.
    ClockSkew {
        rank: RankId,
        offset_us: i64,
        #[serde(default)]
        drift_ppm: f64,
    },
}

/// True timing and instance identity of one emitted event, parallel to the
/// rank's event list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventTruth {
    pub true_start_us: i64,
    pub true_end_us: i64,
    /// Ground-truth communication instance this event belongs to, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<u64>,
}

/// The oracle channel: everything the analysis modules are asked to
/// reconstruct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GroundTruth {
    pub injected_faults: Vec<FaultSpec>,
    /// Per rank, truth entries parallel to that rank's emitted events.
    pub per_rank: BTreeMap<RankId, Vec<EventTruth>>,
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("invalid fault spec: {0}")]
    InvalidFault(String),
    #[error("dependency cycle: simulation stalled with {0} ranks blocked")]
    DependencyCycle(usize),
    #[error("internal schedule inconsistency: {0}")]
    ScheduleInconsistent(String),
    #[error(transparent)]
    Schedule(#[from] dpp::DppError),
}

// Deterministic, platform-stable hashing for per-event jitter.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_unit(parts: &[u64]) -> f64 {
    let mut h = 0x6A09_E667_F3BC_C909u64;
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum CollKey {
    Broadcast,
    GradNorm,
    Tp {
        stage: u32,
        dp: u32,
        phase: Phase,
        mb: u32,
        chunk: u32,
    },
    Dp {
        tp: u32,
        stage: u32,
        chunk: u32,
    },
}

struct CollNode {
    name: &'static str,
    op: CollectiveOp,
    duration_us: u64,
    participants: Vec<RankId>,
    mb: Option<u32>,
    chunk: Option<u32>,
    phase: Option<Phase>,
    arrivals: BTreeMap<RankId, i64>,
    completion: Option<i64>,
}

struct TransferNode {
    src: RankId,
    dst: RankId,
    payload: u64,
    phase: Phase,
    mb: u32,
    /// Model chunk whose output this transfer carries.
    chunk: u32,
    /// Position in the sender's program order on this link; the link is
    /// occupied in this order.
    sender_seq: Option<usize>,
    has_recv: bool,
    send_post: Option<i64>,
    start: Option<i64>,
    completion: Option<i64>,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Compute { phase: Phase, mb: u32, chunk: u32 },
    Collective(usize),
    Send(usize),
    Recv(usize),
}

struct Recorded {
    name: &'static str,
    kind: EventKind,
    true_start: i64,
    true_end: i64,
    meta: EventMeta,
    instance: Option<u64>,
}

struct Workload {
    ops: Vec<Vec<Op>>,
    collectives: Vec<CollNode>,
    transfers: Vec<TransferNode>,
    /// Per directed link, transfer indices in posting order.
    links: BTreeMap<(RankId, RankId), Vec<usize>>,
}

fn validate(cfg: &SimConfig, faults: &[FaultSpec]) -> Result<(), SimError> {
    if cfg.layers_per_chunk == 0 {
        return Err(SimError::InvalidConfig(
            "layers_per_chunk must be at least 1".into(),
        ));
    }
    if cfg.compute_us_per_task == 0 || cfg.tp_collective_us == 0 || cfg.dp_allreduce_us == 0 {
        return Err(SimError::InvalidConfig("durations must be positive".into()));
    }
    if cfg.p2p_payload_bytes == 0 || cfg.link_bw_bytes_per_us <= 0.0 {
        return Err(SimError::InvalidConfig(
            "payload and link bandwidth must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.jitter_pct) {
        return Err(SimError::InvalidConfig(
            "jitter_pct must be in [0, 1)".into(),
        ));
    }
    if cfg.schedule == SimSchedule::OneFOneB && cfg.num_chunks_per_stage > 1 {
        return Err(SimError::InvalidConfig(
            "one_f_one_b schedule requires num_chunks_per_stage = 1".into(),
        ));
    }
    let world = cfg.topo.world_size;
    let mut skewed = std::collections::BTreeSet::new();
    for fault in faults {
        match fault {
            FaultSpec::Downclock {
                rank,
                factor,
                window,
            } => {
                if rank.0 >= world {
                    return Err(SimError::InvalidFault(format!("rank {rank} out of range")));
                }
                if *factor < 1.0 {
                    return Err(SimError::InvalidFault(
                        "downclock factor must be >= 1".into(),
                    ));
                }
                if window.start_us >= window.end_us {
                    return Err(SimError::InvalidFault("window must be non-empty".into()));
                }
            }
            FaultSpec::LinkDegrade {
                rank,
                bw_factor,
                window,
                ..
            } => {
                if rank.0 >= world {
                    return Err(SimError::InvalidFault(format!("rank {rank} out of range")));
                }
                if !(0.0..1.0).contains(bw_factor) || *bw_factor == 0.0 {
                    return Err(SimError::InvalidFault("bw_factor must be in (0, 1)".into()));
                }
                if window.start_us >= window.end_us {
                    return Err(SimError::InvalidFault("window must be non-empty".into()));
                }
            }
            FaultSpec::ClockSkew {
                rank, drift_ppm, ..
            } => {
                if rank.0 >= world {
                    return Err(SimError::InvalidFault(format!("rank {rank} out of range")));
                }
                if drift_ppm.abs() >= 100_000.0 {
                    return Err(SimError::InvalidFault(
                        "drift_ppm must stay below 1e5 (monotone clocks)".into(),
                    ));
                }
                if !skewed.insert(*rank) {
                    return Err(SimError::InvalidFault(format!(
                        "multiple clock_skew faults on rank {rank}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Per-stage task execution order for the configured schedule.
fn stage_task_order(cfg: &SimConfig, stage: u32) -> Result<Vec<TaskId>, SimError> {
    let chunks = cfg.num_chunks_per_stage;
    let mb = cfg.num_microbatches;
    match cfg.schedule {
        SimSchedule::OneFOneB => {
            let warmup = (cfg.topo.pp_size - 1 - stage).min(mb);
            let mut order = Vec::with_capacity(2 * mb as usize);
            for m in 0..warmup {
                order.push(TaskId::fwd(0, m));
            }
            for k in 0..(mb - warmup) {
                order.push(TaskId::fwd(0, warmup + k));
                order.push(TaskId::bwd(0, k));
            }
            for k in (mb - warmup)..mb {
                order.push(TaskId::bwd(0, k));
            }
            Ok(order)
        }
        SimSchedule::Dfc | SimSchedule::Bfc => {
            let matrix = dpp::TaskMatrix::uniform(chunks, mb, 1, 1, 1)?;
            let policy = if cfg.schedule == SimSchedule::Dfc {
                SchedulePolicy::Dfc
            } else {
                SchedulePolicy::Bfc
            };
            Ok(dpp::combined_priority(&matrix, policy))
        }
        SimSchedule::BestEffortBfc { mem_cap_bytes } => {
            let task_us = cfg.compute_us_per_task * cfg.layers_per_chunk as u64;
            let matrix =
                dpp::TaskMatrix::uniform(chunks, mb, task_us, task_us, cfg.p2p_payload_bytes)?;
            Ok(dpp::execution_plan(
                &matrix,
                SchedulePolicy::BestEffortBfc { mem_cap_bytes },
            )?)
        }
    }
}

fn build_workload(cfg: &SimConfig) -> Result<Workload, SimError> {
    let topo = &cfg.topo;
    let (tp, pp, dp) = (topo.tp_size, topo.pp_size, topo.dp_size);
    let global_chunks = pp * cfg.num_chunks_per_stage;
    let world = topo.world_size;
    let rank_of = |tp_i: u32, pp_i: u32, dp_i: u32| RankId(tp_i + tp * (dp_i + dp * pp_i));

    let mut collectives: Vec<CollNode> = Vec::new();
    let mut coll_index: BTreeMap<CollKey, usize> = BTreeMap::new();
    let mut transfers: Vec<TransferNode> = Vec::new();
    // Transfers pair by task identity; whichever side is built first
    // creates the node. The link is later occupied in sender order.
    type TransferKey = (RankId, RankId, Phase, u32, u32); // src, dst, phase, mb, chunk
    let mut transfer_index: BTreeMap<TransferKey, usize> = BTreeMap::new();
    let mut send_counts: BTreeMap<(RankId, RankId), usize> = BTreeMap::new();

    let coll = |collectives: &mut Vec<CollNode>,
                coll_index: &mut BTreeMap<CollKey, usize>,
                key: CollKey,
                make: &dyn Fn() -> CollNode| {
        *coll_index.entry(key).or_insert_with(|| {
            collectives.push(make());
            collectives.len() - 1
        })
    };

    let mut ops: Vec<Vec<Op>> = Vec::with_capacity(world as usize);
    for rank in topo.ranks() {
        let coords = rank_to_coords(rank, topo).expect("rank in range");
        let stage = coords.pp_index;
        let order = stage_task_order(cfg, stage)?;

        // The gradient allreduce of a chunk is issued right after the last
        // backward of that chunk in this stage's order.
        let mut last_bwd_pos: BTreeMap<u32, usize> = BTreeMap::new();
        for (pos, task) in order.iter().enumerate() {
            if task.phase == TaskPhase::Backward {
                last_bwd_pos.insert(task.chunk_id, pos);
            }
        }

        let mut list: Vec<Op> = Vec::new();
        if world > 1 {
            let idx = coll(
                &mut collectives,
                &mut coll_index,
                CollKey::Broadcast,
                &|| CollNode {
                    name: "param_broadcast",
                    op: CollectiveOp::Broadcast,
                    duration_us: cfg.dp_allreduce_us,
                    participants: topo.ranks().collect(),
                    mb: None,
                    chunk: None,
                    phase: None,
                    arrivals: BTreeMap::new(),
                    completion: None,
                },
            );
            list.push(Op::Collective(idx));
        }

        for (pos, task) in order.iter().enumerate() {
            let local_chunk = task.chunk_id;
            let g = stage + local_chunk * pp;
            let mb = task.microbatch_id;
            let phase = match task.phase {
                TaskPhase::Forward => Phase::Forward,
                TaskPhase::Backward => Phase::Backward,
            };
            // Peer chunk this task consumes from, if remote.
            let input_chunk = match task.phase {
                TaskPhase::Forward => g.checked_sub(1),
                TaskPhase::Backward => (g + 1 < global_chunks).then_some(g + 1),
            };
            if let Some(src_chunk) = input_chunk {
                let src_stage = src_chunk % pp;
                if src_stage != stage {
                    let src = rank_of(coords.tp_index, src_stage, coords.dp_index);
                    let key = (src, rank, phase, mb, src_chunk);
                    let t_idx = *transfer_index.entry(key).or_insert_with(|| {
                        transfers.push(TransferNode {
                            src,
                            dst: rank,
                            payload: cfg.p2p_payload_bytes,
                            phase,
                            mb,
                            chunk: src_chunk,
                            sender_seq: None,
                            has_recv: false,
                            send_post: None,
                            start: None,
                            completion: None,
                        });
                        transfers.len() - 1
                    });
                    if transfers[t_idx].has_recv {
                        return Err(SimError::ScheduleInconsistent(format!(
                            "rank {rank} receives {phase:?} mb {mb} chunk {src_chunk} twice"
                        )));
                    }
                    transfers[t_idx].has_recv = true;
                    list.push(Op::Recv(t_idx));
                }
            }

            list.push(Op::Compute {
                phase,
                mb,
                chunk: g,
            });

            if tp > 1 {
                let key = CollKey::Tp {
                    stage,
                    dp: coords.dp_index,
                    phase,
                    mb,
                    chunk: g,
                };
                let participants: Vec<RankId> = (0..tp)
                    .map(|t| rank_of(t, stage, coords.dp_index))
                    .collect();
                let dur = cfg.tp_collective_us;
                let idx = coll(&mut collectives, &mut coll_index, key, &|| CollNode {
                    name: "tp_allreduce",
                    op: CollectiveOp::AllReduce,
                    duration_us: dur,
                    participants: participants.clone(),
                    mb: Some(mb),
                    chunk: Some(g),
                    phase: Some(phase),
                    arrivals: BTreeMap::new(),
                    completion: None,
                });
                list.push(Op::Collective(idx));
            }

            // Output consumer, if remote: post the matching send.
            let output_chunk = match task.phase {
                TaskPhase::Forward => (g + 1 < global_chunks).then_some(g + 1),
                TaskPhase::Backward => g.checked_sub(1),
            };
            if let Some(dst_chunk) = output_chunk {
                let dst_stage = dst_chunk % pp;
                if dst_stage != stage {
                    let dst = rank_of(coords.tp_index, dst_stage, coords.dp_index);
                    let key = (rank, dst, phase, mb, g);
                    let t_idx = *transfer_index.entry(key).or_insert_with(|| {
                        transfers.push(TransferNode {
                            src: rank,
                            dst,
                            payload: cfg.p2p_payload_bytes,
                            phase,
                            mb,
                            chunk: g,
                            sender_seq: None,
                            has_recv: false,
                            send_post: None,
                            start: None,
                            completion: None,
                        });
                        transfers.len() - 1
                    });
                    if transfers[t_idx].sender_seq.is_some() {
                        return Err(SimError::ScheduleInconsistent(format!(
                            "rank {rank} sends {phase:?} mb {mb} chunk {g} twice"
                        )));
                    }
                    let seq = send_counts.entry((rank, dst)).or_insert(0);
                    transfers[t_idx].sender_seq = Some(*seq);
                    *seq += 1;
                    list.push(Op::Send(t_idx));
                }
            }

            if dp > 1 && last_bwd_pos.get(&local_chunk) == Some(&pos) {
                let key = CollKey::Dp {
                    tp: coords.tp_index,
                    stage,
                    chunk: g,
                };
                let participants: Vec<RankId> = (0..dp)
                    .map(|d| rank_of(coords.tp_index, stage, d))
                    .collect();
                let dur = cfg.dp_allreduce_us;
                let idx = coll(&mut collectives, &mut coll_index, key, &|| CollNode {
                    name: "dp_grad_allreduce",
                    op: CollectiveOp::AllReduce,
                    duration_us: dur,
                    participants: participants.clone(),
                    mb: None,
                    chunk: Some(g),
                    phase: None,
                    arrivals: BTreeMap::new(),
                    completion: None,
                });
                list.push(Op::Collective(idx));
            }
        }

        if world > 1 {
            let idx = coll(
                &mut collectives,
                &mut coll_index,
                CollKey::GradNorm,
                &|| CollNode {
                    name: "grad_norm_allreduce",
                    op: CollectiveOp::AllReduce,
                    duration_us: cfg.dp_allreduce_us,
                    participants: topo.ranks().collect(),
                    mb: None,
                    chunk: None,
                    phase: None,
                    arrivals: BTreeMap::new(),
                    completion: None,
                },
            );
            list.push(Op::Collective(idx));
        }
        ops.push(list);
    }

    // Both sides of every transfer must have claimed it, and each link is
    // ordered by the sender's program order.
    let mut links: BTreeMap<(RankId, RankId), Vec<usize>> = BTreeMap::new();
    for (i, t) in transfers.iter().enumerate() {
        if t.sender_seq.is_none() || !t.has_recv {
            return Err(SimError::ScheduleInconsistent(format!(
                "transfer {} -> {} ({:?} mb {} chunk {}) is one-sided",
                t.src, t.dst, t.phase, t.mb, t.chunk
            )));
        }
        links.entry((t.src, t.dst)).or_default().push(i);
    }
    for link in links.values_mut() {
        link.sort_by_key(|&i| transfers[i].sender_seq);
    }

    Ok(Workload {
        ops,
        collectives,
        transfers,
        links,
    })
}

struct FaultModel<'a> {
    faults: &'a [FaultSpec],
}

impl<'a> FaultModel<'a> {
    fn compute_factor(&self, rank: RankId, true_start: i64) -> f64 {
        let elapsed = true_start - BASE_US;
        let mut f = 1.0;
        for fault in self.faults {
            if let FaultSpec::Downclock {
                rank: r,
                factor,
                window,
            } = fault
            {
                if *r == rank && window.contains(elapsed) {
                    f *= factor;
                }
            }
        }
        f
    }

    fn bw_factor(&self, src: RankId, dst: RankId, true_start: i64) -> f64 {
        let elapsed = true_start - BASE_US;
        let mut f = 1.0;
        for fault in self.faults {
            if let FaultSpec::LinkDegrade {
                rank,
                direction,
                bw_factor,
                window,
            } = fault
            {
                let touches = match direction {
                    LinkDirection::Egress => *rank == src,
                    LinkDirection::Ingress => *rank == dst,
                };
                if touches && window.contains(elapsed) {
                    f *= bw_factor;
                }
            }
        }
        f
    }

    fn clock(&self, rank: RankId) -> (i64, f64) {
        for fault in self.faults {
            if let FaultSpec::ClockSkew {
                rank: r,
                offset_us,
                drift_ppm,
            } = fault
            {
                if *r == rank {
                    return (*offset_us, *drift_ppm);
                }
            }
        }
        (0, 0.0)
    }
}

/// Runs the simulation and returns per-rank traces (local clocks) plus the
/// ground truth. Deterministic for a fixed (config, faults) input.
pub fn run_sim(
    cfg: &SimConfig,
    faults: &[FaultSpec],
) -> Result<(Vec<RankTrace>, GroundTruth), SimError> {
    validate(cfg, faults)?;
    if cfg.num_microbatches == 0 || cfg.num_chunks_per_stage == 0 {
        // No tasks at all: every rank's trace is empty.
        let truth = GroundTruth {
            injected_faults: faults.to_vec(),
            per_rank: cfg.topo.ranks().map(|r| (r, Vec::new())).collect(),
        };
        let traces = cfg
            .topo
            .ranks()
            .map(|rank| RankTrace {
                rank,
                events: vec![],
            })
            .collect();
        return Ok((traces, truth));
    }
    let mut wl = build_workload(cfg)?;
    let world = cfg.topo.world_size as usize;
    let model = FaultModel { faults };
    let task_base = cfg.compute_us_per_task * cfg.layers_per_chunk as u64;

    let mut cursor = vec![0usize; world];
    let mut time = vec![BASE_US; world];
    let mut recorded: Vec<Vec<Recorded>> = (0..world).map(|_| Vec::new()).collect();
    let n_coll = wl.collectives.len() as u64;
    let mut link_progress: BTreeMap<(RankId, RankId), usize> = BTreeMap::new();

    loop {
        let mut progress = false;

        for r in 0..world {
            let rank = RankId(r as u32);
            while cursor[r] < wl.ops[r].len() {
                match wl.ops[r][cursor[r]] {
                    Op::Compute { phase, mb, chunk } => {
                        let start = time[r];
                        let jitter = 1.0
                            + cfg.jitter_pct
                                * (2.0
                                    * hash_unit(&[
                                        cfg.seed,
                                        r as u64,
                                        phase as u64,
                                        mb as u64,
                                        chunk as u64,
                                    ])
                                    - 1.0);
                        let factor = model.compute_factor(rank, start);
                        let dur = ((task_base as f64) * jitter * factor).round().max(1.0) as i64;
                        let end = start + dur;
                        recorded[r].push(Recorded {
                            name: if phase == Phase::Forward {
                                "forward_compute"
                            } else {
                                "backward_compute"
                            },
                            kind: EventKind::ComputeKernel,
                            true_start: start,
                            true_end: end,
                            meta: EventMeta {
                                microbatch_id: Some(mb),
                                chunk_id: Some(chunk),
                                phase: Some(phase),
                                ..Default::default()
                            },
                            instance: None,
                        });
                        time[r] = end;
                        cursor[r] += 1;
                        progress = true;
                    }
                    Op::Collective(idx) => {
                        let node = &mut wl.collectives[idx];
                        node.arrivals.entry(rank).or_insert(time[r]);
                        match node.completion {
                            Some(end) => {
                                let arrival = node.arrivals[&rank];
                                recorded[r].push(Recorded {
                                    name: node.name,
                                    kind: EventKind::Collective(node.op),
                                    true_start: arrival,
                                    true_end: end,
                                    meta: EventMeta {
                                        microbatch_id: node.mb,
                                        chunk_id: node.chunk,
                                        phase: node.phase,
                                        participant_ranks: Some(node.participants.clone()),
                                        ..Default::default()
                                    },
                                    instance: Some(idx as u64),
                                });
                                time[r] = end;
                                cursor[r] += 1;
                                progress = true;
                            }
                            None => break,
                        }
                    }
                    Op::Send(idx) => {
                        wl.transfers[idx].send_post = Some(time[r]);
                        cursor[r] += 1;
                        progress = true;
                    }
                    Op::Recv(idx) => match wl.transfers[idx].completion {
                        Some(end) => {
                            time[r] = time[r].max(end);
                            cursor[r] += 1;
                            progress = true;
                        }
                        None => break,
                    },
                }
            }
        }

        for node in wl.collectives.iter_mut() {
            if node.completion.is_none() && node.arrivals.len() == node.participants.len() {
                let latest = node.arrivals.values().copied().max().unwrap_or(BASE_US);
                node.completion = Some(latest + node.duration_us as i64);
                progress = true;
            }
        }

        for (link, transfer_ids) in &wl.links {
            let done = link_progress.entry(*link).or_insert(0);
            while *done < transfer_ids.len() {
                let idx = transfer_ids[*done];
                let Some(post) = wl.transfers[idx].send_post else {
                    break;
                };
                let link_free = if *done == 0 {
                    BASE_US
                } else {
                    wl.transfers[transfer_ids[*done - 1]]
                        .completion
                        .expect("resolved in order")
                };
                let start = post.max(link_free);
                let bw = cfg.link_bw_bytes_per_us * model.bw_factor(link.0, link.1, start);
                let dur = ((wl.transfers[idx].payload as f64) / bw).round().max(1.0) as i64;
                wl.transfers[idx].start = Some(start);
                wl.transfers[idx].completion = Some(start + dur);
                *done += 1;
                progress = true;
            }
        }

        if !progress {
            break;
        }
    }

    let blocked = cursor
        .iter()
        .enumerate()
        .filter(|(r, &c)| c < wl.ops[*r].len())
        .count();
    if blocked > 0 {
        return Err(SimError::DependencyCycle(blocked));
    }

    // Transfer events are recorded after resolution: the send spans from
    // posting to completion, the recv covers the wire window.
    for (t_idx, t) in wl.transfers.iter().enumerate() {
        let (Some(post), Some(start), Some(end)) = (t.send_post, t.start, t.completion) else {
            return Err(SimError::ScheduleInconsistent(format!(
                "transfer {} -> {} (mb {}, chunk {}) never completed",
                t.src, t.dst, t.mb, t.chunk
            )));
        };
        let instance = Some(n_coll + t_idx as u64);
        let (send_name, recv_name) = match t.phase {
            Phase::Forward => ("send_forward", "recv_forward"),
            _ => ("send_backward", "recv_backward"),
        };
        recorded[t.src.0 as usize].push(Recorded {
            name: send_name,
            kind: EventKind::P2PSend,
            true_start: post,
            true_end: end,
            meta: EventMeta {
                microbatch_id: Some(t.mb),
                chunk_id: Some(t.chunk),
                phase: Some(t.phase),
                peer_rank: Some(t.dst),
                payload_bytes: Some(t.payload),
                ..Default::default()
            },
            instance,
        });
        recorded[t.dst.0 as usize].push(Recorded {
            name: recv_name,
            kind: EventKind::P2PRecv,
            true_start: start,
            true_end: end,
            meta: EventMeta {
                microbatch_id: Some(t.mb),
                chunk_id: Some(t.chunk),
                phase: Some(t.phase),
                peer_rank: Some(t.src),
                payload_bytes: Some(t.payload),
                ..Default::default()
            },
            instance,
        });
    }

    let mut traces = Vec::with_capacity(world);
    let mut truth = GroundTruth {
        injected_faults: faults.to_vec(),
        per_rank: BTreeMap::new(),
    };
    for (r, mut events) in recorded.into_iter().enumerate() {
        let rank = RankId(r as u32);
        let (offset, drift_ppm) = model.clock(rank);
        let to_local = |t: i64| -> i64 {
            let elapsed = (t - BASE_US) as f64;
            BASE_US + offset + (elapsed * (1.0 + drift_ppm * 1e-6)).round() as i64
        };
        // Emission order is local-clock order (the order a consumer of the
        // trace file reconstructs), with the true clock as a final
        // tie-break where drift rounding collapsed local timestamps.
        events.sort_by(|a, b| {
            to_local(a.true_start)
                .cmp(&to_local(b.true_start))
                .then_with(|| a.name.cmp(b.name))
                .then_with(|| a.true_start.cmp(&b.true_start))
        });
        let mut trace_events = Vec::with_capacity(events.len());
        let mut truths = Vec::with_capacity(events.len());
        for ev in events.drain(..) {
            let local_start = to_local(ev.true_start);
            let local_end = to_local(ev.true_end);
            trace_events.push(TraceEvent {
                name: ev.name.to_string(),
                kind: ev.kind,
                rank,
                start_ts_us: local_start,
                duration_us: (local_end - local_start).max(0) as u64,
                meta: ev.meta,
            });
            truths.push(EventTruth {
                true_start_us: ev.true_start,
                true_end_us: ev.true_end,
                instance_id: ev.instance,
            });
        }
        truth.per_rank.insert(rank, truths);
        traces.push(RankTrace {
            rank,
            events: trace_events,
        });
    }
    Ok((traces, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_topology_has_two_compute_events_and_no_comm() {
        let cfg = SimConfig {
            topo: ParallelTopology::new(1, 1, 1).unwrap(),
            num_microbatches: 1,
            jitter_pct: 0.0,
            ..Default::default()
        };
        let (traces, truth) = run_sim(&cfg, &[]).unwrap();
        assert_eq!(traces.len(), 1);
        assert_eq!(traces[0].events.len(), 2);
        assert!(traces[0]
            .events
            .iter()
            .all(|e| e.kind == EventKind::ComputeKernel));
        assert_eq!(truth.per_rank[&RankId(0)].len(), 2);
    }

    #[test]
    fn pp2_stage1_forward_waits_for_transfer() {
        let cfg = SimConfig {
            topo: ParallelTopology::new(1, 2, 1).unwrap(),
            num_microbatches: 1,
            jitter_pct: 0.0,
            ..Default::default()
        };
        let (traces, truth) = run_sim(&cfg, &[]).unwrap();
        let fwd_end_stage0 = traces[0]
            .events
            .iter()
            .zip(&truth.per_rank[&RankId(0)])
            .find(|(e, _)| e.name == "forward_compute")
            .map(|(_, t)| t.true_end_us)
            .unwrap();
        let fwd_start_stage1 = traces[1]
            .events
            .iter()
            .zip(&truth.per_rank[&RankId(1)])
            .find(|(e, _)| e.name == "forward_compute")
            .map(|(_, t)| t.true_start_us)
            .unwrap();
        let latency = (cfg.p2p_payload_bytes as f64 / cfg.link_bw_bytes_per_us).round() as i64;
        assert!(fwd_start_stage1 >= fwd_end_stage0 + latency);
    }

    #[test]
    fn determinism_identical_runs() {
        let cfg = SimConfig::default();
        let faults = vec![FaultSpec::Downclock {
            rank: RankId(3),
            factor: 2.0,
            window: Window::default(),
        }];
        let a = run_sim(&cfg, &faults).unwrap();
        let b = run_sim(&cfg, &faults).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn clock_skew_shifts_local_timestamps_only() {
        let cfg = SimConfig {
            jitter_pct: 0.0,
            ..Default::default()
        };
        let skew = vec![FaultSpec::ClockSkew {
            rank: RankId(1),
            offset_us: -1500,
            drift_ppm: 0.0,
        }];
        let (clean, _) = run_sim(&cfg, &[]).unwrap();
        let (skewed, truth) = run_sim(&cfg, &skew).unwrap();
        for (a, b) in clean[1].events.iter().zip(&skewed[1].events) {
            assert_eq!(a.start_ts_us - 1500, b.start_ts_us);
        }
        // True timestamps are unchanged by a pure clock fault.
        for (ev, tr) in skewed[1].events.iter().zip(&truth.per_rank[&RankId(1)]) {
            assert_eq!(ev.start_ts_us, tr.true_start_us - 1500);
        }
    }

    #[test]
    fn one_f_one_b_rejects_multiple_chunks() {
        let cfg = SimConfig {
            num_chunks_per_stage: 2,
            ..Default::default()
        };
        assert!(matches!(
            run_sim(&cfg, &[]),
            Err(SimError::InvalidConfig(_))
        ));
    }

    #[test]
    fn interleaved_chunks_run_under_every_policy_schedule() {
        for schedule in [
            SimSchedule::Bfc,
            SimSchedule::Dfc,
            SimSchedule::BestEffortBfc {
                mem_cap_bytes: 3 * 4 * 1024 * 1024,
            },
        ] {
            let cfg = SimConfig {
                topo: ParallelTopology::new(1, 2, 1).unwrap(),
                num_microbatches: 4,
                num_chunks_per_stage: 2,
                schedule,
                ..Default::default()
            };
            let (traces, _) = run_sim(&cfg, &[]).unwrap();
            // 4 mb x 2 local chunks x 2 phases of compute per rank.
            for t in &traces {
                let computes = t
                    .events
                    .iter()
                    .filter(|e| e.kind == EventKind::ComputeKernel)
                    .count();
                assert_eq!(computes, 16, "{schedule:?}");
            }
        }
    }

    #[test]
    fn fault_specs_are_validated() {
        let cfg = SimConfig::default();
        let cases = [
            FaultSpec::Downclock {
                rank: RankId(0),
                factor: 0.9,
                window: Window::default(),
            },
            FaultSpec::LinkDegrade {
                rank: RankId(0),
                direction: LinkDirection::Egress,
                bw_factor: 1.5,
                window: Window::default(),
            },
            FaultSpec::Downclock {
                rank: RankId(0),
                factor: 2.0,
                window: Window {
                    start_us: 10,
                    end_us: 10,
                },
            },
        ];
        for fault in cases {
            assert!(
                matches!(run_sim(&cfg, &[fault.clone()]), Err(SimError::InvalidFault(_))),
                "{fault:?}"
            );
        }
        // At most one clock fault per rank.
        let skews = vec![
            FaultSpec::ClockSkew {
                rank: RankId(1),
                offset_us: 10,
                drift_ppm: 0.0,
            },
            FaultSpec::ClockSkew {
                rank: RankId(1),
                offset_us: 20,
                drift_ppm: 0.0,
            },
        ];
        assert!(matches!(run_sim(&cfg, &skews), Err(SimError::InvalidFault(_))));
    }

    #[test]
    fn zero_task_config_yields_empty_traces() {
        let cfg = SimConfig {
            num_microbatches: 0,
            ..Default::default()
        };
        let (traces, truth) = run_sim(&cfg, &[]).unwrap();
        assert_eq!(traces.len(), 8);
        assert!(traces.iter().all(|t| t.events.is_empty()));
        assert!(truth.per_rank.values().all(Vec::is_empty));
    }
}
