//! Shared vocabulary for 3D-parallel training traces: ranks, topology,
//! event kinds, and the per-rank event sequences every other module
//! consumes.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// Global physical rank index of one GPU process.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct RankId(pub u32);

impl RankId {
    pub fn value(self) -> u32 {
        self.0
    }
}

impl fmt::Display for RankId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("rank {rank} out of range for world size {world_size}")]
    RankOutOfRange { rank: u32, world_size: u32 },
    #[error("coordinate ({tp},{pp},{dp}) out of bounds for topology tp={tp_size} pp={pp_size} dp={dp_size}")]
    CoordsOutOfBounds {
        tp: u32,
        pp: u32,
        dp: u32,
        tp_size: u32,
        pp_size: u32,
        dp_size: u32,
    },
    #[error("topology sizes must be positive, got tp={0} pp={1} dp={2}")]
    ZeroSize(u32, u32, u32),
}

/// The 3D parallel layout of a training job.
///
/// The rank ↔ coordinate mapping follows Megatron's default grouping:
/// the TP index varies fastest, then DP, then PP, so TP groups occupy
/// contiguous ranks. This ordering is fixed at construction and is the
/// single source of truth for every coordinate computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelTopology {
    pub tp_size: u32,
    pub pp_size: u32,
    pub dp_size: u32,
    pub world_size: u32,
}

impl ParallelTopology {
    pub fn new(tp_size: u32, pp_size: u32, dp_size: u32) -> Result<Self, TopologyError> {
        if tp_size == 0 || pp_size == 0 || dp_size == 0 {
            return Err(TopologyError::ZeroSize(tp_size, pp_size, dp_size));
        }
        Ok(Self {
            tp_size,
            pp_size,
            dp_size,
            world_size: tp_size * pp_size * dp_size,
        })
    }

    pub fn ranks(&self) -> impl Iterator<Item = RankId> {
        (0..self.world_size).map(RankId)
    }
}

/// Position of a rank along each parallel axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParallelCoords {
    pub tp_index: u32,
    pub pp_index: u32,
    pub dp_index: u32,
}

/// Maps a global rank to its (tp, pp, dp) coordinates.
pub fn rank_to_coords(
    rank: RankId,
    topo: &ParallelTopology,
) -> Result<ParallelCoords, TopologyError> {
    if rank.0 >= topo.world_size {
        return Err(TopologyError::RankOutOfRange {
            rank: rank.0,
            world_size: topo.world_size,
        });
    }
    let tp_index = rank.0 % topo.tp_size;
    let dp_index = (rank.0 / topo.tp_size) % topo.dp_size;
    let pp_index = rank.0 / (topo.tp_size * topo.dp_size);
    Ok(ParallelCoords {
        tp_index,
        pp_index,
        dp_index,
    })
}

/// Inverse of [`rank_to_coords`].
pub fn coords_to_rank(
    coords: ParallelCoords,
    topo: &ParallelTopology,
) -> Result<RankId, TopologyError> {
    if coords.tp_index >= topo.tp_size
        || coords.pp_index >= topo.pp_size
        || coords.dp_index >= topo.dp_size
    {
        return Err(TopologyError::CoordsOutOfBounds {
            tp: coords.tp_index,
            pp: coords.pp_index,
            dp: coords.dp_index,
            tp_size: topo.tp_size,
            pp_size: topo.pp_size,
            dp_size: topo.dp_size,
        });
    }
    Ok(RankId(
        coords.tp_index + topo.tp_size * (coords.dp_index + topo.dp_size * coords.pp_index),
    ))
}

/// All ranks sharing this rank's (tp, pp) coordinates, i.e. its data-parallel
/// peer group, including the rank itself. Always `dp_size` long.
pub fn dp_peers(rank: RankId, topo: &ParallelTopology) -> Result<Vec<RankId>, TopologyError> {
    let coords = rank_to_coords(rank, topo)?;
    (0..topo.dp_size)
        .map(|dp_index| {
            coords_to_rank(
                ParallelCoords {
                    tp_index: coords.tp_index,
                    pp_index: coords.pp_index,
                    dp_index,
                },
                topo,
            )
        })
        .collect()
}

/// Ranks sharing this rank's (pp, dp) coordinates: its tensor-parallel group.
pub fn tp_peers(rank: RankId, topo: &ParallelTopology) -> Result<Vec<RankId>, TopologyError> {
    let coords = rank_to_coords(rank, topo)?;
    (0..topo.tp_size)
        .map(|tp_index| {
            coords_to_rank(
                ParallelCoords {
                    tp_index,
                    pp_index: coords.pp_index,
                    dp_index: coords.dp_index,
                },
                topo,
            )
        })
        .collect()
}

/// Collective operation flavors seen in training traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveOp {
    AllReduce,
    AllGather,
    ReduceScatter,
    Broadcast,
}

/// What a traced operation is: a compute kernel, a collective call, or one
/// side of a point-to-point transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ComputeKernel,
    Collective(CollectiveOp),
    P2PSend,
    P2PRecv,
}

impl EventKind {
    /// Short category tag used in the Chrome trace `cat` field.
    pub fn cat(&self) -> &'static str {
        match self {
            EventKind::ComputeKernel => "compute",
            EventKind::Collective(CollectiveOp::AllReduce) => "all_reduce",
            EventKind::Collective(CollectiveOp::AllGather) => "all_gather",
            EventKind::Collective(CollectiveOp::ReduceScatter) => "reduce_scatter",
            EventKind::Collective(CollectiveOp::Broadcast) => "broadcast",
            EventKind::P2PSend => "send",
            EventKind::P2PRecv => "recv",
        }
    }

    pub fn from_cat(cat: &str) -> Option<EventKind> {
        Some(match cat {
            "compute" => EventKind::ComputeKernel,
            "all_reduce" => EventKind::Collective(CollectiveOp::AllReduce),
            "all_gather" => EventKind::Collective(CollectiveOp::AllGather),
            "reduce_scatter" => EventKind::Collective(CollectiveOp::ReduceScatter),
            "broadcast" => EventKind::Collective(CollectiveOp::Broadcast),
            "send" => EventKind::P2PSend,
            "recv" => EventKind::P2PRecv,
            _ => return None,
        })
    }

    pub fn is_collective(&self) -> bool {
        matches!(self, EventKind::Collective(_))
    }

    pub fn is_p2p(&self) -> bool {
        matches!(self, EventKind::P2PSend | EventKind::P2PRecv)
    }

    /// Viewer swimlane: 0 compute, 1 collectives, 2 point-to-point.
    pub fn lane(&self) -> u32 {
        match self {
            EventKind::ComputeKernel => 0,
            EventKind::Collective(_) => 1,
            EventKind::P2PSend | EventKind::P2PRecv => 2,
        }
    }
}

/// Execution phase an event belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Backward,
    WarmUp,
    SteadyState,
}

/// Optional metadata attached to a trace event.
///
/// Kept as a single record of optional fields rather than per-kind variants
/// so that trace files missing metadata still parse; the analysis passes
/// enforce the per-kind requirements (collectives need `participant_ranks`,
/// P2P needs `peer_rank` and `payload_bytes`) when they run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct EventMeta {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub microbatch_id: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chunk_id: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payload_bytes: Option<u64>,
    /// Sorted global rank list of every participant, for collectives.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub participant_ranks: Option<Vec<RankId>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peer_rank: Option<RankId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    /// Identifier linking events that form one logical communication
    /// instance; assigned by the dependency matcher, not by tracing.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sync_instance_id: Option<u64>,
    /// Unknown args keys from the source trace, preserved verbatim.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default, flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// One timed operation on one rank, on that rank's local clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub name: String,
    pub kind: EventKind,
    pub rank: RankId,
    /// Local-clock start, integer microseconds (Chrome Tracing `ts` unit).
    pub start_ts_us: i64,
    pub duration_us: u64,
    pub meta: EventMeta,
}

impl TraceEvent {
    pub fn end_ts_us(&self) -> i64 {
        self.start_ts_us + self.duration_us as i64
    }
}

/// The recorded event sequence of a single rank, sorted by start time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTrace {
    pub rank: RankId,
    pub events: Vec<TraceEvent>,
}

impl RankTrace {
    /// Builds a trace, sorting events by start time and stamping the rank.
    pub fn new(rank: RankId, mut events: Vec<TraceEvent>) -> Self {
        for ev in &mut events {
            ev.rank = rank;
        }
        events.sort_by(|a, b| {
            a.start_ts_us
                .cmp(&b.start_ts_us)
                .then_with(|| a.name.cmp(&b.name))
        });
        Self { rank, events }
    }
}
