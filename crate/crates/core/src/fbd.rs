//! Forward/backward decoupling support: the virtual-to-physical rank
//! mapping and the bit-vector communication coordinator that launches
//! collectives deadlock-free.
//!
//! Every training thread owns a virtual rank; forward and backward
//! instances have the same number of ranks, and several virtual ranks may
//! share one GPU (physical rank). A collective launches only once every
//! member of its group has registered: each coordinator keeps a
//! (groups x virtual ranks) bit table, coordinators exchange the flattened
//! table with a bitwise-OR all-reduce, and groups whose bits equal the
//! expected mask execute in ascending group order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseInstance {
    Forward,
    Backward,
}

/// Rank id seen by the training framework; one per worker thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VirtualRank {
    pub instance: PhaseInstance,
    pub value: u32,
}

impl VirtualRank {
    pub fn forward(value: u32) -> Self {
        Self {
            instance: PhaseInstance::Forward,
            value,
        }
    }
    pub fn backward(value: u32) -> Self {
        Self {
            instance: PhaseInstance::Backward,
            value,
        }
    }
}

/// Rank id actually held by a GPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhysicalRank(pub u32);

#[derive(Debug, thiserror::Error)]
pub enum FbdError {
    #[error(
        "forward and backward instances must have equal rank counts ({forward} vs {backward})"
    )]
    UnbalancedInstances { forward: usize, backward: usize },
    #[error("virtual rank {0:?} is not mapped to a physical rank")]
    UnmappedVirtualRank(VirtualRank),
    #[error("group {0} is invalid: {1}")]
    InvalidGroup(usize, String),
    #[error("virtual rank {vrank:?} is not a member of group {group}")]
    NotAMember { group: usize, vrank: VirtualRank },
    #[error("unknown group {0}")]
    UnknownGroup(usize),
    #[error("coordinator shape mismatch: ({0} x {1}) vs ({2} x {3})")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("harness deadlock: pending requests remain after {0} rounds")]
    Deadlock(u32),
}

/// Total map from virtual to physical ranks; multiple virtual ranks may
/// share one physical rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankMapping {
    map: BTreeMap<VirtualRank, PhysicalRank>,
}

impl RankMapping {
    pub fn new(
        pairs: impl IntoIterator<Item = (VirtualRank, PhysicalRank)>,
    ) -> Result<Self, FbdError> {
        let map: BTreeMap<VirtualRank, PhysicalRank> = pairs.into_iter().collect();
        let forward = map
            .keys()
            .filter(|v| v.instance == PhaseInstance::Forward)
            .count();
        let backward = map.len() - forward;
        if forward != backward {
            return Err(FbdError::UnbalancedInstances { forward, backward });
        }
        Ok(Self { map })
    }

    /// Colocates the forward and backward instance of each index on the
    /// given physical rank.
    pub fn colocated(physical_by_index: &[u32]) -> Result<Self, FbdError> {
        let mut pairs = Vec::with_capacity(physical_by_index.len() * 2);
        for (i, &p) in physical_by_index.iter().enumerate() {
            pairs.push((VirtualRank::forward(i as u32), PhysicalRank(p)));
            pairs.push((VirtualRank::backward(i as u32), PhysicalRank(p)));
        }
        Self::new(pairs)
    }

    pub fn physical(&self, vrank: VirtualRank) -> Result<PhysicalRank, FbdError> {
        self.map
            .get(&vrank)
            .copied()
            .ok_or(FbdError::UnmappedVirtualRank(vrank))
    }

    /// Virtual ranks in bit-position order (forward instances first).
    pub fn virtual_ranks(&self) -> impl Iterator<Item = VirtualRank> + '_ {
        self.map.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn physical_ranks(&self) -> Vec<PhysicalRank> {
        let mut out: Vec<PhysicalRank> = self.map.values().copied().collect();
        out.sort();
        out.dedup();
        out
    }
}

/// One eligible communication group over virtual ranks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommGroupSpec {
    pub group_id: usize,
    /// Sorted, non-empty, duplicate-free member list.
    pub members: Vec<VirtualRank>,
}

impl CommGroupSpec {
    pub fn new(group_id: usize, mut members: Vec<VirtualRank>) -> Result<Self, FbdError> {
        if members.is_empty() {
            return Err(FbdError::InvalidGroup(group_id, "empty member list".into()));
        }
        members.sort();
        let before = members.len();
        members.dedup();
        if members.len() != before {
            return Err(FbdError::InvalidGroup(group_id, "duplicate members".into()));
        }
        Ok(Self { group_id, members })
    }
}

/// Per-coordinator registration table: a (groups x virtual ranks) bit
/// matrix flattened to one dimension, plus the expected readiness mask of
/// each group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoordinatorState {
    num_groups: usize,
    vec_len: usize,
    table: Vec<u64>,
    expected: Vec<Vec<u64>>,
    vrank_pos: BTreeMap<VirtualRank, usize>,
    groups: Vec<CommGroupSpec>,
    /// Groups whose members all share one physical rank; they bypass the
    /// coordinator entirely.
    local_groups: Vec<bool>,
    /// Executed group ids, in execution order.
    pub execution_log: Vec<usize>,
}

fn words(bits: usize) -> usize {
    bits.div_ceil(64)
}

impl CoordinatorState {
    pub fn new(groups: &[CommGroupSpec], mapping: &RankMapping) -> Result<Self, FbdError> {
        let vec_len = mapping.len();
        let vrank_pos: BTreeMap<VirtualRank, usize> = mapping
            .virtual_ranks()
            .enumerate()
            .map(|(i, v)| (v, i))
            .collect();
        let num_groups = groups.len();
        let mut expected = Vec::with_capacity(num_groups);
        let mut local_groups = Vec::with_capacity(num_groups);
        for (i, g) in groups.iter().enumerate() {
            if g.group_id != i {
                return Err(FbdError::InvalidGroup(
                    g.group_id,
                    format!("group ids must be dense and ascending, expected {i}"),
                ));
            }
            let mut mask = vec![0u64; words(vec_len)];
            for member in &g.members {
                let pos = *vrank_pos
                    .get(member)
                    .ok_or(FbdError::UnmappedVirtualRank(*member))?;
                mask[pos / 64] |= 1 << (pos % 64);
            }
            expected.push(mask);
            let mut physicals = g
                .members
                .iter()
                .map(|m| mapping.physical(*m))
                .collect::<Result<Vec<_>, _>>()?;
            physicals.sort();
            physicals.dedup();
            local_groups.push(physicals.len() == 1);
        }
        Ok(Self {
            num_groups,
            vec_len,
            table: vec![0u64; words(num_groups * vec_len)],
            expected,
            vrank_pos,
            groups: groups.to_vec(),
            local_groups,
            execution_log: Vec::new(),
        })
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn vec_len(&self) -> usize {
        self.vec_len
    }

    /// Exchange payload size: the flattened table is exactly
    /// groups x vec_len bits no matter how many requests are pending.
    pub fn wire_size_bits(&self) -> usize {
        self.num_groups * self.vec_len
    }

    pub fn is_local_group(&self, group_id: usize) -> Result<bool, FbdError> {
        self.local_groups
            .get(group_id)
            .copied()
            .ok_or(FbdError::UnknownGroup(group_id))
    }

    fn bit_index(&self, group_id: usize, pos: usize) -> usize {
        group_id * self.vec_len + pos
    }

    fn get_bit(&self, group_id: usize, pos: usize) -> bool {
        let i = self.bit_index(group_id, pos);
        self.table[i / 64] & (1 << (i % 64)) != 0
    }

    fn set_bit(&mut self, group_id: usize, pos: usize) {
        let i = self.bit_index(group_id, pos);
        self.table[i / 64] |= 1 << (i % 64);
    }

    fn clear_group(&mut self, group_id: usize) {
        for pos in 0..self.vec_len {
            let i = self.bit_index(group_id, pos);
            self.table[i / 64] &= !(1 << (i % 64));
        }
    }

    /// Marks the virtual rank's planned collective; idempotent.
    pub fn register(&mut self, group_id: usize, vrank: VirtualRank) -> Result<(), FbdError> {
        let group = self
            .groups
            .get(group_id)
            .ok_or(FbdError::UnknownGroup(group_id))?;
        if !group.members.contains(&vrank) {
            return Err(FbdError::NotAMember {
                group: group_id,
                vrank,
            });
        }
        let pos = self.vrank_pos[&vrank];
        self.set_bit(group_id, pos);
        Ok(())
    }

    /// The group's current bit vector, most significant first (position 0
    /// leftmost), e.g. "11110000" for a fully registered {0,1,2,3} of 8.
    pub fn group_bits_string(&self, group_id: usize) -> String {
        (0..self.vec_len)
            .map(|pos| {
                if self.get_bit(group_id, pos) {
                    '1'
                } else {
                    '0'
                }
            })
            .collect()
    }

    fn group_ready(&self, group_id: usize) -> bool {
        let mask = &self.expected[group_id];
        for (w, &expect) in mask.iter().enumerate() {
            let mut have = 0u64;
            for b in 0..64 {
                let pos = w * 64 + b;
                if pos >= self.vec_len {
                    break;
                }
                if self.get_bit(group_id, pos) {
                    have |= 1 << b;
                }
            }
            if have & expect != expect {
                return false;
            }
        }
        true
    }

    /// Groups whose bits equal the expected mask, ascending.
    pub fn ready_groups(&self) -> Vec<usize> {
        (0..self.num_groups)
            .filter(|&g| !self.local_groups[g] && self.group_ready(g))
            .collect()
    }

    /// Executes every ready group in ascending order, clearing its bits and
    /// recording the execution.
    pub fn execute_ready(&mut self) -> Vec<usize> {
        let ready = self.ready_groups();
        for &g in &ready {
            self.clear_group(g);
            self.execution_log.push(g);
        }
        ready
    }
}

/// All-reduce with bitwise OR over the flattened tables: every coordinator
/// ends up holding the union. Returns the payload size in bits each
/// coordinator contributed.
pub fn exchange(states: &mut [CoordinatorState]) -> Result<usize, FbdError> {
    let Some(first) = states.first() else {
        return Ok(0);
    };
    let (g, v) = (first.num_groups, first.vec_len);
    for s in states.iter() {
        if s.num_groups != g || s.vec_len != v {
            return Err(FbdError::ShapeMismatch(g, v, s.num_groups, s.vec_len));
        }
    }
    let mut merged = vec![0u64; words(g * v)];
    for s in states.iter() {
        for (m, w) in merged.iter_mut().zip(&s.table) {
            *m |= w;
        }
    }
    for s in states.iter_mut() {
        s.table.clone_from(&merged);
    }
    Ok(g * v)
}

/// One worker thread's scripted collective requests, in program order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerScript {
    pub vrank: VirtualRank,
    pub requests: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u32,
    pub registered: Vec<(VirtualRank, usize)>,
    /// Cross-GPU groups executed this round, ascending.
    pub executed: Vec<usize>,
    /// Intra-GPU groups satisfied locally this round, bypassing the
    /// coordinator.
    pub local: Vec<(VirtualRank, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExecutionLog {
    pub rounds: Vec<RoundLog>,
    /// Exchange payload observed each round, in bits per coordinator.
    pub exchange_payload_bits: usize,
}

impl ExecutionLog {
    /// Every executed group occurrence (cross-GPU and local), in order.
    pub fn executed_groups(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for r in &self.rounds {
            out.extend(r.local.iter().map(|(_, g)| *g));
            out.extend(r.executed.iter().copied());
        }
        out
    }
}

/// Drives scripted workers through register/exchange/ready/execute rounds.
/// `register_now(round, vrank, deferrals)` is the adversary: returning
/// false delays that worker's next registration to a later round.
pub fn run_harness(
    scripts: &[WorkerScript],
    groups: &[CommGroupSpec],
    mapping: &RankMapping,
    mut register_now: impl FnMut(u32, VirtualRank, u32) -> bool,
) -> Result<ExecutionLog, FbdError> {
    for script in scripts {
        mapping.physical(script.vrank)?;
        for &g in &script.requests {
            let group = groups.get(g).ok_or(FbdError::UnknownGroup(g))?;
            if !group.members.contains(&script.vrank) {
                return Err(FbdError::NotAMember {
                    group: g,
                    vrank: script.vrank,
                });
            }
        }
    }
    let physicals = mapping.physical_ranks();
    let mut coordinators: Vec<CoordinatorState> = physicals
        .iter()
        .map(|_| CoordinatorState::new(groups, mapping))
        .collect::<Result<_, _>>()?;
    let coord_of: BTreeMap<PhysicalRank, usize> =
        physicals.iter().enumerate().map(|(i, p)| (*p, i)).collect();

    struct WorkerState {
        next: usize,
        outstanding: Option<usize>,
        deferrals: u32,
    }
    let mut workers: Vec<WorkerState> = scripts
        .iter()
        .map(|_| WorkerState {
            next: 0,
            outstanding: None,
            deferrals: 0,
        })
        .collect();

    let total_requests: usize = scripts.iter().map(|s| s.requests.len()).sum();
    let bound = (4 * total_requests + 16) as u32;
    let mut log = ExecutionLog::default();

    for round in 1..=bound {
        let mut round_log = RoundLog {
            round,
            registered: Vec::new(),
            executed: Vec::new(),
            local: Vec::new(),
        };
        for (i, script) in scripts.iter().enumerate() {
            let w = &mut workers[i];
            if w.outstanding.is_some() {
                continue;
            }
            // Intra-GPU groups need no coordination; drain them eagerly.
            while w.next < script.requests.len() {
                let g = script.requests[w.next];
                if coordinators[0].is_local_group(g)? {
                    round_log.local.push((script.vrank, g));
                    w.next += 1;
                } else {
                    break;
                }
            }
            if w.next >= script.requests.len() {
                continue;
            }
            let g = script.requests[w.next];
            if register_now(round, script.vrank, w.deferrals) {
                let c = coord_of[&mapping.physical(script.vrank)?];
                coordinators[c].register(g, script.vrank)?;
                round_log.registered.push((script.vrank, g));
                w.outstanding = Some(g);
                w.deferrals = 0;
            } else {
                w.deferrals += 1;
            }
        }

        log.exchange_payload_bits = exchange(&mut coordinators)?;
        // After the OR exchange every coordinator holds the same table, so
        // each executes the identical ready set; states stay consistent.
        let mut executed: Option<Vec<usize>> = None;
        for c in coordinators.iter_mut() {
            let ran = c.execute_ready();
            match &executed {
                Some(first) => debug_assert_eq!(first, &ran),
                None => executed = Some(ran),
            }
        }
        let executed = executed.unwrap_or_default();
        round_log.executed = executed.clone();

        for w in workers.iter_mut() {
            if let Some(g) = w.outstanding {
                if executed.contains(&g) {
                    w.outstanding = None;
                    w.next += 1;
                }
            }
        }
        if !round_log.registered.is_empty()
            || !round_log.executed.is_empty()
            || !round_log.local.is_empty()
        {
            log.rounds.push(round_log);
        }
        if workers
            .iter()
            .zip(scripts)
            .all(|(w, s)| w.outstanding.is_none() && w.next >= s.requests.len())
        {
            return Ok(log);
        }
    }
    Err(FbdError::Deadlock(bound))
}

/// Seeded adversary: each pending registration is delayed with probability
/// one half, at most two rounds.
pub fn coordinator_harness(
    scripts: &[WorkerScript],
    groups: &[CommGroupSpec],
    mapping: &RankMapping,
    seed: u64,
) -> Result<ExecutionLog, FbdError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    run_harness(scripts, groups, mapping, |_round, _vrank, deferrals| {
        deferrals >= 2 || rng.gen_bool(0.5)
    })
}
