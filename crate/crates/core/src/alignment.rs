//! Clock alignment: maps every rank's local timestamps onto a reference
//! rank's timeline using matched collective instances as anchors.
//!
//! All participants of a synchronous collective logically finish at the
//! same moment, so each matched instance pins one point of a rank's clock
//! to the reference timeline. The anchor target is the maximum aligned end
//! time over the members aligned so far: a collective cannot complete
//! before its last participant. Between anchors the offset is interpolated
//! linearly (capturing drift); outside the anchor range it extends
//! constantly. P2P instances are not used as anchors: their start/end skew
//! is legitimate pipeline scheduling, not clock error.

use crate::dependency::CommInstance;
use crate::model::{RankId, RankTrace};
use crate::trace_io::ChromeTraceDoc;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Piecewise time-offset function for one rank's clock.
///
/// Offsets are kept fractional so that chained alignment (aligning a rank
/// against an already-aligned neighbour) does not accumulate a rounding
/// error per wave; timestamps are rounded once, when a map is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClockMap {
    pub rank: RankId,
    /// (anchor local timestamp, offset to the reference timeline), with
    /// strictly increasing anchors.
    pub segments: Vec<(i64, f64)>,
}

impl ClockMap {
    pub fn identity(rank: RankId) -> Self {
        Self {
            rank,
            segments: vec![(0, 0.0)],
        }
    }

    /// Offset interpolated at a local timestamp: linear between anchors,
    /// constant outside the anchor range.
    fn offset_at(&self, ts: i64) -> f64 {
        match self.segments.as_slice() {
            [] => 0.0,
            [(_, off)] => *off,
            segs => {
                let first = segs[0];
                let last = segs[segs.len() - 1];
                if ts <= first.0 {
                    return first.1;
                }
                if ts >= last.0 {
                    return last.1;
                }
                let hi = segs.partition_point(|s| s.0 <= ts);
                let (a0, o0) = segs[hi - 1];
                let (a1, o1) = segs[hi];
                let f = (ts - a0) as f64 / (a1 - a0) as f64;
                o0 + f * (o1 - o0)
            }
        }
    }

    /// Maps a local timestamp to the reference timeline, unrounded.
    pub fn apply_f64(&self, ts: i64) -> f64 {
        ts as f64 + self.offset_at(ts)
    }

    /// Maps a local timestamp to the reference timeline.
    pub fn apply(&self, ts: i64) -> i64 {
        self.apply_f64(ts).round() as i64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankAlignStats {
    pub anchor_count: u64,
    pub max_residual_us: u64,
}

/// Per-rank alignment quality summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub reference: RankId,
    pub per_rank: BTreeMap<RankId, RankAlignStats>,
    /// Ranks sharing no instance with the reference, even transitively;
    /// their events stay on the local clock.
    pub unaligned_ranks: Vec<RankId>,
}

#[derive(Debug, thiserror::Error)]
pub enum AlignmentError {
    #[error("reference rank {0} does not appear in the traces")]
    ReferenceMissing(RankId),
}

/// For each rank, its chronological collective-end anchor candidates as
/// (local end timestamp, instance id) pairs. P2P instances are excluded.
pub fn build_anchors(
    traces: &[RankTrace],
    instances: &[CommInstance],
) -> BTreeMap<RankId, Vec<(i64, u64)>> {
    let by_rank: BTreeMap<RankId, &RankTrace> = traces.iter().map(|t| (t.rank, t)).collect();
    let mut anchors: BTreeMap<RankId, Vec<(i64, u64)>> = BTreeMap::new();
    for inst in instances {
        if !inst.kind.is_collective() {
            continue;
        }
        for (rank, evref) in &inst.members {
            let Some(trace) = by_rank.get(rank) else {
                continue;
            };
            let ev = &trace.events[evref.index];
            anchors
                .entry(*rank)
                .or_default()
                .push((ev.end_ts_us(), inst.instance_id));
        }
    }
    for list in anchors.values_mut() {
        list.sort();
    }
    anchors
}

/// Aligns every rank reachable from `reference` through shared collective
/// instances, wave by wave in ascending rank order.
pub fn align(
    traces: &[RankTrace],
    instances: &[CommInstance],
    reference: RankId,
) -> Result<(Vec<ClockMap>, AlignmentReport), AlignmentError> {
    let by_rank: BTreeMap<RankId, &RankTrace> = traces.iter().map(|t| (t.rank, t)).collect();
    if !by_rank.contains_key(&reference) {
        return Err(AlignmentError::ReferenceMissing(reference));
    }

    // Collective instances indexed for traversal: per instance the member
    // (rank, local end) list; per rank its instance indices.
    let mut inst_members: Vec<Vec<(RankId, i64)>> = Vec::new();
    let mut rank_instances: BTreeMap<RankId, Vec<usize>> = BTreeMap::new();
    for inst in instances {
        if !inst.kind.is_collective() {
            continue;
        }
        let mut members = Vec::with_capacity(inst.members.len());
        for (rank, evref) in &inst.members {
            let Some(trace) = by_rank.get(rank) else {
                continue;
            };
            members.push((*rank, trace.events[evref.index].end_ts_us()));
        }
        let idx = inst_members.len();
        for (rank, _) in &members {
            rank_instances.entry(*rank).or_default().push(idx);
        }
        inst_members.push(members);
    }
    // Chronological anchor evaluation per rank.
    for (rank, list) in rank_instances.iter_mut() {
        list.sort_by_key(|&i| {
            inst_members[i]
                .iter()
                .find(|(r, _)| r == rank)
                .map(|(_, end)| *end)
                .unwrap_or(i64::MAX)
        });
    }

    let mut maps: BTreeMap<RankId, ClockMap> = BTreeMap::new();
    maps.insert(reference, ClockMap::identity(reference));
    // Anchor candidates actually used, kept for residual reporting:
    // (local end, target reference time).
    let mut used_anchors: BTreeMap<RankId, Vec<(i64, f64)>> = BTreeMap::new();

    let mut visited: BTreeSet<RankId> = [reference].into();
    let mut frontier = vec![reference];
    while !frontier.is_empty() {
        let mut discovered: BTreeSet<RankId> = BTreeSet::new();
        for rank in &frontier {
            for &i in rank_instances.get(rank).into_iter().flatten() {
                for (member, _) in &inst_members[i] {
                    if !visited.contains(member) {
                        discovered.insert(*member);
                    }
                }
            }
        }
        let wave: Vec<RankId> = discovered.into_iter().collect();
        for rank in &wave {
            let mut candidates: Vec<(i64, f64)> = Vec::new();
            for &i in rank_instances.get(rank).into_iter().flatten() {
                let own_end = inst_members[i]
                    .iter()
                    .find(|(r, _)| r == rank)
                    .map(|(_, end)| *end)
                    .expect("rank is a member");
                // The instance's aligned end: the latest aligned member so
                // far defines logical completion.
                let target = inst_members[i]
                    .iter()
                    .filter(|(r, _)| r != rank)
                    .filter_map(|(r, end)| maps.get(r).map(|m| m.apply_f64(*end)))
                    .fold(None, |acc: Option<f64>, t| {
                        Some(acc.map_or(t, |a| a.max(t)))
                    });
                if let Some(target) = target {
                    candidates.push((own_end, target));
                }
            }
            candidates.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let mut segments: Vec<(i64, f64)> = Vec::with_capacity(candidates.len());
            for &(local_end, target) in &candidates {
                let offset = target - local_end as f64;
                match segments.last_mut() {
                    Some(last) if last.0 == local_end => last.1 = last.1.max(offset),
                    _ => segments.push((local_end, offset)),
                }
            }
            if segments.is_empty() {
                continue; // unreachable by construction, but stay safe
            }
            used_anchors.insert(*rank, candidates);
            maps.insert(
                *rank,
                ClockMap {
                    rank: *rank,
                    segments,
                },
            );
            visited.insert(*rank);
        }
        frontier = wave;
    }

    let mut per_rank = BTreeMap::new();
    let mut unaligned = Vec::new();
    for trace in traces {
        match maps.get(&trace.rank) {
            Some(map) => {
                let candidates = used_anchors.get(&trace.rank);
                let max_residual = candidates
                    .into_iter()
                    .flatten()
                    .map(|&(local_end, target)| {
                        (map.apply(local_end) - target.round() as i64).unsigned_abs()
                    })
                    .max()
                    .unwrap_or(0);
                per_rank.insert(
                    trace.rank,
                    RankAlignStats {
                        anchor_count: candidates.map_or(0, |c| c.len() as u64),
                        max_residual_us: max_residual,
                    },
                );
            }
            None => unaligned.push(trace.rank),
        }
    }
    let maps: Vec<ClockMap> = maps.into_values().collect();
    Ok((
        maps,
        AlignmentReport {
            reference,
            per_rank,
            unaligned_ranks: unaligned,
        },
    ))
}

/// Rewrites every event's `ts` through its rank's clock map; durations are
/// unchanged. Ranks without a map are left on their local clock and listed
/// in the document metadata under `unaligned_ranks`.
pub fn apply_alignment(doc: &ChromeTraceDoc, maps: &[ClockMap]) -> ChromeTraceDoc {
    let by_rank: BTreeMap<u32, &ClockMap> = maps.iter().map(|m| (m.rank.0, m)).collect();
    let mut out = doc.clone();
    let mut unaligned: BTreeSet<u32> = BTreeSet::new();
    for ev in &mut out.events {
        match by_rank.get(&ev.pid) {
            Some(map) => ev.ts = map.apply(ev.ts),
            None => {
                unaligned.insert(ev.pid);
            }
        }
    }
    if !unaligned.is_empty() {
        out.metadata.insert(
            "unaligned_ranks".into(),
            serde_json::Value::Array(unaligned.into_iter().map(Into::into).collect()),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dependency::match_all;
    use crate::model::{CollectiveOp, EventKind, EventMeta, TraceEvent};

    fn allreduce(rank: u32, ts: i64, dur: u64, group: &[u32]) -> TraceEvent {
        TraceEvent {
            name: "ar".into(),
            kind: EventKind::Collective(CollectiveOp::AllReduce),
            rank: RankId(rank),
            start_ts_us: ts,
            duration_us: dur,
            meta: EventMeta {
                participant_ranks: Some(group.iter().map(|&r| RankId(r)).collect()),
                ..Default::default()
            },
        }
    }

    #[test]
    fn reference_alone_gets_identity_map() {
        let traces = vec![RankTrace::new(RankId(0), vec![])];
        let (maps, report) = align(&traces, &[], RankId(0)).unwrap();
        assert_eq!(maps.len(), 1);
        assert_eq!(maps[0].apply(12345), 12345);
        assert_eq!(report.per_rank[&RankId(0)].max_residual_us, 0);
        assert!(report.unaligned_ranks.is_empty());
    }

    #[test]
    fn uniform_skew_recovered_from_one_anchor() {
        // Rank 1's clock runs 500 us ahead; both finish the allreduce at the
        // same logical moment.
        let traces = vec![
            RankTrace::new(RankId(0), vec![allreduce(0, 1000, 100, &[0, 1])]),
            RankTrace::new(RankId(1), vec![allreduce(1, 1500, 100, &[0, 1])]),
        ];
        let matched = match_all(&traces).unwrap();
        let (maps, report) = align(&traces, &matched.instances, RankId(0)).unwrap();
        let map1 = maps.iter().find(|m| m.rank == RankId(1)).unwrap();
        assert_eq!(map1.segments, vec![(1600, -500.0)]);
        assert_eq!(map1.apply(1600), 1100);
        assert_eq!(report.per_rank[&RankId(1)].anchor_count, 1);
        assert_eq!(report.per_rank[&RankId(1)].max_residual_us, 0);
    }

    #[test]
    fn build_anchors_counts_and_excludes_p2p() {
        let mut send = TraceEvent {
            name: "send".into(),
            kind: EventKind::P2PSend,
            rank: RankId(0),
            start_ts_us: 2000,
            duration_us: 10,
            meta: EventMeta::default(),
        };
        send.meta.peer_rank = Some(RankId(1));
        send.meta.payload_bytes = Some(64);
        let mut recv = send.clone();
        recv.name = "recv".into();
        recv.kind = EventKind::P2PRecv;
        recv.rank = RankId(1);
        recv.meta.peer_rank = Some(RankId(0));

        let traces = vec![
            RankTrace::new(RankId(0), vec![allreduce(0, 1000, 100, &[0, 1]), send]),
            RankTrace::new(RankId(1), vec![allreduce(1, 1000, 100, &[0, 1]), recv]),
        ];
        let matched = match_all(&traces).unwrap();
        let anchors = build_anchors(&traces, &matched.instances);
        assert_eq!(anchors[&RankId(0)].len(), 1);
        assert_eq!(anchors[&RankId(1)].len(), 1);
        assert_eq!(anchors[&RankId(0)][0].1, anchors[&RankId(1)][0].1);
    }

    #[test]
    fn build_anchors_empty_without_instances() {
        assert!(build_anchors(&[], &[]).is_empty());
    }

    #[test]
    fn transitive_alignment_through_middle_rank() {
        // 0-1 share an instance, 1-2 share another; 2 aligns through 1.
        let traces = vec![
            RankTrace::new(RankId(0), vec![allreduce(0, 1000, 100, &[0, 1])]),
            RankTrace::new(
                RankId(1),
                vec![
                    allreduce(1, 1300, 100, &[0, 1]),
                    allreduce(1, 2300, 100, &[1, 2]),
                ],
            ),
            RankTrace::new(RankId(2), vec![allreduce(2, 1700, 100, &[1, 2])]),
        ];
        let matched = match_all(&traces).unwrap();
        let (maps, report) = align(&traces, &matched.instances, RankId(0)).unwrap();
        assert_eq!(maps.len(), 3);
        assert!(report.unaligned_ranks.is_empty());
        // Rank 1 offset -300; its second collective ends at local 2400 ->
        // aligned 2100. Rank 2 ends it at local 1800, so offset +300.
        let map2 = maps.iter().find(|m| m.rank == RankId(2)).unwrap();
        assert_eq!(map2.apply(1800), 2100);
    }

    #[test]
    fn disconnected_rank_reported_unaligned() {
        let traces = vec![
            RankTrace::new(RankId(0), vec![allreduce(0, 1000, 100, &[0, 1])]),
            RankTrace::new(RankId(1), vec![allreduce(1, 1000, 100, &[0, 1])]),
            RankTrace::new(RankId(5), vec![allreduce(5, 1000, 100, &[5, 6])]),
        ];
        let matched = match_all(&traces).unwrap();
        let (maps, report) = align(&traces, &matched.instances, RankId(0)).unwrap();
        assert_eq!(report.unaligned_ranks, vec![RankId(5)]);
        assert_eq!(maps.len(), 2);
    }

    #[test]
    fn apply_alignment_shifts_ts_only() {
        let traces = vec![RankTrace::new(
            RankId(0),
            vec![allreduce(0, 1000, 100, &[0])],
        )];
        let doc = crate::trace_io::merge_traces(&traces).unwrap();
        let map = ClockMap {
            rank: RankId(0),
            segments: vec![(0, -500.0)],
        };
        let shifted = apply_alignment(&doc, &[map]);
        assert_eq!(shifted.events[0].ts, 500);
        assert_eq!(shifted.events[0].dur, doc.events[0].dur);

        let identity = apply_alignment(&doc, &[ClockMap::identity(RankId(0))]);
        assert_eq!(identity, doc);
    }

    #[test]
    fn uncovered_ranks_stay_local_and_get_flagged() {
        let traces = vec![
            RankTrace::new(RankId(0), vec![allreduce(0, 1000, 100, &[0])]),
            RankTrace::new(RankId(7), vec![allreduce(7, 1000, 100, &[7])]),
        ];
        let doc = crate::trace_io::merge_traces(&traces).unwrap();
        let out = apply_alignment(&doc, &[ClockMap::identity(RankId(0))]);
        let flagged = out.metadata.get("unaligned_ranks").unwrap();
        assert_eq!(flagged, &serde_json::json!([7]));
        let ev7 = out.events.iter().find(|e| e.pid == 7).unwrap();
        assert_eq!(ev7.ts, 1000);
    }

    #[test]
    fn interpolation_between_anchors_is_linear() {
        let map = ClockMap {
            rank: RankId(1),
            segments: vec![(1000, 0.0), (2000, 100.0)],
        };
        assert_eq!(map.apply(500), 500); // constant before first anchor
        assert_eq!(map.apply(1000), 1000);
        assert_eq!(map.apply(1500), 1550);
        assert_eq!(map.apply(2000), 2100);
        assert_eq!(map.apply(3000), 3100); // constant after last anchor
    }

    #[test]
    fn monotone_input_stays_monotone() {
        let map = ClockMap {
            rank: RankId(1),
            segments: vec![(0, 0.0), (10_000, 900.0), (20_000, -400.0)],
        };
        let mut prev = i64::MIN;
        for ts in (-100..25_000).step_by(7) {
            let mapped = map.apply(ts);
            assert!(mapped >= prev, "reordered at ts={ts}");
            prev = mapped;
        }
    }
}
