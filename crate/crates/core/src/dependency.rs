//! Cross-rank communication matching: links the concrete per-rank events
//! that form one logical collective or point-to-point transfer.
//!
//! Collectives match by participant group and program order: the k-th
//! collective a rank issues over a given (group, op) joins instance k.
//! P2P matches FIFO per directed (src, dst) pair. Ranks disagreeing on
//! occurrence counts produce a partial matching plus an unmatched report
//! rather than heuristic re-pairing.

use crate::model::{CollectiveOp, EventKind, RankId, RankTrace};
use crate::trace_io::ChromeTraceDoc;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Stable reference to one event: the rank and its position in that rank's
/// time-sorted event sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventRef {
    pub rank: RankId,
    pub index: usize,
}

/// A matched set of events forming one logical communication operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommInstance {
    pub instance_id: u64,
    pub kind: EventKind,
    /// Sorted participating ranks; for P2P this is the [src, dst] pair.
    pub group: Vec<RankId>,
    /// k-th occurrence for this (group, kind) in program order.
    pub occurrence_index: u32,
    pub members: BTreeMap<RankId, EventRef>,
}

/// Why an event could not be matched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum UnmatchedReason {
    /// Collective event without `participant_ranks`.
    MissingParticipants,
    /// `participant_ranks` does not contain the owning rank.
    OwnerNotInGroup,
    /// Group members disagree on how many collectives they issued
    /// (truncated or corrupt trace).
    OccurrenceCountMismatch { expected: u64, got: u64 },
    /// P2P event without `peer_rank`.
    MissingPeer,
    /// P2P event without `payload_bytes`.
    MissingPayload,
    /// P2P event whose peer is the owning rank itself.
    SelfPeer,
    /// Send with no matching recv on the destination rank.
    UnpairedSend,
    /// Recv with no matching send on the source rank.
    UnpairedRecv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnmatchedEvent {
    pub rank: RankId,
    pub index: usize,
    pub name: String,
    pub start_ts_us: i64,
    #[serde(flatten)]
    pub reason: UnmatchedReason,
}

/// Events left over after matching, retained for diagnostics; on clean
/// simulator output this is empty.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UnmatchedReport {
    pub events: Vec<UnmatchedEvent>,
}

impl UnmatchedReport {
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    pub instances: Vec<CommInstance>,
    pub unmatched: UnmatchedReport,
}

#[derive(Debug, thiserror::Error)]
pub enum DependencyError {
    #[error(
        "payload mismatch between matched pair: send `{send_name}` on rank {src} at ts {send_ts} \
         carries {send_bytes} B but recv `{recv_name}` on rank {dst} at ts {recv_ts} carries {recv_bytes} B"
    )]
    PayloadMismatch {
        src: RankId,
        dst: RankId,
        send_name: String,
        send_ts: i64,
        send_bytes: u64,
        recv_name: String,
        recv_ts: i64,
        recv_bytes: u64,
    },
}

fn unmatched(trace: &RankTrace, index: usize, reason: UnmatchedReason) -> UnmatchedEvent {
    let ev = &trace.events[index];
    UnmatchedEvent {
        rank: trace.rank,
        index,
        name: ev.name.clone(),
        start_ts_us: ev.start_ts_us,
        reason,
    }
}

/// Matches collective events across ranks by (participant group, op pair)
/// program order. Returns the matching plus any leftovers.
pub fn match_collectives(traces: &[RankTrace]) -> MatchResult {
    type GroupKey = (Vec<RankId>, CollectiveOp);
    let mut by_key: BTreeMap<GroupKey, BTreeMap<RankId, Vec<EventRef>>> = BTreeMap::new();
    let mut report = UnmatchedReport::default();

    for trace in traces {
        for (index, ev) in trace.events.iter().enumerate() {
            let EventKind::Collective(op) = ev.kind else {
                continue;
            };
            let Some(ranks) = &ev.meta.participant_ranks else {
                report.events.push(unmatched(
                    trace,
                    index,
                    UnmatchedReason::MissingParticipants,
                ));
                continue;
            };
            let mut group = ranks.clone();
            group.sort();
            group.dedup();
            if !group.contains(&trace.rank) {
                report
                    .events
                    .push(unmatched(trace, index, UnmatchedReason::OwnerNotInGroup));
                continue;
            }
            by_key
                .entry((group, op))
                .or_default()
                .entry(trace.rank)
                .or_default()
                .push(EventRef {
                    rank: trace.rank,
                    index,
                });
        }
    }

    let trace_by_rank: BTreeMap<RankId, &RankTrace> = traces.iter().map(|t| (t.rank, t)).collect();
    let mut instances = Vec::new();
    for ((group, op), refs_by_rank) in by_key {
        let counts: Vec<usize> = group
            .iter()
            .map(|r| refs_by_rank.get(r).map_or(0, Vec::len))
            .collect();
        let complete = *counts.iter().min().unwrap_or(&0);
        for occurrence in 0..complete {
            let members: BTreeMap<RankId, EventRef> = group
                .iter()
                .map(|r| (*r, refs_by_rank[r][occurrence]))
                .collect();
            instances.push(CommInstance {
                instance_id: instances.len() as u64,
                kind: EventKind::Collective(op),
                group: group.clone(),
                occurrence_index: occurrence as u32,
                members,
            });
        }
        // Leftover occurrences signal a truncated or corrupt trace.
        for (rank, refs) in &refs_by_rank {
            for r in refs.iter().skip(complete) {
                report.events.push(unmatched(
                    trace_by_rank[rank],
                    r.index,
                    UnmatchedReason::OccurrenceCountMismatch {
                        expected: complete as u64,
                        got: refs.len() as u64,
                    },
                ));
            }
        }
    }
    MatchResult {
        instances,
        unmatched: report,
    }
}

/// Matches the k-th send from rank a to rank b with the k-th recv on rank b
/// from rank a. A payload disagreement inside a matched pair is a data
/// integrity error and aborts matching.
pub fn match_p2p(traces: &[RankTrace]) -> Result<MatchResult, DependencyError> {
    type Pair = (RankId, RankId); // (src, dst)
    let mut sends: BTreeMap<Pair, Vec<(EventRef, u64)>> = BTreeMap::new();
    let mut recvs: BTreeMap<Pair, Vec<(EventRef, u64)>> = BTreeMap::new();
    let mut report = UnmatchedReport::default();

    for trace in traces {
        for (index, ev) in trace.events.iter().enumerate() {
            if !ev.kind.is_p2p() {
                continue;
            }
            let Some(peer) = ev.meta.peer_rank else {
                report
                    .events
                    .push(unmatched(trace, index, UnmatchedReason::MissingPeer));
                continue;
            };
            if peer == trace.rank {
                report
                    .events
                    .push(unmatched(trace, index, UnmatchedReason::SelfPeer));
                continue;
            }
            let Some(payload) = ev.meta.payload_bytes else {
                report
                    .events
                    .push(unmatched(trace, index, UnmatchedReason::MissingPayload));
                continue;
            };
            let entry = (
                EventRef {
                    rank: trace.rank,
                    index,
                },
                payload,
            );
            match ev.kind {
                EventKind::P2PSend => sends.entry((trace.rank, peer)).or_default().push(entry),
                EventKind::P2PRecv => recvs.entry((peer, trace.rank)).or_default().push(entry),
                _ => unreachable!(),
            }
        }
    }

    let trace_by_rank: BTreeMap<RankId, &RankTrace> = traces.iter().map(|t| (t.rank, t)).collect();
    let pairs: std::collections::BTreeSet<Pair> =
        sends.keys().chain(recvs.keys()).copied().collect();
    let mut instances = Vec::new();
    for pair in pairs {
        let (src, dst) = pair;
        let empty = Vec::new();
        let s = sends.get(&pair).unwrap_or(&empty);
        let r = recvs.get(&pair).unwrap_or(&empty);
        let matched = s.len().min(r.len());
        for k in 0..matched {
            let (send_ref, send_bytes) = s[k];
            let (recv_ref, recv_bytes) = r[k];
            if send_bytes != recv_bytes {
                let send_ev = &trace_by_rank[&src].events[send_ref.index];
                let recv_ev = &trace_by_rank[&dst].events[recv_ref.index];
                return Err(DependencyError::PayloadMismatch {
                    src,
                    dst,
                    send_name: send_ev.name.clone(),
                    send_ts: send_ev.start_ts_us,
                    send_bytes,
                    recv_name: recv_ev.name.clone(),
                    recv_ts: recv_ev.start_ts_us,
                    recv_bytes,
                });
            }
            let mut group = vec![src, dst];
            group.sort();
            instances.push(CommInstance {
                instance_id: instances.len() as u64,
                kind: EventKind::P2PSend,
                group,
                occurrence_index: k as u32,
                members: [(src, send_ref), (dst, recv_ref)].into_iter().collect(),
            });
        }
        for (send_ref, _) in s.iter().skip(matched) {
            report.events.push(unmatched(
                trace_by_rank[&src],
                send_ref.index,
                UnmatchedReason::UnpairedSend,
            ));
        }
        for (recv_ref, _) in r.iter().skip(matched) {
            report.events.push(unmatched(
                trace_by_rank[&dst],
                recv_ref.index,
                UnmatchedReason::UnpairedRecv,
            ));
        }
    }
    Ok(MatchResult {
        instances,
        unmatched: report,
    })
}

/// Runs both matchers and renumbers instance ids so they are unique across
/// the combined result.
pub fn match_all(traces: &[RankTrace]) -> Result<MatchResult, DependencyError> {
    let mut collectives = match_collectives(traces);
    let p2p = match_p2p(traces)?;
    let offset = collectives.instances.len() as u64;
    for mut inst in p2p.instances {
        inst.instance_id += offset;
        collectives.instances.push(inst);
    }
    collectives.unmatched.events.extend(p2p.unmatched.events);
    Ok(collectives)
}

/// Writes each member event's `sync_instance_id` into the document's args.
/// Everything else is left untouched; unmatched events keep no id.
pub fn annotate(doc: &ChromeTraceDoc, instances: &[CommInstance]) -> ChromeTraceDoc {
    // Event refs index each rank's time-sorted sequence; rebuild that view
    // over the document (stable timestamp sort, matching doc_to_traces).
    let mut doc = doc.clone();
    let mut per_rank: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    let mut order: Vec<usize> = (0..doc.events.len()).collect();
    order.sort_by_key(|&i| doc.events[i].ts);
    for idx in order {
        per_rank.entry(doc.events[idx].pid).or_default().push(idx);
    }
    for inst in instances {
        for (rank, evref) in &inst.members {
            if let Some(indices) = per_rank.get(&rank.0) {
                if let Some(&doc_idx) = indices.get(evref.index) {
                    doc.events[doc_idx]
                        .args
                        .insert("sync_instance_id".into(), inst.instance_id.into());
                }
            }
        }
    }
    doc
}
