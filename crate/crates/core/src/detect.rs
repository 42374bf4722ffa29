//! Multi-stage straggler localization over an aligned, annotated trace.
//!
//! Stage 1 compares compute-kernel durations across data-parallel peers
//! (ranks with identical PP and TP indices execute identical kernel
//! sequences) and marks ranks with too many slow operations as candidates.
//! Stage 2 checks whether a candidate consistently enters its collectives
//! last: a genuine fault source is the slowest member of every synchronous
//! group it joins, while victims merely wait. Stage 3 computes effective
//! bandwidth (payload / observed latency) per P2P transfer and flags
//! pipeline links whose warm-up bandwidth is degraded against the
//! same-direction median.

use crate::dependency::CommInstance;
use crate::model::{
    rank_to_coords, EventKind, ParallelTopology, Phase, RankId, RankTrace, TraceEvent,
};
use crate::trace_io::{doc_to_traces, ChromeTraceDoc, TraceIoError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Detection thresholds. The detection stages are scale-free; these knobs
/// pin down "significantly longer" and "noticeably later" numerically and
/// are all tunable from the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    /// A kernel is slow when its duration exceeds this multiple of the
    /// peer median...
    pub slow_ratio: f64,
    /// ...and exceeds the median by at least this margin.
    pub slow_margin_us: f64,
    /// Candidate threshold on the per-rank fraction of slow operations.
    pub candidate_fraction: f64,
    /// A collective entry is late when it trails the earliest member by
    /// more than this margin (and is strictly the last member).
    pub late_start_margin_us: f64,
    /// Fraction of late collective entries confirming a compute root cause.
    pub late_consistency: f64,
    /// A link is degraded when its median warm-up bandwidth falls below
    /// this factor of the same-direction median.
    pub bw_degrade_factor: f64,
    /// Minimum comparisons before a verdict is trusted.
    pub min_samples: u32,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            slow_ratio: 1.5,
            slow_margin_us: 50.0,
            candidate_fraction: 0.3,
            late_start_margin_us: 100.0,
            late_consistency: 0.7,
            bw_degrade_factor: 0.7,
            min_samples: 10,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        let ok = self.slow_ratio > 1.0
            && self.slow_margin_us >= 0.0
            && self.candidate_fraction > 0.0
            && self.candidate_fraction <= 1.0
            && self.late_start_margin_us >= 0.0
            && self.late_consistency > 0.0
            && self.late_consistency <= 1.0
            && self.bw_degrade_factor > 0.0
            && self.bw_degrade_factor < 1.0
            && self.min_samples > 0;
        if ok {
            Ok(())
        } else {
            Err(DetectError::InvalidConfig)
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DetectError {
    #[error("detect config out of bounds")]
    InvalidConfig,
    #[error("trace references rank {rank} outside topology of world size {world_size}")]
    RankOutsideTopology { rank: RankId, world_size: u32 },
    #[error(transparent)]
    TraceIo(#[from] TraceIoError),
}

/// Stage-1 result: how often a rank's kernels ran slow versus its peers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowOpStats {
    pub rank: RankId,
    pub total_ops: u64,
    pub slow_ops: u64,
    pub slow_fraction: f64,
}

/// Stage-2 result for one rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateStartStats {
    pub rank: RankId,
    pub joined: u64,
    pub late: u64,
    pub late_start_fraction: f64,
    /// False when the rank joined fewer than `min_samples` collectives;
    /// such candidates are neither confirmed nor exonerated.
    pub sufficient: bool,
}

/// One effective-bandwidth measurement for a matched P2P transfer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSample {
    pub instance_id: u64,
    pub src: RankId,
    pub dst: RankId,
    pub payload_bytes: u64,
    /// Send start to recv end on the aligned timeline; includes queueing.
    pub latency_us: u64,
    pub effective_bw_bytes_per_us: f64,
    pub phase: Phase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    ComputeSlow,
    LinkSlow,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub late_start_fraction: f64,
    pub bw_ratio_vs_median: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootCause {
    pub rank: RankId,
    pub evidence: Evidence,
}

/// Combined verdicts of the three stages.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub candidates: Vec<SlowOpStats>,
    pub root_causes: Vec<RootCause>,
    /// Candidates that turned out to be victims waiting on the true source.
    pub exonerated: Vec<RankId>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

type KernelKey = (String, Option<u32>, Option<u32>);

fn peer_compare_traces(
    traces: &[RankTrace],
    topo: &ParallelTopology,
    cfg: &DetectConfig,
) -> Result<Vec<SlowOpStats>, DetectError> {
    if topo.dp_size < 2 {
        return Ok(Vec::new());
    }
    for t in traces {
        if t.rank.0 >= topo.world_size {
            return Err(DetectError::RankOutsideTopology {
                rank: t.rank,
                world_size: topo.world_size,
            });
        }
    }
    // Peer classes: ranks sharing (pp, tp) run identical kernel sequences.
    let mut classes: BTreeMap<(u32, u32), Vec<RankId>> = BTreeMap::new();
    for r in topo.ranks() {
        let c = rank_to_coords(r, topo).expect("rank in range");
        classes.entry((c.pp_index, c.tp_index)).or_default().push(r);
    }
    let by_rank: BTreeMap<RankId, &RankTrace> = traces.iter().map(|t| (t.rank, t)).collect();

    let mut totals: BTreeMap<RankId, (u64, u64)> = BTreeMap::new();
    for members in classes.values() {
        // Kernel identity across peers is (name, microbatch, chunk), not
        // wall order, tolerating benign interleaving.
        let mut per_rank: BTreeMap<RankId, BTreeMap<KernelKey, Vec<f64>>> = BTreeMap::new();
        for rank in members {
            let mut kernels: BTreeMap<KernelKey, Vec<f64>> = BTreeMap::new();
            if let Some(trace) = by_rank.get(rank) {
                for ev in &trace.events {
                    if ev.kind == EventKind::ComputeKernel {
                        let key = (ev.name.clone(), ev.meta.microbatch_id, ev.meta.chunk_id);
                        kernels.entry(key).or_default().push(ev.duration_us as f64);
                    }
                }
            }
            per_rank.insert(*rank, kernels);
            totals.entry(*rank).or_insert((0, 0));
        }
        let keys: std::collections::BTreeSet<KernelKey> =
            per_rank.values().flat_map(|m| m.keys().cloned()).collect();
        for key in keys {
            let counts: Vec<usize> = members
                .iter()
                .map(|r| per_rank[r].get(&key).map_or(0, Vec::len))
                .collect();
            let common = counts.iter().copied().min().unwrap_or(0);
            if counts.iter().any(|&c| c != common) {
                log::warn!(
                    "peer kernel sequences of unequal length for {key:?}; comparing common prefix of {common}"
                );
            }
            for k in 0..common {
                for rank in members {
                    let own = per_rank[rank][&key][k];
                    let mut peers: Vec<f64> = members
                        .iter()
                        .filter(|r| *r != rank)
                        .map(|r| per_rank[r][&key][k])
                        .collect();
                    let med = median(&mut peers);
                    let entry = totals.get_mut(rank).expect("class member");
                    entry.0 += 1;
                    if own > cfg.slow_ratio * med && own - med > cfg.slow_margin_us {
                        entry.1 += 1;
                    }
                }
            }
        }
    }
    Ok(totals
        .into_iter()
        .map(|(rank, (total, slow))| SlowOpStats {
            rank,
            total_ops: total,
            slow_ops: slow,
            slow_fraction: if total > 0 {
                slow as f64 / total as f64
            } else {
                0.0
            },
        })
        .collect())
}

/// Stage 1: per-rank slow-operation statistics from data-parallel peer
/// comparison on the aligned document.
pub fn peer_compare(
    doc: &ChromeTraceDoc,
    topo: &ParallelTopology,
    cfg: &DetectConfig,
) -> Result<Vec<SlowOpStats>, DetectError> {
    cfg.validate()?;
    peer_compare_traces(&doc_to_traces(doc)?, topo, cfg)
}

fn resolve<'a>(
    by_rank: &BTreeMap<RankId, &'a RankTrace>,
    rank: RankId,
    index: usize,
) -> Option<&'a TraceEvent> {
    by_rank.get(&rank).and_then(|t| t.events.get(index))
}

fn collective_start_lag_traces(
    traces: &[RankTrace],
    instances: &[CommInstance],
    candidates: &[RankId],
    cfg: &DetectConfig,
) -> BTreeMap<RankId, LateStartStats> {
    let by_rank: BTreeMap<RankId, &RankTrace> = traces.iter().map(|t| (t.rank, t)).collect();
    let mut out: BTreeMap<RankId, LateStartStats> = candidates
        .iter()
        .map(|r| {
            (
                *r,
                LateStartStats {
                    rank: *r,
                    joined: 0,
                    late: 0,
                    late_start_fraction: 0.0,
                    sufficient: false,
                },
            )
        })
        .collect();
    for inst in instances {
        if !inst.kind.is_collective() {
            continue;
        }
        let starts: BTreeMap<RankId, i64> = inst
            .members
            .iter()
            .filter_map(|(r, evref)| {
                resolve(&by_rank, *r, evref.index).map(|e| (*r, e.start_ts_us))
            })
            .collect();
        if starts.len() < 2 {
            continue;
        }
        let min_start = starts.values().copied().min().expect("non-empty");
        for (rank, stats) in out.iter_mut() {
            let Some(&own) = starts.get(rank) else {
                continue;
            };
            stats.joined += 1;
            let strictly_last = starts.iter().all(|(r, s)| r == rank || *s < own);
            if strictly_last && (own - min_start) as f64 > cfg.late_start_margin_us {
                stats.late += 1;
            }
        }
    }
    for stats in out.values_mut() {
        if stats.joined > 0 {
            stats.late_start_fraction = stats.late as f64 / stats.joined as f64;
        }
        stats.sufficient = stats.joined >= cfg.min_samples as u64;
    }
    out
}

/// Stage 2: for each candidate, the fraction of joined collectives it
/// entered strictly last by more than the margin.
pub fn collective_start_lag(
    doc: &ChromeTraceDoc,
    instances: &[CommInstance],
    candidates: &[RankId],
    cfg: &DetectConfig,
) -> Result<BTreeMap<RankId, LateStartStats>, DetectError> {
    cfg.validate()?;
    Ok(collective_start_lag_traces(
        &doc_to_traces(doc)?,
        instances,
        candidates,
        cfg,
    ))
}

fn p2p_bandwidth_traces(traces: &[RankTrace], instances: &[CommInstance]) -> Vec<BandwidthSample> {
    let by_rank: BTreeMap<RankId, &RankTrace> = traces.iter().map(|t| (t.rank, t)).collect();
    // Warm-up window per rank: everything before its first backward event.
    let mut first_bwd: BTreeMap<RankId, i64> = BTreeMap::new();
    for t in traces {
        for ev in &t.events {
            if ev.kind == EventKind::ComputeKernel && ev.meta.phase == Some(Phase::Backward) {
                first_bwd.insert(t.rank, ev.start_ts_us);
                break;
            }
        }
    }
    let mut samples = Vec::new();
    for inst in instances {
        if inst.kind != EventKind::P2PSend {
            continue;
        }
        let mut send: Option<(RankId, &TraceEvent)> = None;
        let mut recv: Option<(RankId, &TraceEvent)> = None;
        for (r, evref) in &inst.members {
            if let Some(ev) = resolve(&by_rank, *r, evref.index) {
                match ev.kind {
                    EventKind::P2PSend => send = Some((*r, ev)),
                    EventKind::P2PRecv => recv = Some((*r, ev)),
                    _ => {}
                }
            }
        }
        let (Some((src, send_ev)), Some((dst, recv_ev))) = (send, recv) else {
            continue;
        };
        let latency = recv_ev.end_ts_us() - send_ev.start_ts_us;
        if latency <= 0 {
            log::warn!(
                "discarding P2P instance {} with non-positive aligned latency {latency} us (clock anomaly)",
                inst.instance_id
            );
            continue;
        }
        let Some(payload) = send_ev.meta.payload_bytes else {
            continue;
        };
        let phase = match first_bwd.get(&src) {
            Some(&first) if send_ev.start_ts_us >= first => Phase::SteadyState,
            _ => Phase::WarmUp,
        };
        samples.push(BandwidthSample {
            instance_id: inst.instance_id,
            src,
            dst,
            payload_bytes: payload,
            latency_us: latency as u64,
            effective_bw_bytes_per_us: payload as f64 / latency as f64,
            phase,
        });
    }
    samples
}

/// Stage 3: one effective-bandwidth sample per matched P2P instance,
/// tagged warm-up when the send precedes the sender's first backward.
pub fn p2p_bandwidth(
    doc: &ChromeTraceDoc,
    instances: &[CommInstance],
    cfg: &DetectConfig,
) -> Result<Vec<BandwidthSample>, DetectError> {
    cfg.validate()?;
    Ok(p2p_bandwidth_traces(&doc_to_traces(doc)?, instances))
}

struct LinkAnalysis {
    /// Per rank, its worst egress link median relative to the direction
    /// median (1.0 when the rank sends nothing).
    ratio_by_rank: BTreeMap<RankId, f64>,
    link_slow: Vec<RankId>,
}

type Link = (RankId, RankId);

fn analyze_links(
    samples: &[BandwidthSample],
    by_event_phase: &BTreeMap<u64, Phase>,
    cfg: &DetectConfig,
) -> LinkAnalysis {
    // Group per (traffic direction, directed link); prefer warm-up samples,
    // falling back to all samples for links that never sent during warm-up.
    let mut warm: BTreeMap<(Phase, Link), Vec<f64>> = BTreeMap::new();
    let mut all: BTreeMap<(Phase, Link), Vec<f64>> = BTreeMap::new();
    for s in samples {
        let dir = by_event_phase
            .get(&s.instance_id)
            .copied()
            .unwrap_or(Phase::Forward);
        let key = (dir, (s.src, s.dst));
        all.entry(key)
            .or_default()
            .push(s.effective_bw_bytes_per_us);
        if s.phase == Phase::WarmUp {
            warm.entry(key)
                .or_default()
                .push(s.effective_bw_bytes_per_us);
        }
    }
    let mut link_median: BTreeMap<(Phase, Link), f64> = BTreeMap::new();
    for (key, values) in &all {
        let mut chosen = warm.get(key).unwrap_or(values).clone();
        link_median.insert(*key, median(&mut chosen));
    }
    let mut by_dir: BTreeMap<Phase, Vec<(Link, f64)>> = BTreeMap::new();
    for ((dir, link), med) in &link_median {
        by_dir.entry(*dir).or_default().push((*link, *med));
    }
    let mut ratio_by_rank: BTreeMap<RankId, f64> = BTreeMap::new();
    let mut link_slow: std::collections::BTreeSet<RankId> = Default::default();
    for links in by_dir.values() {
        let mut meds: Vec<f64> = links.iter().map(|(_, m)| *m).collect();
        let dir_median = median(&mut meds);
        if dir_median <= 0.0 {
            continue;
        }
        for ((src, _dst), med) in links {
            let ratio = med / dir_median;
            let entry = ratio_by_rank.entry(*src).or_insert(1.0);
            *entry = entry.min(ratio);
            if *med < cfg.bw_degrade_factor * dir_median {
                link_slow.insert(*src);
            }
        }
    }
    LinkAnalysis {
        ratio_by_rank,
        link_slow: link_slow.into_iter().collect(),
    }
}

/// Runs stages 1 to 3 and combines the verdicts: ComputeSlow for candidates
/// that consistently start collectives last, LinkSlow for senders of
/// degraded pipeline links, Both when the evidence coexists. Candidates
/// failing both stages are victims and exonerated.
pub fn diagnose(
    doc: &ChromeTraceDoc,
    instances: &[CommInstance],
    topo: &ParallelTopology,
    cfg: &DetectConfig,
) -> Result<DiagnosisReport, DetectError> {
    cfg.validate()?;
    let traces = doc_to_traces(doc)?;
    let stats = peer_compare_traces(&traces, topo, cfg)?;
    let candidates: Vec<SlowOpStats> = stats
        .into_iter()
        .filter(|s| {
            s.slow_fraction > cfg.candidate_fraction && s.total_ops >= cfg.min_samples as u64
        })
        .collect();

    let samples = p2p_bandwidth_traces(&traces, instances);
    // Traffic direction of each P2P instance from the send event's phase
    // metadata (activation vs gradient traffic).
    let by_rank: BTreeMap<RankId, &RankTrace> = traces.iter().map(|t| (t.rank, t)).collect();
    let mut send_phase: BTreeMap<u64, Phase> = BTreeMap::new();
    for inst in instances {
        if inst.kind != EventKind::P2PSend {
            continue;
        }
        for (r, evref) in &inst.members {
            if let Some(ev) = resolve(&by_rank, *r, evref.index) {
                if ev.kind == EventKind::P2PSend {
                    send_phase.insert(inst.instance_id, ev.meta.phase.unwrap_or(Phase::Forward));
                }
            }
        }
    }
    let links = analyze_links(&samples, &send_phase, cfg);

    let mut lag_targets: Vec<RankId> = candidates.iter().map(|c| c.rank).collect();
    for r in &links.link_slow {
        if !lag_targets.contains(r) {
            lag_targets.push(*r);
        }
    }
    lag_targets.sort();
    let lag = collective_start_lag_traces(&traces, instances, &lag_targets, cfg);

    let mut root_causes: Vec<RootCause> = Vec::new();
    let mut exonerated: Vec<RankId> = Vec::new();
    for cand in &candidates {
        let stats = &lag[&cand.rank];
        let is_link_slow = links.link_slow.contains(&cand.rank);
        let compute_confirmed =
            stats.sufficient && stats.late_start_fraction >= cfg.late_consistency;
        let verdict = match (compute_confirmed, is_link_slow) {
            (true, true) => Some(Verdict::Both),
            (true, false) => Some(Verdict::ComputeSlow),
            (false, true) => Some(Verdict::LinkSlow),
            (false, false) => {
                if stats.sufficient {
                    exonerated.push(cand.rank);
                }
                None
            }
        };
        if let Some(verdict) = verdict {
            root_causes.push(RootCause {
                rank: cand.rank,
                evidence: Evidence {
                    late_start_fraction: stats.late_start_fraction,
                    bw_ratio_vs_median: links.ratio_by_rank.get(&cand.rank).copied().unwrap_or(1.0),
                    verdict,
                },
            });
        }
    }
    for rank in &links.link_slow {
        if candidates.iter().any(|c| c.rank == *rank) {
            continue; // already combined above
        }
        let fraction = lag.get(rank).map_or(0.0, |s| s.late_start_fraction);
        root_causes.push(RootCause {
            rank: *rank,
            evidence: Evidence {
                late_start_fraction: fraction,
                bw_ratio_vs_median: links.ratio_by_rank.get(rank).copied().unwrap_or(1.0),
                verdict: Verdict::LinkSlow,
            },
        });
    }
    root_causes.sort_by_key(|r| r.rank);
    exonerated.sort();
    Ok(DiagnosisReport {
        candidates,
        root_causes,
        exonerated,
    })
}
