//! Simulator invariants checked against independently computed oracles:
//! closed-form event counts, causality on the true clock, send/recv
//! conservation, and fault locality.

mod common;

use megatrace::model::{EventKind, ParallelTopology, RankId};
use megatrace::sim::{run_sim, FaultSpec, SimConfig, Window};
use std::collections::BTreeMap;

/// Closed-form per-rank event count for the 1F1B workload: every rank runs
/// 2M computes and (tp > 1) 2M tensor collectives; edge stages see 2M P2P
/// events and interior stages 4M; plus one gradient allreduce per chunk
/// (dp > 1) and the two global collectives (world > 1).
fn expected_event_count(topo: &ParallelTopology, microbatches: u32, stage: u32) -> usize {
    let m = microbatches as usize;
    let mut count = 2 * m; // forward + backward computes
    if topo.tp_size > 1 {
        count += 2 * m;
    }
    let mut p2p = 0;
    if stage > 0 {
        p2p += 2 * m; // fwd recv + bwd send
    }
    if stage + 1 < topo.pp_size {
        p2p += 2 * m; // fwd send + bwd recv
    }
    count += p2p;
    if topo.dp_size > 1 {
        count += 1; // gradient allreduce (one chunk per stage)
    }
    if topo.world_size > 1 {
        count += 2; // param broadcast + grad-norm allreduce
    }
    count
}

#[test]
fn per_rank_event_counts_match_closed_form() {
    let cfg = SimConfig {
        jitter_pct: 0.0,
        ..Default::default()
    };
    let (traces, _) = run_sim(&cfg, &[]).unwrap();
    assert_eq!(traces.len(), 8);
    for trace in &traces {
        let coords = megatrace::model::rank_to_coords(trace.rank, &cfg.topo).unwrap();
        let expect = expected_event_count(&cfg.topo, cfg.num_microbatches, coords.pp_index);
        assert_eq!(
            trace.events.len(),
            expect,
            "rank {} event count",
            trace.rank
        );
    }
}

#[test]
fn per_rank_event_counts_match_closed_form_2x4x2() {
    let cfg = SimConfig {
        topo: ParallelTopology::new(2, 4, 2).unwrap(),
        jitter_pct: 0.0,
        ..Default::default()
    };
    let (traces, _) = run_sim(&cfg, &[]).unwrap();
    for trace in &traces {
        let coords = megatrace::model::rank_to_coords(trace.rank, &cfg.topo).unwrap();
        let expect = expected_event_count(&cfg.topo, cfg.num_microbatches, coords.pp_index);
        assert_eq!(trace.events.len(), expect, "rank {}", trace.rank);
    }
}

#[test]
fn causality_on_the_true_clock() {
    let cfg = SimConfig {
        topo: ParallelTopology::new(2, 4, 2).unwrap(),
        ..Default::default()
    };
    let (traces, truth) = run_sim(&cfg, &[]).unwrap();
    // Group the true times of p2p events by ground-truth instance: the
    // recv must end at or after the send starts.
    let mut spans: BTreeMap<u64, (Option<i64>, Option<i64>)> = BTreeMap::new();
    for trace in &traces {
        let truths = &truth.per_rank[&trace.rank];
        for (ev, tr) in trace.events.iter().zip(truths) {
            if let Some(id) = tr.instance_id {
                let entry = spans.entry(id).or_default();
                match ev.kind {
                    EventKind::P2PSend => entry.0 = Some(tr.true_start_us),
                    EventKind::P2PRecv => entry.1 = Some(tr.true_end_us),
                    _ => {}
                }
            }
        }
    }
    let mut checked = 0;
    for (send_start, recv_end) in spans.values() {
        if let (Some(s), Some(r)) = (send_start, recv_end) {
            assert!(r >= s, "recv ended before its send started");
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn send_recv_conservation_per_link() {
    let cfg = SimConfig {
        topo: ParallelTopology::new(2, 4, 2).unwrap(),
        ..Default::default()
    };
    let (traces, _) = run_sim(&cfg, &[]).unwrap();
    let mut sends: BTreeMap<(RankId, RankId), usize> = BTreeMap::new();
    let mut recvs: BTreeMap<(RankId, RankId), usize> = BTreeMap::new();
    for trace in &traces {
        for ev in &trace.events {
            match ev.kind {
                EventKind::P2PSend => {
                    *sends
                        .entry((trace.rank, ev.meta.peer_rank.unwrap()))
                        .or_default() += 1
                }
                EventKind::P2PRecv => {
                    *recvs
                        .entry((ev.meta.peer_rank.unwrap(), trace.rank))
                        .or_default() += 1
                }
                _ => {}
            }
        }
    }
    assert!(!sends.is_empty());
    assert_eq!(sends, recvs);
}

#[test]
fn single_downclock_leaves_unrelated_events_untouched() {
    // Pure-DP topology: ranks only meet at the gradient allreduce and the
    // global collectives, so a downclock on rank 2 must not move any other
    // rank's compute events.
    let cfg = SimConfig {
        topo: ParallelTopology::new(1, 1, 4).unwrap(),
        jitter_pct: 0.0,
        ..Default::default()
    };
    let fault = vec![FaultSpec::Downclock {
        rank: RankId(2),
        factor: 2.0,
        window: Window::default(),
    }];
    let (clean, _) = run_sim(&cfg, &[]).unwrap();
    let (faulty, _) = run_sim(&cfg, &fault).unwrap();
    for (a, b) in clean.iter().zip(&faulty) {
        assert_eq!(a.events.len(), b.events.len());
        for (ea, eb) in a.events.iter().zip(&b.events) {
            if a.rank != RankId(2) && eb.kind == EventKind::ComputeKernel {
                assert_eq!(ea, eb, "unrelated event moved on rank {}", a.rank);
            }
            if a.rank == RankId(2) && eb.kind == EventKind::ComputeKernel {
                assert_eq!(eb.duration_us, 2 * ea.duration_us);
            }
        }
    }
}

#[test]
fn downclock_window_limits_the_fault() {
    let cfg = SimConfig {
        topo: ParallelTopology::new(1, 1, 1).unwrap(),
        num_microbatches: 4,
        jitter_pct: 0.0,
        ..Default::default()
    };
    // Only events starting inside the window run slow.
    let fault = vec![FaultSpec::Downclock {
        rank: RankId(0),
        factor: 3.0,
        window: Window {
            start_us: 0,
            end_us: 1500,
        },
    }];
    let (traces, truth) = run_sim(&cfg, &fault).unwrap();
    let truths = &truth.per_rank[&RankId(0)];
    for (ev, tr) in traces[0].events.iter().zip(truths) {
        let elapsed = tr.true_start_us - megatrace::sim::BASE_US;
        if elapsed < 1500 {
            assert_eq!(ev.duration_us, 3000, "inside window");
        } else {
            assert_eq!(ev.duration_us, 1000, "outside window");
        }
    }
}
