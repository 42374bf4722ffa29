//! Trace format fidelity: parse/emit round trips (property-tested), merge
//! count preservation, and schema validation of simulator output.

mod common;

use megatrace::model::{CollectiveOp, EventKind, EventMeta, Phase, RankId, RankTrace, TraceEvent};
use megatrace::sim::{run_sim, SimConfig};
use megatrace::trace_io::{
    emit_chrome_trace, emit_rank_trace, merge_traces, parse_chrome, parse_rank_trace,
    validate_chrome_schema,
};
use proptest::prelude::*;

fn arb_kind() -> impl Strategy<Value = EventKind> {
    prop_oneof![
        Just(EventKind::ComputeKernel),
        Just(EventKind::Collective(CollectiveOp::AllReduce)),
        Just(EventKind::Collective(CollectiveOp::AllGather)),
        Just(EventKind::Collective(CollectiveOp::ReduceScatter)),
        Just(EventKind::Collective(CollectiveOp::Broadcast)),
        Just(EventKind::P2PSend),
        Just(EventKind::P2PRecv),
    ]
}

fn arb_meta() -> impl Strategy<Value = EventMeta> {
    (
        proptest::option::of(0u32..64),
        proptest::option::of(0u32..8),
        proptest::option::of(0u64..1 << 40),
        proptest::option::of(proptest::collection::vec(0u32..16, 1..5)),
        proptest::option::of(0u32..16),
        proptest::option::of(prop_oneof![
            Just(Phase::Forward),
            Just(Phase::Backward),
            Just(Phase::WarmUp),
            Just(Phase::SteadyState)
        ]),
        proptest::option::of(0u64..1000),
    )
        .prop_map(
            |(microbatch_id, chunk_id, payload_bytes, participants, peer, phase, sync)| EventMeta {
                microbatch_id,
                chunk_id,
                payload_bytes,
                participant_ranks: participants.map(|mut v: Vec<u32>| {
                    v.sort();
                    v.dedup();
                    v.into_iter().map(RankId).collect()
                }),
                peer_rank: peer.map(RankId),
                phase,
                sync_instance_id: sync,
                extra: Default::default(),
            },
        )
}

fn arb_event(rank: u32) -> impl Strategy<Value = TraceEvent> {
    (
        "[a-z_]{1,12}",
        arb_kind(),
        0i64..1_000_000,
        0u64..100_000,
        arb_meta(),
    )
        .prop_map(move |(name, kind, ts, dur, meta)| TraceEvent {
            name,
            kind,
            rank: RankId(rank),
            start_ts_us: ts,
            duration_us: dur,
            meta,
        })
}

proptest! {
    #[test]
    fn rank_trace_round_trips(events in proptest::collection::vec(arb_event(3), 0..20)) {
        let trace = RankTrace::new(RankId(3), events);
        let bytes = emit_rank_trace(&trace);
        let reparsed = parse_rank_trace(&bytes).unwrap();
        prop_assert_eq!(reparsed, trace);
    }

    #[test]
    fn merged_doc_emit_parse_emit_is_stable(
        a in proptest::collection::vec(arb_event(0), 0..10),
        b in proptest::collection::vec(arb_event(1), 0..10),
    ) {
        let doc = merge_traces(&[RankTrace::new(RankId(0), a), RankTrace::new(RankId(1), b)]).unwrap();
        let first = emit_chrome_trace(&doc);
        let reparsed = parse_chrome(&first).unwrap();
        prop_assert_eq!(&reparsed, &doc);
        let second = emit_chrome_trace(&reparsed);
        prop_assert_eq!(first, second);
    }

    #[test]
    fn merge_preserves_the_event_multiset(
        a in proptest::collection::vec(arb_event(0), 0..10),
        b in proptest::collection::vec(arb_event(1), 0..10),
    ) {
        let ta = RankTrace::new(RankId(0), a);
        let tb = RankTrace::new(RankId(1), b);
        let doc = merge_traces(&[ta.clone(), tb.clone()]).unwrap();
        prop_assert_eq!(doc.events.len(), ta.events.len() + tb.events.len());
        let mut want: Vec<(u32, String, i64, u64)> = ta.events.iter().chain(&tb.events)
            .map(|e| (e.rank.0, e.name.clone(), e.start_ts_us, e.duration_us))
            .collect();
        let mut got: Vec<(u32, String, i64, u64)> = doc.events.iter()
            .map(|e| (e.pid, e.name.clone(), e.ts, e.dur))
            .collect();
        want.sort();
        got.sort();
        prop_assert_eq!(want, got);
        // Globally sorted by timestamp.
        prop_assert!(doc.events.windows(2).all(|w| w[0].ts <= w[1].ts));
    }
}

#[test]
fn simulator_emitted_traces_reparse_identically() {
    let cfg = SimConfig::default();
    let (traces, _) = run_sim(&cfg, &[]).unwrap();
    assert_eq!(traces.len(), 8);
    for trace in &traces {
        let bytes = emit_rank_trace(trace);
        let reparsed = parse_rank_trace(&bytes).unwrap();
        assert_eq!(&reparsed, trace);
    }
}

#[test]
fn merged_simulator_trace_passes_schema_validation() {
    let cfg = SimConfig::default();
    let (traces, _) = run_sim(&cfg, &[]).unwrap();
    let doc = merge_traces(&traces).unwrap();
    let total: usize = traces.iter().map(|t| t.events.len()).sum();
    assert_eq!(doc.events.len(), total);
    let bytes = emit_chrome_trace(&doc);
    validate_chrome_schema(&bytes).expect("schema-clean merged trace");
}
