//! Coordinator protocol properties: the conflicting-peer scenario under
//! exhaustive interleavings, safety (no group fires before every member
//! registered), ascending execution order, liveness over seeded random
//! schedules, and the exact exchange payload bound.

use megatrace::fbd::{
    coordinator_harness, run_harness, CommGroupSpec, ExecutionLog, RankMapping, VirtualRank,
    WorkerScript,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// The conflicting-request scenario: one peer wants to talk to rank 2
/// while rank 2 first intends to talk to someone else.
fn conflict_setup(rank2_first: usize) -> (Vec<WorkerScript>, Vec<CommGroupSpec>, RankMapping) {
    let groups = vec![
        CommGroupSpec::new(0, vec![VirtualRank::forward(0), VirtualRank::forward(2)]).unwrap(),
        CommGroupSpec::new(1, vec![VirtualRank::forward(1), VirtualRank::forward(2)]).unwrap(),
    ];
    let scripts = vec![
        WorkerScript {
            vrank: VirtualRank::forward(0),
            requests: vec![0],
        },
        WorkerScript {
            vrank: VirtualRank::forward(1),
            requests: vec![1],
        },
        WorkerScript {
            vrank: VirtualRank::forward(2),
            requests: if rank2_first == 0 {
                vec![0, 1]
            } else {
                vec![1, 0]
            },
        },
    ];
    let mapping = RankMapping::colocated(&[0, 1, 2]).unwrap();
    (scripts, groups, mapping)
}

fn assert_safety_and_order(log: &ExecutionLog) {
    // A group never executes before every member registered, and within a
    // round executed ids are strictly ascending.
    let mut registered: BTreeMap<usize, usize> = BTreeMap::new(); // group -> count seen
    for round in &log.rounds {
        for (_, g) in &round.registered {
            *registered.entry(*g).or_default() += 1;
        }
        let mut prev: Option<usize> = None;
        for &g in &round.executed {
            if let Some(p) = prev {
                assert!(g > p, "round {}: executed ids not ascending", round.round);
            }
            prev = Some(g);
            let seen = registered.get(&g).copied().unwrap_or(0);
            assert!(seen > 0, "group {g} executed without registrations");
            registered.insert(g, 0); // bits cleared on execution
        }
    }
}

#[test]
fn conflicting_requests_resolve_under_all_two_round_interleavings() {
    // Delay each of the four registration events by zero or one round, in
    // every combination, for both request orders of the shared rank.
    for rank2_first in [0usize, 1] {
        for pattern in 0..16u32 {
            let (scripts, groups, mapping) = conflict_setup(rank2_first);
            let delays: Vec<u32> = (0..4).map(|i| (pattern >> i) & 1).collect();
            // Registration event index per worker: w0 -> 0, w1 -> 1,
            // w2 first -> 2, w2 second -> 3.
            let mut w2_reg = 0usize;
            let log = run_harness(&scripts, &groups, &mapping, |_round, vrank, deferrals| {
                let event = match vrank.value {
                    0 => 0,
                    1 => 1,
                    _ => 2 + w2_reg,
                };
                let go = deferrals >= delays[event];
                if go && vrank.value == 2 {
                    w2_reg += 1;
                }
                go
            })
            .unwrap_or_else(|e| panic!("pattern {pattern:04b}, order {rank2_first}: {e}"));
            let mut executed = log.executed_groups();
            executed.sort();
            assert_eq!(executed, vec![0, 1], "pattern {pattern:04b}");
            assert_safety_and_order(&log);
        }
    }
}

#[test]
fn thousand_random_schedules_run_without_deadlock() {
    // 8 virtual ranks (4 forward + 4 backward over 4 GPUs), 6 groups.
    let mapping = RankMapping::colocated(&[0, 1, 2, 3]).unwrap();
    let f = VirtualRank::forward;
    let b = VirtualRank::backward;
    let groups = vec![
        CommGroupSpec::new(0, vec![f(0), f(1)]).unwrap(),
        CommGroupSpec::new(1, vec![f(2), f(3)]).unwrap(),
        CommGroupSpec::new(2, vec![b(0), b(2)]).unwrap(),
        CommGroupSpec::new(3, vec![b(1), b(3)]).unwrap(),
        CommGroupSpec::new(4, vec![f(0), f(1), f(2), f(3)]).unwrap(),
        CommGroupSpec::new(5, vec![b(0), b(1), b(2), b(3)]).unwrap(),
    ];
    let all_vranks: Vec<VirtualRank> = (0..4).map(f).chain((0..4).map(b)).collect();

    for seed in 0..1000u64 {
        // A globally consistent program: a random sequence of group
        // occurrences, projected onto each member's script.
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E3779B9).wrapping_add(1));
        let program_len = rng.gen_range(1..=8);
        let mut scripts: BTreeMap<VirtualRank, Vec<usize>> =
            all_vranks.iter().map(|v| (*v, Vec::new())).collect();
        let mut program = Vec::new();
        for _ in 0..program_len {
            let g = rng.gen_range(0..groups.len());
            program.push(g);
            for member in &groups[g].members {
                scripts.get_mut(member).unwrap().push(g);
            }
        }
        let scripts: Vec<WorkerScript> = scripts
            .into_iter()
            .map(|(vrank, requests)| WorkerScript { vrank, requests })
            .collect();

        let log = coordinator_harness(&scripts, &groups, &mapping, seed)
            .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert_safety_and_order(&log);
        assert_eq!(
            log.exchange_payload_bits,
            6 * 8,
            "payload must be exactly groups x vec_len bits"
        );
        let mut executed = log.executed_groups();
        executed.sort();
        let mut expected = program.clone();
        expected.sort();
        assert_eq!(executed, expected, "seed {seed}: every occurrence executes");
    }
}

#[test]
fn exchange_payload_is_independent_of_pending_request_count() {
    use megatrace::fbd::{exchange, CoordinatorState};
    let mapping = RankMapping::colocated(&[0, 1, 2, 3]).unwrap();
    let groups: Vec<CommGroupSpec> = (0..6)
        .map(|i| {
            CommGroupSpec::new(
                i,
                vec![
                    VirtualRank::forward((i % 4) as u32),
                    VirtualRank::forward(((i + 1) % 4) as u32),
                ],
            )
            .unwrap()
        })
        .collect();
    let mut states: Vec<CoordinatorState> = (0..4)
        .map(|_| CoordinatorState::new(&groups, &mapping).unwrap())
        .collect();
    let empty_bits = exchange(&mut states).unwrap();
    states[0].register(0, VirtualRank::forward(0)).unwrap();
    states[1].register(0, VirtualRank::forward(1)).unwrap();
    let busy_bits = exchange(&mut states).unwrap();
    assert_eq!(empty_bits, 6 * 8);
    assert_eq!(busy_bits, empty_bits);
}
