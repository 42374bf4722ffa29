//! The standard simulation suite: sixteen scenarios (fault-free,
//! downclocked, link-degraded, and mixed) on topologies up to (2, 4, 2)
//! with eight microbatches, used to exercise straggler detection end to
//! end against known injections.

use super::{FaultSpec, LinkDirection, SimConfig, Window};
use crate::model::{ParallelTopology, RankId};
use serde::{Deserialize, Serialize};

/// What the detector is expected to report for a scenario.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Expectation {
    /// Ranks that must be reported as compute root causes.
    pub compute_slow: Vec<RankId>,
    /// Ranks that must be reported as link root causes.
    pub link_slow: Vec<RankId>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: &'static str,
    pub config: SimConfig,
    pub faults: Vec<FaultSpec>,
    pub expect: Expectation,
}

fn config(tp: u32, pp: u32, dp: u32, seed: u64) -> SimConfig {
    SimConfig {
        topo: ParallelTopology::new(tp, pp, dp).expect("valid topology"),
        seed,
        ..Default::default()
    }
}

fn downclock(rank: u32, factor: f64) -> FaultSpec {
    FaultSpec::Downclock {
        rank: RankId(rank),
        factor,
        window: Window::default(),
    }
}

fn egress_degrade(rank: u32, bw_factor: f64) -> FaultSpec {
    FaultSpec::LinkDegrade {
        rank: RankId(rank),
        direction: LinkDirection::Egress,
        bw_factor,
        window: Window::default(),
    }
}

/// The sixteen-scenario oracle suite: 5 fault-free, 6 single downclock
/// (factors 1.5 to 3.0), 3 link degrades, 2 mixed.
pub fn standard_scenarios() -> Vec<Scenario> {
    let expect_compute = |rank: u32| Expectation {
        compute_slow: vec![RankId(rank)],
        link_slow: vec![],
    };
    let expect_link = |rank: u32| Expectation {
        compute_slow: vec![],
        link_slow: vec![RankId(rank)],
    };
    vec![
        // Fault-free baselines across seeds and shapes.
        Scenario {
            name: "healthy-2x2x2-a",
            config: config(2, 2, 2, 11),
            faults: vec![],
            expect: Expectation::default(),
        },
        Scenario {
            name: "healthy-2x2x2-b",
            config: config(2, 2, 2, 222),
            faults: vec![],
            expect: Expectation::default(),
        },
        Scenario {
            name: "healthy-2x4x2",
            config: config(2, 4, 2, 33),
            faults: vec![],
            expect: Expectation::default(),
        },
        Scenario {
            name: "healthy-1x4x2",
            config: config(1, 4, 2, 44),
            faults: vec![],
            expect: Expectation::default(),
        },
        Scenario {
            name: "healthy-1x2x4",
            config: config(1, 2, 4, 55),
            faults: vec![],
            expect: Expectation::default(),
        },
        // Single downclocked GPU, factors 1.5 to 3.0.
        Scenario {
            name: "downclock-1.5-r5-2x2x2",
            config: config(2, 2, 2, 66),
            faults: vec![downclock(5, 1.5)],
            expect: expect_compute(5),
        },
        Scenario {
            name: "downclock-1.8-r5-2x2x2",
            config: config(2, 2, 2, 77),
            faults: vec![downclock(5, 1.8)],
            expect: expect_compute(5),
        },
        Scenario {
            name: "downclock-2.0-r3-2x2x2",
            config: config(2, 2, 2, 88),
            faults: vec![downclock(3, 2.0)],
            expect: expect_compute(3),
        },
        Scenario {
            name: "downclock-2.2-r9-2x4x2",
            config: config(2, 4, 2, 99),
            faults: vec![downclock(9, 2.2)],
            expect: expect_compute(9),
        },
        Scenario {
            name: "downclock-2.6-r14-2x4x2",
            config: config(2, 4, 2, 1010),
            faults: vec![downclock(14, 2.6)],
            expect: expect_compute(14),
        },
        Scenario {
            name: "downclock-3.0-r0-2x2x2",
            config: config(2, 2, 2, 1111),
            faults: vec![downclock(0, 3.0)],
            expect: expect_compute(0),
        },
        // Degraded links (egress side of a forward pipeline link).
        Scenario {
            name: "link-0.5-r2-1x4x1",
            config: config(1, 4, 1, 1212),
            faults: vec![egress_degrade(2, 0.5)],
            expect: expect_link(2),
        },
        Scenario {
            name: "link-0.6-r4-2x4x2",
            config: config(2, 4, 2, 1313),
            faults: vec![egress_degrade(4, 0.6)],
            expect: expect_link(4),
        },
        Scenario {
            name: "link-0.4-r0-2x2x2",
            config: config(2, 2, 2, 1414),
            faults: vec![egress_degrade(0, 0.4)],
            expect: expect_link(0),
        },
        // Mixed faults: same rank, and two distinct ranks.
        Scenario {
            name: "mixed-r1-both-2x2x2",
            config: config(2, 2, 2, 1515),
            faults: vec![downclock(1, 2.0), egress_degrade(1, 0.5)],
            expect: Expectation {
                compute_slow: vec![RankId(1)],
                link_slow: vec![RankId(1)],
            },
        },
        Scenario {
            name: "mixed-r9-r4-2x4x2",
            config: config(2, 4, 2, 1616),
            faults: vec![downclock(9, 1.8), egress_degrade(4, 0.5)],
            expect: Expectation {
                compute_slow: vec![RankId(9)],
                link_slow: vec![RankId(4)],
            },
        },
    ]
}
