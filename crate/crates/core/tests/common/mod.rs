//! Shared pipeline driver for integration tests: simulate, merge, match,
//! align, producing everything the analysis stages consume.
#![allow(dead_code)]

use megatrace::alignment::{align, apply_alignment, AlignmentReport};
use megatrace::dependency::{annotate, match_all, CommInstance, UnmatchedReport};
use megatrace::model::{RankId, RankTrace};
use megatrace::sim::{run_sim, FaultSpec, GroundTruth, SimConfig};
use megatrace::trace_io::{merge_traces, ChromeTraceDoc};

pub struct Analyzed {
    pub traces: Vec<RankTrace>,
    pub truth: GroundTruth,
    /// Merged, annotated, aligned document.
    pub doc: ChromeTraceDoc,
    pub instances: Vec<CommInstance>,
    pub unmatched: UnmatchedReport,
    pub alignment: AlignmentReport,
}

pub fn analyze(cfg: &SimConfig, faults: &[FaultSpec]) -> Analyzed {
    let (traces, truth) = run_sim(cfg, faults).expect("simulation runs");
    let doc = merge_traces(&traces).expect("merge");
    let matched = match_all(&traces).expect("matching");
    let doc = annotate(&doc, &matched.instances);
    let (maps, alignment) = align(&traces, &matched.instances, RankId(0)).expect("align");
    let doc = apply_alignment(&doc, &maps);
    Analyzed {
        traces,
        truth,
        doc,
        instances: matched.instances,
        unmatched: matched.unmatched,
        alignment,
    }
}
