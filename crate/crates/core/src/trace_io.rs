//! Chrome Tracing format I/O: parses per-rank trace files, merges them into
//! a single time-ordered document, and emits/re-parses that document
//! losslessly.
//!
//! The merged document uses the JSON Object Format
//! (`{"traceEvents": [...]}`); the parser also accepts the bare array form.
//! Each rank is mapped to a separate `pid`, and events are placed on three
//! `tid` swimlanes: 0 compute, 1 collectives, 2 point-to-point.

use crate::model::{EventKind, EventMeta, Phase, RankId, RankTrace, TraceEvent};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// One complete ("ph":"X") event in the merged Chrome trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChromeEvent {
    pub name: String,
    pub cat: String,
    pub ph: String,
    pub ts: i64,
    pub dur: u64,
    pub pid: u32,
    pub tid: u32,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub args: Map<String, Value>,
}

/// A merged multi-rank trace document plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChromeTraceDoc {
    pub events: Vec<ChromeEvent>,
    pub metadata: Map<String, Value>,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceIoError {
    #[error("malformed JSON at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("schema error: missing required field `{field}`{at}")]
    MissingField { field: &'static str, at: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("duplicate rank {0} in merge input")]
    DuplicateRank(RankId),
}

fn parse_error(input: &[u8], err: &serde_json::Error) -> TraceIoError {
    // serde_json reports line/column; convert to a byte offset.
    let (line, col) = (err.line(), err.column());
    let mut offset = 0usize;
    for (i, l) in input.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            offset += col.saturating_sub(1);
            break;
        }
        offset += l.len() + 1;
    }
    TraceIoError::Parse {
        offset,
        message: err.to_string(),
    }
}

// args key names are part of the on-disk format; unknown keys round-trip.
const K_MICROBATCH: &str = "microbatch_id";
const K_CHUNK: &str = "chunk_id";
const K_PAYLOAD: &str = "payload_bytes";
const K_PARTICIPANTS: &str = "participant_ranks";
const K_PEER: &str = "peer_rank";
const K_PHASE: &str = "phase";
const K_SYNC: &str = "sync_instance_id";

fn phase_str(p: Phase) -> &'static str {
    match p {
        Phase::Forward => "forward",
        Phase::Backward => "backward",
        Phase::WarmUp => "warm_up",
        Phase::SteadyState => "steady_state",
    }
}

fn phase_from_str(s: &str) -> Option<Phase> {
    Some(match s {
        "forward" => Phase::Forward,
        "backward" => Phase::Backward,
        "warm_up" => Phase::WarmUp,
        "steady_state" => Phase::SteadyState,
        _ => return None,
    })
}

/// Encodes event metadata into Chrome trace `args`, fixed key order first,
/// then any preserved unknown keys.
pub fn meta_to_args(meta: &EventMeta) -> Map<String, Value> {
    let mut args = Map::new();
    if let Some(mb) = meta.microbatch_id {
        args.insert(K_MICROBATCH.into(), mb.into());
    }
    if let Some(c) = meta.chunk_id {
        args.insert(K_CHUNK.into(), c.into());
    }
    if let Some(p) = meta.payload_bytes {
        args.insert(K_PAYLOAD.into(), p.into());
    }
    if let Some(ranks) = &meta.participant_ranks {
        args.insert(
            K_PARTICIPANTS.into(),
            Value::Array(ranks.iter().map(|r| r.0.into()).collect()),
        );
    }
    if let Some(peer) = meta.peer_rank {
        args.insert(K_PEER.into(), peer.0.into());
    }
    if let Some(phase) = meta.phase {
        args.insert(K_PHASE.into(), phase_str(phase).into());
    }
    if let Some(id) = meta.sync_instance_id {
        args.insert(K_SYNC.into(), id.into());
    }
    for (k, v) in &meta.extra {
        args.insert(k.clone(), v.clone());
    }
    args
}

fn args_to_meta(args: &Map<String, Value>) -> Result<EventMeta, TraceIoError> {
    let mut meta = EventMeta::default();
    for (k, v) in args {
        match k.as_str() {
            K_MICROBATCH => meta.microbatch_id = Some(as_u32(v, K_MICROBATCH)?),
            K_CHUNK => meta.chunk_id = Some(as_u32(v, K_CHUNK)?),
            K_PAYLOAD => meta.payload_bytes = Some(as_u64(v, K_PAYLOAD)?),
            K_PARTICIPANTS => {
                let arr = v.as_array().ok_or_else(|| {
                    TraceIoError::Schema(format!("`{K_PARTICIPANTS}` must be an array"))
                })?;
                let mut ranks = Vec::with_capacity(arr.len());
                for item in arr {
                    ranks.push(RankId(as_u32(item, K_PARTICIPANTS)?));
                }
                meta.participant_ranks = Some(ranks);
            }
            K_PEER => meta.peer_rank = Some(RankId(as_u32(v, K_PEER)?)),
            K_PHASE => {
                let s = v
                    .as_str()
                    .ok_or_else(|| TraceIoError::Schema(format!("`{K_PHASE}` must be a string")))?;
                meta.phase =
                    Some(phase_from_str(s).ok_or_else(|| {
                        TraceIoError::Schema(format!("unknown phase `{s}` in args"))
                    })?);
            }
            K_SYNC => meta.sync_instance_id = Some(as_u64(v, K_SYNC)?),
            _ => {
                meta.extra.insert(k.clone(), v.clone());
            }
        }
    }
    Ok(meta)
}

fn as_u64(v: &Value, field: &str) -> Result<u64, TraceIoError> {
    v.as_u64()
        .ok_or_else(|| TraceIoError::Schema(format!("`{field}` must be a non-negative integer")))
}

fn as_u32(v: &Value, field: &str) -> Result<u32, TraceIoError> {
    Ok(as_u64(v, field)? as u32)
}

/// Converts an analysis event to its Chrome trace representation.
pub fn event_to_chrome(ev: &TraceEvent) -> ChromeEvent {
    ChromeEvent {
        name: ev.name.clone(),
        cat: ev.kind.cat().to_string(),
        ph: "X".to_string(),
        ts: ev.start_ts_us,
        dur: ev.duration_us,
        pid: ev.rank.0,
        tid: ev.kind.lane(),
        args: meta_to_args(&ev.meta),
    }
}

/// Converts a Chrome trace event back to the analysis representation.
pub fn chrome_to_event(ev: &ChromeEvent) -> Result<TraceEvent, TraceIoError> {
    let kind = EventKind::from_cat(&ev.cat).ok_or_else(|| {
        TraceIoError::Schema(format!(
            "unknown event category `{}` on event `{}`",
            ev.cat, ev.name
        ))
    })?;
    Ok(TraceEvent {
        name: ev.name.clone(),
        kind,
        rank: RankId(ev.pid),
        start_ts_us: ev.ts,
        duration_us: ev.dur,
        meta: args_to_meta(&ev.args)?,
    })
}

fn event_from_value(v: &Value, at: &str, require_pid: bool) -> Result<ChromeEvent, TraceIoError> {
    let obj = v
        .as_object()
        .ok_or_else(|| TraceIoError::Schema(format!("event{at} is not a JSON object")))?;
    let field = |name: &'static str| -> Result<&Value, TraceIoError> {
        obj.get(name).ok_or(TraceIoError::MissingField {
            field: name,
            at: at.to_string(),
        })
    };
    let name = field("name")?
        .as_str()
        .ok_or_else(|| TraceIoError::Schema(format!("`name`{at} must be a string")))?
        .to_string();
    let ts = field("ts")?
        .as_i64()
        .ok_or_else(|| TraceIoError::Schema(format!("`ts`{at} must be an integer")))?;
    let dur_val = field("dur")?;
    let dur = match dur_val.as_i64() {
        Some(d) if d >= 0 => d as u64,
        Some(d) => {
            return Err(TraceIoError::Schema(format!(
                "negative dur {d}{at} on event `{name}`"
            )))
        }
        None => {
            return Err(TraceIoError::Schema(format!(
                "`dur`{at} must be an integer"
            )))
        }
    };
    let ph = match obj.get("ph") {
        Some(v) => v
            .as_str()
            .ok_or_else(|| TraceIoError::Schema(format!("`ph`{at} must be a string")))?
            .to_string(),
        None => "X".to_string(),
    };
    if ph != "X" {
        return Err(TraceIoError::Schema(format!(
            "unsupported phase `{ph}`{at}: only complete (\"X\") events are accepted"
        )));
    }
    let cat = match obj.get("cat") {
        Some(v) => v
            .as_str()
            .ok_or_else(|| TraceIoError::Schema(format!("`cat`{at} must be a string")))?
            .to_string(),
        None => {
            return Err(TraceIoError::MissingField {
                field: "cat",
                at: at.to_string(),
            })
        }
    };
    let pid = match obj.get("pid") {
        Some(v) => as_u32(v, "pid")?,
        None if require_pid => {
            return Err(TraceIoError::MissingField {
                field: "pid",
                at: at.to_string(),
            })
        }
        None => 0,
    };
    let tid = match obj.get("tid") {
        Some(v) => as_u32(v, "tid")?,
        None => EventKind::from_cat(&cat).map(|k| k.lane()).unwrap_or(0),
    };
    let args = match obj.get("args") {
        Some(Value::Object(m)) => m.clone(),
        Some(_) => {
            return Err(TraceIoError::Schema(format!(
                "`args`{at} must be an object"
            )))
        }
        None => Map::new(),
    };
    Ok(ChromeEvent {
        name,
        cat,
        ph,
        ts,
        dur,
        pid,
        tid,
        args,
    })
}

/// On-disk shape of a single rank's trace file.
#[derive(Serialize)]
struct RankFile<'a> {
    rank: u32,
    events: Vec<RankFileEvent<'a>>,
}

#[derive(Serialize)]
struct RankFileEvent<'a> {
    name: &'a str,
    cat: &'a str,
    ph: &'a str,
    ts: i64,
    dur: u64,
    tid: u32,
    #[serde(skip_serializing_if = "Map::is_empty")]
    args: Map<String, Value>,
}

/// Serializes a per-rank trace to its JSON file form
/// (`{"rank": N, "events": [...]}`, events shaped like [`ChromeEvent`]
/// without `pid`).
pub fn emit_rank_trace(trace: &RankTrace) -> Vec<u8> {
    let file = RankFile {
        rank: trace.rank.0,
        events: trace
            .events
            .iter()
            .map(|ev| RankFileEvent {
                name: &ev.name,
                cat: ev.kind.cat(),
                ph: "X",
                ts: ev.start_ts_us,
                dur: ev.duration_us,
                tid: ev.kind.lane(),
                args: meta_to_args(&ev.meta),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec_pretty(&file).expect("rank trace serializes");
    out.push(b'\n');
    out
}

/// Parses a per-rank trace file. Events are returned sorted by start time;
/// unknown args keys are preserved in the event metadata's extension map.
pub fn parse_rank_trace(bytes: &[u8]) -> Result<RankTrace, TraceIoError> {
    let root: Value = serde_json::from_slice(bytes).map_err(|e| parse_error(bytes, &e))?;
    let obj = root
        .as_object()
        .ok_or_else(|| TraceIoError::Schema("rank trace root must be an object".into()))?;
    let rank = RankId(as_u32(
        obj.get("rank").ok_or(TraceIoError::MissingField {
            field: "rank",
            at: String::new(),
        })?,
        "rank",
    )?);
    let raw_events = match obj.get("events") {
        Some(Value::Array(a)) => a,
        Some(_) => return Err(TraceIoError::Schema("`events` must be an array".into())),
        None => {
            return Err(TraceIoError::MissingField {
                field: "events",
                at: String::new(),
            })
        }
    };
    let mut events = Vec::with_capacity(raw_events.len());
    for (i, v) in raw_events.iter().enumerate() {
        let at = format!(" (events[{i}])");
        let chrome = event_from_value(v, &at, false)?;
        let mut ev = chrome_to_event(&chrome)?;
        ev.rank = rank;
        events.push(ev);
    }
    Ok(RankTrace::new(rank, events))
}

/// Merges per-rank traces into one document, globally sorted by timestamp
/// (ties broken by rank then name so merges are deterministic).
pub fn merge_traces(traces: &[RankTrace]) -> Result<ChromeTraceDoc, TraceIoError> {
    let mut seen = std::collections::BTreeSet::new();
    for t in traces {
        if !seen.insert(t.rank) {
            return Err(TraceIoError::DuplicateRank(t.rank));
        }
    }
    let mut events: Vec<ChromeEvent> = traces
        .iter()
        .flat_map(|t| t.events.iter().map(event_to_chrome))
        .collect();
    events.sort_by(|a, b| {
        a.ts.cmp(&b.ts)
            .then_with(|| a.pid.cmp(&b.pid))
            .then_with(|| a.name.cmp(&b.name))
    });
    Ok(ChromeTraceDoc {
        events,
        metadata: Map::new(),
    })
}

/// Serializes a document in Chrome Tracing JSON Object Format. Metadata
/// keys follow the `traceEvents` array at the top level.
pub fn emit_chrome_trace(doc: &ChromeTraceDoc) -> Vec<u8> {
    let mut root = Map::new();
    root.insert(
        "traceEvents".into(),
        Value::Array(
            doc.events
                .iter()
                .map(|e| serde_json::to_value(e).expect("event serializes"))
                .collect(),
        ),
    );
    for (k, v) in &doc.metadata {
        root.insert(k.clone(), v.clone());
    }
    let mut out = serde_json::to_vec_pretty(&Value::Object(root)).expect("doc serializes");
    out.push(b'\n');
    out
}

/// Parses a merged trace document; accepts both the object form
/// (`{"traceEvents": [...]}`) and the bare array form.
pub fn parse_chrome(bytes: &[u8]) -> Result<ChromeTraceDoc, TraceIoError> {
    let root: Value = serde_json::from_slice(bytes).map_err(|e| parse_error(bytes, &e))?;
    let (raw_events, metadata) = match root {
        Value::Array(a) => (a, Map::new()),
        Value::Object(mut obj) => {
            let events = match obj.remove("traceEvents") {
                Some(Value::Array(a)) => a,
                Some(_) => {
                    return Err(TraceIoError::Schema(
                        "`traceEvents` must be an array".into(),
                    ))
                }
                None => {
                    return Err(TraceIoError::MissingField {
                        field: "traceEvents",
                        at: String::new(),
                    })
                }
            };
            (events, obj)
        }
        _ => {
            return Err(TraceIoError::Schema(
                "trace root must be an object or array".into(),
            ))
        }
    };
    let mut events = Vec::with_capacity(raw_events.len());
    for (i, v) in raw_events.iter().enumerate() {
        let at = format!(" (traceEvents[{i}])");
        events.push(event_from_value(v, &at, true)?);
    }
    Ok(ChromeTraceDoc { events, metadata })
}

/// Reconstructs per-rank traces from a merged document, in rank order.
///
/// Per-rank event order follows document order (normalized by a stable
/// timestamp sort), so an aligned document yields the same program order
/// as the trace it was derived from even where alignment collapsed
/// timestamp ties.
pub fn doc_to_traces(doc: &ChromeTraceDoc) -> Result<Vec<RankTrace>, TraceIoError> {
    let mut by_rank: std::collections::BTreeMap<RankId, Vec<TraceEvent>> = Default::default();
    for ev in &doc.events {
        let te = chrome_to_event(ev)?;
        by_rank.entry(te.rank).or_default().push(te);
    }
    Ok(by_rank
        .into_iter()
        .map(|(rank, mut events)| {
            events.sort_by_key(|e| e.start_ts_us); // stable
            RankTrace { rank, events }
        })
        .collect())
}

/// Structural validator for Chrome Tracing JSON, independent of the
/// parser above: it checks raw JSON values against the Trace Event Format
/// rules we rely on and returns every violation found.
pub fn validate_chrome_schema(bytes: &[u8]) -> Result<(), Vec<String>> {
    let mut problems = Vec::new();
    let root: Value = match serde_json::from_slice(bytes) {
        Ok(v) => v,
        Err(e) => return Err(vec![format!("not valid JSON: {e}")]),
    };
    let events = match &root {
        Value::Array(a) => a,
        Value::Object(obj) => match obj.get("traceEvents") {
            Some(Value::Array(a)) => a,
            Some(_) => return Err(vec!["traceEvents is not an array".into()]),
            None => return Err(vec!["object form lacks traceEvents".into()]),
        },
        _ => return Err(vec!["root is neither array nor object".into()]),
    };
    for (i, ev) in events.iter().enumerate() {
        let Some(obj) = ev.as_object() else {
            problems.push(format!("event {i} is not an object"));
            continue;
        };
        match obj.get("name") {
            Some(Value::String(_)) => {}
            _ => problems.push(format!("event {i}: missing or non-string name")),
        }
        let ph = match obj.get("ph") {
            Some(Value::String(s)) => s.as_str(),
            _ => {
                problems.push(format!("event {i}: missing or non-string ph"));
                ""
            }
        };
        match obj.get("ts").and_then(Value::as_i64) {
            Some(_) => {}
            None => problems.push(format!("event {i}: missing or non-integer ts")),
        }
        if ph == "X" {
            match obj.get("dur").and_then(Value::as_i64) {
                Some(d) if d >= 0 => {}
                Some(_) => problems.push(format!("event {i}: negative dur")),
                None => problems.push(format!("event {i}: complete event without integer dur")),
            }
        }
        for key in ["pid", "tid"] {
            match obj.get(key).and_then(Value::as_i64) {
                Some(v) if v >= 0 => {}
                Some(_) => problems.push(format!("event {i}: negative {key}")),
                None => problems.push(format!("event {i}: missing or non-integer {key}")),
            }
        }
        if let Some(args) = obj.get("args") {
            if !args.is_object() {
                problems.push(format!("event {i}: args is not an object"));
            }
        }
        if let Some(cat) = obj.get("cat") {
            if !cat.is_string() {
                problems.push(format!("event {i}: cat is not a string"));
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CollectiveOp;

    fn ev(name: &str, kind: EventKind, rank: u32, ts: i64, dur: u64) -> TraceEvent {
        TraceEvent {
            name: name.into(),
            kind,
            rank: RankId(rank),
            start_ts_us: ts,
            duration_us: dur,
            meta: EventMeta::default(),
        }
    }

    #[test]
    fn empty_rank_file_parses_to_empty_trace() {
        let trace = parse_rank_trace(br#"{"rank": 3, "events": []}"#).unwrap();
        assert_eq!(trace.rank, RankId(3));
        assert!(trace.events.is_empty());
    }

    #[test]
    fn out_of_order_events_come_back_sorted() {
        let bytes = br#"{"rank": 0, "events": [
            {"name": "b", "cat": "compute", "ph": "X", "ts": 200, "dur": 5, "tid": 0},
            {"name": "a", "cat": "compute", "ph": "X", "ts": 100, "dur": 5, "tid": 0}
        ]}"#;
        let trace = parse_rank_trace(bytes).unwrap();
        assert_eq!(trace.events[0].name, "a");
        assert_eq!(trace.events[1].name, "b");
    }

    #[test]
    fn missing_required_field_is_named() {
        let bytes = br#"{"rank": 0, "events": [{"name": "a", "cat": "compute", "dur": 5}]}"#;
        let err = parse_rank_trace(bytes).unwrap_err();
        assert!(err.to_string().contains("`ts`"), "{err}");
    }

    #[test]
    fn negative_dur_rejected() {
        let bytes =
            br#"{"rank": 0, "events": [{"name": "a", "cat": "compute", "ts": 5, "dur": -1}]}"#;
        let err = parse_rank_trace(bytes).unwrap_err();
        assert!(err.to_string().contains("negative dur"), "{err}");
    }

    #[test]
    fn malformed_json_reports_byte_offset() {
        let bytes = b"{\"rank\": 0,\n  \"events\": [}";
        match parse_rank_trace(bytes).unwrap_err() {
            TraceIoError::Parse { offset, .. } => assert!(offset > 0 && offset <= bytes.len()),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn unknown_args_keys_round_trip() {
        let bytes = br#"{"rank": 0, "events": [
            {"name": "a", "cat": "compute", "ph": "X", "ts": 1, "dur": 2, "tid": 0,
             "args": {"microbatch_id": 4, "vendor_tag": "nvlink"}}
        ]}"#;
        let trace = parse_rank_trace(bytes).unwrap();
        assert_eq!(trace.events[0].meta.microbatch_id, Some(4));
        assert_eq!(
            trace.events[0].meta.extra.get("vendor_tag"),
            Some(&Value::String("nvlink".into()))
        );
        let reparsed = parse_rank_trace(&emit_rank_trace(&trace)).unwrap();
        assert_eq!(reparsed, trace);
    }

    #[test]
    fn merge_empty_trace_gives_empty_doc() {
        let doc = merge_traces(&[RankTrace::new(RankId(0), vec![])]).unwrap();
        assert!(doc.events.is_empty());
    }

    #[test]
    fn merge_two_ranks_one_event_each() {
        let t0 = RankTrace::new(RankId(0), vec![ev("a", EventKind::ComputeKernel, 0, 10, 1)]);
        let t1 = RankTrace::new(RankId(1), vec![ev("b", EventKind::ComputeKernel, 1, 5, 1)]);
        let doc = merge_traces(&[t0, t1]).unwrap();
        assert_eq!(doc.events.len(), 2);
        assert_eq!(doc.events[0].pid, 1); // earlier ts first
        assert_eq!(doc.events[1].pid, 0);
        let pids: std::collections::BTreeSet<u32> = doc.events.iter().map(|e| e.pid).collect();
        assert_eq!(pids, [0u32, 1].into_iter().collect());
    }

    #[test]
    fn merge_rejects_duplicate_rank() {
        let t0 = RankTrace::new(RankId(0), vec![]);
        let t1 = RankTrace::new(RankId(0), vec![]);
        assert!(matches!(
            merge_traces(&[t0, t1]),
            Err(TraceIoError::DuplicateRank(RankId(0)))
        ));
    }

    #[test]
    fn empty_doc_emits_object_container() {
        let out = emit_chrome_trace(&ChromeTraceDoc::default());
        let text = std::str::from_utf8(&out).unwrap();
        assert!(text.contains("\"traceEvents\""));
        assert!(parse_chrome(&out).unwrap().events.is_empty());
    }

    #[test]
    fn parser_accepts_bare_array_form() {
        let bytes = br#"[{"name": "a", "cat": "compute", "ph": "X", "ts": 1, "dur": 2, "pid": 0, "tid": 0}]"#;
        let doc = parse_chrome(bytes).unwrap();
        assert_eq!(doc.events.len(), 1);
    }

    #[test]
    fn emit_parse_emit_is_a_fixed_point() {
        let t0 = RankTrace::new(
            RankId(0),
            vec![ev("fwd", EventKind::ComputeKernel, 0, 10, 3), {
                let mut e = ev(
                    "ar",
                    EventKind::Collective(CollectiveOp::AllReduce),
                    0,
                    13,
                    2,
                );
                e.meta.participant_ranks = Some(vec![RankId(0), RankId(1)]);
                e
            }],
        );
        let t1 = RankTrace::new(
            RankId(1),
            vec![ev("fwd", EventKind::ComputeKernel, 1, 9, 4)],
        );
        let doc = merge_traces(&[t0, t1]).unwrap();
        let first = emit_chrome_trace(&doc);
        let second = emit_chrome_trace(&parse_chrome(&first).unwrap());
        assert_eq!(first, second);
        validate_chrome_schema(&first).unwrap();
    }

    #[test]
    fn validator_flags_missing_fields() {
        let bad = br#"{"traceEvents": [{"cat": "compute", "ph": "X", "ts": 1, "dur": 2, "pid": 0, "tid": 0}]}"#;
        let problems = validate_chrome_schema(bad).unwrap_err();
        assert!(problems.iter().any(|p| p.contains("name")));
    }
}
