//! Unified command line for trace simulation, merging, dependency
//! annotation, clock alignment, straggler detection, schedule evaluation,
//! and coordinator replay.
//!
//! Exit codes: 0 success, 2 schema/parse error, 3 analysis integrity
//! error, 4 infeasible schedule. Set MEGATRACE_LOG=debug for verbose
//! logging.

mod config;
mod pipeline;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use megatrace::alignment::{align, apply_alignment, AlignmentError};
use megatrace::dependency::{annotate, match_all, DependencyError};
use megatrace::detect::{diagnose, DetectConfig, DetectError};
use megatrace::dpp::{
    simulate_schedule, ChannelState, DppError, PipelineDeps, SchedulePolicy, TaskMatrix,
};
use megatrace::fbd::{coordinator_harness, FbdError};
use megatrace::model::RankId;
use megatrace::sim::{run_sim, SimError};
use megatrace::trace_io::{
    doc_to_traces, emit_chrome_trace, emit_rank_trace, merge_traces, parse_chrome,
    parse_rank_trace, TraceIoError,
};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "megatrace",
    version,
    about = "Trace analysis and scheduling toolkit for 3D-parallel training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a training iteration and emit per-rank traces
    Simulate {
        /// Simulation config (TOML)
        #[arg(long)]
        config: PathBuf,
        /// Fault injection spec (TOML)
        #[arg(long)]
        faults: Option<PathBuf>,
        /// Directory for per-rank trace files
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
        /// Where to write the ground-truth JSON
        #[arg(long = "ground-truth")]
        ground_truth: Option<PathBuf>,
    },
    /// Merge per-rank trace files into one Chrome Tracing document
    Merge {
        /// Directory of per-rank *.json trace files
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match communication instances and annotate the merged document
    Deps {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the unmatched-events report
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Align per-rank clocks onto a reference rank's timeline
    Align {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        reference: u32,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the alignment quality report
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Localize straggler GPUs on an aligned document
    Detect {
        #[arg(long = "in")]
        input: PathBuf,
        /// Topology, e.g. tp=2,pp=2,dp=2
        #[arg(long)]
        topo: String,
        /// Detection thresholds (TOML); defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        slow_ratio: Option<f64>,
        #[arg(long)]
        slow_margin_us: Option<f64>,
        #[arg(long)]
        candidate_fraction: Option<f64>,
        #[arg(long)]
        late_start_margin_us: Option<f64>,
        #[arg(long)]
        late_consistency: Option<f64>,
        #[arg(long)]
        bw_degrade_factor: Option<f64>,
        #[arg(long)]
        min_samples: Option<u32>,
    },
    /// Evaluate a scheduling policy over a (chunks x microbatches) matrix
    Schedule {
        #[arg(long, default_value_t = 8)]
        chunks: u32,
        #[arg(long, default_value_t = 8)]
        microbatches: u32,
        /// dfc, bfc, or best-effort-bfc (requires --mem-cap)
        #[arg(long)]
        policy: String,
        /// Activation memory cap, e.g. 2GiB
        #[arg(long = "mem-cap")]
        mem_cap: Option<String>,
        /// Forward task duration in microseconds
        #[arg(long = "task-us", default_value_t = 100)]
        task_us: u64,
        /// Backward task duration (defaults to the forward duration)
        #[arg(long = "backward-us")]
        backward_us: Option<u64>,
        /// Activation bytes per task, e.g. 64MiB
        #[arg(long, default_value = "1MiB")]
        activation: String,
        /// Chunk-crossing channel latency in microseconds
        #[arg(long = "channel-latency-us", default_value_t = 0)]
        channel_latency_us: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a scripted coordinator scenario
    CoordSim {
        /// Scenario description (TOML)
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run simulate, merge, deps, align, detect as one reproducible run
    Pipeline {
        /// Pipeline description (TOML)
        #[arg(long)]
        config: PathBuf,
        /// Overrides the output directory from the pipeline file
        #[arg(long = "out-dir")]
        out_dir: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("MEGATRACE_LOG")).init();
    let cli = Cli::parse();
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err:#}");
        std::process::exit(classify(&err));
    }
}

/// Maps failures to the documented exit codes: 4 infeasible schedule,
/// 3 analysis integrity, 2 schema/parse/config.
fn classify(err: &anyhow::Error) -> i32 {
    if let Some(dpp) = err.downcast_ref::<DppError>() {
        return match dpp {
            DppError::Infeasible { .. } => 4,
            DppError::InvalidMatrix(_) | DppError::Backpressure(_) => 2,
            DppError::Stalled { .. } => 3,
        };
    }
    if let Some(sim) = err.downcast_ref::<SimError>() {
        return match sim {
            SimError::Schedule(DppError::Infeasible { .. }) => 4,
            SimError::InvalidConfig(_) | SimError::InvalidFault(_) => 2,
            _ => 3,
        };
    }
    if err.downcast_ref::<DependencyError>().is_some() {
        return 3;
    }
    if err.downcast_ref::<AlignmentError>().is_some() {
        return 3;
    }
    if let Some(detect) = err.downcast_ref::<DetectError>() {
        return match detect {
            DetectError::RankOutsideTopology { .. } => 3,
            DetectError::InvalidConfig | DetectError::TraceIo(_) => 2,
        };
    }
    if let Some(fbd) = err.downcast_ref::<FbdError>() {
        return match fbd {
            FbdError::Deadlock(_) => 3,
            _ => 2,
        };
    }
    2 // parse/schema/config/io
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub(crate) fn to_json<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable");
    out.push(b'\n');
    out
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate {
            config,
            faults,
            out_dir,
            ground_truth,
        } => {
            let file: config::SimFileConfig = config::load_toml(&config)?;
            let sim_config = file.into_sim_config()?;
            let fault_list = match faults {
                Some(path) => config::load_toml::<config::FaultsFile>(&path)?.faults,
                None => Vec::new(),
            };
            let (traces, truth) = run_sim(&sim_config, &fault_list)?;
            for trace in &traces {
                let path = out_dir.join(format!("rank_{:04}.json", trace.rank.0));
                write(&path, &emit_rank_trace(trace))?;
            }
            if let Some(path) = ground_truth {
                write(&path, &to_json(&truth))?;
            }
            log::info!(
                "simulated {} ranks into {}",
                traces.len(),
                out_dir.display()
            );
            Ok(())
        }
        Command::Merge { input, out } => {
            let traces = read_trace_dir(&input)?;
            let doc = merge_traces(&traces)?;
            write(&out, &emit_chrome_trace(&doc))
        }
        Command::Deps { input, out, report } => {
            let doc = parse_chrome(&read(&input)?)?;
            let traces = doc_to_traces(&doc)?;
            let matched = match_all(&traces)?;
            if !matched.unmatched.is_empty() {
                log::warn!(
                    "{} events left unmatched (truncated or corrupt trace?)",
                    matched.unmatched.events.len()
                );
            }
            let annotated = annotate(&doc, &matched.instances);
            write(&out, &emit_chrome_trace(&annotated))?;
            if let Some(path) = report {
                write(&path, &to_json(&matched.unmatched))?;
            }
            Ok(())
        }
        Command::Align {
            input,
            reference,
            out,
            report,
        } => {
            let doc = parse_chrome(&read(&input)?)?;
            let traces = doc_to_traces(&doc)?;
            let matched = match_all(&traces)?;
            let (maps, align_report) = align(&traces, &matched.instances, RankId(reference))?;
            let aligned = apply_alignment(&doc, &maps);
            write(&out, &emit_chrome_trace(&aligned))?;
            if let Some(path) = report {
                write(&path, &to_json(&align_report))?;
            }
            Ok(())
        }
        Command::Detect {
            input,
            topo,
            config: cfg_path,
            out,
            slow_ratio,
            slow_margin_us,
            candidate_fraction,
            late_start_margin_us,
            late_consistency,
            bw_degrade_factor,
            min_samples,
        } => {
            let topo = config::parse_topo(&topo)?;
            let mut cfg = match cfg_path {
                Some(path) => config::load_toml::<DetectConfig>(&path)?,
                None => DetectConfig::default(),
            };
            if let Some(v) = slow_ratio {
                cfg.slow_ratio = v;
            }
            if let Some(v) = slow_margin_us {
                cfg.slow_margin_us = v;
            }
            if let Some(v) = candidate_fraction {
                cfg.candidate_fraction = v;
            }
            if let Some(v) = late_start_margin_us {
                cfg.late_start_margin_us = v;
            }
            if let Some(v) = late_consistency {
                cfg.late_consistency = v;
            }
            if let Some(v) = bw_degrade_factor {
                cfg.bw_degrade_factor = v;
            }
            if let Some(v) = min_samples {
                cfg.min_samples = v;
            }
            let doc = parse_chrome(&read(&input)?)?;
            let traces = doc_to_traces(&doc)?;
            let matched = match_all(&traces)?;
            let report = diagnose(&doc, &matched.instances, &topo, &cfg)?;
            write(&out, &to_json(&report))
        }
        Command::Schedule {
            chunks,
            microbatches,
            policy,
            mem_cap,
            task_us,
            backward_us,
            activation,
            channel_latency_us,
            out,
        } => {
            let activation = config::parse_bytes(&activation)?;
            let matrix = TaskMatrix::uniform(
                chunks,
                microbatches,
                task_us,
                backward_us.unwrap_or(task_us),
                activation,
            )?;
            let policy = match policy.as_str() {
                "dfc" => SchedulePolicy::Dfc,
                "bfc" => SchedulePolicy::Bfc,
                "best-effort-bfc" => {
                    let Some(cap) = mem_cap else {
                        bail!("--policy best-effort-bfc requires --mem-cap");
                    };
                    SchedulePolicy::BestEffortBfc {
                        mem_cap_bytes: config::parse_bytes(&cap)?,
                    }
                }
                other => bail!("unknown policy `{other}` (dfc, bfc, best-effort-bfc)"),
            };
            let mut channel = ChannelState::new(channel_latency_us);
            let metrics = simulate_schedule(&matrix, policy, PipelineDeps, &mut channel)?;
            write(&out, &to_json(&metrics))
        }
        Command::CoordSim { script, seed, out } => {
            let scenario: config::CoordScenario = config::load_toml(&script)?;
            let (scripts, groups, mapping) = scenario.build()?;
            let seed = seed.or(scenario.seed).unwrap_or(7);
            let log = coordinator_harness(&scripts, &groups, &mapping, seed)?;
            write(&out, &to_json(&log))
        }
        Command::Pipeline { config, out_dir } => {
            pipeline::run_pipeline(&config, out_dir.as_deref())
        }
    }
}

/// Reads every *.json file in a directory (sorted by file name) as a
/// per-rank trace.
pub(crate) fn read_trace_dir(dir: &Path) -> Result<Vec<megatrace::model::RankTrace>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no *.json trace files in {}", dir.display());
    }
    let mut traces = Vec::with_capacity(paths.len());
    for path in paths {
        let trace = parse_rank_trace(&read(&path)?)
            .map_err(|e: TraceIoError| anyhow::Error::new(e))
            .with_context(|| format!("parsing {}", path.display()))?;
        traces.push(trace);
    }
    Ok(traces)
}
