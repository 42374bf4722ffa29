//! On-disk configuration schemas (TOML) and small argument parsers.

use anyhow::{bail, Context, Result};
use megatrace::fbd::{CommGroupSpec, RankMapping, VirtualRank, WorkerScript};
use megatrace::model::ParallelTopology;
use megatrace::sim::{FaultSpec, SimConfig, SimSchedule};
use serde::Deserialize;
use std::path::Path;

/// Simulation config file: topology plus optional workload/timing/noise
/// overrides of the built-in defaults.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimFileConfig {
    pub topology: TopologySection,
    #[serde(default)]
    pub workload: WorkloadSection,
    #[serde(default)]
    pub timing: TimingSection,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub schedule: Option<SimSchedule>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    pub tp: u32,
    pub pp: u32,
    pub dp: u32,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    pub microbatches: Option<u32>,
    pub chunks_per_stage: Option<u32>,
    pub layers_per_chunk: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingSection {
    pub compute_us_per_task: Option<u64>,
    pub tp_collective_us: Option<u64>,
    pub dp_allreduce_us: Option<u64>,
    pub p2p_payload_bytes: Option<u64>,
    pub link_bw_bytes_per_us: Option<f64>,
    pub jitter_pct: Option<f64>,
}

impl SimFileConfig {
    pub fn into_sim_config(self) -> Result<SimConfig> {
        let topo = ParallelTopology::new(self.topology.tp, self.topology.pp, self.topology.dp)?;
        let defaults = SimConfig::default();
        Ok(SimConfig {
            topo,
            num_microbatches: self
                .workload
                .microbatches
                .unwrap_or(defaults.num_microbatches),
            num_chunks_per_stage: self
                .workload
                .chunks_per_stage
                .unwrap_or(defaults.num_chunks_per_stage),
            layers_per_chunk: self
                .workload
                .layers_per_chunk
                .unwrap_or(defaults.layers_per_chunk),
            compute_us_per_task: self
                .timing
                .compute_us_per_task
                .unwrap_or(defaults.compute_us_per_task),
            tp_collective_us: self
                .timing
                .tp_collective_us
                .unwrap_or(defaults.tp_collective_us),
            dp_allreduce_us: self
                .timing
                .dp_allreduce_us
                .unwrap_or(defaults.dp_allreduce_us),
            p2p_payload_bytes: self
                .timing
                .p2p_payload_bytes
                .unwrap_or(defaults.p2p_payload_bytes),
            link_bw_bytes_per_us: self
                .timing
                .link_bw_bytes_per_us
                .unwrap_or(defaults.link_bw_bytes_per_us),
            jitter_pct: self.timing.jitter_pct.unwrap_or(defaults.jitter_pct),
            seed: self.seed.unwrap_or(defaults.seed),
            schedule: self.schedule.unwrap_or(defaults.schedule),
        })
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultsFile {
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
}

/// Coordinator scenario: virtual ranks (forward and backward instances
/// colocated per index), groups over forward-instance values, and one
/// scripted request sequence per worker.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordScenario {
    pub virtual_ranks: u32,
    /// Physical rank hosting each virtual rank index.
    pub physical: Vec<u32>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub groups: Vec<GroupSection>,
    pub workers: Vec<WorkerSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSection {
    pub id: usize,
    pub members: Vec<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerSection {
    pub vrank: u32,
    pub requests: Vec<usize>,
}

impl CoordScenario {
    pub fn build(&self) -> Result<(Vec<WorkerScript>, Vec<CommGroupSpec>, RankMapping)> {
        if self.physical.len() != self.virtual_ranks as usize {
            bail!(
                "physical list has {} entries for {} virtual ranks",
                self.physical.len(),
                self.virtual_ranks
            );
        }
        let mapping = RankMapping::colocated(&self.physical)?;
        let groups = self
            .groups
            .iter()
            .map(|g| {
                CommGroupSpec::new(
                    g.id,
                    g.members.iter().map(|&v| VirtualRank::forward(v)).collect(),
                )
                .map_err(Into::into)
            })
            .collect::<Result<Vec<_>>>()?;
        let scripts = self
            .workers
            .iter()
            .map(|w| WorkerScript {
                vrank: VirtualRank::forward(w.vrank),
                requests: w.requests.clone(),
            })
            .collect();
        Ok((scripts, groups, mapping))
    }
}

/// Pipeline file: per-stage config paths (relative to the pipeline file),
/// output directory, and an optional seed override.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineFile {
    #[serde(default)]
    pub out_dir: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub reference: Option<u32>,
    pub simulate: PipelineSimulate,
    #[serde(default)]
    pub detect: PipelineDetect,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSimulate {
    pub config: String,
    #[serde(default)]
    pub faults: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineDetect {
    #[serde(default)]
    pub config: Option<String>,
}

pub fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Parses "tp=2,pp=4,dp=2" (order-insensitive) into a topology.
pub fn parse_topo(spec: &str) -> Result<ParallelTopology> {
    let (mut tp, mut pp, mut dp) = (None, None, None);
    for part in spec.split(',') {
        let Some((key, value)) = part.split_once('=') else {
            bail!("topology component `{part}` is not key=value");
        };
        let value: u32 = value
            .trim()
            .parse()
            .with_context(|| format!("topology component `{part}`"))?;
        match key.trim() {
            "tp" => tp = Some(value),
            "pp" => pp = Some(value),
            "dp" => dp = Some(value),
            other => bail!("unknown topology axis `{other}`"),
        }
    }
    match (tp, pp, dp) {
        (Some(tp), Some(pp), Some(dp)) => Ok(ParallelTopology::new(tp, pp, dp)?),
        _ => bail!("topology must specify tp, pp and dp (e.g. tp=2,pp=2,dp=2)"),
    }
}

/// Parses byte sizes like "2GiB", "512MB", "4096".
pub fn parse_bytes(spec: &str) -> Result<u64> {
    let s = spec.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (digits, suffix) = s.split_at(split);
    if digits.is_empty() {
        bail!("byte size `{spec}` has no digits");
    }
    let value: u64 = digits
        .parse()
        .with_context(|| format!("byte size `{spec}`"))?;
    let factor: u64 = match suffix.trim() {
        "" | "B" => 1,
        "KB" => 1000,
        "MB" => 1000 * 1000,
        "GB" => 1000 * 1000 * 1000,
        "KiB" => 1024,
        "MiB" => 1024 * 1024,
        "GiB" => 1024 * 1024 * 1024,
        other => bail!("unknown byte-size suffix `{other}`"),
    };
    Ok(value * factor)
}
