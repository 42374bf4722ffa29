//! The end-to-end pipeline runner: simulate, merge, deps, align, detect,
//! with a manifest recording config hashes, the seed, and a checksum of
//! every artifact so a run is reproducible from its configs alone.

use crate::config::{self, load_toml, PipelineFile};
use anyhow::{bail, Context, Result};
use megatrace::alignment::{align, apply_alignment};
use megatrace::dependency::{annotate, match_all};
use megatrace::detect::{diagnose, DetectConfig};
use megatrace::model::RankId;
use megatrace::sim::run_sim;
use megatrace::trace_io::{emit_chrome_trace, emit_rank_trace, merge_traces, parse_chrome};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    seed: u64,
    configs: Vec<ConfigRecord>,
    stages: Vec<StageRecord>,
}

#[derive(Serialize)]
struct ConfigRecord {
    stage: &'static str,
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct StageRecord {
    stage: &'static str,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    outputs: Vec<OutputRecord>,
}

#[derive(Serialize)]
struct OutputRecord {
    file: String,
    sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Runner {
    out_dir: PathBuf,
    manifest: Manifest,
}

impl Runner {
    /// Writes an artifact under the output directory and records its
    /// checksum in the current stage.
    fn emit(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out_dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.manifest
            .stages
            .last_mut()
            .expect("stage open")
            .outputs
            .push(OutputRecord {
                file: rel.to_string(),
                sha256: sha256_hex(bytes),
            });
        Ok(())
    }

    fn begin(&mut self, stage: &'static str) {
        self.manifest.stages.push(StageRecord {
            stage,
            status: "ok",
            error: None,
            outputs: Vec::new(),
        });
    }

    fn fail(&mut self, err: &anyhow::Error) {
        if let Some(stage) = self.manifest.stages.last_mut() {
            stage.status = "failed";
            stage.error = Some(format!("{err:#}"));
        }
    }

    fn write_manifest(&self) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        bytes.push(b'\n');
        std::fs::write(self.out_dir.join("manifest.json"), bytes)
            .with_context(|| format!("writing manifest in {}", self.out_dir.display()))
    }

    fn record_config(&mut self, stage: &'static str, path: &Path, bytes: &[u8]) {
        self.manifest.configs.push(ConfigRecord {
            stage,
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
    }
}

pub fn run_pipeline(pipeline_path: &Path, out_dir_override: Option<&Path>) -> Result<()> {
    let file: PipelineFile = load_toml(pipeline_path)?;
    let base = pipeline_path.parent().unwrap_or(Path::new("."));
    let out_dir = match (out_dir_override, &file.out_dir) {
        (Some(dir), _) => dir.to_path_buf(),
        (None, Some(dir)) => PathBuf::from(dir),
        (None, None) => {
            bail!("no output directory: set out_dir in the pipeline file or pass --out-dir")
        }
    };
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let mut runner = Runner {
        out_dir,
        manifest: Manifest {
            tool: "megatrace",
            version: env!("CARGO_PKG_VERSION"),
            seed: 0,
            configs: Vec::new(),
            stages: Vec::new(),
        },
    };

    let result = execute(&mut runner, &file, base);
    if let Err(err) = &result {
        runner.fail(err);
    }
    runner.write_manifest()?;
    result
}

fn execute(runner: &mut Runner, file: &PipelineFile, base: &Path) -> Result<()> {
    // simulate
    runner.begin("simulate");
    let sim_path = base.join(&file.simulate.config);
    let sim_bytes =
        std::fs::read(&sim_path).with_context(|| format!("reading {}", sim_path.display()))?;
    runner.record_config("simulate", &sim_path, &sim_bytes);
    let sim_file: config::SimFileConfig = toml::from_str(std::str::from_utf8(&sim_bytes)?)
        .with_context(|| format!("parsing {}", sim_path.display()))?;
    let mut sim_config = sim_file.into_sim_config()?;
    if let Some(seed) = file.seed {
        sim_config.seed = seed;
    }
    runner.manifest.seed = sim_config.seed;
    let faults = match &file.simulate.faults {
        Some(rel) => {
            let path = base.join(rel);
            let bytes =
                std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            runner.record_config("faults", &path, &bytes);
            toml::from_str::<config::FaultsFile>(std::str::from_utf8(&bytes)?)
                .with_context(|| format!("parsing {}", path.display()))?
                .faults
        }
        None => Vec::new(),
    };
    let (traces, truth) = run_sim(&sim_config, &faults)?;
    for trace in &traces {
        runner.emit(
            &format!("traces/rank_{:04}.json", trace.rank.0),
            &emit_rank_trace(trace),
        )?;
    }
    runner.emit("ground-truth.json", &crate::to_json(&truth))?;

    // merge (re-read the emitted files: the merged doc is derived from the
    // on-disk artifacts, as it would be across separate invocations)
    runner.begin("merge");
    let reread = crate::read_trace_dir(&runner.out_dir.join("traces"))?;
    let doc = merge_traces(&reread)?;
    runner.emit("merged.json", &emit_chrome_trace(&doc))?;

    // deps
    runner.begin("deps");
    let doc = parse_chrome(&std::fs::read(runner.out_dir.join("merged.json"))?)?;
    let doc_traces = megatrace::trace_io::doc_to_traces(&doc)?;
    let matched = match_all(&doc_traces)?;
    if !matched.unmatched.is_empty() {
        log::warn!("{} unmatched events", matched.unmatched.events.len());
    }
    let annotated = annotate(&doc, &matched.instances);
    runner.emit("annotated.json", &emit_chrome_trace(&annotated))?;
    runner.emit("unmatched.json", &crate::to_json(&matched.unmatched))?;

    // align
    runner.begin("align");
    let reference = RankId(file.reference.unwrap_or(0));
    let (maps, align_report) = align(&doc_traces, &matched.instances, reference)?;
    let aligned = apply_alignment(&annotated, &maps);
    runner.emit("aligned.json", &emit_chrome_trace(&aligned))?;
    runner.emit("align-report.json", &crate::to_json(&align_report))?;

    // detect
    runner.begin("detect");
    let detect_config = match &file.detect.config {
        Some(rel) => {
            let path = base.join(rel);
            let bytes =
                std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            runner.record_config("detect", &path, &bytes);
            toml::from_str::<DetectConfig>(std::str::from_utf8(&bytes)?)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => DetectConfig::default(),
    };
    let aligned_traces = megatrace::trace_io::doc_to_traces(&aligned)?;
    let aligned_matched = match_all(&aligned_traces)?;
    let report = diagnose(
        &aligned,
        &aligned_matched.instances,
        &sim_config.topo,
        &detect_config,
    )?;
    runner.emit("report.json", &crate::to_json(&report))?;
    Ok(())
}
