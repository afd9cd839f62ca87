//! End-to-end dataset construction.
//!
//! A run reads a corpus, drives the cinematic and/or non-cinematic flow
//! through the judge gateway, and assembles the accepted pairs into a
//! preference dataset with a manifest. Judge stages checkpoint per chunk so an
//! aborted run resumes where it stopped; pure stages are recomputed.

mod assemble;
mod checkpoint;
mod config;
mod corpus;
mod flows;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use assemble::{
    assemble_dataset, manifest_for, merge_external, merge_files, write_dataset, AcceptedPair, MergeOptions,
    SourcedPair, DATASET_FILE, FORGE_SOURCE, MANIFEST_FILE, MERGED_FILE, MERGED_MANIFEST_FILE,
};
pub use checkpoint::{load_checkpoint, Outcome, RunDir, StageCheckpoint, LOCK_FILE, RETRY_QUEUE};
pub use config::{
    Backend, CinematicConfig, EnsembleConfig, Flow, JudgeSpec, NonCinematicConfig, Paths, PipelineConfig, Roles,
    StabilityRounds,
};
pub use corpus::{group_census, synthetic_corpus, Corpus, GROUPS_FILE, SAMPLES_FILE};

use crate::judge::{JudgeError, JudgeGateway};
use crate::model::{read_records, write_atomic, DatasetManifest, OrientationSplit, Record, RecordError};

pub const CONFIG_FILE: &str = "config.toml";
pub const PLAN_FILE: &str = "plan.json";
pub const STATS_FILE: &str = "stats.jsonl";
pub const STATS_TABLE_FILE: &str = "stats.txt";
pub const ACCEPTED_FILE: &str = "accepted.jsonl";

/// Every stage name in execution order.
pub const STAGES: [&str; 12] = [
    "cinematic.score",
    "cinematic.rank",
    "cinematic.select",
    "cinematic.stability",
    "cinematic.ensemble",
    "cinematic.policy",
    "noncinematic.match",
    "noncinematic.embed",
    "noncinematic.union",
    "noncinematic.ensemble",
    "noncinematic.policy",
    "assemble",
];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("run directory is locked ({}); remove it if no other run is active", .0.display())]
    Locked(PathBuf),
    #[error("stage `{stage}` aborted with {pending} items pending: {source}")]
    Aborted {
        stage: String,
        pending: usize,
        #[source]
        source: JudgeError,
    },
    #[error("assembly: {0}")]
    Assembly(String),
    #[error("external records {}: {source}", path.display())]
    External {
        path: PathBuf,
        #[source]
        source: RecordError,
    },
    #[error("no run found in {}", .0.display())]
    NoRun(PathBuf),
}

impl PipelineError {
    /// The stage a run stopped at, for aborts.
    pub fn stage(&self) -> Option<&str> {
        match self {
            PipelineError::Aborted { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

/// Counts for one stage. `input` and `output` are in the stage's own unit
/// (images, groups or pairs, see `unit`); `discarded` counts items dropped
/// on malformed judge output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: String,
    pub unit: String,
    pub input: usize,
    pub output: usize,
    pub discarded: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl StageStats {
    pub fn new(stage: &str, unit: &str, input: usize, output: usize) -> Self {
        StageStats {
            stage: stage.into(),
            unit: unit.into(),
            input,
            output,
            discarded: 0,
            extra: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.extra
            .insert(key.into(), serde_json::to_value(value).expect("stat values serialize"));
        self
    }
}

impl Record for StageStats {
    fn validate(&self) -> Result<(), RecordError> {
        if self.output > self.input {
            return Err(RecordError::Invalid {
                field: "output",
                reason: format!(
                    "stage `{}` emitted {} from {} inputs",
                    self.stage, self.output, self.input
                ),
            });
        }
        Ok(())
    }
}

/// Human-readable stage table.
pub fn render_stats(stats: &[StageStats]) -> String {
    let mut out = String::from("| Stage | Unit | Input | Output | Discarded | Notes |\n|---|---|---|---|---|---|\n");
    for s in stats {
        let notes: Vec<String> = s.extra.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} |",
            s.stage,
            s.unit,
            s.input,
            s.output,
            s.discarded,
            notes.join(", ")
        );
    }
    out
}

/// Stats of every finished stage in a run directory, in stage order.
pub fn stage_stats(run_dir: &Path) -> Result<Vec<StageStats>, PipelineError> {
    if !run_dir.join(PLAN_FILE).exists() {
        return Err(PipelineError::NoRun(run_dir.to_path_buf()));
    }
    let mut out = Vec::new();
    for stage in STAGES {
        if let Some(StageCheckpoint {
            done: true,
            stats: Some(s),
            ..
        }) = load_checkpoint(run_dir, stage)?
        {
            out.push(s);
        }
    }
    Ok(out)
}

fn refresh_stats(run: &RunDir) -> Result<Vec<StageStats>, PipelineError> {
    let stats = stage_stats(run.root())?;
    crate::model::write_records(&run.path(STATS_FILE), &stats)?;
    write_atomic(&run.path(STATS_TABLE_FILE), render_stats(&stats).as_bytes())?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Plan {
    flows: BTreeSet<Flow>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub manifest: DatasetManifest,
    pub orientation: OrientationSplit,
    pub stats: Vec<StageStats>,
}

pub struct Pipeline {
    config: PipelineConfig,
    gateway: JudgeGateway,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let gateway = config.build_gateway()?;
        Ok(Pipeline { config, gateway })
    }

    /// Uses a caller-built gateway; every judge the config names must be
    /// registered with the right kind.
    pub fn with_gateway(config: PipelineConfig, gateway: JudgeGateway) -> Result<Self, PipelineError> {
        config.validate()?;
        for spec in &config.judges {
            match gateway.descriptor(&spec.id) {
                Some(d) if d.kind == spec.kind => {}
                Some(d) => {
                    return Err(PipelineError::Config(format!(
                        "gateway judge `{}` is {:?}, config says {:?}",
                        spec.id, d.kind, spec.kind
                    )))
                }
                None => return Err(PipelineError::Config(format!("judge `{}` is not registered", spec.id))),
            }
        }
        Ok(Pipeline { config, gateway })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn gateway(&self) -> &JudgeGateway {
        &self.gateway
    }

    pub fn run_cinematic(&self) -> Result<RunSummary, PipelineError> {
        self.run(&BTreeSet::from([Flow::Cinematic]))
    }

    pub fn run_noncinematic(&self) -> Result<RunSummary, PipelineError> {
        self.run(&BTreeSet::from([Flow::NonCinematic]))
    }

    /// Runs `flows` into the configured output directory and assembles their
    /// accepted pairs. Finished work from an earlier attempt with the same
    /// inputs is reused.
    pub fn run(&self, flows: &BTreeSet<Flow>) -> Result<RunSummary, PipelineError> {
        let run = RunDir::acquire(&self.config.paths.output)?;
        write_atomic(&run.path(CONFIG_FILE), self.config.to_toml().as_bytes())?;
        let plan = serde_json::to_string_pretty(&Plan { flows: flows.clone() }).expect("plan serializes");
        write_atomic(&run.path(PLAN_FILE), plan.as_bytes())?;

        let corpus = Corpus::load(&self.config.paths.corpus)?;
        let ctx = flows::Context {
            run: &run,
            config: &self.config,
            gateway: &self.gateway,
        };
        let mut accepted = Vec::new();
        let result = (|| {
            for flow in flows {
                let pairs = match flow {
                    Flow::Cinematic => ctx.cinematic(&corpus)?,
                    Flow::NonCinematic => ctx.noncinematic(&corpus)?,
                };
                accepted.extend(pairs);
            }
            Ok(())
        })();
        if let Err(e) = result {
            refresh_stats(&run)?;
            return Err(e);
        }
        let (manifest, orientation) = ctx.assemble(&accepted, &corpus.digest()?)?;
        let stats = refresh_stats(&run)?;
        Ok(RunSummary {
            run_dir: run.root().to_path_buf(),
            manifest,
            orientation,
            stats,
        })
    }

    /// Re-assembles the dataset from every flow's accepted pairs already in
    /// the run directory.
    pub fn assemble(&self) -> Result<RunSummary, PipelineError> {
        let run = RunDir::acquire(&self.config.paths.output)?;
        let mut accepted: Vec<AcceptedPair> = Vec::new();
        let mut any = false;
        for flow in [Flow::Cinematic, Flow::NonCinematic] {
            let path = run.root().join(flow.as_str()).join(ACCEPTED_FILE);
            if path.exists() {
                any = true;
                accepted.extend(read_records::<AcceptedPair>(&path)?);
            }
        }
        if !any {
            return Err(PipelineError::NoRun(run.root().to_path_buf()));
        }
        let corpus = Corpus::load(&self.config.paths.corpus)?;
        let ctx = flows::Context {
            run: &run,
            config: &self.config,
            gateway: &self.gateway,
        };
        let (manifest, orientation) = ctx.assemble(&accepted, &corpus.digest()?)?;
        let stats = refresh_stats(&run)?;
        Ok(RunSummary {
            run_dir: run.root().to_path_buf(),
            manifest,
            orientation,
            stats,
        })
    }
}

/// Loads the configuration saved in a run directory.
pub fn run_config(run_dir: &Path) -> Result<PipelineConfig, PipelineError> {
    let path = run_dir.join(CONFIG_FILE);
    if !path.exists() {
        return Err(PipelineError::NoRun(run_dir.to_path_buf()));
    }
    PipelineConfig::load(&path)
}

/// Continues an interrupted run with the configuration and flows it was
/// started with.
pub fn resume(run_dir: &Path) -> Result<RunSummary, PipelineError> {
    let mut config = run_config(run_dir)?;
    config.paths.output = run_dir.to_path_buf();
    let text = std::fs::read_to_string(run_dir.join(PLAN_FILE))?;
    let plan: Plan = serde_json::from_str(&text).map_err(RecordError::Decode)?;
    Pipeline::new(config)?.run(&plan.flows)
}
