use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::consensus::PolicyName;
use crate::judge::{
    HttpJudge, JudgeBackend, JudgeDescriptor, JudgeGateway, JudgeKind, MockJudge, MockParams, ResponseCache,
    RetryPolicy, DEFAULT_MAX_IN_FLIGHT,
};
use crate::model::Locale;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flow {
    Cinematic,
    #[serde(rename = "noncinematic")]
    NonCinematic,
}

impl Flow {
    pub fn as_str(self) -> &'static str {
        match self {
            Flow::Cinematic => "cinematic",
            Flow::NonCinematic => "noncinematic",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeSpec {
    pub id: String,
    pub kind: JudgeKind,
    #[serde(default)]
    pub backend: Backend,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub config: BTreeMap<String, String>,
}

fn default_in_flight() -> usize {
    DEFAULT_MAX_IN_FLIGHT
}

impl JudgeSpec {
    fn new(id: &str, kind: JudgeKind) -> Self {
        JudgeSpec {
            id: id.into(),
            kind,
            backend: Backend::Mock,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            config: BTreeMap::new(),
        }
    }

    pub fn descriptor(&self) -> JudgeDescriptor {
        let mut d = JudgeDescriptor::new(self.id.clone(), self.kind, self.backend == Backend::Mock);
        d.config.extend(self.config.clone());
        d
    }
}

/// Which judge plays each single-judge role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roles {
    pub pointwise: String,
    pub ranker: String,
    /// Judge for the stability rounds when they are not reused.
    pub stability_ranker: String,
    pub semantic_embedder: String,
    pub structural_embedder: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityRounds {
    /// Separate rounds from the stability ranker.
    #[default]
    Fresh,
    /// The concordance rounds again.
    Reuse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CinematicConfig {
    pub m: usize,
    pub k: u32,
    pub threshold: u32,
    #[serde(default)]
    pub stability_rounds: StabilityRounds,
    pub quotas: BTreeMap<Locale, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonCinematicConfig {
    pub k_semantic: usize,
    pub k_structural: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub judges: Vec<String>,
    pub policy: PolicyName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    /// Directory holding `samples.jsonl` and `groups.jsonl`.
    pub corpus: PathBuf,
    /// Response cache; no caching when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
    /// Run directory.
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default = "default_true")]
    pub desk_scale: bool,
    pub flows: BTreeSet<Flow>,
    pub paths: Paths,
    pub cinematic: CinematicConfig,
    pub noncinematic: NonCinematicConfig,
    pub ensemble: EnsembleConfig,
    pub roles: Roles,
    pub judges: Vec<JudgeSpec>,
    #[serde(default)]
    pub mock: MockParams,
    /// Items per checkpointed chunk in judge stages.
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
}

fn default_true() -> bool {
    true
}

fn default_chunk() -> usize {
    32
}

impl PipelineConfig {
    /// Desk-scale configuration with offline mock judges.
    pub fn desk(seed: u64, corpus: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        let mut judges = vec![
            JudgeSpec::new("scorer", JudgeKind::Pointwise),
            JudgeSpec::new("ranker", JudgeKind::Ranker),
            JudgeSpec::new("ranker-lite", JudgeKind::Ranker),
            JudgeSpec::new("embed-semantic", JudgeKind::Embedder),
            JudgeSpec::new("embed-structural", JudgeKind::Embedder),
        ];
        for i in 1..=3 {
            let mut spec = JudgeSpec::new(&format!("pairwise-{i}"), JudgeKind::Pairwise);
            if i == 2 {
                spec.config.insert("temperature".into(), "1.0".into());
            }
            judges.push(spec);
        }
        PipelineConfig {
            seed,
            desk_scale: true,
            flows: BTreeSet::from([Flow::Cinematic, Flow::NonCinematic]),
            paths: Paths {
                corpus: corpus.into(),
                cache: None,
                output: output.into(),
            },
            cinematic: CinematicConfig {
                m: 6,
                k: 6,
                threshold: 5,
                stability_rounds: StabilityRounds::Fresh,
                quotas: BTreeMap::from([(Locale::En, 20), (Locale::Zh, 10)]),
            },
            noncinematic: NonCinematicConfig {
                k_semantic: 25,
                k_structural: 15,
            },
            ensemble: EnsembleConfig {
                judges: (1..=3).map(|i| format!("pairwise-{i}")).collect(),
                policy: PolicyName::FivePlusTieOrError,
            },
            roles: Roles {
                pointwise: "scorer".into(),
                ranker: "ranker".into(),
                stability_ranker: "ranker-lite".into(),
                semantic_embedder: "embed-semantic".into(),
                structural_embedder: "embed-structural".into(),
            },
            judges,
            mock: MockParams::default(),
            chunk_size: default_chunk(),
        }
    }

    /// Full-scale quotas and top-k sizes.
    pub fn full_scale(mut self) -> Self {
        self.desk_scale = false;
        self.cinematic.quotas = BTreeMap::from([(Locale::En, 20_000), (Locale::Zh, 10_000)]);
        self.noncinematic.k_semantic = 25_000;
        self.noncinematic.k_structural = 15_000;
        self
    }

    /// Parses TOML; relative paths are taken from `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut config: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.paths.corpus = base.join(&config.paths.corpus);
        config.paths.output = base.join(&config.paths.output);
        if let Some(cache) = &config.paths.cache {
            config.paths.cache = Some(base.join(cache));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn judge(&self, id: &str) -> Option<&JudgeSpec> {
        self.judges.iter().find(|j| j.id == id)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: String| Err(PipelineError::Config(m));
        let mut ids = BTreeSet::new();
        for j in &self.judges {
            if !ids.insert(&j.id) {
                return fail(format!("judge `{}` declared twice", j.id));
            }
        }
        let mut roles = vec![
            (&self.roles.pointwise, JudgeKind::Pointwise),
            (&self.roles.ranker, JudgeKind::Ranker),
            (&self.roles.semantic_embedder, JudgeKind::Embedder),
            (&self.roles.structural_embedder, JudgeKind::Embedder),
        ];
        if self.cinematic.stability_rounds == StabilityRounds::Fresh {
            roles.push((&self.roles.stability_ranker, JudgeKind::Ranker));
        }
        roles.extend(self.ensemble.judges.iter().map(|j| (j, JudgeKind::Pairwise)));
        for (id, kind) in roles {
            match self.judge(id) {
                None => return fail(format!("judge `{id}` is not declared")),
                Some(spec) if spec.kind != kind => {
                    return fail(format!("judge `{id}` is {:?}, needed {kind:?}", spec.kind));
                }
                Some(_) => {}
            }
        }
        if self.ensemble.judges.is_empty() {
            return fail("ensemble needs at least one judge".into());
        }
        let c = &self.cinematic;
        if c.m < 2 {
            return fail(format!("m = {} but groups need at least 2 images", c.m));
        }
        if c.k < 2 {
            return fail(format!("k = {} but concordance needs at least 2 rounds", c.k));
        }
        if c.threshold == 0 || c.threshold > c.k {
            return fail(format!("threshold {} outside 1..={}", c.threshold, c.k));
        }
        if self.chunk_size == 0 {
            return fail("chunk_size must be positive".into());
        }
        Ok(())
    }

    /// Registers every declared judge with its backend.
    pub fn build_gateway(&self) -> Result<JudgeGateway, PipelineError> {
        let mut gateway = JudgeGateway::new(RetryPolicy::default());
        if let Some(dir) = &self.paths.cache {
            gateway = gateway.with_cache(ResponseCache::open(dir)?);
        }
        let mock: Arc<dyn JudgeBackend> = Arc::new(MockJudge::new(self.seed, self.mock.clone()));
        let http: Arc<dyn JudgeBackend> = Arc::new(HttpJudge::new());
        for spec in &self.judges {
            let backend = match spec.backend {
                Backend::Mock => mock.clone(),
                Backend::Http => http.clone(),
            };
            gateway.register(spec.descriptor(), backend, spec.max_in_flight);
        }
        Ok(gateway)
    }
}
