//! Uniform gateway to every external evaluator.
//!
//! Backends only move text: they receive a [`JudgeRequest`] and return the raw
//! response string. The gateway owns kind checks, retries, response caching,
//! per-judge concurrency limits and strict parsing of the four response
//! shapes (score, ranking, verdict, embedding).

mod cache;
mod http;
mod mock;
mod parse;
pub mod prompts;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::canonicalize;
use crate::hashing::sha256_hex;
use crate::model::{CandidatePair, ImageSample, PromptGroup};

pub use cache::ResponseCache;
pub use http::HttpJudge;
pub use mock::{MockJudge, MockParams};
pub use parse::{parse_embedding, parse_ranking, parse_score, parse_verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    Pointwise,
    Ranker,
    Pairwise,
    Embedder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeDescriptor {
    pub judge_id: String,
    pub kind: JudgeKind,
    pub deterministic: bool,
    /// Endpoint, credential env-var name, sampling parameters. Only live
    /// adapters read it.
    #[serde(default)]
    pub config: BTreeMap<String, String>,
}

impl JudgeDescriptor {
    /// Descriptor with the default sampling settings (temperature 0.7,
    /// thinking budget 4096).
    pub fn new(judge_id: impl Into<String>, kind: JudgeKind, deterministic: bool) -> Self {
        let mut config = BTreeMap::new();
        config.insert("temperature".to_string(), "0.7".to_string());
        config.insert("thinking_budget".to_string(), "4096".to_string());
        JudgeDescriptor {
            judge_id: judge_id.into(),
            kind,
            deterministic,
            config,
        }
    }

    pub fn with_config(mut self, key: &str, value: &str) -> Self {
        self.config.insert(key.to_string(), value.to_string());
        self
    }
}

/// Order in which a pair's images are shown to a judge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresentationOrder {
    /// `(a, b)`
    Original,
    /// `(b, a)`
    Swapped,
}

impl PresentationOrder {
    pub fn flipped(self) -> Self {
        match self {
            PresentationOrder::Original => PresentationOrder::Swapped,
            PresentationOrder::Swapped => PresentationOrder::Original,
        }
    }
}

/// What the judge said, relative to presentation slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RawChoice {
    First,
    Second,
    Tie,
    BothBad,
}

/// A verdict re-expressed in the pair's fixed `(a, b)` frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CanonicalChoice {
    A,
    B,
    Tie,
    BothBad,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub judge_id: String,
    pub pair_id: String,
    pub order: PresentationOrder,
    pub raw_choice: RawChoice,
    pub canonical_choice: CanonicalChoice,
    pub cached: bool,
}

impl crate::model::Record for JudgeVerdict {
    fn validate(&self) -> Result<(), crate::model::RecordError> {
        if canonicalize(self.raw_choice, self.order) != self.canonical_choice {
            return Err(crate::model::RecordError::Invalid {
                field: "canonical_choice",
                reason: "does not match raw_choice under order".into(),
            });
        }
        Ok(())
    }
}

/// One ranking round of a prompt group. `ranking[i]` is the rank (1 = best)
/// of the group's i-th sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRound {
    pub group_id: String,
    pub round_index: u32,
    pub ranking: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Facet {
    Semantic,
    Structural,
}

/// Everything a backend needs to produce one response.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum JudgeRequest {
    Score {
        sample: ImageSample,
        prompt: String,
    },
    Rank {
        group_id: String,
        samples: Vec<ImageSample>,
        prompt: String,
        round_index: u32,
    },
    Compare {
        pair_id: String,
        order: PresentationOrder,
        first: ImageSample,
        second: ImageSample,
        prompt: String,
    },
    Embed {
        sample: ImageSample,
        facet: Facet,
    },
}

impl JudgeRequest {
    pub fn kind(&self) -> JudgeKind {
        match self {
            JudgeRequest::Score { .. } => JudgeKind::Pointwise,
            JudgeRequest::Rank { .. } => JudgeKind::Ranker,
            JudgeRequest::Compare { .. } => JudgeKind::Pairwise,
            JudgeRequest::Embed { .. } => JudgeKind::Embedder,
        }
    }

    /// Cache key over the judge, the operation and its canonical inputs
    /// (presentation order included).
    pub fn cache_key(&self, judge_id: &str) -> String {
        let body = serde_json::to_string(self).expect("requests serialize");
        sha256_hex(format!("{judge_id}\n{body}").as_bytes())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{0}")]
pub struct TransportError(pub String);

/// Something that answers judge requests with raw text.
pub trait JudgeBackend: Send + Sync {
    fn invoke(&self, descriptor: &JudgeDescriptor, request: &JudgeRequest) -> Result<String, TransportError>;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JudgeError {
    #[error("unknown judge `{0}`")]
    UnknownJudge(String),
    #[error("judge `{judge_id}` is a {actual:?} judge, expected {expected:?}")]
    WrongKind {
        judge_id: String,
        expected: JudgeKind,
        actual: JudgeKind,
    },
    #[error("judge `{judge_id}` unavailable after {attempts} attempts: {last_error}")]
    Unavailable {
        judge_id: String,
        attempts: u32,
        last_error: String,
    },
    #[error("judge `{judge_id}` returned an unparsable response ({reason}): {response:?}")]
    Parse {
        judge_id: String,
        reason: String,
        response: String,
    },
    #[error("judge `{judge_id}` returned a degenerate embedding for `{sample_id}`")]
    DegenerateEmbedding { judge_id: String, sample_id: String },
    #[error("judge `{judge_id}` changed embedding dimension for {facet:?}: {expected} then {actual}")]
    DimensionMismatch {
        judge_id: String,
        facet: Facet,
        expected: usize,
        actual: usize,
    },
    #[error("request does not fit group `{0}`")]
    GroupMismatch(String),
}

impl JudgeError {
    /// Transport exhaustion is the only error that means "try again later";
    /// everything else is a property of the inputs or the response.
    pub fn is_unavailable(&self) -> bool {
        matches!(self, JudgeError::Unavailable { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total transport attempts per invocation.
    pub max_attempts: u32,
    /// Extra invocations after a response fails to parse.
    pub parse_retries: u32,
    /// Backoff before the second attempt; doubles each time.
    pub base_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            parse_retries: 1,
            base_backoff: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    pub fn immediate() -> Self {
        RetryPolicy {
            base_backoff: Duration::ZERO,
            ..Self::default()
        }
    }
}

struct InFlightLimit {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct InFlightGuard<'a>(&'a InFlightLimit);

impl InFlightLimit {
    fn new(max: usize) -> Self {
        InFlightLimit {
            max: max.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().expect("in-flight lock");
        while *active >= self.max {
            active = self.freed.wait(active).expect("in-flight lock");
        }
        *active += 1;
        InFlightGuard(self)
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().expect("in-flight lock");
        *active -= 1;
        self.0.freed.notify_one();
    }
}

struct RegisteredJudge {
    descriptor: JudgeDescriptor,
    backend: Arc<dyn JudgeBackend>,
    limit: InFlightLimit,
    invocations: AtomicU64,
    /// Set once a call exhausts its retries; later calls fail fast.
    tripped: AtomicBool,
}

/// Default bound on concurrent requests per judge.
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

pub struct JudgeGateway {
    judges: HashMap<String, RegisteredJudge>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    dimensions: Mutex<HashMap<(String, Facet), usize>>,
}

impl JudgeGateway {
    pub fn new(retry: RetryPolicy) -> Self {
        JudgeGateway {
            judges: HashMap::new(),
            cache: None,
            retry,
            dimensions: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn register(&mut self, descriptor: JudgeDescriptor, backend: Arc<dyn JudgeBackend>, max_in_flight: usize) {
        let id = descriptor.judge_id.clone();
        self.judges.insert(
            id,
            RegisteredJudge {
                descriptor,
                backend,
                limit: InFlightLimit::new(max_in_flight),
                invocations: AtomicU64::new(0),
                tripped: AtomicBool::new(false),
            },
        );
    }

    pub fn descriptor(&self, judge_id: &str) -> Option<&JudgeDescriptor> {
        self.judges.get(judge_id).map(|j| &j.descriptor)
    }

    pub fn contains(&self, judge_id: &str) -> bool {
        self.judges.contains_key(judge_id)
    }

    /// Number of backend invocations made for `judge_id` (cache hits excluded).
    pub fn invocations(&self, judge_id: &str) -> u64 {
        self.judges
            .get(judge_id)
            .map_or(0, |j| j.invocations.load(Ordering::Relaxed))
    }

    fn judge(&self, judge_id: &str, expected: JudgeKind) -> Result<&RegisteredJudge, JudgeError> {
        let judge = self
            .judges
            .get(judge_id)
            .ok_or_else(|| JudgeError::UnknownJudge(judge_id.to_string()))?;
        if judge.descriptor.kind != expected {
            return Err(JudgeError::WrongKind {
                judge_id: judge_id.to_string(),
                expected,
                actual: judge.descriptor.kind,
            });
        }
        Ok(judge)
    }

    fn invoke_with_retry(&self, judge: &RegisteredJudge, request: &JudgeRequest) -> Result<String, JudgeError> {
        if judge.tripped.load(Ordering::Acquire) {
            return Err(JudgeError::Unavailable {
                judge_id: judge.descriptor.judge_id.clone(),
                attempts: 0,
                last_error: "exhausted its retries earlier in this run".into(),
            });
        }
        let mut last_error = String::new();
        for attempt in 0..self.retry.max_attempts.max(1) {
            if attempt > 0 && !self.retry.base_backoff.is_zero() {
                std::thread::sleep(self.retry.base_backoff * 2u32.pow(attempt - 1));
            }
            let _slot = judge.limit.acquire();
            judge.invocations.fetch_add(1, Ordering::Relaxed);
            match judge.backend.invoke(&judge.descriptor, request) {
                Ok(response) => return Ok(response),
                Err(e) => {
                    tracing::debug!(judge = %judge.descriptor.judge_id, attempt, error = %e, "transport failure");
                    last_error = e.0;
                }
            }
        }
        judge.tripped.store(true, Ordering::Release);
        Err(JudgeError::Unavailable {
            judge_id: judge.descriptor.judge_id.clone(),
            attempts: self.retry.max_attempts.max(1),
            last_error,
        })
    }

    /// Looks the request up in the cache, otherwise invokes the judge. Only
    /// responses that parse are stored, so a warm cache never changes an
    /// outcome. Returns the parsed value and whether it came from the cache.
    fn cached_call<T>(
        &self,
        judge_id: &str,
        request: &JudgeRequest,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<(T, bool), JudgeError> {
        let judge = self.judge(judge_id, request.kind())?;
        let key = request.cache_key(judge_id);
        if let Some(cache) = &self.cache {
            if let Some(response) = cache.get(&key) {
                match parse(&response) {
                    Ok(value) => return Ok((value, true)),
                    Err(reason) => {
                        tracing::warn!(judge = judge_id, %key, %reason, "cached response no longer parses; refetching");
                        cache.invalidate(&key);
                    }
                }
            }
        }
        let mut failure = None;
        for _ in 0..=self.retry.parse_retries {
            let response = self.invoke_with_retry(judge, request)?;
            match parse(&response) {
                Ok(value) => {
                    if let Some(cache) = &self.cache {
                        if let Err(e) = cache.put(&key, &response) {
                            tracing::warn!(judge = judge_id, error = %e, "failed to write cache entry");
                        }
                    }
                    return Ok((value, false));
                }
                Err(reason) => failure = Some((reason, response)),
            }
        }
        let (reason, response) = failure.expect("at least one attempt");
        Err(JudgeError::Parse {
            judge_id: judge_id.to_string(),
            reason,
            response,
        })
    }

    /// Pointwise quality score for one image.
    pub fn score_pointwise(&self, judge_id: &str, sample: &ImageSample, prompt: &str) -> Result<f64, JudgeError> {
        let request = JudgeRequest::Score {
            sample: sample.clone(),
            prompt: prompt.to_string(),
        };
        self.cached_call(judge_id, &request, parse_score).map(|(v, _)| v)
    }

    /// One ranking round over a whole group. `samples` must be the group's
    /// samples in `sample_ids` order.
    pub fn rank_images(
        &self,
        judge_id: &str,
        group: &PromptGroup,
        samples: &[ImageSample],
        round_index: u32,
    ) -> Result<RankRound, JudgeError> {
        let ids_match = samples.len() == group.sample_ids.len()
            && samples.iter().zip(&group.sample_ids).all(|(s, id)| &s.sample_id == id);
        if !ids_match || samples.len() < 2 {
            return Err(JudgeError::GroupMismatch(group.group_id.clone()));
        }
        let request = JudgeRequest::Rank {
            group_id: group.group_id.clone(),
            samples: samples.to_vec(),
            prompt: group.prompt_text.clone(),
            round_index,
        };
        let m = samples.len();
        let (ranking, _) = self.cached_call(judge_id, &request, |r| parse_ranking(r, m))?;
        Ok(RankRound {
            group_id: group.group_id.clone(),
            round_index,
            ranking,
        })
    }

    /// Pairwise verdict with the pair shown in `order`.
    pub fn compare_pair(
        &self,
        judge_id: &str,
        pair: &CandidatePair,
        order: PresentationOrder,
    ) -> Result<JudgeVerdict, JudgeError> {
        let (first, second) = match order {
            PresentationOrder::Original => (&pair.sample_a, &pair.sample_b),
            PresentationOrder::Swapped => (&pair.sample_b, &pair.sample_a),
        };
        let request = JudgeRequest::Compare {
            pair_id: pair.pair_id.clone(),
            order,
            first: first.clone(),
            second: second.clone(),
            prompt: pair.prompt_text.clone(),
        };
        let (raw_choice, cached) = self.cached_call(judge_id, &request, parse_verdict)?;
        Ok(JudgeVerdict {
            judge_id: judge_id.to_string(),
            pair_id: pair.pair_id.clone(),
            order,
            raw_choice,
            canonical_choice: canonicalize(raw_choice, order),
            cached,
        })
    }

    /// Embedding of one image for one facet.
    pub fn embed(&self, judge_id: &str, sample: &ImageSample, facet: Facet) -> Result<Vec<f64>, JudgeError> {
        let request = JudgeRequest::Embed {
            sample: sample.clone(),
            facet,
        };
        let (vector, _) = self.cached_call(judge_id, &request, parse_embedding)?;
        if vector.iter().all(|x| *x == 0.0) {
            return Err(JudgeError::DegenerateEmbedding {
                judge_id: judge_id.to_string(),
                sample_id: sample.sample_id.clone(),
            });
        }
        let mut dims = self.dimensions.lock().expect("dimension lock");
        let expected = *dims.entry((judge_id.to_string(), facet)).or_insert(vector.len());
        if expected != vector.len() {
            return Err(JudgeError::DimensionMismatch {
                judge_id: judge_id.to_string(),
                facet,
                expected,
                actual: vector.len(),
            });
        }
        Ok(vector)
    }
}
