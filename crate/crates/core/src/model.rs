//! Canonical record types and their line-oriented encoding.
//!
//! Every record serializes to a single JSON object on one line with explicit
//! field names. Identifiers are opaque strings; nothing refers to records by
//! position, since positions change under the swap protocols.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::sha256_hex;

/// Version of the on-disk record schema, stamped into every manifest.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("invalid field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("encoding failed: {0}")]
    Encode(#[source] serde_json::Error),
    #[error("decoding failed: {0}")]
    Decode(#[source] serde_json::Error),
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<RecordError>,
    },
    #[error("record io: {0}")]
    Io(#[from] std::io::Error),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> RecordError {
    RecordError::Invalid {
        field,
        reason: reason.into(),
    }
}

fn require_non_empty(field: &'static str, value: &str) -> Result<(), RecordError> {
    if value.is_empty() {
        return Err(invalid(field, "must not be empty"));
    }
    Ok(())
}

fn require_finite(field: &'static str, value: f64) -> Result<(), RecordError> {
    if !value.is_finite() {
        return Err(invalid(field, format!("must be finite, got {value}")));
    }
    Ok(())
}

/// A domain type that can be written as one line of a record file.
pub trait Record: Serialize + DeserializeOwned {
    /// Checks the type's invariants.
    fn validate(&self) -> Result<(), RecordError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Locale {
    En,
    Zh,
}

impl Locale {
    pub fn as_str(self) -> &'static str {
        match self {
            Locale::En => "en",
            Locale::Zh => "zh",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theme {
    Cinematic,
    NonCinematic,
}

/// One generated image. Carries a locator only, never pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSample {
    pub sample_id: String,
    pub group_id: String,
    pub locale: Locale,
    /// Content locator. Mock embedders key on it, so two samples with the
    /// same locator are the same content.
    pub uri: String,
    pub width: u32,
    pub height: u32,
    /// Name of the generator that produced the image.
    pub source_tag: String,
    pub theme: Theme,
}

impl Record for ImageSample {
    fn validate(&self) -> Result<(), RecordError> {
        require_non_empty("sample_id", &self.sample_id)?;
        require_non_empty("group_id", &self.group_id)?;
        if self.width == 0 {
            return Err(invalid("width", "must be positive"));
        }
        if self.height == 0 {
            return Err(invalid("height", "must be positive"));
        }
        Ok(())
    }
}

/// The images generated from one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptGroup {
    pub group_id: String,
    pub prompt_text: String,
    pub locale: Locale,
    pub sample_ids: Vec<String>,
}

impl PromptGroup {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

impl Record for PromptGroup {
    fn validate(&self) -> Result<(), RecordError> {
        require_non_empty("group_id", &self.group_id)?;
        if self.sample_ids.len() < 2 {
            return Err(invalid(
                "sample_ids",
                format!("a group needs at least 2 samples, got {}", self.sample_ids.len()),
            ));
        }
        let distinct: BTreeSet<&String> = self.sample_ids.iter().collect();
        if distinct.len() != self.sample_ids.len() {
            return Err(invalid("sample_ids", "sample ids must be distinct"));
        }
        Ok(())
    }
}

/// Which filtering stages a candidate pair passed, with their measurements.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_dissimilarity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structural_dissimilarity: Option<f64>,
    #[serde(default)]
    pub stage_tags: BTreeSet<String>,
}

/// An unordered pair of images from one prompt, between filtering stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub pair_id: String,
    pub sample_a: ImageSample,
    pub sample_b: ImageSample,
    pub prompt_text: String,
    #[serde(default)]
    pub provenance: Provenance,
}

impl CandidatePair {
    /// Builds a pair with the conventional id `"<a>~<b>"`.
    pub fn new(sample_a: ImageSample, sample_b: ImageSample, prompt_text: impl Into<String>) -> Self {
        let pair_id = format!("{}~{}", sample_a.sample_id, sample_b.sample_id);
        CandidatePair {
            pair_id,
            sample_a,
            sample_b,
            prompt_text: prompt_text.into(),
            provenance: Provenance::default(),
        }
    }
}

impl Record for CandidatePair {
    fn validate(&self) -> Result<(), RecordError> {
        require_non_empty("pair_id", &self.pair_id)?;
        self.sample_a.validate()?;
        self.sample_b.validate()?;
        if self.sample_a.sample_id == self.sample_b.sample_id {
            return Err(invalid("sample_b", "a pair needs two distinct samples"));
        }
        if let Some(v) = self.provenance.semantic_dissimilarity {
            require_finite("semantic_dissimilarity", v)?;
            if v < 0.0 {
                return Err(invalid("semantic_dissimilarity", "must be non-negative"));
            }
        }
        if let Some(v) = self.provenance.structural_dissimilarity {
            require_finite("structural_dissimilarity", v)?;
            if v < 0.0 {
                return Err(invalid("structural_dissimilarity", "must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Canonical verdict counts over an ensemble, in the pair's (a, b) frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConsensusTally {
    pub a: u32,
    pub b: u32,
    pub tie: u32,
    pub both_bad: u32,
}

impl ConsensusTally {
    pub fn total(&self) -> u32 {
        self.a + self.b + self.tie + self.both_bad
    }
}

/// Presentation slot of the chosen image in a training record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    ChosenFirst,
    ChosenSecond,
}

/// A (chosen, rejected) image pair sharing one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub pair_id: String,
    pub chosen: ImageSample,
    pub rejected: ImageSample,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis_chosen: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis_rejected: Option<String>,
    pub orientation: Orientation,
    /// Absent for externally sourced pairs that never went through an ensemble.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consensus_tally: Option<ConsensusTally>,
}

impl Record for PreferencePair {
    fn validate(&self) -> Result<(), RecordError> {
        require_non_empty("pair_id", &self.pair_id)?;
        self.chosen.validate()?;
        self.rejected.validate()?;
        if self.chosen.sample_id == self.rejected.sample_id {
            return Err(invalid("rejected", "chosen and rejected must differ"));
        }
        if let Some(tally) = self.consensus_tally {
            let total = tally.total();
            if total == 0 || total % 2 != 0 {
                return Err(invalid(
                    "consensus_tally",
                    format!("tally must cover both orders of every judge, got {total} verdicts"),
                ));
            }
        }
        Ok(())
    }
}

/// Chosen-first / chosen-second counts after label balancing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrientationSplit {
    pub chosen_first: usize,
    pub chosen_second: usize,
}

/// Metadata written next to every dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub corpus_digest: String,
    pub record_count: usize,
    pub policy_name: String,
    pub created_at: String,
    pub seed: u64,
    #[serde(default)]
    pub orientation: OrientationSplit,
    #[serde(default)]
    pub sources: BTreeMap<String, usize>,
}

#[derive(Serialize)]
struct ManifestDigestView<'a> {
    schema_version: u32,
    corpus_digest: &'a str,
    record_count: usize,
    policy_name: &'a str,
    seed: u64,
    orientation: &'a OrientationSplit,
    sources: &'a BTreeMap<String, usize>,
}

impl DatasetManifest {
    /// Digest over every field except `created_at`.
    pub fn digest(&self) -> String {
        let view = ManifestDigestView {
            schema_version: self.schema_version,
            corpus_digest: &self.corpus_digest,
            record_count: self.record_count,
            policy_name: &self.policy_name,
            seed: self.seed,
            orientation: &self.orientation,
            sources: &self.sources,
        };
        let bytes = serde_json::to_vec(&view).expect("manifest view serializes");
        sha256_hex(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<(), RecordError> {
        let mut text = serde_json::to_string_pretty(self).map_err(RecordError::Encode)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, RecordError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(RecordError::Decode)
    }
}

impl Record for DatasetManifest {
    fn validate(&self) -> Result<(), RecordError> {
        require_non_empty("corpus_digest", &self.corpus_digest)?;
        Ok(())
    }
}

/// Encodes one record as a single line (no trailing newline).
pub fn encode_record<R: Record>(record: &R) -> Result<String, RecordError> {
    record.validate()?;
    serde_json::to_string(record).map_err(RecordError::Encode)
}

/// Decodes and validates one line.
pub fn decode_record<R: Record>(line: &str) -> Result<R, RecordError> {
    let record: R = serde_json::from_str(line).map_err(RecordError::Decode)?;
    record.validate()?;
    Ok(record)
}

/// SHA-256 over the canonical encoding of `records`, one line each, every line
/// newline-terminated. The empty corpus hashes to the SHA-256 of no bytes.
pub fn corpus_digest<R: Record>(records: &[R]) -> Result<String, RecordError> {
    let mut bytes = Vec::new();
    for record in records {
        bytes.extend_from_slice(encode_record(record)?.as_bytes());
        bytes.push(b'\n');
    }
    Ok(sha256_hex(&bytes))
}

/// Reads a record file. Blank lines are skipped; errors carry 1-based line numbers.
pub fn read_records<R: Record>(path: &Path) -> Result<Vec<R>, RecordError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = decode_record(&line).map_err(|source| RecordError::Line {
            line: index + 1,
            source: Box::new(source),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Writes a record file atomically (temporary file, then rename).
pub fn write_records<R: Record>(path: &Path, records: &[R]) -> Result<(), RecordError> {
    let mut bytes = Vec::new();
    for record in records {
        bytes.extend_from_slice(encode_record(record)?.as_bytes());
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes)?;
    Ok(())
}

/// Replaces `path` with `bytes` via a sibling temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
