//! Run directory ownership and resumable stages.
//!
//! A judge stage appends one line per finished item to
//! `stages/<stage>.jsonl` and then atomically rewrites
//! `checkpoints/<stage>.json` with the ids covered so far. Lines past the
//! checkpoint (a crash between the two writes) are ignored on resume.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{PipelineError, StageStats};
use crate::hashing::sha256_hex;
use crate::judge::JudgeError;
use crate::model::write_atomic;

pub const LOCK_FILE: &str = "run.lock";
pub const RETRY_QUEUE: &str = "retry_queue.jsonl";

/// Exclusive handle on a run's output directory. The lock file is removed
/// on drop.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn acquire(root: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(root.join("checkpoints"))?;
        std::fs::create_dir_all(root.join("stages"))?;
        let lock = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(PipelineError::Locked(lock));
            }
            Err(e) => return Err(e.into()),
        }
        Ok(RunDir {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn checkpoint_path(&self, stage: &str) -> PathBuf {
        checkpoint_path(&self.root, stage)
    }

    fn log_path(&self, stage: &str) -> PathBuf {
        self.root.join("stages").join(format!("{stage}.jsonl"))
    }

    pub fn load_checkpoint(&self, stage: &str) -> Result<Option<StageCheckpoint>, PipelineError> {
        load_checkpoint(&self.root, stage)
    }

    pub fn save_checkpoint(&self, checkpoint: &StageCheckpoint) -> Result<(), PipelineError> {
        let mut text = serde_json::to_string_pretty(checkpoint).map_err(crate::model::RecordError::Encode)?;
        text.push('\n');
        write_atomic(&self.checkpoint_path(&checkpoint.stage), text.as_bytes())?;
        Ok(())
    }

    /// Records a stage with no judge calls as finished.
    pub fn finish_pure(&self, stage: &str, input_digest: String, stats: StageStats) -> Result<(), PipelineError> {
        self.save_checkpoint(&StageCheckpoint {
            stage: stage.to_string(),
            input_digest,
            completed: Vec::new(),
            done: true,
            stats: Some(stats),
        })
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(self.root.join(LOCK_FILE));
    }
}

fn checkpoint_path(root: &Path, stage: &str) -> PathBuf {
    root.join("checkpoints").join(format!("{stage}.json"))
}

pub fn load_checkpoint(root: &Path, stage: &str) -> Result<Option<StageCheckpoint>, PipelineError> {
    let path = checkpoint_path(root, stage);
    match std::fs::read_to_string(&path) {
        Ok(text) => Ok(Some(
            serde_json::from_str(&text).map_err(crate::model::RecordError::Decode)?,
        )),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCheckpoint {
    pub stage: String,
    pub input_digest: String,
    /// Ids whose outcome is in the stage log, in completion order.
    pub completed: Vec<String>,
    pub done: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<StageStats>,
}

/// Digest of a stage's parameters and inputs.
pub fn input_digest<P: Serialize + ?Sized, I: Serialize>(stage: &str, params: &P, items: &[I]) -> String {
    let body = serde_json::to_string(&(stage, params, items)).expect("stage inputs serialize");
    sha256_hex(body.as_bytes())
}

/// What one item of a judge stage produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome<O> {
    Done { output: O },
    Discarded { reason: String },
}

impl<O> Outcome<O> {
    pub fn output(&self) -> Option<&O> {
        match self {
            Outcome::Done { output } => Some(output),
            Outcome::Discarded { .. } => None,
        }
    }
}

/// Failure of one item.
#[derive(Debug)]
pub enum StepError {
    /// A judge is unreachable; the item stays pending.
    Unavailable(JudgeError),
    /// The item is dropped and counted.
    Discard(String),
}

#[derive(Serialize, Deserialize)]
struct LogLine<O> {
    id: String,
    #[serde(flatten)]
    outcome: Outcome<O>,
}

#[derive(Serialize)]
struct LogLineRef<'a, O> {
    id: &'a str,
    #[serde(flatten)]
    outcome: &'a Outcome<O>,
}

#[derive(Serialize)]
struct RetryEntry<'a> {
    stage: &'a str,
    id: &'a str,
}

/// A judge stage over `items`.
pub struct Stage<'a> {
    pub run: &'a RunDir,
    pub name: &'a str,
    pub input_digest: String,
    pub chunk_size: usize,
}

impl Stage<'_> {
    /// Runs `step` on every item not already covered by a matching
    /// checkpoint. Items run in parallel within a chunk; the log and the
    /// returned outcomes follow item order. If any item hits an unavailable
    /// judge, the chunk's other results are kept, the pending ids go to the
    /// retry queue and the stage aborts.
    pub fn run<I, O, F>(
        &self,
        items: &[I],
        id: impl Fn(&I) -> String,
        step: F,
    ) -> Result<Vec<(String, Outcome<O>)>, PipelineError>
    where
        I: Sync,
        O: Serialize + DeserializeOwned + Send,
        F: Fn(&I) -> Result<O, StepError> + Sync,
    {
        let ids: Vec<String> = items.iter().map(&id).collect();
        let mut finished = self.resume_state::<O>()?;
        let mut checkpoint = StageCheckpoint {
            stage: self.name.to_string(),
            input_digest: self.input_digest.clone(),
            completed: ids.iter().filter(|i| finished.contains_key(*i)).cloned().collect(),
            done: false,
            stats: None,
        };
        let wanted: HashSet<&String> = ids.iter().collect();
        finished.retain(|k, _| wanted.contains(k));
        self.rewrite_log(&checkpoint.completed, &finished)?;
        self.run.save_checkpoint(&checkpoint)?;

        let todo: Vec<usize> = (0..items.len()).filter(|&i| !finished.contains_key(&ids[i])).collect();
        if !todo.is_empty() {
            tracing::info!(
                stage = self.name,
                pending = todo.len(),
                total = items.len(),
                "running stage"
            );
        }
        let mut log = OpenOptions::new()
            .append(true)
            .create(true)
            .open(self.run.log_path(self.name))?;
        for (chunk_index, chunk) in todo.chunks(self.chunk_size).enumerate() {
            let results: Vec<Result<O, StepError>> = chunk.par_iter().map(|&i| step(&items[i])).collect();
            let mut unavailable = None;
            let mut pending = Vec::new();
            for (&i, result) in chunk.iter().zip(results) {
                let outcome = match result {
                    Ok(output) => Outcome::Done { output },
                    Err(StepError::Discard(reason)) => {
                        tracing::warn!(stage = self.name, id = %ids[i], %reason, "discarded");
                        Outcome::Discarded { reason }
                    }
                    Err(StepError::Unavailable(e)) => {
                        unavailable.get_or_insert(e);
                        pending.push(i);
                        continue;
                    }
                };
                let line = LogLine {
                    id: ids[i].clone(),
                    outcome,
                };
                writeln!(log, "{}", serde_json::to_string(&line).expect("outcomes serialize"))?;
                checkpoint.completed.push(ids[i].clone());
                finished.insert(ids[i].clone(), line.outcome);
            }
            log.sync_data()?;
            self.run.save_checkpoint(&checkpoint)?;
            if let Some(source) = unavailable {
                let rest = todo.chunks(self.chunk_size).skip(chunk_index + 1).flatten().copied();
                pending.extend(rest);
                self.write_retry_queue(pending.iter().map(|&i| ids[i].as_str()))?;
                return Err(PipelineError::Aborted {
                    stage: self.name.to_string(),
                    pending: pending.len(),
                    source,
                });
            }
        }
        let _ = std::fs::remove_file(self.run.path(RETRY_QUEUE));
        Ok(ids
            .into_iter()
            .map(|id| {
                let outcome = finished.remove(&id).expect("every item finished");
                (id, outcome)
            })
            .collect())
    }

    /// Marks the stage finished with its stats.
    pub fn finish(&self, stats: StageStats) -> Result<(), PipelineError> {
        let mut cp = self
            .run
            .load_checkpoint(self.name)?
            .expect("stage ran before finishing");
        cp.done = true;
        cp.stats = Some(stats);
        self.run.save_checkpoint(&cp)
    }

    fn resume_state<O: DeserializeOwned>(&self) -> Result<HashMap<String, Outcome<O>>, PipelineError> {
        let Some(cp) = self.run.load_checkpoint(self.name)? else {
            return Ok(HashMap::new());
        };
        if cp.input_digest != self.input_digest {
            tracing::info!(stage = self.name, "inputs changed; discarding checkpoint");
            return Ok(HashMap::new());
        }
        let path = self.run.log_path(self.name);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(HashMap::new()),
            Err(e) => return Err(e.into()),
        };
        let covered: HashSet<&String> = cp.completed.iter().collect();
        let mut out = HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            // a torn final line is past the checkpoint and can be dropped
            let Ok(entry) = serde_json::from_str::<LogLine<O>>(line) else {
                continue;
            };
            if covered.contains(&entry.id) {
                out.insert(entry.id, entry.outcome);
            }
        }
        Ok(out)
    }

    fn rewrite_log<O: Serialize>(
        &self,
        order: &[String],
        outcomes: &HashMap<String, Outcome<O>>,
    ) -> Result<(), PipelineError> {
        let mut text = String::new();
        for id in order {
            let line = LogLineRef {
                id,
                outcome: &outcomes[id],
            };
            text.push_str(&serde_json::to_string(&line).expect("outcomes serialize"));
            text.push('\n');
        }
        write_atomic(&self.run.log_path(self.name), text.as_bytes())?;
        Ok(())
    }

    fn write_retry_queue<'s>(&self, ids: impl Iterator<Item = &'s str>) -> Result<(), PipelineError> {
        let mut f = File::create(self.run.path(RETRY_QUEUE))?;
        for id in ids {
            writeln!(
                f,
                "{}",
                serde_json::to_string(&RetryEntry { stage: self.name, id }).expect("serializes")
            )?;
        }
        f.sync_all()?;
        Ok(())
    }
}
