//! Human audit of AI-labelled preference pairs.
//!
//! A seeded sample of the dataset becomes a set of tasks. Each annotator sees
//! every task in an order derived from the task's base order and a per-annotator
//! coin, answers First/Second/Tie, and the store maps answers back into the
//! pair frame. A pair is classified once the full panel has answered.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::Rate;
use crate::consensus::{decide, PolicyName, Side};
use crate::hashing::{substream, unit};
use crate::judge::{CanonicalChoice, PresentationOrder};
use crate::model::{encode_record, read_records, write_records, Orientation, PreferencePair, Record, RecordError};

pub const QUORUM: usize = 3;
pub const PANEL: usize = 4;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("cannot sample {n} tasks from {size} pairs")]
    SampleTooLarge { n: usize, size: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("unknown annotator `{0}`")]
    UnknownAnnotator(String),
    #[error("annotator `{annotator_id}` already annotated task `{task_id}`")]
    Duplicate { task_id: String, annotator_id: String },
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("audit store io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditTask {
    pub task_id: String,
    pub pair_id: String,
    pub prompt_text: String,
    /// Image locators in the pair frame.
    pub image_a: String,
    pub image_b: String,
    /// AI label in the pair frame.
    pub ai_label: Side,
    pub policy_stratum: PolicyName,
    /// Order before the per-annotator coin is applied.
    pub base_order: PresentationOrder,
    pub order_seed: u64,
}

impl AuditTask {
    /// Order shown to `annotator`: the base order, flipped when the
    /// annotator's coin for this task comes up.
    pub fn display_order(&self, annotator_id: &str) -> PresentationOrder {
        if unit(self.order_seed, &["audit-display", &self.task_id, annotator_id]) < 0.5 {
            self.base_order
        } else {
            self.base_order.flipped()
        }
    }

    pub fn view(&self, annotator_id: &str) -> TaskView {
        let order = self.display_order(annotator_id);
        let (left, right) = match order {
            PresentationOrder::Original => (&self.image_a, &self.image_b),
            PresentationOrder::Swapped => (&self.image_b, &self.image_a),
        };
        TaskView {
            task_id: self.task_id.clone(),
            prompt_text: self.prompt_text.clone(),
            first_image: left.clone(),
            second_image: right.clone(),
        }
    }
}

impl Record for AuditTask {
    fn validate(&self) -> Result<(), RecordError> {
        if self.task_id.is_empty() {
            return Err(RecordError::Invalid {
                field: "task_id",
                reason: "must not be empty".into(),
            });
        }
        Ok(())
    }
}

/// What an annotator is shown. Carries no AI label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub prompt_text: String,
    pub first_image: String,
    pub second_image: String,
}

/// The consensus policy under which a tally would first be accepted.
/// Pairs without a tally fall in the widest stratum.
pub fn stratum_of(pair: &PreferencePair) -> PolicyName {
    let Some(tally) = pair.consensus_tally else {
        return PolicyName::FivePlusTieOrError;
    };
    PolicyName::ALL
        .into_iter()
        .find(|p| decide(&tally, &p.policy()).winner().is_some())
        .unwrap_or(PolicyName::FivePlusTieOrError)
}

fn task_from(pair: &PreferencePair, task_id: String, base_order: PresentationOrder, seed: u64) -> AuditTask {
    // frame slot A is whichever image the training record puts first
    let (first, second, ai_label) = match pair.orientation {
        Orientation::ChosenFirst => (&pair.chosen, &pair.rejected, Side::A),
        Orientation::ChosenSecond => (&pair.rejected, &pair.chosen, Side::B),
    };
    AuditTask {
        task_id,
        pair_id: pair.pair_id.clone(),
        prompt_text: pair.prompt.clone(),
        image_a: first.uri.clone(),
        image_b: second.uri.clone(),
        ai_label,
        policy_stratum: stratum_of(pair),
        base_order,
        order_seed: seed,
    }
}

/// Seeded sample of `n` pairs without replacement. With `stratify`, each
/// stratum contributes in proportion to its size (largest remainder).
pub fn sample_for_audit(
    dataset: &[PreferencePair],
    n: usize,
    seed: u64,
    stratify: bool,
) -> Result<Vec<AuditTask>, AuditError> {
    if dataset.is_empty() {
        return Err(AuditError::EmptyDataset);
    }
    if n > dataset.len() {
        return Err(AuditError::SampleTooLarge { n, size: dataset.len() });
    }
    let mut rng = substream(seed, "audit-sample");
    let mut chosen: Vec<usize> = if stratify {
        let mut strata: BTreeMap<PolicyName, Vec<usize>> = BTreeMap::new();
        for (i, p) in dataset.iter().enumerate() {
            strata.entry(stratum_of(p)).or_default().push(i);
        }
        let quotas = proportional_quotas(&strata.values().map(Vec::len).collect::<Vec<_>>(), n);
        let mut picked = Vec::with_capacity(n);
        for (members, quota) in strata.values().zip(quotas) {
            picked.extend(
                index::sample(&mut rng, members.len(), quota)
                    .into_iter()
                    .map(|j| members[j]),
            );
        }
        picked.shuffle(&mut rng);
        picked
    } else {
        index::sample(&mut rng, dataset.len(), n).into_vec()
    };
    chosen.truncate(n);
    Ok(chosen
        .into_iter()
        .enumerate()
        .map(|(k, i)| {
            let order = if rng.random_bool(0.5) {
                PresentationOrder::Swapped
            } else {
                PresentationOrder::Original
            };
            task_from(&dataset[i], format!("t{:04}", k + 1), order, seed)
        })
        .collect())
}

/// Splits `n` across groups of the given sizes in proportion, rounding by
/// largest remainder (earlier groups win ties).
fn proportional_quotas(sizes: &[usize], n: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let mut quotas: Vec<usize> = sizes.iter().map(|s| s * n / total).collect();
    let mut remainders: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(i, s)| (s * n % total, i)).collect();
    remainders.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
    let short = n - quotas.iter().sum::<usize>();
    for &(_, i) in remainders.iter().take(short) {
        quotas[i] += 1;
    }
    quotas
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnnotatorChoice {
    First,
    Second,
    Tie,
}

pub fn canonical_annotation(choice: AnnotatorChoice, order: PresentationOrder) -> CanonicalChoice {
    match (choice, order) {
        (AnnotatorChoice::Tie, _) => CanonicalChoice::Tie,
        (AnnotatorChoice::First, PresentationOrder::Original)
        | (AnnotatorChoice::Second, PresentationOrder::Swapped) => CanonicalChoice::A,
        _ => CanonicalChoice::B,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditAnnotation {
    pub task_id: String,
    pub annotator_id: String,
    pub choice: AnnotatorChoice,
    pub display_order: PresentationOrder,
    pub canonical_choice: CanonicalChoice,
    pub received_at: String,
}

impl Record for AuditAnnotation {
    fn validate(&self) -> Result<(), RecordError> {
        if canonical_annotation(self.choice, self.display_order) != self.canonical_choice {
            return Err(RecordError::Invalid {
                field: "canonical_choice",
                reason: "does not match choice under display order".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Correct,
    Error,
    Controversial,
}

/// `None` while fewer than `panel` annotations exist. Ties count toward
/// neither side.
pub fn consensus_classify(
    annotations: &[CanonicalChoice],
    ai_label: Side,
    quorum: usize,
    panel: usize,
) -> Option<Category> {
    if annotations.len() < panel {
        return None;
    }
    let (label, other) = match ai_label {
        Side::A => (CanonicalChoice::A, CanonicalChoice::B),
        Side::B => (CanonicalChoice::B, CanonicalChoice::A),
    };
    let matches = annotations.iter().filter(|c| **c == label).count();
    let contradicts = annotations.iter().filter(|c| **c == other).count();
    Some(if matches >= quorum {
        Category::Correct
    } else if contradicts >= quorum {
        Category::Error
    } else {
        Category::Controversial
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub strata: Vec<PolicyName>,
    pub n: usize,
    pub correct: f64,
    pub error: f64,
    pub controversial: f64,
    pub display: [String; 3],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub rows: Vec<ReportRow>,
    pub pending: usize,
    pub notes: Vec<String>,
}

pub const REPORT_HEADER: &str = "| Method | N | Corr. (%) | Err. (%) | Controv. (%) |";

pub fn method_label(policy: PolicyName) -> &'static str {
    match policy {
        PolicyName::Strict => "All Correct",
        PolicyName::FivePlusTie => "5 Correct + 1 Tie",
        PolicyName::FivePlusTieOrError => "5 Correct + 1 Tie/Error",
    }
}

/// One row per policy. A policy's row covers every stratum it admits, so the
/// rows are nested like the policies. `None` entries are pending and only
/// counted.
pub fn alignment_report(classified: &[(PolicyName, Option<Category>)]) -> AlignmentReport {
    let mut report = AlignmentReport {
        pending: classified.iter().filter(|(_, c)| c.is_none()).count(),
        ..Default::default()
    };
    for (i, policy) in PolicyName::ALL.into_iter().enumerate() {
        let strata = PolicyName::ALL[..=i].to_vec();
        let cats: Vec<Category> = classified
            .iter()
            .filter(|(s, _)| strata.contains(s))
            .filter_map(|(_, c)| *c)
            .collect();
        if cats.is_empty() {
            report
                .notes
                .push(format!("{}: no classified pairs", method_label(policy)));
            continue;
        }
        let n = cats.len() as u128;
        let rate = |cat| Rate::new(cats.iter().filter(|c| **c == cat).count() as u128, n);
        let (c, e, v) = (
            rate(Category::Correct),
            rate(Category::Error),
            rate(Category::Controversial),
        );
        report.rows.push(ReportRow {
            method: method_label(policy).to_string(),
            strata,
            n: cats.len(),
            correct: c.percent(),
            error: e.percent(),
            controversial: v.percent(),
            display: [c.display(1), e.display(1), v.display(1)],
        });
    }
    report
}

pub fn render_report(report: &AlignmentReport) -> String {
    let mut out = format!("{REPORT_HEADER}\n|---|---|---|---|---|\n");
    for row in &report.rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            row.method, row.n, row.display[0], row.display[1], row.display[2]
        ));
    }
    for note in &report.notes {
        out.push_str(&format!("\nnote: {note}"));
    }
    if !report.notes.is_empty() {
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StratumProgress {
    pub tasks: usize,
    pub complete: usize,
    pub correct: usize,
    pub error: usize,
    pub controversial: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub total_tasks: usize,
    pub per_annotator: BTreeMap<String, usize>,
    pub per_stratum: BTreeMap<PolicyName, StratumProgress>,
}

const TASKS_FILE: &str = "tasks.jsonl";
const ANNOTATIONS_FILE: &str = "annotations.jsonl";
const ANNOTATORS_FILE: &str = "annotators.json";

/// Tasks plus an append-only annotation log, optionally backed by a directory.
#[derive(Debug)]
pub struct AuditStore {
    tasks: Vec<AuditTask>,
    index: HashMap<String, usize>,
    annotators: BTreeSet<String>,
    annotations: BTreeMap<(String, String), AuditAnnotation>,
    log: Option<File>,
    dir: Option<PathBuf>,
}

impl AuditStore {
    pub fn in_memory(tasks: Vec<AuditTask>, annotators: impl IntoIterator<Item = String>) -> Self {
        let index = tasks.iter().enumerate().map(|(i, t)| (t.task_id.clone(), i)).collect();
        AuditStore {
            tasks,
            index,
            annotators: annotators.into_iter().collect(),
            annotations: BTreeMap::new(),
            log: None,
            dir: None,
        }
    }

    /// Reopens `dir` if it already holds tasks; otherwise writes `tasks` and
    /// `annotators` there first.
    pub fn open_or_create(
        dir: &Path,
        tasks: impl FnOnce() -> Result<Vec<AuditTask>, AuditError>,
        annotators: &[String],
    ) -> Result<Self, AuditError> {
        std::fs::create_dir_all(dir)?;
        let tasks_path = dir.join(TASKS_FILE);
        if !tasks_path.exists() {
            write_records(&tasks_path, &tasks()?)?;
            let list = serde_json::to_vec_pretty(annotators).map_err(RecordError::Encode)?;
            crate::model::write_atomic(&dir.join(ANNOTATORS_FILE), &list)?;
        }
        Self::open(dir)
    }

    pub fn open(dir: &Path) -> Result<Self, AuditError> {
        let tasks: Vec<AuditTask> = read_records(&dir.join(TASKS_FILE))?;
        let annotators: Vec<String> =
            serde_json::from_slice(&std::fs::read(dir.join(ANNOTATORS_FILE))?).map_err(RecordError::Decode)?;
        let mut store = Self::in_memory(tasks, annotators);
        let log_path = dir.join(ANNOTATIONS_FILE);
        if log_path.exists() {
            for a in read_records::<AuditAnnotation>(&log_path)? {
                // first write wins
                store
                    .annotations
                    .entry((a.task_id.clone(), a.annotator_id.clone()))
                    .or_insert(a);
            }
        }
        store.log = Some(OpenOptions::new().create(true).append(true).open(&log_path)?);
        store.dir = Some(dir.to_path_buf());
        Ok(store)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn tasks(&self) -> &[AuditTask] {
        &self.tasks
    }

    pub fn annotators(&self) -> &BTreeSet<String> {
        &self.annotators
    }

    pub fn annotations(&self) -> impl Iterator<Item = &AuditAnnotation> {
        self.annotations.values()
    }

    pub fn task(&self, task_id: &str) -> Option<&AuditTask> {
        self.index.get(task_id).map(|&i| &self.tasks[i])
    }

    fn check_annotator(&self, annotator_id: &str) -> Result<(), AuditError> {
        if self.annotators.contains(annotator_id) {
            Ok(())
        } else {
            Err(AuditError::UnknownAnnotator(annotator_id.to_string()))
        }
    }

    /// First task the annotator has not answered yet.
    pub fn next_task(&self, annotator_id: &str) -> Result<Option<TaskView>, AuditError> {
        self.check_annotator(annotator_id)?;
        Ok(self
            .tasks
            .iter()
            .find(|t| {
                !self
                    .annotations
                    .contains_key(&(t.task_id.clone(), annotator_id.to_string()))
            })
            .map(|t| t.view(annotator_id)))
    }

    pub fn record_annotation(
        &mut self,
        task_id: &str,
        annotator_id: &str,
        choice: AnnotatorChoice,
    ) -> Result<AuditAnnotation, AuditError> {
        self.check_annotator(annotator_id)?;
        let task = self
            .task(task_id)
            .ok_or_else(|| AuditError::UnknownTask(task_id.to_string()))?;
        let key = (task_id.to_string(), annotator_id.to_string());
        if self.annotations.contains_key(&key) {
            return Err(AuditError::Duplicate {
                task_id: task_id.to_string(),
                annotator_id: annotator_id.to_string(),
            });
        }
        let display_order = task.display_order(annotator_id);
        let annotation = AuditAnnotation {
            task_id: task_id.to_string(),
            annotator_id: annotator_id.to_string(),
            choice,
            display_order,
            canonical_choice: canonical_annotation(choice, display_order),
            received_at: chrono::Utc::now().to_rfc3339(),
        };
        if let Some(log) = &mut self.log {
            let mut line = encode_record(&annotation)?;
            line.push('\n');
            log.write_all(line.as_bytes())?;
            log.sync_data()?;
        }
        self.annotations.insert(key, annotation.clone());
        Ok(annotation)
    }

    fn canonical_for(&self, task_id: &str) -> Vec<CanonicalChoice> {
        self.annotations
            .range((task_id.to_string(), String::new())..)
            .take_while(|((t, _), _)| t == task_id)
            .map(|(_, a)| a.canonical_choice)
            .collect()
    }

    pub fn classify(&self, task: &AuditTask) -> Option<Category> {
        consensus_classify(&self.canonical_for(&task.task_id), task.ai_label, QUORUM, PANEL)
    }

    pub fn report(&self) -> AlignmentReport {
        let classified: Vec<(PolicyName, Option<Category>)> = self
            .tasks
            .iter()
            .map(|t| (t.policy_stratum, self.classify(t)))
            .collect();
        alignment_report(&classified)
    }

    pub fn progress(&self) -> Progress {
        let mut progress = Progress {
            total_tasks: self.tasks.len(),
            per_annotator: self.annotators.iter().map(|a| (a.clone(), 0)).collect(),
            ..Default::default()
        };
        for (_, annotator) in self.annotations.keys() {
            *progress.per_annotator.entry(annotator.clone()).or_default() += 1;
        }
        for task in &self.tasks {
            let entry = progress.per_stratum.entry(task.policy_stratum).or_default();
            entry.tasks += 1;
            match self.classify(task) {
                Some(Category::Correct) => entry.correct += 1,
                Some(Category::Error) => entry.error += 1,
                Some(Category::Controversial) => entry.controversial += 1,
                None => continue,
            }
            entry.complete += 1;
        }
        progress
    }
}

pub fn default_annotators() -> Vec<String> {
    (1..=PANEL).map(|i| format!("ann{i}")).collect()
}
