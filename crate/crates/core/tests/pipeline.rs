use std::collections::BTreeSet;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use forge_core::judge::{
    JudgeBackend, JudgeDescriptor, JudgeGateway, JudgeRequest, MockJudge, RetryPolicy, TransportError,
};
use forge_core::model::{read_records, PreferencePair, Record};
use forge_core::pipeline::{
    resume, stage_stats, synthetic_corpus, Flow, Pipeline, PipelineConfig, PipelineError, StabilityRounds,
    DATASET_FILE, LOCK_FILE, RETRY_QUEUE,
};

fn desk(root: &Path, seed: u64) -> PipelineConfig {
    let corpus = root.join("corpus");
    if !corpus.exists() {
        synthetic_corpus(seed).write(&corpus).unwrap();
    }
    PipelineConfig::desk(seed, corpus, root.join("run"))
}

/// Fails every pairwise call once `armed`, after letting `budget` through.
struct Flaky {
    inner: MockJudge,
    armed: AtomicBool,
    budget: AtomicU64,
}

impl JudgeBackend for Flaky {
    fn invoke(&self, d: &JudgeDescriptor, r: &JudgeRequest) -> Result<String, TransportError> {
        if self.armed.load(Ordering::SeqCst) && matches!(r, JudgeRequest::Compare { .. }) {
            let left = self.budget.load(Ordering::SeqCst);
            if left == 0 {
                return Err(TransportError("connection reset".into()));
            }
            self.budget.store(left - 1, Ordering::SeqCst);
        }
        self.inner.invoke(d, r)
    }
}

fn flaky_gateway(config: &PipelineConfig, budget: u64) -> JudgeGateway {
    let backend: Arc<dyn JudgeBackend> = Arc::new(Flaky {
        inner: MockJudge::new(config.seed, config.mock.clone()),
        armed: AtomicBool::new(true),
        budget: AtomicU64::new(budget),
    });
    let mut gw = JudgeGateway::new(RetryPolicy::immediate());
    for spec in &config.judges {
        gw.register(spec.descriptor(), backend.clone(), 4);
    }
    gw
}

#[test]
fn desk_run_produces_a_balanced_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let config = desk(dir.path(), 42);
    let summary = Pipeline::new(config.clone()).unwrap().run(&config.flows).unwrap();
    let dataset: Vec<PreferencePair> = read_records(&summary.run_dir.join(DATASET_FILE)).unwrap();
    assert_eq!(dataset.len(), summary.manifest.record_count);
    assert!(dataset.len() >= 20, "only {} pairs accepted", dataset.len());
    for p in &dataset {
        p.validate().unwrap();
        assert_eq!(p.consensus_tally.unwrap().total(), 6);
    }
    let split = summary.orientation;
    assert_eq!(split.chosen_first + split.chosen_second, dataset.len());
    for s in &summary.stats {
        assert!(s.output <= s.input, "{s:?}");
    }
    let names: Vec<&str> = summary.stats.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(names.len(), 12, "{names:?}");
    assert!(!summary.run_dir.join(LOCK_FILE).exists());
}

#[test]
fn empty_corpus_gives_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    forge_core::pipeline::Corpus::default().write(&corpus).unwrap();
    let config = PipelineConfig::desk(1, corpus, dir.path().join("run"));
    let summary = Pipeline::new(config.clone()).unwrap().run(&config.flows).unwrap();
    assert_eq!(summary.manifest.record_count, 0);
    assert!(summary.stats.iter().all(|s| s.input == 0 && s.output == 0));
}

#[test]
fn abort_names_the_stage_and_resume_matches_a_clean_run() {
    let clean_dir = tempfile::tempdir().unwrap();
    let config = desk(clean_dir.path(), 5);
    let clean = Pipeline::new(config.clone()).unwrap().run(&config.flows).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let config = desk(dir.path(), 5);
    let pipeline = Pipeline::with_gateway(config.clone(), flaky_gateway(&config, 200)).unwrap();
    let err = pipeline.run(&config.flows).unwrap_err();
    match &err {
        PipelineError::Aborted { stage, pending, .. } => {
            assert_eq!(stage, "cinematic.ensemble");
            assert!(*pending > 0);
        }
        other => panic!("unexpected {other}"),
    }
    assert!(config.paths.output.join(RETRY_QUEUE).exists());
    assert!(!config.paths.output.join(LOCK_FILE).exists());

    let resumed = resume(&config.paths.output).unwrap();
    assert_eq!(resumed.manifest.digest(), clean.manifest.digest());
    assert!(!config.paths.output.join(RETRY_QUEUE).exists());
}

#[test]
fn concurrent_run_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = desk(dir.path(), 3);
    let _held = forge_core::pipeline::RunDir::acquire(&config.paths.output).unwrap();
    let err = Pipeline::new(config.clone()).unwrap().run(&config.flows).unwrap_err();
    assert!(matches!(err, PipelineError::Locked(_)));
}

#[test]
fn single_flow_runs_and_stats_survive_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let config = desk(dir.path(), 9);
    let p = Pipeline::new(config.clone()).unwrap();
    let cin = p.run_cinematic().unwrap();
    assert!(cin.stats.iter().all(|s| !s.stage.starts_with("noncinematic")));
    let on_disk = stage_stats(&config.paths.output).unwrap();
    assert_eq!(on_disk, cin.stats);

    let nc = p.run(&BTreeSet::from([Flow::NonCinematic])).unwrap();
    let union = nc.stats.iter().find(|s| s.stage == "noncinematic.union").unwrap();
    assert!(union.output <= 25 + 15);
}

#[test]
fn reused_stability_rounds_also_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = desk(dir.path(), 11);
    config.cinematic.stability_rounds = StabilityRounds::Reuse;
    let summary = Pipeline::new(config.clone()).unwrap().run_cinematic().unwrap();
    let st = summary.stats.iter().find(|s| s.stage == "cinematic.stability").unwrap();
    assert!(st.output <= st.input);
}
