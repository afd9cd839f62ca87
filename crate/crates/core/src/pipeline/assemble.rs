use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::consensus::{PolicyName, Side};
use crate::hashing::substream;
use crate::model::{
    corpus_digest, read_records, write_records, CandidatePair, ConsensusTally, DatasetManifest, Orientation,
    OrientationSplit, PreferencePair, Record, RecordError, SCHEMA_VERSION,
};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MERGED_FILE: &str = "merged.jsonl";
pub const MERGED_MANIFEST_FILE: &str = "merged.manifest.json";
pub const FORGE_SOURCE: &str = "forge";

/// A pair the consensus policy let through.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedPair {
    pub pair: CandidatePair,
    pub winner: Side,
    pub tally: ConsensusTally,
}

impl Record for AcceptedPair {
    fn validate(&self) -> Result<(), RecordError> {
        self.pair.validate()
    }
}

/// Turns accepted pairs into preference pairs sorted by `pair_id`. The
/// winner becomes `chosen`; each record's orientation is a fair coin from
/// the run seed's `assemble` substream, drawn in `pair_id` order.
pub fn assemble_dataset(
    accepted: &[AcceptedPair],
    seed: u64,
) -> Result<(Vec<PreferencePair>, OrientationSplit), PipelineError> {
    let mut sorted: Vec<&AcceptedPair> = accepted.iter().collect();
    sorted.sort_by(|x, y| x.pair.pair_id.cmp(&y.pair.pair_id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].pair.pair_id == w[1].pair.pair_id) {
        return Err(PipelineError::Assembly(format!(
            "pair `{}` accepted twice",
            w[0].pair.pair_id
        )));
    }
    let mut rng = substream(seed, "assemble");
    let mut split = OrientationSplit::default();
    let dataset = sorted
        .into_iter()
        .map(|a| {
            let (chosen, rejected) = match a.winner {
                Side::A => (&a.pair.sample_a, &a.pair.sample_b),
                Side::B => (&a.pair.sample_b, &a.pair.sample_a),
            };
            let orientation = if rng.random_bool(0.5) {
                split.chosen_first += 1;
                Orientation::ChosenFirst
            } else {
                split.chosen_second += 1;
                Orientation::ChosenSecond
            };
            PreferencePair {
                pair_id: a.pair.pair_id.clone(),
                chosen: chosen.clone(),
                rejected: rejected.clone(),
                prompt: a.pair.prompt_text.clone(),
                analysis_chosen: None,
                analysis_rejected: None,
                orientation,
                consensus_tally: Some(a.tally),
            }
        })
        .collect();
    Ok((dataset, split))
}

pub fn manifest_for(
    dataset: &[PreferencePair],
    policy: PolicyName,
    seed: u64,
    orientation: OrientationSplit,
    sources: BTreeMap<String, usize>,
) -> Result<DatasetManifest, PipelineError> {
    Ok(DatasetManifest {
        schema_version: SCHEMA_VERSION,
        corpus_digest: corpus_digest(dataset)?,
        record_count: dataset.len(),
        policy_name: policy.as_str().to_string(),
        created_at: chrono::Utc::now().to_rfc3339(),
        seed,
        orientation,
        sources,
    })
}

/// Writes `dataset.jsonl` and `manifest.json` under `dir`.
pub fn write_dataset(dir: &Path, dataset: &[PreferencePair], manifest: &DatasetManifest) -> Result<(), PipelineError> {
    write_records(&dir.join(DATASET_FILE), dataset)?;
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(())
}

/// A training record tagged with where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourcedPair {
    pub source: String,
    #[serde(flatten)]
    pub pair: PreferencePair,
}

impl Record for SourcedPair {
    fn validate(&self) -> Result<(), RecordError> {
        if self.source.is_empty() {
            return Err(RecordError::Invalid {
                field: "source",
                reason: "must not be empty".into(),
            });
        }
        self.pair.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeOptions {
    pub source_tag: String,
    /// Keep a seeded subset of this many external records, in file order.
    pub limit: Option<usize>,
    pub seed: u64,
}

/// Concatenates the run's dataset with external preference pairs.
pub fn merge_external(
    dataset: &[PreferencePair],
    external: &[PreferencePair],
    options: &MergeOptions,
) -> Result<(Vec<SourcedPair>, BTreeMap<String, usize>), PipelineError> {
    if options.source_tag == FORGE_SOURCE || options.source_tag.is_empty() {
        return Err(PipelineError::Assembly(format!(
            "external source tag `{}` is reserved or empty",
            options.source_tag
        )));
    }
    let picked: Vec<&PreferencePair> = match options.limit {
        Some(n) if n < external.len() => {
            let mut idx = index::sample(&mut substream(options.seed, "merge"), external.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &external[i]).collect()
        }
        _ => external.iter().collect(),
    };
    let mut seen: HashSet<&str> = dataset.iter().map(|p| p.pair_id.as_str()).collect();
    let mut merged: Vec<SourcedPair> = dataset
        .iter()
        .map(|p| SourcedPair {
            source: FORGE_SOURCE.into(),
            pair: p.clone(),
        })
        .collect();
    for p in picked {
        if !seen.insert(&p.pair_id) {
            return Err(PipelineError::Assembly(format!(
                "pair `{}` appears in both sources",
                p.pair_id
            )));
        }
        merged.push(SourcedPair {
            source: options.source_tag.clone(),
            pair: p.clone(),
        });
    }
    let mut counts = BTreeMap::new();
    for r in &merged {
        *counts.entry(r.source.clone()).or_insert(0) += 1;
    }
    Ok((merged, counts))
}

/// Reads the run's dataset and an external file, writes `merged.jsonl` and
/// its manifest. External line errors keep their 1-based line number.
pub fn merge_files(run_dir: &Path, external: &Path, options: &MergeOptions) -> Result<DatasetManifest, PipelineError> {
    let dataset: Vec<PreferencePair> = read_records(&run_dir.join(DATASET_FILE))?;
    let base = DatasetManifest::read(&run_dir.join(MANIFEST_FILE))?;
    let external_records: Vec<PreferencePair> = read_records(external).map_err(|e| PipelineError::External {
        path: external.to_path_buf(),
        source: e,
    })?;
    let (merged, sources) = merge_external(&dataset, &external_records, options)?;
    write_records(&run_dir.join(MERGED_FILE), &merged)?;
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        corpus_digest: corpus_digest(&merged)?,
        record_count: merged.len(),
        policy_name: base.policy_name,
        created_at: chrono::Utc::now().to_rfc3339(),
        seed: base.seed,
        orientation: base.orientation,
        sources,
    };
    manifest.write(&run_dir.join(MERGED_MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ImageSample, Locale, Theme};

    fn sample(id: &str) -> ImageSample {
        ImageSample {
            sample_id: id.into(),
            group_id: "g".into(),
            locale: Locale::En,
            uri: format!("mem://{id}"),
            width: 64,
            height: 64,
            source_tag: "t".into(),
            theme: Theme::Cinematic,
        }
    }

    fn accepted(i: usize, winner: Side) -> AcceptedPair {
        AcceptedPair {
            pair: CandidatePair::new(sample(&format!("a{i:03}")), sample(&format!("b{i:03}")), "p"),
            winner,
            tally: ConsensusTally {
                a: 6,
                ..Default::default()
            },
        }
    }

    #[test]
    fn winner_b_is_chosen_as_sample_b() {
        let (d, _) = assemble_dataset(&[accepted(0, Side::B)], 1).unwrap();
        assert_eq!(d[0].chosen.sample_id, "b000");
        assert_eq!(d[0].rejected.sample_id, "a000");
    }

    #[test]
    fn orientation_sequence_is_seeded() {
        let pairs: Vec<_> = (0..100).map(|i| accepted(i, Side::A)).collect();
        let (x, sx) = assemble_dataset(&pairs, 7).unwrap();
        let mut reversed = pairs.clone();
        reversed.reverse();
        let (y, sy) = assemble_dataset(&reversed, 7).unwrap();
        assert_eq!(x, y);
        assert_eq!(sx, sy);
        assert_eq!(sx.chosen_first + sx.chosen_second, 100);
        assert!((30..=70).contains(&sx.chosen_first));
        let (z, _) = assemble_dataset(&pairs, 8).unwrap();
        assert_ne!(
            x.iter().map(|p| p.orientation).collect::<Vec<_>>(),
            z.iter().map(|p| p.orientation).collect::<Vec<_>>()
        );
    }

    #[test]
    fn duplicate_pair_is_an_error() {
        let pairs = vec![accepted(1, Side::A), accepted(1, Side::B)];
        assert!(matches!(assemble_dataset(&pairs, 0), Err(PipelineError::Assembly(_))));
    }

    fn pref(id: &str) -> PreferencePair {
        PreferencePair {
            pair_id: id.into(),
            chosen: sample(&format!("{id}-c")),
            rejected: sample(&format!("{id}-r")),
            prompt: "p".into(),
            analysis_chosen: None,
            analysis_rejected: None,
            orientation: Orientation::ChosenFirst,
            consensus_tally: None,
        }
    }

    fn opts(limit: Option<usize>) -> MergeOptions {
        MergeOptions {
            source_tag: "external".into(),
            limit,
            seed: 3,
        }
    }

    #[test]
    fn merge_counts_sources() {
        let ours: Vec<_> = (0..7).map(|i| pref(&format!("f{i}"))).collect();
        let theirs: Vec<_> = (0..10).map(|i| pref(&format!("x{i}"))).collect();
        let (merged, counts) = merge_external(&ours, &theirs, &opts(None)).unwrap();
        assert_eq!(merged.len(), 17);
        assert_eq!(
            counts,
            BTreeMap::from([("external".to_string(), 10), ("forge".to_string(), 7)])
        );
        let (subset, counts) = merge_external(&ours, &theirs, &opts(Some(4))).unwrap();
        assert_eq!(subset.len(), 11);
        assert_eq!(counts["external"], 4);
    }

    #[test]
    fn merge_with_empty_external_is_identity() {
        let ours: Vec<_> = (0..3).map(|i| pref(&format!("f{i}"))).collect();
        let (merged, _) = merge_external(&ours, &[], &opts(None)).unwrap();
        assert_eq!(merged.into_iter().map(|s| s.pair).collect::<Vec<_>>(), ours);
    }

    #[test]
    fn malformed_external_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let ours = vec![pref("f0")];
        let manifest = manifest_for(
            &ours,
            PolicyName::Strict,
            1,
            OrientationSplit::default(),
            BTreeMap::new(),
        )
        .unwrap();
        write_dataset(dir.path(), &ours, &manifest).unwrap();
        let mut text = String::new();
        for i in 0..16 {
            text.push_str(&crate::model::encode_record(&pref(&format!("x{i}"))).unwrap());
            text.push('\n');
        }
        text.push_str("{\"pair_id\": \"broken\"}\n");
        let ext = dir.path().join("external.jsonl");
        std::fs::write(&ext, text).unwrap();
        let err = merge_files(dir.path(), &ext, &opts(None)).unwrap_err();
        assert!(err.to_string().contains("line 17"), "{err}");
    }
}
