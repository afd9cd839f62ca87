//! Candidate pairs for non-cinematic groups: enumeration, dimension matching
//! and top-k dissimilarity selection.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judge::{Facet, JudgeError, JudgeGateway};
use crate::model::{CandidatePair, ImageSample, PromptGroup, Record, RecordError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PairFilterError {
    #[error("group `{group_id}` has {m} samples; at least 2 are needed")]
    DegenerateGroup { group_id: String, m: usize },
    #[error("group `{group_id}` lists sample `{sample_id}` but it was not supplied")]
    MissingSample { group_id: String, sample_id: String },
    #[error(transparent)]
    Judge(#[from] JudgeError),
}

/// All `m(m-1)/2` unordered pairs of the group, in `sample_ids` order.
pub fn enumerate_pairs(group: &PromptGroup, samples: &[ImageSample]) -> Result<Vec<CandidatePair>, PairFilterError> {
    if group.sample_ids.len() < 2 {
        return Err(PairFilterError::DegenerateGroup {
            group_id: group.group_id.clone(),
            m: group.sample_ids.len(),
        });
    }
    let ordered: Vec<&ImageSample> = group
        .sample_ids
        .iter()
        .map(|id| {
            samples
                .iter()
                .find(|s| &s.sample_id == id)
                .ok_or_else(|| PairFilterError::MissingSample {
                    group_id: group.group_id.clone(),
                    sample_id: id.clone(),
                })
        })
        .collect::<Result<_, _>>()?;
    let mut pairs = Vec::with_capacity(ordered.len() * (ordered.len() - 1) / 2);
    for (i, a) in ordered.iter().enumerate() {
        for b in &ordered[i + 1..] {
            pairs.push(CandidatePair::new(
                (*a).clone(),
                (*b).clone(),
                group.prompt_text.clone(),
            ));
        }
    }
    Ok(pairs)
}

/// Keeps pairs whose two images have exactly the same width and height.
pub fn match_dimensions(pairs: Vec<CandidatePair>) -> Vec<CandidatePair> {
    pairs
        .into_iter()
        .filter(|p| p.sample_a.width == p.sample_b.width && p.sample_a.height == p.sample_b.height)
        .map(|mut p| {
            p.provenance.stage_tags.insert("dimension_matched".into());
            p
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissimilarityScore {
    pub pair_id: String,
    pub semantic: f64,
    pub structural: f64,
}

impl Record for DissimilarityScore {
    fn validate(&self) -> Result<(), RecordError> {
        for (field, v) in [("semantic", self.semantic), ("structural", self.structural)] {
            if !(0.0..=2.0).contains(&v) {
                return Err(RecordError::Invalid {
                    field,
                    reason: format!("{v} outside [0, 2]"),
                });
            }
        }
        Ok(())
    }
}

/// `1 - cos(u, v)`, clamped to `[0, 2]`. Identical directions give exactly 0.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let (nu, nv) = (norm(u), norm(v));
    let dot: f64 = u.iter().zip(v).map(|(a, b)| (a / nu) * (b / nv)).sum();
    if u.iter().zip(v).all(|(a, b)| a / nu == b / nv) {
        return 0.0;
    }
    (1.0 - dot).clamp(0.0, 2.0)
}

/// Scores a pair with one embedder per facet.
pub fn dissimilarity(
    gateway: &JudgeGateway,
    pair: &CandidatePair,
    semantic_judge: &str,
    structural_judge: &str,
) -> Result<DissimilarityScore, PairFilterError> {
    let facet = |judge: &str, facet| -> Result<f64, PairFilterError> {
        let u = gateway.embed(judge, &pair.sample_a, facet)?;
        let v = gateway.embed(judge, &pair.sample_b, facet)?;
        Ok(cosine_distance(&u, &v))
    };
    Ok(DissimilarityScore {
        pair_id: pair.pair_id.clone(),
        semantic: facet(semantic_judge, Facet::Semantic)?,
        structural: facet(structural_judge, Facet::Structural)?,
    })
}

fn top_k(
    scores: &[DissimilarityScore],
    k: usize,
    key: impl Fn(&DissimilarityScore) -> f64,
) -> Vec<&DissimilarityScore> {
    let mut ranked: Vec<&DissimilarityScore> = scores.iter().collect();
    ranked.sort_by(|x, y| key(y).total_cmp(&key(x)).then_with(|| x.pair_id.cmp(&y.pair_id)));
    ranked.truncate(k);
    ranked
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UnionSelection {
    /// Selected ids in ascending order.
    pub pair_ids: Vec<String>,
    /// Lowest score that made each facet's top-k, if any pair did.
    pub semantic_cutoff: Option<f64>,
    pub structural_cutoff: Option<f64>,
}

/// Union of the `k_semantic` most semantically distant pairs and the
/// `k_structural` most structurally distant ones. Ties rank by ascending
/// `pair_id`.
pub fn select_dissimilar_union(
    scores: &[DissimilarityScore],
    k_semantic: usize,
    k_structural: usize,
) -> UnionSelection {
    let semantic = top_k(scores, k_semantic, |s| s.semantic);
    let structural = top_k(scores, k_structural, |s| s.structural);
    let ids: BTreeSet<String> = semantic.iter().chain(&structural).map(|s| s.pair_id.clone()).collect();
    UnionSelection {
        pair_ids: ids.into_iter().collect(),
        semantic_cutoff: semantic.last().map(|s| s.semantic),
        structural_cutoff: structural.last().map(|s| s.structural),
    }
}
