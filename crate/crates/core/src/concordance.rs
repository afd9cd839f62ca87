//! Kendall's W over repeated rankings, top-W group selection and rank-stability pairs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::Side;
use crate::judge::RankRound;
use crate::model::{CandidatePair, ImageSample, Locale, PromptGroup, Record, RecordError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConcordanceError {
    #[error("group `{group_id}` has {m} items; at least 2 are needed")]
    DegenerateGroup { group_id: String, m: usize },
    #[error("group `{group_id}` has {k} rounds; at least {min} are needed")]
    TooFewRounds { group_id: String, k: usize, min: usize },
    #[error("group `{group_id}` round {round}: ranks are not a permutation of 1..={m}")]
    TiedRanks { group_id: String, round: usize, m: usize },
    #[error("group `{group_id}`: round {round} has {got} items, expected {m}")]
    Shape {
        group_id: String,
        round: usize,
        got: usize,
        m: usize,
    },
    #[error("threshold {t} outside 1..={k}")]
    Threshold { t: u32, k: usize },
}

/// `m` items ranked in `k` rounds. Stored column-wise: `rounds[j][i]` is
/// `r_ij`, the rank of item `i` in round `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankMatrix {
    group_id: String,
    rounds: Vec<Vec<u32>>,
}

fn is_permutation(column: &[u32]) -> bool {
    let m = column.len();
    let mut seen = vec![false; m];
    column.iter().all(|&r| {
        let ok = r >= 1 && (r as usize) <= m && !seen[r as usize - 1];
        if ok {
            seen[r as usize - 1] = true;
        }
        ok
    })
}

fn check_rounds(group_id: &str, rounds: &[Vec<u32>], min_rounds: usize) -> Result<usize, ConcordanceError> {
    if rounds.len() < min_rounds {
        return Err(ConcordanceError::TooFewRounds {
            group_id: group_id.to_string(),
            k: rounds.len(),
            min: min_rounds,
        });
    }
    let m = rounds[0].len();
    if m < 2 {
        return Err(ConcordanceError::DegenerateGroup {
            group_id: group_id.to_string(),
            m,
        });
    }
    for (j, column) in rounds.iter().enumerate() {
        if column.len() != m {
            return Err(ConcordanceError::Shape {
                group_id: group_id.to_string(),
                round: j + 1,
                got: column.len(),
                m,
            });
        }
        if !is_permutation(column) {
            return Err(ConcordanceError::TiedRanks {
                group_id: group_id.to_string(),
                round: j + 1,
                m,
            });
        }
    }
    Ok(m)
}

impl RankMatrix {
    /// Builds a matrix from `k ≥ 2` rounds over the same `m ≥ 2` items.
    pub fn new(group_id: impl Into<String>, rounds: Vec<Vec<u32>>) -> Result<Self, ConcordanceError> {
        let group_id = group_id.into();
        check_rounds(&group_id, &rounds, 2)?;
        Ok(RankMatrix { group_id, rounds })
    }

    pub fn from_rounds(rounds: &[RankRound]) -> Result<Self, ConcordanceError> {
        let group_id = rounds.first().map(|r| r.group_id.clone()).unwrap_or_default();
        Self::new(group_id, rounds.iter().map(|r| r.ranking.clone()).collect())
    }

    pub fn group_id(&self) -> &str {
        &self.group_id
    }

    pub fn m(&self) -> usize {
        self.rounds[0].len()
    }

    pub fn k(&self) -> usize {
        self.rounds.len()
    }

    /// `r_ij`.
    pub fn rank(&self, item: usize, round: usize) -> u32 {
        self.rounds[round][item]
    }

    pub fn rounds(&self) -> &[Vec<u32>] {
        &self.rounds
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceResult {
    pub rank_sums: Vec<u64>,
    pub mean_rank_sum: f64,
    pub deviation_sum: f64,
    pub w: f64,
}

/// `R_i = Σ_j r_ij`.
pub fn rank_sums(matrix: &RankMatrix) -> Vec<u64> {
    (0..matrix.m())
        .map(|i| matrix.rounds.iter().map(|col| u64::from(col[i])).sum())
        .collect()
}

/// `W = 12 S / (k² (m³ - m))` for untied rankings.
///
/// `R̄ = k(m+1)/2` can be a half-integer, so the squared deviations are
/// accumulated as `4S = Σ (2R_i - k(m+1))²` in integers and the statistic is
/// formed with a single division.
pub fn kendalls_w(matrix: &RankMatrix) -> ConcordanceResult {
    let m = matrix.m() as u128;
    let k = matrix.k() as u128;
    let sums = rank_sums(matrix);
    let twice_mean = (k * (m + 1)) as i128;
    let four_s: u128 = sums
        .iter()
        .map(|&r| {
            let d = 2 * r as i128 - twice_mean;
            (d * d) as u128
        })
        .sum();
    let denominator = k * k * (m * m * m - m);
    ConcordanceResult {
        rank_sums: sums,
        mean_rank_sum: twice_mean as f64 / 2.0,
        deviation_sum: four_s as f64 / 4.0,
        w: (3 * four_s) as f64 / denominator as f64,
    }
}

/// One row of the per-group concordance report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupConcordance {
    pub group_id: String,
    pub locale: Locale,
    pub w: f64,
    #[serde(default)]
    pub selected: bool,
}

impl Record for GroupConcordance {
    fn validate(&self) -> Result<(), RecordError> {
        if !(0.0..=1.0).contains(&self.w) {
            return Err(RecordError::Invalid {
                field: "w",
                reason: format!("{} outside [0, 1]", self.w),
            });
        }
        Ok(())
    }
}

/// Per locale, the `quota` groups with the largest W (ties: smaller
/// `group_id` first). Locales without a quota are ignored. Output is ordered
/// by locale, then by selection rank.
pub fn select_top_groups(results: &[GroupConcordance], quotas: &BTreeMap<Locale, usize>) -> Vec<GroupConcordance> {
    let mut by_locale: BTreeMap<Locale, Vec<&GroupConcordance>> = BTreeMap::new();
    for r in results {
        if quotas.contains_key(&r.locale) {
            by_locale.entry(r.locale).or_default().push(r);
        }
    }
    let mut selected = Vec::new();
    for (locale, mut groups) in by_locale {
        groups.sort_by(|x, y| y.w.total_cmp(&x.w).then_with(|| x.group_id.cmp(&y.group_id)));
        selected.extend(groups.into_iter().take(quotas[&locale]).map(|g| GroupConcordance {
            selected: true,
            ..g.clone()
        }));
    }
    selected
}

/// An item pair whose relative order held in at least `t` rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StableItemPair {
    /// Item indices, `a < b`.
    pub a: usize,
    pub b: usize,
    pub winner: Side,
    pub count: u32,
}

/// For every item pair `a < b`, counts the rounds where `a` outranks `b`.
/// A pair is kept when the more frequent order reaches `t`; on an even split
/// `a` is named the winner.
pub fn stable_item_pairs(rounds: &[Vec<u32>], t: u32) -> Result<Vec<StableItemPair>, ConcordanceError> {
    let m = check_rounds("", rounds, 1)?;
    let k = rounds.len();
    if t == 0 || t as usize > k {
        return Err(ConcordanceError::Threshold { t, k });
    }
    let mut out = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            let c = rounds.iter().filter(|col| col[a] < col[b]).count() as u32;
            let other = k as u32 - c;
            let (winner, count) = if c >= other { (Side::A, c) } else { (Side::B, other) };
            if count >= t {
                out.push(StableItemPair { a, b, winner, count });
            }
        }
    }
    Ok(out)
}

/// [`stable_item_pairs`] lifted to candidate pairs of `group`. `samples` are
/// the group's samples in `sample_ids` order.
pub fn stable_pairs(
    group: &PromptGroup,
    samples: &[ImageSample],
    rounds: &[RankRound],
    t: u32,
) -> Result<Vec<(CandidatePair, Side, u32)>, ConcordanceError> {
    let columns: Vec<Vec<u32>> = rounds.iter().map(|r| r.ranking.clone()).collect();
    let shape_error = |got| ConcordanceError::Shape {
        group_id: group.group_id.clone(),
        round: 0,
        got,
        m: samples.len(),
    };
    if let Some(col) = columns.iter().find(|c| c.len() != samples.len()) {
        return Err(shape_error(col.len()));
    }
    let found = stable_item_pairs(&columns, t).map_err(|e| match e {
        ConcordanceError::TiedRanks { round, m, .. } => ConcordanceError::TiedRanks {
            group_id: group.group_id.clone(),
            round,
            m,
        },
        other => other,
    })?;
    Ok(found
        .into_iter()
        .map(|p| {
            let mut pair = CandidatePair::new(samples[p.a].clone(), samples[p.b].clone(), group.prompt_text.clone());
            pair.provenance.stability_count = Some(p.count);
            pair.provenance.stage_tags.insert("rank_stable".into());
            (pair, p.winner, p.count)
        })
        .collect())
}
