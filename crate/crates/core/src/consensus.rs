//! Multi-judge pairwise validation.
//!
//! Every pair is judged by each ensemble member twice, once per presentation
//! order. Verdicts are mapped back into the pair's `(a, b)` frame and tallied;
//! a policy then decides from the tally alone.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judge::{CanonicalChoice, JudgeError, JudgeGateway, JudgeVerdict, PresentationOrder, RawChoice};
use crate::model::{CandidatePair, ConsensusTally, Record, RecordError};

/// Re-expresses a raw verdict in the pair's fixed frame.
pub fn canonicalize(raw: RawChoice, order: PresentationOrder) -> CanonicalChoice {
    match (raw, order) {
        (RawChoice::First, PresentationOrder::Original) => CanonicalChoice::A,
        (RawChoice::Second, PresentationOrder::Original) => CanonicalChoice::B,
        (RawChoice::First, PresentationOrder::Swapped) => CanonicalChoice::B,
        (RawChoice::Second, PresentationOrder::Swapped) => CanonicalChoice::A,
        (RawChoice::Tie, _) => CanonicalChoice::Tie,
        (RawChoice::BothBad, _) => CanonicalChoice::BothBad,
    }
}

/// Exchanges the roles of `a` and `b`.
pub fn swap_canonical(choice: CanonicalChoice) -> CanonicalChoice {
    match choice {
        CanonicalChoice::A => CanonicalChoice::B,
        CanonicalChoice::B => CanonicalChoice::A,
        other => other,
    }
}

/// Exchanges the presentation slots.
pub fn swap_raw(choice: RawChoice) -> RawChoice {
    match choice {
        RawChoice::First => RawChoice::Second,
        RawChoice::Second => RawChoice::First,
        other => other,
    }
}

pub fn tally(verdicts: &[JudgeVerdict]) -> ConsensusTally {
    let mut t = ConsensusTally::default();
    for v in verdicts {
        match v.canonical_choice {
            CanonicalChoice::A => t.a += 1,
            CanonicalChoice::B => t.b += 1,
            CanonicalChoice::Tie => t.tie += 1,
            CanonicalChoice::BothBad => t.both_bad += 1,
        }
    }
    t
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsensusError {
    #[error("ensemble needs at least one judge")]
    NoJudges,
    #[error("ensemble for `{pair_id}` incomplete ({} verdicts): {source}", partial.len())]
    Incomplete {
        pair_id: String,
        partial: Vec<JudgeVerdict>,
        #[source]
        source: JudgeError,
    },
    #[error("ensemble for `{pair_id}` discarded: {source}")]
    Malformed {
        pair_id: String,
        #[source]
        source: JudgeError,
    },
    #[error("ensemble for `{pair_id}` is not complete: {reason}")]
    NotComplete { pair_id: String, reason: String },
}

/// All `2·J` verdicts for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub pair_id: String,
    pub verdicts: Vec<JudgeVerdict>,
    pub tally: ConsensusTally,
}

impl EnsembleResult {
    /// Checks that every judge appears exactly once per order.
    pub fn from_verdicts(pair_id: &str, verdicts: Vec<JudgeVerdict>) -> Result<Self, ConsensusError> {
        let not_complete = |reason: String| ConsensusError::NotComplete {
            pair_id: pair_id.to_string(),
            reason,
        };
        if verdicts.is_empty() {
            return Err(not_complete("no verdicts".into()));
        }
        let mut seen: BTreeMap<&str, [u8; 2]> = BTreeMap::new();
        for v in &verdicts {
            if v.pair_id != pair_id {
                return Err(not_complete(format!("verdict for foreign pair `{}`", v.pair_id)));
            }
            let slot = match v.order {
                PresentationOrder::Original => 0,
                PresentationOrder::Swapped => 1,
            };
            seen.entry(&v.judge_id).or_default()[slot] += 1;
        }
        if let Some((judge, counts)) = seen.iter().find(|(_, c)| **c != [1, 1]) {
            return Err(not_complete(format!(
                "judge `{judge}` has {} original and {} swapped verdicts",
                counts[0], counts[1]
            )));
        }
        let tally = tally(&verdicts);
        Ok(EnsembleResult {
            pair_id: pair_id.to_string(),
            verdicts,
            tally,
        })
    }

    pub fn judge_count(&self) -> usize {
        self.verdicts.len() / 2
    }
}

/// Asks every judge for both orders of `pair`. Transport exhaustion on any
/// call yields [`ConsensusError::Incomplete`] with whatever was collected;
/// an unparsable verdict discards the pair.
pub fn run_ensemble(
    gateway: &JudgeGateway,
    pair: &CandidatePair,
    judges: &[String],
) -> Result<EnsembleResult, ConsensusError> {
    if judges.is_empty() {
        return Err(ConsensusError::NoJudges);
    }
    let mut verdicts = Vec::with_capacity(judges.len() * 2);
    let mut unavailable = None;
    for judge in judges {
        for order in [PresentationOrder::Original, PresentationOrder::Swapped] {
            match gateway.compare_pair(judge, pair, order) {
                Ok(v) => verdicts.push(v),
                Err(e) if e.is_unavailable() => {
                    unavailable.get_or_insert(e);
                }
                Err(e) => {
                    tracing::warn!(pair = %pair.pair_id, judge = %judge, error = %e, "discarding pair");
                    return Err(ConsensusError::Malformed {
                        pair_id: pair.pair_id.clone(),
                        source: e,
                    });
                }
            }
        }
    }
    if let Some(source) = unavailable {
        return Err(ConsensusError::Incomplete {
            pair_id: pair.pair_id.clone(),
            partial: verdicts,
            source,
        });
    }
    EnsembleResult::from_verdicts(&pair.pair_id, verdicts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    Strict,
    FivePlusTie,
    FivePlusTieOrError,
}

impl PolicyName {
    pub const ALL: [PolicyName; 3] = [
        PolicyName::Strict,
        PolicyName::FivePlusTie,
        PolicyName::FivePlusTieOrError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyName::Strict => "strict",
            PolicyName::FivePlusTie => "five_plus_tie",
            PolicyName::FivePlusTieOrError => "five_plus_tie_or_error",
        }
    }

    pub fn policy(self) -> ConsensusPolicy {
        ConsensusPolicy::named(self)
    }
}

impl fmt::Display for PolicyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyName::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown consensus policy `{s}`"))
    }
}

/// Caps on verdicts that disagree with the majority side. The majority must
/// cover everything else, so `majority_min = ensemble size - max_offside`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusPolicy {
    pub name: PolicyName,
    pub max_offside: u32,
    pub max_ties: u32,
    pub max_opposite: u32,
}

impl ConsensusPolicy {
    pub fn named(name: PolicyName) -> Self {
        let (max_offside, max_ties, max_opposite) = match name {
            PolicyName::Strict => (0, 0, 0),
            PolicyName::FivePlusTie => (1, 1, 0),
            PolicyName::FivePlusTieOrError => (1, 1, 1),
        };
        ConsensusPolicy {
            name,
            max_offside,
            max_ties,
            max_opposite,
        }
    }

    pub fn majority_min(&self, ensemble_size: u32) -> u32 {
        ensemble_size.saturating_sub(self.max_offside)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    BothBad,
    InsufficientConsensus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    Accept { winner: Side },
    Reject { reason: RejectReason },
}

impl Decision {
    pub fn winner(&self) -> Option<Side> {
        match self {
            Decision::Accept { winner } => Some(*winner),
            Decision::Reject { .. } => None,
        }
    }
}

/// Decision from a tally alone.
pub fn decide(tally: &ConsensusTally, policy: &ConsensusPolicy) -> Decision {
    if tally.both_bad > 0 {
        return Decision::Reject {
            reason: RejectReason::BothBad,
        };
    }
    let insufficient = Decision::Reject {
        reason: RejectReason::InsufficientConsensus,
    };
    let (winner, majority, opposite) = match tally.a.cmp(&tally.b) {
        std::cmp::Ordering::Greater => (Side::A, tally.a, tally.b),
        std::cmp::Ordering::Less => (Side::B, tally.b, tally.a),
        std::cmp::Ordering::Equal => return insufficient,
    };
    let ok = majority >= policy.majority_min(tally.total())
        && tally.tie <= policy.max_ties
        && opposite <= policy.max_opposite
        && tally.tie + opposite <= policy.max_offside;
    if ok {
        Decision::Accept { winner }
    } else {
        insufficient
    }
}

pub fn apply_policy(result: &EnsembleResult, policy: &ConsensusPolicy) -> Result<Decision, ConsensusError> {
    let total = result.tally.total() as usize;
    if total == 0 || !total.is_multiple_of(2) || total != result.verdicts.len() {
        return Err(ConsensusError::NotComplete {
            pair_id: result.pair_id.clone(),
            reason: format!("tally covers {total} of {} verdicts", result.verdicts.len()),
        });
    }
    Ok(decide(&result.tally, policy))
}

/// One line of the consensus-decision file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub pair_id: String,
    pub policy: PolicyName,
    #[serde(flatten)]
    pub decision: Decision,
    pub tally: ConsensusTally,
}

impl Record for DecisionRecord {
    fn validate(&self) -> Result<(), RecordError> {
        if self.tally.total() == 0 {
            return Err(RecordError::Invalid {
                field: "tally",
                reason: "empty tally".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasCounts {
    pub pairs: usize,
    pub first_sticky: usize,
    pub order_consistent: usize,
}

impl BiasCounts {
    pub fn first_sticky_rate(&self) -> Option<f64> {
        (self.pairs > 0).then(|| self.first_sticky as f64 / self.pairs as f64)
    }

    pub fn order_consistency_rate(&self) -> Option<f64> {
        (self.pairs > 0).then(|| self.order_consistent as f64 / self.pairs as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PositionBiasReport {
    pub per_judge: BTreeMap<String, BiasCounts>,
    pub aggregate: BiasCounts,
}

/// Counts, per judge, pairs answered "First" in both orders and pairs whose
/// two canonical verdicts agree.
pub fn position_bias(results: &[EnsembleResult]) -> PositionBiasReport {
    let mut report = PositionBiasReport::default();
    for result in results {
        let mut by_judge: BTreeMap<&str, [Option<&JudgeVerdict>; 2]> = BTreeMap::new();
        for v in &result.verdicts {
            let slot = match v.order {
                PresentationOrder::Original => 0,
                PresentationOrder::Swapped => 1,
            };
            by_judge.entry(&v.judge_id).or_default()[slot] = Some(v);
        }
        for (judge, [original, swapped]) in by_judge {
            let (Some(o), Some(s)) = (original, swapped) else {
                continue;
            };
            let sticky = o.raw_choice == RawChoice::First && s.raw_choice == RawChoice::First;
            let consistent = o.canonical_choice == s.canonical_choice;
            for counts in [
                report.per_judge.entry(judge.to_string()).or_default(),
                &mut report.aggregate,
            ] {
                counts.pairs += 1;
                counts.first_sticky += usize::from(sticky);
                counts.order_consistent += usize::from(consistent);
            }
        }
    }
    report
}
