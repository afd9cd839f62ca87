//! Reward-model training math: Bradley-Terry loss, GRPO rewards, advantages,
//! the clipped surrogate with KL penalty, and best-of-n selection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("{name} must be finite, got {value}")]
    NonFinite { name: &'static str, value: f64 },
    #[error("empty batch")]
    Empty,
    #[error("ratio must be positive, got {0}")]
    NonPositiveRatio(f64),
    #[error("clip width must lie in (0, 1), got {0}")]
    ClipWidth(f64),
    #[error("KL weight must be non-negative, got {0}")]
    KlWeight(f64),
    #[error("log-prob sequences differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

fn finite(name: &'static str, value: f64) -> Result<f64, RewardError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(RewardError::NonFinite { name, value })
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln σ(score_w - score_l)`.
pub fn bt_loss(score_w: f64, score_l: f64) -> Result<f64, RewardError> {
    let margin = finite("score_w", score_w)? - finite("score_l", score_l)?;
    Ok(softplus(-margin))
}

/// Gradient of [`bt_loss`] with respect to `(score_w, score_l)`.
pub fn bt_grad(score_w: f64, score_l: f64) -> Result<(f64, f64), RewardError> {
    let margin = finite("score_w", score_w)? - finite("score_l", score_l)?;
    let g = sigmoid(-margin);
    Ok((-g, g))
}

/// An image/prompt/analysis triple with its reward-model score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriplet {
    pub image: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<String>,
    pub score: f64,
}

/// `+score` for the preferred sample, `-score` otherwise.
pub fn grpo_reward(sample: &ScoredTriplet, preferred: bool) -> Result<f64, RewardError> {
    let s = finite("score", sample.score)?;
    Ok(if preferred { s } else { -s })
}

pub const ADVANTAGE_EPSILON: f64 = 1e-8;

/// `(r_i - mean) / std` with the population std. Batches whose std falls
/// below `epsilon` get all-zero advantages.
pub fn normalize_advantages_with(rewards: &[f64], epsilon: f64) -> Result<Vec<f64>, RewardError> {
    if rewards.is_empty() {
        return Err(RewardError::Empty);
    }
    for &r in rewards {
        finite("reward", r)?;
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < epsilon {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

pub fn normalize_advantages(rewards: &[f64]) -> Result<Vec<f64>, RewardError> {
    normalize_advantages_with(rewards, ADVANTAGE_EPSILON)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBatch {
    pub rewards: Vec<f64>,
    pub preferred: Vec<bool>,
    pub advantages: Vec<f64>,
    pub epsilon: f64,
}

impl RewardBatch {
    /// Rewards and advantages for scored samples with their preference flags.
    pub fn build(samples: &[(ScoredTriplet, bool)]) -> Result<Self, RewardError> {
        let rewards = samples
            .iter()
            .map(|(s, p)| grpo_reward(s, *p))
            .collect::<Result<Vec<_>, _>>()?;
        let advantages = normalize_advantages(&rewards)?;
        Ok(RewardBatch {
            rewards,
            preferred: samples.iter().map(|(_, p)| *p).collect(),
            advantages,
            epsilon: ADVANTAGE_EPSILON,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// Clip width `δ`.
    pub clip: f64,
    /// KL weight `β`.
    pub kl_weight: f64,
}

impl GrpoConfig {
    pub fn new(clip: f64, kl_weight: f64) -> Result<Self, RewardError> {
        if !(clip > 0.0 && clip < 1.0) {
            return Err(RewardError::ClipWidth(clip));
        }
        if !(kl_weight >= 0.0 && kl_weight.is_finite()) {
            return Err(RewardError::KlWeight(kl_weight));
        }
        Ok(GrpoConfig { clip, kl_weight })
    }
}

/// Per-token estimate `e^Δ - Δ - 1` with `Δ = log π_ref - log π_θ`; zero when
/// the two agree and never negative.
pub fn kl_estimate(logp_policy: f64, logp_ref: f64) -> f64 {
    let delta = logp_ref - logp_policy;
    delta.exp_m1() - delta
}

/// Mean per-token [`kl_estimate`] over a sequence.
pub fn sequence_kl(logp_policy: &[f64], logp_ref: &[f64]) -> Result<f64, RewardError> {
    if logp_policy.len() != logp_ref.len() {
        return Err(RewardError::LengthMismatch(logp_policy.len(), logp_ref.len()));
    }
    if logp_policy.is_empty() {
        return Err(RewardError::Empty);
    }
    let total: f64 = logp_policy.iter().zip(logp_ref).map(|(p, r)| kl_estimate(*p, *r)).sum();
    Ok(total / logp_policy.len() as f64)
}

/// Importance ratio `π_θ / π_old` from log-probabilities.
pub fn ratio(logp_policy: f64, logp_old: f64) -> f64 {
    (logp_policy - logp_old).exp()
}

/// `min(ρÂ, clip(ρ, 1-δ, 1+δ)Â) - β·kl`, an objective to maximize.
pub fn grpo_objective(ratio: f64, advantage: f64, config: &GrpoConfig, kl: f64) -> Result<f64, RewardError> {
    if !ratio.is_finite() || ratio <= 0.0 {
        return Err(RewardError::NonPositiveRatio(ratio));
    }
    finite("advantage", advantage)?;
    finite("kl", kl)?;
    let clipped = ratio.clamp(1.0 - config.clip, 1.0 + config.clip);
    Ok((ratio * advantage).min(clipped * advantage) - config.kl_weight * kl)
}

/// Highest score and its index; the first index wins ties.
pub fn best_of_n(scores: &[f64]) -> Result<(usize, f64), RewardError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        finite("score", s)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.ok_or(RewardError::Empty)
}
