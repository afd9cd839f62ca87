//! Deterministic offline judges.
//!
//! Each image has a latent quality in `[0, 10]` drawn from a keyed hash of
//! the run seed and its content locator. Judges perceive that quality through
//! noise keyed by `(seed, judge_id, inputs)`, so every response is a pure
//! function of its inputs and the whole pipeline runs without a network.

use serde::{Deserialize, Serialize};

use super::{Facet, JudgeBackend, JudgeDescriptor, JudgeRequest, TransportError};
use crate::hashing::{gaussian, sha256_hex, unit};
use crate::model::ImageSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockParams {
    /// Std-dev of pointwise score noise.
    pub pointwise_noise: f64,
    /// Base std-dev of ranking noise; each group scales it by a factor in
    /// `[0.25, 1.75)` so concordance varies across groups.
    pub rank_noise: f64,
    /// Std-dev of pairwise perception noise.
    pub compare_noise: f64,
    /// Perceived differences below this are answered "Tie".
    pub tie_margin: f64,
    /// Probability of answering "Image 1" without looking.
    pub first_bias: f64,
    /// Both images below this quality are answered "Both are bad".
    pub both_bad_below: f64,
    pub semantic_dim: usize,
    pub structural_dim: usize,
}

impl Default for MockParams {
    fn default() -> Self {
        MockParams {
            pointwise_noise: 0.5,
            rank_noise: 3.0,
            compare_noise: 2.0,
            tie_margin: 0.3,
            first_bias: 0.05,
            both_bad_below: 1.0,
            semantic_dim: 16,
            structural_dim: 24,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockJudge {
    seed: u64,
    params: MockParams,
}

impl MockJudge {
    pub fn new(seed: u64, params: MockParams) -> Self {
        MockJudge { seed, params }
    }

    /// Latent quality of an image's content, shared by every judge.
    pub fn latent_quality(seed: u64, sample: &ImageSample) -> f64 {
        10.0 * unit(seed, &["quality", &sample.uri])
    }

    fn quality(&self, sample: &ImageSample) -> f64 {
        Self::latent_quality(self.seed, sample)
    }

    fn score(&self, judge_id: &str, sample: &ImageSample, prompt: &str) -> String {
        let noise = gaussian(
            self.seed,
            &[judge_id, "score", &sample.sample_id, &sha256_hex(prompt.as_bytes())],
        );
        let score = (self.quality(sample) + self.params.pointwise_noise * noise).clamp(0.0, 10.0);
        format!("{score}")
    }

    fn rank(&self, judge_id: &str, group_id: &str, samples: &[ImageSample], round_index: u32) -> String {
        let spread = self.params.rank_noise * (0.25 + 1.5 * unit(self.seed, &["group-noise", group_id]));
        let round = round_index.to_string();
        let mut perceived: Vec<(usize, f64)> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let noise = gaussian(self.seed, &[judge_id, "rank", group_id, &round, &s.sample_id]);
                (i, self.quality(s) + spread * noise)
            })
            .collect();
        perceived.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        let order: Vec<String> = perceived.iter().map(|(i, _)| (i + 1).to_string()).collect();
        format!(
            "Image analyses omitted.\n```json\n{{\n\"rank\": [{}]\n}}\n```",
            order.join(", ")
        )
    }

    fn compare(&self, judge_id: &str, first: &ImageSample, second: &ImageSample, prompt: &str) -> String {
        let prompt_digest = sha256_hex(prompt.as_bytes());
        let key = [judge_id, "compare", &first.sample_id, &second.sample_id, &prompt_digest];
        let mut bias_key = key.to_vec();
        bias_key.push("bias");
        if unit(self.seed, &bias_key) < self.params.first_bias {
            return "Image 1".into();
        }
        let (qf, qs) = (self.quality(first), self.quality(second));
        if qf < self.params.both_bad_below && qs < self.params.both_bad_below {
            return "Both are bad".into();
        }
        let diff = qf - qs + self.params.compare_noise * gaussian(self.seed, &key);
        if diff.abs() < self.params.tie_margin {
            "Tie".into()
        } else if diff > 0.0 {
            "Image 1".into()
        } else {
            "Image 2".into()
        }
    }

    fn embed(&self, judge_id: &str, sample: &ImageSample, facet: Facet) -> String {
        let (name, dim) = match facet {
            Facet::Semantic => ("semantic", self.params.semantic_dim),
            Facet::Structural => ("structural", self.params.structural_dim),
        };
        let vector: Vec<f64> = (0..dim)
            .map(|j| gaussian(self.seed, &[judge_id, "embed", name, &sample.uri, &j.to_string()]))
            .collect();
        serde_json::to_string(&vector).expect("finite floats serialize")
    }
}

impl JudgeBackend for MockJudge {
    fn invoke(&self, descriptor: &JudgeDescriptor, request: &JudgeRequest) -> Result<String, TransportError> {
        let id = descriptor.judge_id.as_str();
        Ok(match request {
            JudgeRequest::Score { sample, prompt } => self.score(id, sample, prompt),
            JudgeRequest::Rank {
                group_id,
                samples,
                round_index,
                ..
            } => self.rank(id, group_id, samples, *round_index),
            JudgeRequest::Compare {
                first, second, prompt, ..
            } => self.compare(id, first, second, prompt),
            JudgeRequest::Embed { sample, facet } => self.embed(id, sample, *facet),
        })
    }
}
