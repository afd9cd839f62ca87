//! Live adapter for judges served over HTTP(S).
//!
//! Descriptor config keys read here:
//! `endpoint` (required), `model`, `credential_env`, `temperature`,
//! `thinking_budget`, `timeout_secs`.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::prompts::{self, ranking_example};
use super::{Facet, JudgeBackend, JudgeDescriptor, JudgeRequest, TransportError};

#[derive(Serialize)]
struct Body<'a> {
    model: &'a str,
    op: &'static str,
    prompt: String,
    images: Vec<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    facet: Option<Facet>,
    temperature: f64,
    thinking_budget: u32,
}

#[derive(Deserialize)]
struct Reply {
    text: String,
}

#[derive(Debug, Default, Clone, Copy)]
pub struct HttpJudge;

impl HttpJudge {
    pub fn new() -> Self {
        HttpJudge
    }

    /// Renders the prompt a live judge sees for `request`.
    pub fn render_prompt(request: &JudgeRequest) -> String {
        match request {
            JudgeRequest::Score { prompt, .. } => prompt.clone(),
            JudgeRequest::Rank { samples, prompt, .. } => {
                let m = samples.len();
                let image_ref = format!("the {m} provided images");
                let num = m.to_string();
                let example = ranking_example(m);
                prompts::RANKING
                    .render(&[
                        ("image_ref", &image_ref),
                        ("num_images", &num),
                        ("creative_brief", prompt),
                        ("ranking_example", &example),
                    ])
                    .expect("ranking placeholders are fixed")
            }
            JudgeRequest::Compare { prompt, .. } => prompts::PAIRWISE_PREFERENCE
                .render(&[("creative_brief", prompt)])
                .expect("pairwise placeholders are fixed"),
            JudgeRequest::Embed { .. } => String::new(),
        }
    }
}

fn config_f64(descriptor: &JudgeDescriptor, key: &str, default: f64) -> f64 {
    descriptor
        .config
        .get(key)
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

impl JudgeBackend for HttpJudge {
    fn invoke(&self, descriptor: &JudgeDescriptor, request: &JudgeRequest) -> Result<String, TransportError> {
        let endpoint = descriptor
            .config
            .get("endpoint")
            .ok_or_else(|| TransportError(format!("judge `{}` has no endpoint", descriptor.judge_id)))?;
        let (op, images, facet): (&'static str, Vec<&str>, Option<Facet>) = match request {
            JudgeRequest::Score { sample, .. } => ("score", vec![sample.uri.as_str()], None),
            JudgeRequest::Rank { samples, .. } => ("rank", samples.iter().map(|s| s.uri.as_str()).collect(), None),
            JudgeRequest::Compare { first, second, .. } => {
                ("compare", vec![first.uri.as_str(), second.uri.as_str()], None)
            }
            JudgeRequest::Embed { sample, facet } => ("embed", vec![sample.uri.as_str()], Some(*facet)),
        };
        let body = Body {
            model: descriptor
                .config
                .get("model")
                .map_or(descriptor.judge_id.as_str(), String::as_str),
            op,
            prompt: Self::render_prompt(request),
            images,
            facet,
            temperature: config_f64(descriptor, "temperature", 0.7),
            thinking_budget: config_f64(descriptor, "thinking_budget", 4096.0) as u32,
        };
        let timeout = Duration::from_secs_f64(config_f64(descriptor, "timeout_secs", 120.0));
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        let mut call = agent.post(endpoint.as_str());
        if let Some(var) = descriptor.config.get("credential_env") {
            let key =
                std::env::var(var).map_err(|_| TransportError(format!("credential variable `{var}` is not set")))?;
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call.send_json(&body).map_err(|e| TransportError(e.to_string()))?;
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError(e.to_string()))?;
        // Endpoints may wrap the answer as {"text": ...} or return it bare.
        Ok(serde_json::from_str::<Reply>(&text).map_or(text, |r| r.text))
    }
}
