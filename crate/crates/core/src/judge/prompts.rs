//! Judge prompt templates, shipped as text assets.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template `{template}` needs a value for `{placeholder}`")]
    Missing {
        template: &'static str,
        placeholder: &'static str,
    },
    #[error("template `{template}` has no placeholder `{name}`")]
    Unknown { template: &'static str, name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: &'static str,
    pub text: &'static str,
    pub placeholders: &'static [&'static str],
}

/// Multi-image ranking used for the concordance and stability rounds.
pub const RANKING: PromptTemplate = PromptTemplate {
    name: "ranking",
    text: include_str!("../../assets/prompts/ranking.txt"),
    placeholders: &["image_ref", "num_images", "creative_brief", "ranking_example"],
};

/// Four-way pairwise verification used by the consensus ensemble.
pub const PAIRWISE_PREFERENCE: PromptTemplate = PromptTemplate {
    name: "pairwise_preference",
    text: include_str!("../../assets/prompts/pairwise_preference.txt"),
    placeholders: &["creative_brief"],
};

pub const POINTWISE_ANALYSIS: PromptTemplate = PromptTemplate {
    name: "pointwise_analysis",
    text: include_str!("../../assets/prompts/pointwise_analysis.txt"),
    placeholders: &["creative_brief"],
};

pub const BO8_SELECTION: PromptTemplate = PromptTemplate {
    name: "bo8_selection",
    text: include_str!("../../assets/prompts/bo8_selection.txt"),
    placeholders: &["prompt"],
};

pub const PAIRWISE_REASONING: PromptTemplate = PromptTemplate {
    name: "pairwise_reasoning",
    text: include_str!("../../assets/prompts/pairwise_reasoning.txt"),
    placeholders: &["prompt", "better_image_index", "worse_image_index"],
};

pub const POINTWISE_GENERATION: PromptTemplate = PromptTemplate {
    name: "pointwise_generation",
    text: include_str!("../../assets/prompts/pointwise_generation.txt"),
    placeholders: &["creative_brief"],
};

pub const PAIRWISE_PREDICTION: PromptTemplate = PromptTemplate {
    name: "pairwise_prediction",
    text: include_str!("../../assets/prompts/pairwise_prediction.txt"),
    placeholders: &["prompt"],
};

pub const ALL: [PromptTemplate; 7] = [
    RANKING,
    PAIRWISE_PREFERENCE,
    POINTWISE_ANALYSIS,
    BO8_SELECTION,
    PAIRWISE_REASONING,
    POINTWISE_GENERATION,
    PAIRWISE_PREDICTION,
];

impl PromptTemplate {
    /// Substitutes every `{placeholder}`. All placeholders must be supplied
    /// and no unknown names are accepted.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
        for (name, _) in vars {
            if !self.placeholders.contains(name) {
                return Err(TemplateError::Unknown {
                    template: self.name,
                    name: name.to_string(),
                });
            }
        }
        let mut out = self.text.to_string();
        for placeholder in self.placeholders {
            let value = vars
                .iter()
                .find(|(name, _)| name == placeholder)
                .map(|(_, v)| *v)
                .ok_or(TemplateError::Missing {
                    template: self.name,
                    placeholder,
                })?;
            out = out.replace(&format!("{{{placeholder}}}"), value);
        }
        Ok(out)
    }
}

/// Example ranking list `[1, 2, ..., m]` shown in the ranking prompt.
pub fn ranking_example(num_images: usize) -> String {
    let items: Vec<String> = (1..=num_images).map(|i| i.to_string()).collect();
    format!("[{}]", items.join(", "))
}
