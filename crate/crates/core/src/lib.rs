//! Preference-data forge.
//!
//! Builds AI-judged preference datasets for graphic-design images through a
//! cascade of judges (pointwise scorers, multi-round rankers, embedding
//! providers and a pairwise ensemble), and evaluates reward models with the
//! matching training math and benchmark statistics.
//!
//! Everything runs offline against deterministic mock judges; live judges
//! plug in through [`judge::JudgeBackend`].

pub mod audit;
pub mod bench;
pub mod concordance;
pub mod consensus;
pub mod hashing;
pub mod judge;
pub mod model;
pub mod pair_filter;
pub mod pipeline;
pub mod reward;

pub use model::{CandidatePair, DatasetManifest, ImageSample, Locale, PreferencePair, PromptGroup, Theme};
