use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use super::checkpoint::{input_digest, Outcome, RunDir, Stage, StepError};
use super::{
    assemble_dataset, manifest_for, write_dataset, AcceptedPair, Corpus, PipelineConfig, PipelineError,
    StabilityRounds, StageStats, ACCEPTED_FILE, FORGE_SOURCE,
};
use crate::concordance::{kendalls_w, select_top_groups, stable_pairs, GroupConcordance, RankMatrix};
use crate::consensus::EnsembleResult;
use crate::consensus::{
    apply_policy, position_bias, run_ensemble, ConsensusError, Decision, DecisionRecord, RejectReason,
};
use crate::judge::{JudgeDescriptor, JudgeError, JudgeGateway, RankRound};
use crate::model::{write_records, CandidatePair, DatasetManifest, ImageSample, OrientationSplit, PromptGroup, Theme};
use crate::pair_filter::{
    dissimilarity, enumerate_pairs, match_dimensions, select_dissimilar_union, DissimilarityScore,
};

pub(super) struct Context<'a> {
    pub run: &'a RunDir,
    pub config: &'a PipelineConfig,
    pub gateway: &'a JudgeGateway,
}

fn judge_step<T>(result: Result<T, JudgeError>) -> Result<T, StepError> {
    result.map_err(|e| {
        if e.is_unavailable() {
            StepError::Unavailable(e)
        } else {
            StepError::Discard(e.to_string())
        }
    })
}

fn done<O>(outcomes: Vec<(String, Outcome<O>)>) -> (Vec<O>, usize) {
    let mut kept = Vec::with_capacity(outcomes.len());
    let mut discarded = 0;
    for (_, o) in outcomes {
        match o {
            Outcome::Done { output } => kept.push(output),
            Outcome::Discarded { .. } => discarded += 1,
        }
    }
    (kept, discarded)
}

#[derive(Serialize)]
struct ScoreItem<'a> {
    sample: &'a ImageSample,
    prompt: &'a str,
}

#[derive(Serialize)]
struct GroupItem<'a> {
    group: &'a PromptGroup,
    samples: &'a [ImageSample],
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl Context<'_> {
    fn stage<'s>(&'s self, name: &'s str, digest: String) -> Stage<'s> {
        Stage {
            run: self.run,
            name,
            input_digest: digest,
            chunk_size: self.config.chunk_size,
        }
    }

    fn descriptors(&self, ids: &[&str]) -> Vec<Option<&JudgeDescriptor>> {
        ids.iter().map(|id| self.gateway.descriptor(id)).collect()
    }

    fn rank_rounds(&self, judge: &str, item: &GroupItem<'_>) -> Result<Vec<RankRound>, StepError> {
        (0..self.config.cinematic.k)
            .map(|r| judge_step(self.gateway.rank_images(judge, item.group, item.samples, r)))
            .collect()
    }

    pub fn cinematic(&self, corpus: &Corpus) -> Result<Vec<AcceptedPair>, PipelineError> {
        let c = &self.config.cinematic;
        let roles = &self.config.roles;
        let groups = corpus.groups_of(Theme::Cinematic);
        let group_items: Vec<GroupItem<'_>> = groups
            .iter()
            .map(|(group, samples)| GroupItem { group, samples })
            .collect();

        // pointwise scores are reported, not filtered on
        let score_items: Vec<ScoreItem<'_>> = groups
            .iter()
            .flat_map(|(g, samples)| {
                samples.iter().map(|sample| ScoreItem {
                    sample,
                    prompt: &g.prompt_text,
                })
            })
            .collect();
        let name = "cinematic.score";
        let stage = self.stage(
            name,
            input_digest(name, &self.descriptors(&[&roles.pointwise]), &score_items),
        );
        let scored = stage.run(
            &score_items,
            |it| it.sample.sample_id.clone(),
            |it| judge_step(self.gateway.score_pointwise(&roles.pointwise, it.sample, it.prompt)),
        )?;
        let scores: HashMap<String, f64> = scored
            .iter()
            .filter_map(|(id, o)| o.output().map(|s| (id.clone(), *s)))
            .collect();
        let n_scored = scores.len();
        stage.finish(
            StageStats::new(name, "images", score_items.len(), n_scored)
                .with("mean_score", mean(scores.values().copied()))
                .with_discarded(score_items.len() - n_scored),
        )?;

        let name = "cinematic.rank";
        let params = (self.descriptors(&[&roles.ranker]), c.m, c.k);
        let stage = self.stage(name, input_digest(name, &params, &group_items));
        let ranked = stage.run(
            &group_items,
            |it| it.group.group_id.clone(),
            |it| {
                if it.samples.len() != c.m {
                    return Err(StepError::Discard(format!(
                        "size: group has {} images, expected {}",
                        it.samples.len(),
                        c.m
                    )));
                }
                self.rank_rounds(&roles.ranker, it)
            },
        )?;
        let rounds_by_group: HashMap<String, Vec<RankRound>> = ranked
            .iter()
            .filter_map(|(id, o)| o.output().map(|r| (id.clone(), r.clone())))
            .collect();
        stage.finish(
            StageStats::new(name, "groups", group_items.len(), rounds_by_group.len())
                .with("rounds", c.k)
                .with_discarded(group_items.len() - rounds_by_group.len()),
        )?;

        let name = "cinematic.select";
        let mut report = Vec::new();
        for (g, _) in &groups {
            let Some(rounds) = rounds_by_group.get(&g.group_id) else {
                continue;
            };
            let matrix = RankMatrix::from_rounds(rounds).map_err(|e| PipelineError::Corpus(e.to_string()))?;
            report.push(GroupConcordance {
                group_id: g.group_id.clone(),
                locale: g.locale,
                w: kendalls_w(&matrix).w,
                selected: false,
            });
        }
        let selected = select_top_groups(&report, &c.quotas);
        let chosen: HashMap<&str, &GroupConcordance> = selected.iter().map(|g| (g.group_id.as_str(), g)).collect();
        for r in &mut report {
            r.selected = chosen.contains_key(r.group_id.as_str());
        }
        std::fs::create_dir_all(self.run.root().join("cinematic"))?;
        write_records(&self.run.root().join("cinematic/concordance.jsonl"), &report)?;
        let mut per_locale: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for (locale, quota) in &c.quotas {
            let got = selected.iter().filter(|g| g.locale == *locale).count();
            per_locale.insert(locale.as_str(), (got, *quota));
        }
        let selected_scores = groups
            .iter()
            .filter(|(g, _)| chosen.contains_key(g.group_id.as_str()))
            .flat_map(|(_, s)| s.iter().filter_map(|s| scores.get(&s.sample_id).copied()));
        self.run.finish_pure(
            name,
            input_digest(name, &c.quotas, &report),
            StageStats::new(name, "groups", report.len(), selected.len())
                .with("selected_vs_quota", per_locale)
                .with("mean_w_selected", mean(selected.iter().map(|g| g.w)))
                .with("mean_w_all", mean(report.iter().map(|g| g.w)))
                .with("mean_score_selected", mean(selected_scores)),
        )?;

        let name = "cinematic.stability";
        let selected_items: Vec<&GroupItem<'_>> = group_items
            .iter()
            .filter(|it| chosen.contains_key(it.group.group_id.as_str()))
            .collect();
        let possible: usize = selected_items
            .iter()
            .map(|it| it.samples.len() * (it.samples.len() - 1) / 2)
            .sum();
        let stats = |n: usize, discarded: usize| {
            StageStats::new(name, "pairs", possible, n)
                .with("groups", selected_items.len())
                .with("threshold", format!("{}/{}", c.threshold, c.k))
                .with("rounds", c.stability_rounds)
                .with_discarded(discarded)
        };
        let candidates: Vec<CandidatePair> = match c.stability_rounds {
            StabilityRounds::Reuse => {
                let mut out = Vec::new();
                for it in &selected_items {
                    let rounds = &rounds_by_group[&it.group.group_id];
                    let found = stable_pairs(it.group, it.samples, rounds, c.threshold)
                        .map_err(|e| PipelineError::Corpus(e.to_string()))?;
                    out.extend(found.into_iter().map(|(p, _, _)| p));
                }
                self.run.finish_pure(
                    name,
                    input_digest(name, &(c.threshold, "reuse"), &out),
                    stats(out.len(), 0),
                )?;
                out
            }
            StabilityRounds::Fresh => {
                let params = (self.descriptors(&[&roles.stability_ranker]), c.k, c.threshold);
                let stage = self.stage(name, input_digest(name, &params, &selected_items));
                let found = stage.run(
                    &selected_items,
                    |it| it.group.group_id.clone(),
                    |it| {
                        let rounds = self.rank_rounds(&roles.stability_ranker, it)?;
                        let pairs = stable_pairs(it.group, it.samples, &rounds, c.threshold)
                            .map_err(|e| StepError::Discard(e.to_string()))?;
                        Ok(pairs.into_iter().map(|(p, _, _)| p).collect::<Vec<CandidatePair>>())
                    },
                )?;
                let (lists, discarded) = done(found);
                let out: Vec<CandidatePair> = lists.into_iter().flatten().collect();
                stage.finish(stats(out.len(), discarded))?;
                out
            }
        };

        self.consensus("cinematic", candidates)
    }

    pub fn noncinematic(&self, corpus: &Corpus) -> Result<Vec<AcceptedPair>, PipelineError> {
        let nc = &self.config.noncinematic;
        let roles = &self.config.roles;
        let groups = corpus.groups_of(Theme::NonCinematic);

        let name = "noncinematic.match";
        let mut enumerated = Vec::new();
        for (g, samples) in &groups {
            enumerated.extend(enumerate_pairs(g, samples).map_err(|e| PipelineError::Corpus(e.to_string()))?);
        }
        let total = enumerated.len();
        let matched = match_dimensions(enumerated);
        self.run.finish_pure(
            name,
            input_digest(name, &(), &matched),
            StageStats::new(name, "pairs", total, matched.len()).with("groups", groups.len()),
        )?;

        let name = "noncinematic.embed";
        let params = self.descriptors(&[&roles.semantic_embedder, &roles.structural_embedder]);
        let stage = self.stage(name, input_digest(name, &params, &matched));
        let scored = stage.run(
            &matched,
            |p| p.pair_id.clone(),
            |p| {
                judge_step_filter(dissimilarity(
                    self.gateway,
                    p,
                    &roles.semantic_embedder,
                    &roles.structural_embedder,
                ))
            },
        )?;
        let (scores, discarded) = done(scored);
        stage.finish(StageStats::new(name, "pairs", matched.len(), scores.len()).with_discarded(discarded))?;

        let name = "noncinematic.union";
        let union = select_dissimilar_union(&scores, nc.k_semantic, nc.k_structural);
        let by_id: HashMap<&str, &DissimilarityScore> = scores.iter().map(|s| (s.pair_id.as_str(), s)).collect();
        let candidates: Vec<CandidatePair> = matched
            .iter()
            .filter(|p| union.pair_ids.binary_search(&p.pair_id).is_ok())
            .map(|p| {
                let s = by_id[p.pair_id.as_str()];
                let mut p = p.clone();
                p.provenance.semantic_dissimilarity = Some(s.semantic);
                p.provenance.structural_dissimilarity = Some(s.structural);
                p.provenance.stage_tags.insert("dissimilar_union".into());
                p
            })
            .collect();
        std::fs::create_dir_all(self.run.root().join("noncinematic"))?;
        write_records(&self.run.root().join("noncinematic/dissimilarity.jsonl"), &scores)?;
        self.run.finish_pure(
            name,
            input_digest(name, &(nc.k_semantic, nc.k_structural), &scores),
            StageStats::new(name, "pairs", scores.len(), candidates.len())
                .with("k_semantic", nc.k_semantic)
                .with("k_structural", nc.k_structural)
                .with("semantic_cutoff", union.semantic_cutoff)
                .with("structural_cutoff", union.structural_cutoff),
        )?;

        self.consensus("noncinematic", candidates)
    }

    /// Ensemble and policy stages shared by both flows.
    fn consensus(&self, flow: &str, candidates: Vec<CandidatePair>) -> Result<Vec<AcceptedPair>, PipelineError> {
        let judges = &self.config.ensemble.judges;
        let name = format!("{flow}.ensemble");
        let ids: Vec<&str> = judges.iter().map(String::as_str).collect();
        let stage = self.stage(&name, input_digest(&name, &self.descriptors(&ids), &candidates));
        let outcomes = stage.run(
            &candidates,
            |p| p.pair_id.clone(),
            |p| match run_ensemble(self.gateway, p, judges) {
                Ok(r) => Ok(r),
                Err(ConsensusError::Incomplete { source, .. }) => Err(StepError::Unavailable(source)),
                Err(e) => Err(StepError::Discard(e.to_string())),
            },
        )?;
        let by_id: HashMap<&str, &CandidatePair> = candidates.iter().map(|p| (p.pair_id.as_str(), p)).collect();
        let (results, discarded): (Vec<EnsembleResult>, usize) = done(outcomes);
        stage.finish(
            StageStats::new(&name, "pairs", candidates.len(), results.len())
                .with("judges", judges.len())
                .with_discarded(discarded),
        )?;

        let name = format!("{flow}.policy");
        let policy = self.config.ensemble.policy.policy();
        let mut decisions = Vec::with_capacity(results.len());
        let mut accepted = Vec::new();
        let (mut both_bad, mut insufficient) = (0usize, 0usize);
        for r in &results {
            let decision = apply_policy(r, &policy).map_err(|e| PipelineError::Assembly(e.to_string()))?;
            match decision {
                Decision::Accept { winner } => accepted.push(AcceptedPair {
                    pair: by_id[r.pair_id.as_str()].clone(),
                    winner,
                    tally: r.tally,
                }),
                Decision::Reject {
                    reason: RejectReason::BothBad,
                } => both_bad += 1,
                Decision::Reject {
                    reason: RejectReason::InsufficientConsensus,
                } => insufficient += 1,
            }
            decisions.push(DecisionRecord {
                pair_id: r.pair_id.clone(),
                policy: policy.name,
                decision,
                tally: r.tally,
            });
        }
        let dir = self.run.root().join(flow);
        std::fs::create_dir_all(&dir)?;
        let verdicts: Vec<_> = results.iter().flat_map(|r| r.verdicts.iter().cloned()).collect();
        write_records(&dir.join("verdicts.jsonl"), &verdicts)?;
        write_records(&dir.join("decisions.jsonl"), &decisions)?;
        write_records(&dir.join(ACCEPTED_FILE), &accepted)?;
        let bias = serde_json::to_string_pretty(&position_bias(&results)).expect("report serializes");
        crate::model::write_atomic(&dir.join("position_bias.json"), bias.as_bytes())?;
        self.run.finish_pure(
            &name,
            input_digest(&name, &policy, &decisions),
            StageStats::new(&name, "pairs", results.len(), accepted.len())
                .with("policy", policy.name)
                .with("rejected_both_bad", both_bad)
                .with("rejected_insufficient", insufficient),
        )?;
        Ok(accepted)
    }

    pub fn assemble(
        &self,
        accepted: &[AcceptedPair],
        corpus_digest: &str,
    ) -> Result<(DatasetManifest, OrientationSplit), PipelineError> {
        let name = "assemble";
        let (dataset, split) = assemble_dataset(accepted, self.config.seed)?;
        let sources = BTreeMap::from([(FORGE_SOURCE.to_string(), dataset.len())]);
        let manifest = manifest_for(&dataset, self.config.ensemble.policy, self.config.seed, split, sources)?;
        write_dataset(self.run.root(), &dataset, &manifest)?;
        self.run.finish_pure(
            name,
            input_digest(name, &self.config.seed, accepted),
            StageStats::new(name, "pairs", accepted.len(), dataset.len())
                .with("chosen_first", split.chosen_first)
                .with("chosen_second", split.chosen_second)
                .with("corpus_digest", corpus_digest)
                .with("manifest_digest", manifest.digest()),
        )?;
        Ok((manifest, split))
    }
}

fn judge_step_filter<T>(result: Result<T, crate::pair_filter::PairFilterError>) -> Result<T, StepError> {
    match result {
        Ok(v) => Ok(v),
        Err(crate::pair_filter::PairFilterError::Judge(e)) => judge_step(Err(e)),
        Err(e) => Err(StepError::Discard(e.to_string())),
    }
}

impl StageStats {
    fn with_discarded(mut self, n: usize) -> Self {
        self.discarded = n;
        self
    }
}
