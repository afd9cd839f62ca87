//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Every check compares the library against an
//! independent recomputation written here.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use forge_core::audit::{
    alignment_report, consensus_classify, default_annotators, method_label, render_report, sample_for_audit,
    AnnotatorChoice, AuditStore, Category, PANEL, QUORUM, REPORT_HEADER,
};
use forge_core::bench::{
    emit_report, pairwise_accuracy, posterbench_stats, tie_adjusted_accuracy, Answer, BenchReport, GroupScores,
    PairwiseCase, PointwiseCase, Rate, ReportFormat, POSTER_HEADER,
};
use forge_core::concordance::{kendalls_w, stable_item_pairs, RankMatrix};
use forge_core::consensus::{
    canonicalize, decide, swap_canonical, swap_raw, tally, ConsensusPolicy, Decision, PolicyName, RejectReason, Side,
};
use forge_core::judge::{
    CanonicalChoice, JudgeBackend, JudgeDescriptor, JudgeGateway, JudgeRequest, JudgeVerdict, MockJudge,
    PresentationOrder, RawChoice, RetryPolicy, TransportError,
};
use forge_core::model::{ConsensusTally, ImageSample, Locale, Orientation, PreferencePair, Theme};
use forge_core::pipeline::{resume, synthetic_corpus, Pipeline, PipelineConfig, PipelineError, RunSummary};
use forge_core::reward::{
    bt_grad, bt_loss, grpo_objective, kl_estimate, normalize_advantages, sequence_kl, GrpoConfig,
};

type Check = Result<(), String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn permutation(r: &mut ChaCha8Rng, m: usize) -> Vec<u32> {
    let mut ranks: Vec<u32> = (1..=m as u32).collect();
    ranks.shuffle(r);
    ranks
}

fn kendall_w() -> Check {
    // W = 12 S / (k² (m³ - m)) with R̄ = k(m+1)/2, evaluated directly in f64
    fn direct(rounds: &[Vec<u32>]) -> f64 {
        let k = rounds.len() as f64;
        let m = rounds[0].len();
        let mean = k * (m as f64 + 1.0) / 2.0;
        let s: f64 = (0..m)
            .map(|i| rounds.iter().map(|r| f64::from(r[i])).sum::<f64>() - mean)
            .map(|d| d * d)
            .sum();
        let mf = m as f64;
        12.0 * s / (k * k * (mf * mf * mf - mf))
    }
    let start = Instant::now();
    let mut r = rng(1);
    for case in 0..200 {
        let m = r.random_range(2..=8);
        let k = r.random_range(2..=8);
        let rounds: Vec<Vec<u32>> = (0..k).map(|_| permutation(&mut r, m)).collect();
        let got = kendalls_w(&RankMatrix::new("g", rounds.clone()).map_err(|e| e.to_string())?).w;
        let want = direct(&rounds);
        ensure!((got - want).abs() <= 1e-12, "case {case} m={m} k={k}: {got} vs {want}");
    }
    let identical = vec![vec![2, 4, 1, 3]; 5];
    let w = kendalls_w(&RankMatrix::new("g", identical).map_err(|e| e.to_string())?).w;
    ensure!(w == 1.0, "identical rounds give {w}");
    let reversal = vec![vec![1, 2, 3], vec![3, 2, 1]];
    let w = kendalls_w(&RankMatrix::new("g", reversal).map_err(|e| e.to_string())?).w;
    ensure!(w == 0.0, "reversal gives {w}");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(())
}

fn bt_fixtures() -> Check {
    let l = bt_loss(0.7, 0.7).map_err(|e| e.to_string())?;
    ensure!((l - std::f64::consts::LN_2).abs() <= 1e-12, "equal scores give {l}");
    let mut r = rng(2);
    let h = 1e-5;
    for _ in 0..100 {
        let margin: f64 = r.random_range(-10.0..=10.0);
        let sl = r.random_range(-3.0..3.0);
        let sw = sl + margin;
        let (gw, gl) = bt_grad(sw, sl).map_err(|e| e.to_string())?;
        let loss = |w: f64, l: f64| bt_loss(w, l).unwrap();
        let fw = (loss(sw + h, sl) - loss(sw - h, sl)) / (2.0 * h);
        let fl = (loss(sw, sl + h) - loss(sw, sl - h)) / (2.0 * h);
        for (analytic, numeric) in [(gw, fw), (gl, fl)] {
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            ensure!(
                rel <= 1e-6,
                "margin {margin}: analytic {analytic} vs numeric {numeric} (rel {rel:e})"
            );
        }
    }
    let l = bt_loss(30.0, 0.0).map_err(|e| e.to_string())?;
    ensure!(l < 1e-12, "margin 30 gives {l:e}");
    Ok(())
}

fn advantages() -> Check {
    let mut r = rng(3);
    for case in 0..500 {
        let n = r.random_range(2..=16);
        let scale = r.random_range(0.01..100.0);
        let batch: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0) * scale).collect();
        let adv = normalize_advantages(&batch).map_err(|e| e.to_string())?;
        let mean = adv.iter().sum::<f64>() / n as f64;
        let std = (adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64).sqrt();
        ensure!(mean.abs() <= 1e-12, "case {case}: mean {mean:e}");
        ensure!((std - 1.0).abs() <= 1e-9, "case {case}: std {std}");
    }
    let flat = normalize_advantages(&[4.2; 7]).map_err(|e| e.to_string())?;
    ensure!(flat.iter().all(|a| *a == 0.0), "constant batch gives {flat:?}");
    let base = normalize_advantages(&[1.0, 2.0, 3.0]).map_err(|e| e.to_string())?;
    for other in [[11.0, 12.0, 13.0], [2.0, 4.0, 6.0]] {
        let got = normalize_advantages(&other).map_err(|e| e.to_string())?;
        ensure!(got == base, "{other:?} gives {got:?}, [1,2,3] gives {base:?}");
    }
    Ok(())
}

fn grpo() -> Check {
    fn brute(rho: f64, adv: f64, delta: f64, beta: f64, kl: f64) -> f64 {
        let unclipped = rho * adv;
        let surrogate = if adv >= 0.0 {
            if rho > 1.0 + delta {
                (1.0 + delta) * adv
            } else {
                unclipped
            }
        } else if rho < 1.0 - delta {
            (1.0 - delta) * adv
        } else {
            unclipped
        };
        surrogate - beta * kl
    }
    for delta in [0.1, 0.2, 0.3] {
        for beta in [0.0, 0.04] {
            let config = GrpoConfig::new(delta, beta).map_err(|e| e.to_string())?;
            for step in 1..=30 {
                let rho = f64::from(step) / 10.0;
                for adv in [-2.0, -1.0, 1.0, 2.0] {
                    let kl = 0.25;
                    let got = grpo_objective(rho, adv, &config, kl).map_err(|e| e.to_string())?;
                    let want = brute(rho, adv, delta, beta, kl);
                    ensure!(
                        got == want,
                        "rho={rho} adv={adv} delta={delta} beta={beta}: {got} vs {want}"
                    );
                }
            }
        }
    }
    for lp in [-7.5, -1.0, 0.0] {
        let kl = kl_estimate(lp, lp);
        ensure!(kl == 0.0, "kl at equal log-probs {lp} is {kl}");
    }
    let kl = sequence_kl(&[-1.0, -2.0, -0.5], &[-1.0, -2.0, -0.5]).map_err(|e| e.to_string())?;
    ensure!(kl == 0.0, "sequence kl is {kl}");
    Ok(())
}

fn pairwise_macro() -> Check {
    let rate = |s: &str| Rate::from_percent_str(s).map_err(|e| e.to_string());
    let m = rate("81.8")?.midpoint(rate("68.6")?);
    ensure!(m == Rate::new(752, 1000), "(81.8, 68.6) gives {}", m.display(4));
    ensure!(m.display(1) == "75.2", "displayed as {}", m.display(1));
    let m = rate("89.8")?.midpoint(rate("75.9")?);
    ensure!(m == Rate::new(8285, 10000), "(89.8, 75.9) gives {}", m.display(4));
    ensure!(m.display(2) == "82.85", "displayed as {}", m.display(2));

    // 9 of 11 yes and 7 of 10 no from counted cases
    let mut cases = Vec::new();
    for i in 0..11 {
        let answer = if i < 9 { Answer::Yes } else { Answer::No };
        cases.push(case(&format!("y{i}"), Answer::Yes, Some(answer), None));
    }
    for i in 0..10 {
        let answer = if i < 7 { Answer::No } else { Answer::Yes };
        cases.push(case(&format!("n{i}"), Answer::No, Some(answer), None));
    }
    let acc = pairwise_accuracy(&cases).map_err(|e| e.to_string())?;
    let want = Rate::new(9 * 10 + 7 * 11, 2 * 11 * 10);
    ensure!(
        acc.macro_avg == Some(want),
        "macro {:?} vs {}",
        acc.macro_avg.map(|r| r.display(4)),
        want.display(4)
    );

    let ties: Vec<PointwiseCase> = (0..9)
        .map(|i| PointwiseCase {
            model: "m".into(),
            pair_id: format!("t{i}"),
            score_chosen: f64::from(i),
            score_rejected: f64::from(i),
        })
        .collect();
    let t = tie_adjusted_accuracy(&ties).map_err(|e| e.to_string())?;
    ensure!(
        t == Rate::new(1, 2) && t.percent() == 50.0,
        "all ties give {}",
        t.display(3)
    );
    Ok(())
}

fn case(id: &str, truth: Answer, original: Option<Answer>, swapped: Option<Answer>) -> PairwiseCase {
    PairwiseCase {
        model: "m".into(),
        pair_id: id.into(),
        ground_truth: truth,
        original,
        swapped,
    }
}

fn tally_of(choices: &[CanonicalChoice]) -> ConsensusTally {
    let mut t = ConsensusTally::default();
    for c in choices {
        match c {
            CanonicalChoice::A => t.a += 1,
            CanonicalChoice::B => t.b += 1,
            CanonicalChoice::Tie => t.tie += 1,
            CanonicalChoice::BothBad => t.both_bad += 1,
        }
    }
    t
}

fn accepts(t: &ConsensusTally, name: PolicyName) -> bool {
    matches!(decide(t, &ConsensusPolicy::named(name)), Decision::Accept { .. })
}

fn consensus_nesting() -> Check {
    let all = [
        CanonicalChoice::A,
        CanonicalChoice::B,
        CanonicalChoice::Tie,
        CanonicalChoice::BothBad,
    ];
    let mut r = rng(6);
    let mut accepted = [0usize; 3];
    for case in 0..2000 {
        // bias toward A so that every policy accepts some sextets
        let sextet: Vec<CanonicalChoice> = (0..6)
            .map(|_| {
                if r.random_bool(0.7) {
                    CanonicalChoice::A
                } else {
                    all[r.random_range(0..4)]
                }
            })
            .collect();
        let t = tally_of(&sextet);
        let [s, f, e] = PolicyName::ALL.map(|p| accepts(&t, p));
        ensure!(!s || f, "case {case} {t:?}: strict accepts, five_plus_tie rejects");
        ensure!(
            !f || e,
            "case {case} {t:?}: five_plus_tie accepts, five_plus_tie_or_error rejects"
        );
        if t.both_bad > 0 {
            ensure!(!e, "case {case} {t:?}: accepted despite a both-bad verdict");
        }
        for (i, ok) in [s, f, e].into_iter().enumerate() {
            accepted[i] += usize::from(ok);
        }
    }
    ensure!(
        accepted[0] > 0 && accepted[0] < accepted[2],
        "degenerate sample: {accepted:?}"
    );

    let archetypes = [
        (
            ConsensusTally {
                a: 6,
                ..Default::default()
            },
            [true, true, true],
        ),
        (
            ConsensusTally {
                a: 5,
                tie: 1,
                ..Default::default()
            },
            [false, true, true],
        ),
        (
            ConsensusTally {
                a: 5,
                b: 1,
                ..Default::default()
            },
            [false, false, true],
        ),
    ];
    for (t, want) in archetypes {
        let got = PolicyName::ALL.map(|p| accepts(&t, p));
        ensure!(got == want, "{t:?}: accepted under {got:?}, expected {want:?}");
        let d = decide(&t, &ConsensusPolicy::named(PolicyName::FivePlusTieOrError));
        ensure!(d.winner() == Some(Side::A), "{t:?}: winner {d:?}");
    }
    let split = ConsensusTally {
        a: 3,
        b: 3,
        ..Default::default()
    };
    let d = decide(&split, &ConsensusPolicy::named(PolicyName::FivePlusTieOrError));
    ensure!(
        d == Decision::Reject {
            reason: RejectReason::InsufficientConsensus
        },
        "3/3 split gives {d:?}"
    );
    Ok(())
}

fn swap_involution() -> Check {
    let raws = [RawChoice::First, RawChoice::Second, RawChoice::Tie, RawChoice::BothBad];
    let orders = [PresentationOrder::Original, PresentationOrder::Swapped];
    for raw in raws {
        for order in orders {
            let c = canonicalize(raw, order);
            let other = if order == PresentationOrder::Original {
                PresentationOrder::Swapped
            } else {
                PresentationOrder::Original
            };
            // the same physical answer described from the other presentation
            ensure!(
                canonicalize(swap_raw(raw), other) == c,
                "{raw:?}/{order:?}: relabeled answer moves"
            );
            ensure!(
                swap_canonical(canonicalize(raw, other)) == c,
                "{raw:?}/{order:?}: swap does not undo the order flip"
            );
            ensure!(
                swap_canonical(swap_canonical(c)) == c,
                "{c:?}: swap is not an involution"
            );
            let expected = match (raw, order) {
                (RawChoice::Tie, _) => CanonicalChoice::Tie,
                (RawChoice::BothBad, _) => CanonicalChoice::BothBad,
                (RawChoice::First, PresentationOrder::Original) | (RawChoice::Second, PresentationOrder::Swapped) => {
                    CanonicalChoice::A
                }
                _ => CanonicalChoice::B,
            };
            ensure!(c == expected, "{raw:?}/{order:?} gives {c:?}");
        }
    }

    let mut r = rng(7);
    let mut cases = Vec::new();
    for p in 0..100 {
        let pair_id = format!("p{p:03}");
        let favored = if r.random_bool(0.5) {
            CanonicalChoice::A
        } else {
            CanonicalChoice::B
        };
        let mut log = Vec::new();
        for j in 0..3 {
            for order in orders {
                let canonical = match r.random_range(0..10) {
                    0 => CanonicalChoice::Tie,
                    1 => swap_canonical(favored),
                    _ => favored,
                };
                let raw = match (canonical, order) {
                    (CanonicalChoice::Tie, _) => RawChoice::Tie,
                    (CanonicalChoice::BothBad, _) => RawChoice::BothBad,
                    (CanonicalChoice::A, PresentationOrder::Original)
                    | (CanonicalChoice::B, PresentationOrder::Swapped) => RawChoice::First,
                    _ => RawChoice::Second,
                };
                log.push(JudgeVerdict {
                    judge_id: format!("j{j}"),
                    pair_id: pair_id.clone(),
                    order,
                    raw_choice: raw,
                    canonical_choice: canonicalize(raw, order),
                    cached: false,
                });
            }
        }
        let relabeled: Vec<JudgeVerdict> = log
            .iter()
            .map(|v| {
                let order = if v.order == PresentationOrder::Original {
                    PresentationOrder::Swapped
                } else {
                    PresentationOrder::Original
                };
                let raw = swap_raw(v.raw_choice);
                JudgeVerdict {
                    order,
                    raw_choice: raw,
                    canonical_choice: canonicalize(raw, order),
                    ..v.clone()
                }
            })
            .collect();
        for name in PolicyName::ALL {
            let policy = ConsensusPolicy::named(name);
            let before = decide(&tally(&log), &policy);
            let after = decide(&tally(&relabeled), &policy);
            ensure!(before == after, "{pair_id} under {name}: {before:?} became {after:?}");
        }
        let truth = if r.random_bool(0.5) { Answer::Yes } else { Answer::No };
        let pick = |r: &mut ChaCha8Rng| match r.random_range(0..3) {
            0 => None,
            1 => Some(Answer::Yes),
            _ => Some(Answer::No),
        };
        let (o, s) = (pick(&mut r), pick(&mut r));
        let o = if o.is_none() && s.is_none() { Some(truth) } else { o };
        cases.push(case(&pair_id, truth, o, s));
    }
    let before = pairwise_accuracy(&cases).map_err(|e| e.to_string())?;
    let relabeled: Vec<PairwiseCase> = cases.iter().map(PairwiseCase::relabeled).collect();
    let after = pairwise_accuracy(&relabeled).map_err(|e| e.to_string())?;
    ensure!(before.macro_avg.is_some(), "log has a single class");
    ensure!(
        before.macro_avg == after.macro_avg,
        "macro accuracy moved under relabeling"
    );
    Ok(())
}

fn stability_oracle() -> Check {
    let (k, t) = (6usize, 5u32);
    let mut r = rng(8);
    for case in 0..500 {
        let m = r.random_range(2..=6);
        let rounds: Vec<Vec<u32>> = (0..k).map(|_| permutation(&mut r, m)).collect();
        // recount from each round's best-to-worst listing
        let mut counts: BTreeMap<(usize, usize), u32> = BTreeMap::new();
        for round in &rounds {
            let mut listing: Vec<usize> = (0..m).collect();
            listing.sort_by_key(|&i| round[i]);
            for (pos, &hi) in listing.iter().enumerate() {
                for &lo in &listing[pos + 1..] {
                    *counts.entry((hi, lo)).or_default() += 1;
                }
            }
        }
        let mut want = BTreeSet::new();
        for a in 0..m {
            for b in a + 1..m {
                let ab = counts.get(&(a, b)).copied().unwrap_or(0);
                let ba = counts.get(&(b, a)).copied().unwrap_or(0);
                if ab >= t {
                    want.insert((a, b, Side::A, ab));
                } else if ba >= t {
                    want.insert((a, b, Side::B, ba));
                }
            }
        }
        let got: BTreeSet<_> = stable_item_pairs(&rounds, t)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|p| (p.a, p.b, p.winner, p.count))
            .collect();
        ensure!(got == want, "case {case} {rounds:?}: {got:?} vs {want:?}");
    }
    Ok(())
}

fn group(scores: Vec<f64>) -> GroupScores {
    GroupScores {
        model: "m".into(),
        prompt_id: "p".into(),
        scores,
    }
}

fn posterbench() -> Check {
    let s = posterbench_stats(&[group(vec![5.0; 8])]).map_err(|e| e.to_string())?;
    ensure!(
        (s.mean, s.median, s.std_avg, s.bo8_avg) == (5.0, 5.0, 0.0, 5.0),
        "constant group gives {s:?}"
    );
    let s = posterbench_stats(&[group((1..=8).map(f64::from).collect())]).map_err(|e| e.to_string())?;
    // Σ(i - 4.5)² over 1..8 is 42, so the population std is √(42/8)
    let std = (42.0f64 / 8.0).sqrt();
    ensure!(
        s.mean == 4.5 && s.median == 4.5 && s.bo8_avg == 8.0,
        "[1..8] gives {s:?}"
    );
    ensure!((s.std_avg - std).abs() <= 1e-9, "std {} vs {std}", s.std_avg);
    ensure!(
        format!("{:.6}", s.std_avg) == "2.291288",
        "std prints as {:.6}",
        s.std_avg
    );

    let mut r = rng(9);
    for case in 0..200 {
        let groups: Vec<GroupScores> = (0..r.random_range(1..=6))
            .map(|_| group((0..8).map(|_| r.random_range(0.0..10.0)).collect()))
            .collect();
        let s = posterbench_stats(&groups).map_err(|e| e.to_string())?;
        ensure!(s.bo8_avg >= s.mean, "case {case}: bo8 {} < mean {}", s.bo8_avg, s.mean);
    }

    let report = BenchReport::from_poster(vec![group((1..=8).map(f64::from).collect())]).map_err(|e| e.to_string())?;
    let table = emit_report(&report, ReportFormat::Table);
    ensure!(
        table
            .lines()
            .any(|l| l == "| Model | Mean | Median | Std-Avg | Bo8-Avg |"),
        "no poster header in\n{table}"
    );
    ensure!(
        POSTER_HEADER == "| Model | Mean | Median | Std-Avg | Bo8-Avg |",
        "header constant drifted"
    );
    Ok(())
}

/// Passes pairwise calls until `budget` runs out, then fails them all.
struct Flaky {
    inner: MockJudge,
    budget: AtomicU64,
}

impl JudgeBackend for Flaky {
    fn invoke(&self, d: &JudgeDescriptor, r: &JudgeRequest) -> Result<String, TransportError> {
        if matches!(r, JudgeRequest::Compare { .. })
            && self
                .budget
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| b.checked_sub(1))
                .is_err()
        {
            return Err(TransportError("connection reset".into()));
        }
        self.inner.invoke(d, r)
    }
}

fn desk_config(root: &Path, corpus: &Path, name: &str) -> PipelineConfig {
    PipelineConfig::desk(42, corpus, root.join(name))
}

fn run(config: &PipelineConfig) -> Result<RunSummary, String> {
    Pipeline::new(config.clone())
        .and_then(|p| p.run(&config.flows))
        .map_err(|e| e.to_string())
}

fn end_to_end() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus_dir = dir.path().join("corpus");
    let corpus = synthetic_corpus(42);
    let census = |theme: Theme, per: usize| {
        let samples: Vec<_> = corpus.samples.iter().filter(|s| s.theme == theme).collect();
        let groups: BTreeSet<&str> = samples.iter().map(|s| s.group_id.as_str()).collect();
        (groups.len(), samples.len() == groups.len() * per)
    };
    ensure!(
        census(Theme::Cinematic, 6) == (60, true),
        "cinematic corpus shape {:?}",
        census(Theme::Cinematic, 6)
    );
    ensure!(
        census(Theme::NonCinematic, 4) == (40, true),
        "non-cinematic corpus shape {:?}",
        census(Theme::NonCinematic, 4)
    );
    corpus.write(&corpus_dir).map_err(|e| e.to_string())?;

    let first = run(&desk_config(dir.path(), &corpus_dir, "first"))?;
    let second = run(&desk_config(dir.path(), &corpus_dir, "second"))?;
    let digest = first.manifest.digest();
    ensure!(first.manifest.record_count > 0, "empty dataset");
    ensure!(second.manifest.digest() == digest, "consecutive runs differ");
    let dataset = |s: &RunSummary| std::fs::read(s.run_dir.join("dataset.jsonl")).map_err(|e| e.to_string());
    ensure!(dataset(&first)? == dataset(&second)?, "dataset bytes differ");

    let mut cold = desk_config(dir.path(), &corpus_dir, "cold");
    cold.paths.cache = Some(dir.path().join("cache"));
    let cold_run = run(&cold)?;
    let mut warm = desk_config(dir.path(), &corpus_dir, "warm");
    warm.paths.cache = cold.paths.cache.clone();
    let warm_pipeline = Pipeline::new(warm.clone()).map_err(|e| e.to_string())?;
    let warm_run = warm_pipeline.run(&warm.flows).map_err(|e| e.to_string())?;
    ensure!(cold_run.manifest.digest() == digest, "cold cache run differs");
    ensure!(warm_run.manifest.digest() == digest, "warm cache run differs");
    let live: u64 = warm
        .judges
        .iter()
        .map(|j| warm_pipeline.gateway().invocations(&j.id))
        .sum();
    ensure!(live == 0, "warm cache run still made {live} judge calls");

    let flaky_config = desk_config(dir.path(), &corpus_dir, "flaky");
    let backend: Arc<dyn JudgeBackend> = Arc::new(Flaky {
        inner: MockJudge::new(flaky_config.seed, flaky_config.mock.clone()),
        budget: AtomicU64::new(300),
    });
    let mut gateway = JudgeGateway::new(RetryPolicy::immediate());
    for spec in &flaky_config.judges {
        gateway.register(spec.descriptor(), backend.clone(), spec.max_in_flight);
    }
    let aborted = Pipeline::with_gateway(flaky_config.clone(), gateway)
        .map_err(|e| e.to_string())?
        .run(&flaky_config.flows);
    match aborted {
        Err(PipelineError::Aborted { .. }) => {}
        Err(other) => return Err(format!("flaky run failed with {other}")),
        Ok(_) => return Err("flaky run did not abort".into()),
    }
    let resumed = resume(&flaky_config.paths.output).map_err(|e| e.to_string())?;
    ensure!(resumed.manifest.digest() == digest, "abort-then-resume differs");

    for summary in [&first, &second, &cold_run, &warm_run, &resumed] {
        for s in &summary.stats {
            ensure!(
                s.output <= s.input,
                "{}: output {} > input {}",
                s.stage,
                s.output,
                s.input
            );
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(())
}

fn pair(i: usize, t: ConsensusTally) -> PreferencePair {
    let sample = |id: String| ImageSample {
        sample_id: id.clone(),
        group_id: "g".into(),
        locale: Locale::En,
        uri: format!("synth://{id}"),
        width: 512,
        height: 512,
        source_tag: "synthetic".into(),
        theme: Theme::Cinematic,
    };
    PreferencePair {
        pair_id: format!("p{i:03}"),
        chosen: sample(format!("c{i}")),
        rejected: sample(format!("r{i}")),
        prompt: "poster".into(),
        analysis_chosen: None,
        analysis_rejected: None,
        orientation: if i.is_multiple_of(2) {
            Orientation::ChosenFirst
        } else {
            Orientation::ChosenSecond
        },
        consensus_tally: Some(t),
    }
}

fn audit() -> Check {
    use CanonicalChoice::{Tie, A, B};
    let fixtures = [
        (vec![A, A, A, A], Category::Correct),
        (vec![B, B, B, Tie], Category::Error),
        (vec![A, A, B, B], Category::Controversial),
    ];
    for (marks, want) in &fixtures {
        let got = consensus_classify(marks, Side::A, QUORUM, PANEL);
        ensure!(got == Some(*want), "{marks:?} gives {got:?}");
        let mirrored: Vec<CanonicalChoice> = marks.iter().map(|c| swap_canonical(*c)).collect();
        let got = consensus_classify(&mirrored, Side::B, QUORUM, PANEL);
        ensure!(got == Some(*want), "mirrored {mirrored:?} gives {got:?}");
    }
    ensure!(
        consensus_classify(&[A, A, A], Side::A, QUORUM, PANEL).is_none(),
        "three marks were classified"
    );

    let mut r = rng(11);
    for case in 0..200 {
        let classified: Vec<(PolicyName, Option<Category>)> = (0..r.random_range(1..60))
            .map(|_| {
                let stratum = PolicyName::ALL[r.random_range(0..3)];
                let cat = [Category::Correct, Category::Error, Category::Controversial][r.random_range(0..3)];
                (stratum, Some(cat))
            })
            .collect();
        for row in alignment_report(&classified).rows {
            let sum = row.correct + row.error + row.controversial;
            ensure!((sum - 100.0).abs() <= 0.1, "case {case} {}: sums to {sum}", row.method);
        }
    }

    // forced labels: task i gets the i % 3 fixture, seen through each
    // annotator's own display order
    let archetypes = [
        ConsensusTally {
            a: 6,
            ..Default::default()
        },
        ConsensusTally {
            a: 5,
            tie: 1,
            ..Default::default()
        },
        ConsensusTally {
            a: 5,
            b: 1,
            ..Default::default()
        },
    ];
    let pairs: Vec<PreferencePair> = (0..90).map(|i| pair(i, archetypes[i % 3])).collect();
    let tasks = sample_for_audit(&pairs, 45, 3, true).map_err(|e| e.to_string())?;
    let annotators = default_annotators();
    ensure!(annotators.len() == PANEL, "panel of {}", annotators.len());
    let mut store = AuditStore::in_memory(tasks.clone(), annotators.clone());
    let mut expected: Vec<(PolicyName, Category)> = Vec::new();
    for (i, task) in tasks.iter().enumerate() {
        let (marks, cat) = &fixtures[i % 3];
        expected.push((task.policy_stratum, *cat));
        let agree = match task.ai_label {
            Side::A => CanonicalChoice::A,
            Side::B => CanonicalChoice::B,
        };
        for (annotator, mark) in annotators.iter().zip(marks) {
            let mark = if agree == CanonicalChoice::A {
                *mark
            } else {
                swap_canonical(*mark)
            };
            let order = task.display_order(annotator);
            let choice = match (mark, order) {
                (Tie, _) => AnnotatorChoice::Tie,
                (A, PresentationOrder::Original) | (B, PresentationOrder::Swapped) => AnnotatorChoice::First,
                _ => AnnotatorChoice::Second,
            };
            store
                .record_annotation(&task.task_id, annotator, choice)
                .map_err(|e| e.to_string())?;
        }
    }
    let report = store.report();
    ensure!(report.pending == 0, "{} tasks pending", report.pending);
    let methods: Vec<&str> = report.rows.iter().map(|r| r.method.as_str()).collect();
    let labels = PolicyName::ALL.map(method_label);
    ensure!(methods == labels, "rows {methods:?}");
    ensure!(
        labels == ["All Correct", "5 Correct + 1 Tie", "5 Correct + 1 Tie/Error"],
        "method labels {labels:?}"
    );
    for (i, row) in report.rows.iter().enumerate() {
        let admitted: Vec<Category> = expected
            .iter()
            .filter(|(s, _)| PolicyName::ALL[..=i].contains(s))
            .map(|(_, c)| *c)
            .collect();
        let pct = |cat| 100.0 * admitted.iter().filter(|c| **c == cat).count() as f64 / admitted.len() as f64;
        ensure!(
            row.n == admitted.len(),
            "{}: n {} vs {}",
            row.method,
            row.n,
            admitted.len()
        );
        for (got, cat) in [
            (row.correct, Category::Correct),
            (row.error, Category::Error),
            (row.controversial, Category::Controversial),
        ] {
            ensure!(
                (got - pct(cat)).abs() <= 1e-9,
                "{} {cat:?}: {got} vs {}",
                row.method,
                pct(cat)
            );
        }
        let sum = row.correct + row.error + row.controversial;
        ensure!((sum - 100.0).abs() <= 0.1, "{}: sums to {sum}", row.method);
    }
    let table = render_report(&report);
    let mut lines = table.lines();
    ensure!(lines.next() == Some(REPORT_HEADER), "header {:?}", table.lines().next());
    ensure!(
        REPORT_HEADER == "| Method | N | Corr. (%) | Err. (%) | Controv. (%) |",
        "report header drifted"
    );
    ensure!(
        table
            .lines()
            .filter(|l| l.starts_with("| ") && !l.starts_with("| Method"))
            .count()
            == 3,
        "table:\n{table}"
    );
    Ok(())
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("kendall_w_matches_direct_evaluation", kendall_w),
        ("bt_loss_fixtures_and_gradient", bt_fixtures),
        ("advantage_normalization", advantages),
        ("grpo_objective_branch_grid", grpo),
        ("pairwise_macro_and_tie_adjusted_accuracy", pairwise_macro),
        ("consensus_policy_nesting", consensus_nesting),
        ("swap_involution_and_relabeling", swap_involution),
        ("stability_extraction_oracle", stability_oracle),
        ("posterbench_statistics", posterbench),
        ("end_to_end_determinism", end_to_end),
        ("audit_classification", audit),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let ms = start.elapsed().as_millis();
        match outcome {
            Ok(()) => println!("PASS {name} ({ms} ms)"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({ms} ms): {why}");
            }
        }
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
