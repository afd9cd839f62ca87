//! Benchmark metrics and report rendering.
//!
//! Accuracies are kept as exact integer ratios until display, so an average
//! of two class accuracies is formed with one division and printed values do
//! not inherit binary rounding noise.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Record, RecordError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error("no cases")]
    Empty,
    #[error("{0} must be finite")]
    NonFinite(&'static str),
    #[error("group `{0}` has no scores")]
    EmptyGroup(String),
    #[error("unknown report format `{0}` (expected table, csv or records)")]
    UnknownFormat(String),
    #[error("cannot parse `{0}` as a decimal")]
    Decimal(String),
    #[error("malformed table row: {0}")]
    Row(String),
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// A percentage held as the exact fraction `num / den` of 100.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Rate {
    num: u128,
    den: u128,
}

impl PartialEq for Rate {
    fn eq(&self, other: &Self) -> bool {
        self.num * other.den == other.num * self.den
    }
}

impl Rate {
    /// `correct / total`; `total` must be positive.
    pub fn new(correct: u128, total: u128) -> Self {
        assert!(total > 0, "rate over an empty set");
        let g = gcd(correct, total).max(1);
        Rate {
            num: correct / g,
            den: total / g,
        }
    }

    /// Parses a printed percentage such as `"81.8"` exactly.
    pub fn from_percent_str(text: &str) -> Result<Self, BenchError> {
        let bad = || BenchError::Decimal(text.to_string());
        let t = text.trim();
        let (int, frac) = t.split_once('.').unwrap_or((t, ""));
        if int.is_empty() && frac.is_empty() || !(int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit())) {
            return Err(bad());
        }
        let digits = format!("{int}{frac}");
        let n: u128 = digits.parse().map_err(|_| bad())?;
        let scale = 10u128.checked_pow(frac.len() as u32).ok_or_else(bad)?;
        Ok(Rate::new(n, 100 * scale))
    }

    pub fn numerator(&self) -> u128 {
        self.num
    }

    pub fn denominator(&self) -> u128 {
        self.den
    }

    /// Mean of two rates, exact.
    pub fn midpoint(self, other: Rate) -> Rate {
        Rate::new(self.num * other.den + other.num * self.den, 2 * self.den * other.den)
    }

    /// The percentage, correctly rounded to the nearest `f64`.
    pub fn percent(&self) -> f64 {
        let g = gcd(100 * self.num, self.den).max(1);
        ((100 * self.num / g) as f64) / ((self.den / g) as f64)
    }

    /// Percentage rounded half away from zero to `decimals` places, from the
    /// exact fraction.
    pub fn display(&self, decimals: u32) -> String {
        let scale = 10u128.pow(decimals);
        let scaled = 100 * self.num * scale;
        let mut q = scaled / self.den;
        if 2 * (scaled % self.den) >= self.den {
            q += 1;
        }
        fixed_point(q, decimals)
    }
}

fn fixed_point(q: u128, decimals: u32) -> String {
    if decimals == 0 {
        return q.to_string();
    }
    let scale = 10u128.pow(decimals);
    format!("{}.{:0width$}", q / scale, q % scale, width = decimals as usize)
}

/// Rounds a float half away from zero to `decimals` places. The value is
/// first printed to nine places so that `82.85` (stored as 82.8499...) rounds
/// up as written.
pub fn round_half_away(value: f64, decimals: u32) -> String {
    let text = format!("{:.9}", value.abs());
    let (int, frac) = text.split_once('.').expect("fixed format has a point");
    let d = decimals as usize;
    let mut digits: Vec<u8> = format!("{int}{}", &frac[..d]).into_bytes();
    if frac.as_bytes()[d] >= b'5' {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, b'1');
                break;
            }
            i -= 1;
            if digits[i] == b'9' {
                digits[i] = b'0';
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let digits = String::from_utf8(digits).expect("ascii digits");
    let (whole, part) = digits.split_at(digits.len() - d);
    let body = if d == 0 {
        whole.to_string()
    } else {
        format!("{whole}.{part}")
    };
    let is_zero = body.bytes().all(|b| b == b'0' || b == b'.');
    if value.is_sign_negative() && !is_zero {
        format!("-{body}")
    } else {
        body
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn flipped(self) -> Self {
        match self {
            Answer::Yes => Answer::No,
            Answer::No => Answer::Yes,
        }
    }
}

fn default_model() -> String {
    "model".into()
}

/// One benchmark pair. `ground_truth` answers "is image 1 better?" for the
/// original presentation; the swapped presentation's truth is its flip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseCase {
    #[serde(default = "default_model")]
    pub model: String,
    pub pair_id: String,
    pub ground_truth: Answer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original: Option<Answer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swapped: Option<Answer>,
}

impl PairwiseCase {
    pub fn single_order(&self) -> bool {
        self.original.is_none() || self.swapped.is_none()
    }

    /// Same assessments with the other presentation called "original".
    pub fn relabeled(&self) -> Self {
        PairwiseCase {
            ground_truth: self.ground_truth.flipped(),
            original: self.swapped,
            swapped: self.original,
            ..self.clone()
        }
    }

    /// `(truth, answer)` per presentation that was assessed.
    fn assessments(&self) -> impl Iterator<Item = (Answer, Answer)> + '_ {
        [
            self.original.map(|a| (self.ground_truth, a)),
            self.swapped.map(|a| (self.ground_truth.flipped(), a)),
        ]
        .into_iter()
        .flatten()
    }
}

impl Record for PairwiseCase {
    fn validate(&self) -> Result<(), RecordError> {
        if self.original.is_none() && self.swapped.is_none() {
            return Err(RecordError::Invalid {
                field: "original",
                reason: "case has no assessment in either order".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseAccuracy {
    pub yes: Option<Rate>,
    pub no: Option<Rate>,
    /// Absent unless both classes have cases.
    pub macro_avg: Option<Rate>,
    pub assessments: usize,
    pub single_order_cases: usize,
}

/// Per-class accuracy where every assessed presentation is its own case,
/// labelled by that presentation's truth.
pub fn pairwise_accuracy(cases: &[PairwiseCase]) -> Result<PairwiseAccuracy, BenchError> {
    let (mut yes, mut yes_n, mut no, mut no_n) = (0u128, 0u128, 0u128, 0u128);
    for (truth, answer) in cases.iter().flat_map(PairwiseCase::assessments) {
        let hit = u128::from(truth == answer);
        match truth {
            Answer::Yes => (yes, yes_n) = (yes + hit, yes_n + 1),
            Answer::No => (no, no_n) = (no + hit, no_n + 1),
        }
    }
    if yes_n + no_n == 0 {
        return Err(BenchError::Empty);
    }
    let yes = (yes_n > 0).then(|| Rate::new(yes, yes_n));
    let no = (no_n > 0).then(|| Rate::new(no, no_n));
    Ok(PairwiseAccuracy {
        yes,
        no,
        macro_avg: yes.zip(no).map(|(y, n)| y.midpoint(n)),
        assessments: (yes_n + no_n) as usize,
        single_order_cases: cases.iter().filter(|c| c.single_order()).count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Correct,
    Tie,
    Wrong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointwiseCase {
    #[serde(default = "default_model")]
    pub model: String,
    pub pair_id: String,
    pub score_chosen: f64,
    pub score_rejected: f64,
}

impl PointwiseCase {
    pub fn outcome(&self) -> Outcome {
        match self.score_chosen.total_cmp(&self.score_rejected) {
            std::cmp::Ordering::Greater => Outcome::Correct,
            std::cmp::Ordering::Equal => Outcome::Tie,
            std::cmp::Ordering::Less => Outcome::Wrong,
        }
    }
}

impl Record for PointwiseCase {
    fn validate(&self) -> Result<(), RecordError> {
        for (field, v) in [
            ("score_chosen", self.score_chosen),
            ("score_rejected", self.score_rejected),
        ] {
            if !v.is_finite() {
                return Err(RecordError::Invalid {
                    field,
                    reason: "must be finite".into(),
                });
            }
        }
        Ok(())
    }
}

/// Accuracy with each tie worth half a correct prediction.
pub fn tie_adjusted_accuracy(cases: &[PointwiseCase]) -> Result<Rate, BenchError> {
    if cases.is_empty() {
        return Err(BenchError::Empty);
    }
    let mut half_points = 0u128;
    for c in cases {
        if !c.score_chosen.is_finite() || !c.score_rejected.is_finite() {
            return Err(BenchError::NonFinite("score"));
        }
        half_points += match c.outcome() {
            Outcome::Correct => 2,
            Outcome::Tie => 1,
            Outcome::Wrong => 0,
        };
    }
    Ok(Rate::new(half_points, 2 * cases.len() as u128))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    #[serde(default = "default_model")]
    pub model: String,
    pub prompt_id: String,
    pub scores: Vec<f64>,
}

impl Record for GroupScores {
    fn validate(&self) -> Result<(), RecordError> {
        if self.scores.is_empty() {
            return Err(RecordError::Invalid {
                field: "scores",
                reason: "empty group".into(),
            });
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(RecordError::Invalid {
                field: "scores",
                reason: "non-finite score".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosterStats {
    pub mean: f64,
    pub median: f64,
    pub std_avg: f64,
    pub bo8_avg: f64,
    /// Set when groups differ in size.
    pub unequal_groups: bool,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_std(xs: &[f64]) -> f64 {
    let mu = mean(xs);
    (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Pooled mean and median, mean per-group population std, mean per-group max.
pub fn posterbench_stats(groups: &[GroupScores]) -> Result<PosterStats, BenchError> {
    if groups.is_empty() {
        return Err(BenchError::Empty);
    }
    for g in groups {
        if g.scores.is_empty() {
            return Err(BenchError::EmptyGroup(g.prompt_id.clone()));
        }
        if g.scores.iter().any(|s| !s.is_finite()) {
            return Err(BenchError::NonFinite("score"));
        }
    }
    let mut pooled: Vec<f64> = groups.iter().flat_map(|g| g.scores.iter().copied()).collect();
    pooled.sort_by(f64::total_cmp);
    let n = pooled.len();
    let median = if n % 2 == 1 {
        pooled[n / 2]
    } else {
        (pooled[n / 2 - 1] + pooled[n / 2]) / 2.0
    };
    let stds: Vec<f64> = groups.iter().map(|g| population_std(&g.scores)).collect();
    let maxima: Vec<f64> = groups
        .iter()
        .map(|g| g.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(PosterStats {
        mean: mean(&pooled),
        median,
        std_avg: mean(&stds),
        bo8_avg: mean(&maxima),
        unequal_groups: groups.iter().any(|g| g.scores.len() != groups[0].scores.len()),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub pairwise: Vec<(String, PairwiseAccuracy)>,
    pub pointwise: Vec<(String, Rate)>,
    pub poster: Vec<(String, PosterStats)>,
}

/// Splits cases by their `model` field, keeping first-appearance order.
pub fn by_model<T>(cases: Vec<T>, model: impl Fn(&T) -> &str) -> Vec<(String, Vec<T>)> {
    let mut out: Vec<(String, Vec<T>)> = Vec::new();
    for case in cases {
        let name = model(&case).to_string();
        match out.iter_mut().find(|(m, _)| *m == name) {
            Some((_, v)) => v.push(case),
            None => out.push((name, vec![case])),
        }
    }
    out
}

impl BenchReport {
    pub fn from_pairwise(cases: Vec<PairwiseCase>) -> Result<Self, BenchError> {
        let mut report = BenchReport::default();
        for (model, cs) in by_model(cases, |c| &c.model) {
            report.pairwise.push((model, pairwise_accuracy(&cs)?));
        }
        Ok(report)
    }

    pub fn from_pointwise(cases: Vec<PointwiseCase>) -> Result<Self, BenchError> {
        let mut report = BenchReport::default();
        for (model, cs) in by_model(cases, |c| &c.model) {
            report.pointwise.push((model, tie_adjusted_accuracy(&cs)?));
        }
        Ok(report)
    }

    pub fn from_poster(groups: Vec<GroupScores>) -> Result<Self, BenchError> {
        let mut report = BenchReport::default();
        for (model, gs) in by_model(groups, |g| &g.model) {
            report.poster.push((model, posterbench_stats(&gs)?));
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
    Records,
}

impl FromStr for ReportFormat {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            "records" => Ok(ReportFormat::Records),
            other => Err(BenchError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Table => "table",
            ReportFormat::Csv => "csv",
            ReportFormat::Records => "records",
        })
    }
}

/// One metric of one model, full precision plus its display string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub section: String,
    pub model: String,
    pub metric: String,
    pub value: Option<f64>,
    pub display: String,
}

pub const PAIRWISE_DECIMALS: u32 = 1;
pub const POINTWISE_DECIMALS: u32 = 1;
pub const POSTER_DECIMALS: u32 = 2;

pub const PAIRWISE_HEADER: &str = "| Model | Yes | No | Avg |";
pub const POINTWISE_HEADER: &str = "| Model | Accuracy |";
pub const POSTER_HEADER: &str = "| Model | Mean | Median | Std-Avg | Bo8-Avg |";

fn rate_metric(section: &str, model: &str, metric: &str, rate: Option<Rate>, decimals: u32) -> MetricRecord {
    MetricRecord {
        section: section.into(),
        model: model.into(),
        metric: metric.into(),
        value: rate.map(|r| r.percent()),
        display: rate.map_or_else(|| "-".to_string(), |r| r.display(decimals)),
    }
}

fn float_metric(model: &str, metric: &str, value: f64) -> MetricRecord {
    MetricRecord {
        section: "poster".into(),
        model: model.into(),
        metric: metric.into(),
        value: Some(value),
        display: round_half_away(value, POSTER_DECIMALS),
    }
}

pub fn metric_records(report: &BenchReport) -> Vec<MetricRecord> {
    let mut out = Vec::new();
    for (model, acc) in &report.pairwise {
        out.push(rate_metric("pairwise", model, "yes_acc", acc.yes, PAIRWISE_DECIMALS));
        out.push(rate_metric("pairwise", model, "no_acc", acc.no, PAIRWISE_DECIMALS));
        out.push(rate_metric(
            "pairwise",
            model,
            "macro_avg",
            acc.macro_avg,
            PAIRWISE_DECIMALS,
        ));
    }
    for (model, rate) in &report.pointwise {
        out.push(rate_metric(
            "pointwise",
            model,
            "accuracy",
            Some(*rate),
            POINTWISE_DECIMALS,
        ));
    }
    for (model, s) in &report.poster {
        out.push(float_metric(model, "mean", s.mean));
        out.push(float_metric(model, "median", s.median));
        out.push(float_metric(model, "std_avg", s.std_avg));
        out.push(float_metric(model, "bo8_avg", s.bo8_avg));
    }
    out
}

fn table_section(out: &mut String, header: &str, rows: Vec<Vec<String>>) {
    if rows.is_empty() {
        return;
    }
    if !out.is_empty() {
        out.push('\n');
    }
    let columns = header.matches('|').count() - 1;
    out.push_str(header);
    out.push('\n');
    out.push('|');
    out.push_str(&"---|".repeat(columns));
    out.push('\n');
    for row in rows {
        out.push_str(&format!("| {} |\n", row.join(" | ")));
    }
}

pub fn emit_report(report: &BenchReport, format: ReportFormat) -> String {
    let records = metric_records(report);
    match format {
        ReportFormat::Records => records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect(),
        ReportFormat::Csv => {
            let mut writer = csv::Writer::from_writer(Vec::new());
            for r in &records {
                writer.serialize(r).expect("in-memory csv write");
            }
            String::from_utf8(writer.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
        }
        ReportFormat::Table => {
            let display = |section: &str, model: &str, metric: &str| {
                records
                    .iter()
                    .find(|r| r.section == section && r.model == model && r.metric == metric)
                    .map(|r| r.display.clone())
                    .unwrap_or_default()
            };
            let mut out = String::new();
            let rows = report
                .pairwise
                .iter()
                .map(|(m, _)| {
                    let mut row = vec![m.clone()];
                    row.extend(["yes_acc", "no_acc", "macro_avg"].map(|k| display("pairwise", m, k)));
                    row
                })
                .collect();
            table_section(&mut out, PAIRWISE_HEADER, rows);
            let rows = report
                .pointwise
                .iter()
                .map(|(m, _)| vec![m.clone(), display("pointwise", m, "accuracy")])
                .collect();
            table_section(&mut out, POINTWISE_HEADER, rows);
            let rows = report
                .poster
                .iter()
                .map(|(m, _)| {
                    let mut row = vec![m.clone()];
                    row.extend(["mean", "median", "std_avg", "bo8_avg"].map(|k| display("poster", m, k)));
                    row
                })
                .collect();
            table_section(&mut out, POSTER_HEADER, rows);
            out
        }
    }
}

/// Reads CSV output back into metric records.
pub fn parse_csv(text: &str) -> Result<Vec<MetricRecord>, BenchError> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| BenchError::Row(e.to_string()))
}

/// Splits a rendered table row into its model name and numeric cells.
pub fn parse_table_row(row: &str) -> Result<(String, Vec<f64>), BenchError> {
    let inner = row
        .trim()
        .strip_prefix('|')
        .and_then(|r| r.strip_suffix('|'))
        .ok_or_else(|| BenchError::Row(row.to_string()))?;
    let mut cells = inner.split('|').map(str::trim);
    let model = cells
        .next()
        .filter(|m| !m.is_empty())
        .ok_or_else(|| BenchError::Row(row.to_string()))?;
    let values = cells
        .map(|c| c.parse::<f64>().map_err(|_| BenchError::Row(row.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((model.to_string(), values))
}
