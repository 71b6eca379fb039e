//! Evaluation, fine-tuning export, and run statistics.
//!
//! The export side turns a selected dataset into prompt/completion records
//! under one of three labeling strategies: `gold` always supervises with the
//! gold answer, `predict` uses the teacher's own prediction, and
//! `positive_only` keeps gold labels but drops incorrect rationales entirely.
//! The statistics side aggregates everything a run produces into one JSON
//! report, including a Wilcoxon signed-rank test for paired comparisons.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::corpus::{answers_equal, Corpus};
use crate::error::{Error, Result};
use crate::jsonl::{self, RunHeader};
use crate::judge::JudgeSummary;
use crate::selector::{QuestionStageStats, SelectedDataset, SelectionConfig, SelectionOutcome, StageToggles};
use crate::scorer::ScoredRationale;

/// Fraction of corpus questions answered correctly. Questions without a
/// prediction count as incorrect; predictions for unknown questions are an
/// error.
pub fn evaluate_exact_match(
    predictions: &BTreeMap<String, String>,
    corpus: &Corpus,
) -> Result<f64> {
    for id in predictions.keys() {
        if corpus.question(id).is_none() {
            return Err(Error::UnknownQuestion(id.clone()));
        }
    }
    if corpus.questions.is_empty() {
        return Ok(0.0);
    }
    let hits = corpus
        .questions
        .iter()
        .filter(|q| {
            predictions
                .get(&q.id)
                .is_some_and(|p| answers_equal(p, &q.gold_answer, q.task_kind))
        })
        .count();
    Ok(hits as f64 / corpus.questions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelStrategy {
    Gold,
    Predict,
    PositiveOnly,
}

impl LabelStrategy {
    /// What the `label_source` field records for this strategy.
    pub fn label_source(self) -> &'static str {
        match self {
            LabelStrategy::Predict => "predict",
            LabelStrategy::Gold | LabelStrategy::PositiveOnly => "gold",
        }
    }
}

impl std::str::FromStr for LabelStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold" => Ok(LabelStrategy::Gold),
            "predict" => Ok(LabelStrategy::Predict),
            "positive_only" => Ok(LabelStrategy::PositiveOnly),
            other => Err(Error::InvalidConfig(format!("unknown label strategy {other:?}"))),
        }
    }
}

/// How selected rationales become prompt/completion records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportConfig {
    pub label_strategy: LabelStrategy,
    /// Must contain `{question}` exactly once.
    pub prompt_template: String,
    /// Must contain `{rationale}` and `{answer}` exactly once each.
    pub completion_template: String,
}

impl Default for ExportConfig {
    fn default() -> Self {
        // Mirrors the generation template so exported data reads like the
        // completions the teacher produced.
        ExportConfig {
            label_strategy: LabelStrategy::Gold,
            prompt_template: "Q: {question}. A: Let's think step by step.".to_string(),
            completion_template: "{rationale} Therefore, the answer is {answer}".to_string(),
        }
    }
}

impl ExportConfig {
    pub fn validate(&self) -> Result<()> {
        for (template, slot) in [
            (&self.prompt_template, "{question}"),
            (&self.completion_template, "{rationale}"),
            (&self.completion_template, "{answer}"),
        ] {
            if template.matches(slot).count() != 1 {
                return Err(Error::InvalidConfig(format!(
                    "template {template:?} must contain {slot} exactly once"
                )));
            }
        }
        Ok(())
    }
}

/// One `sft.jsonl` record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub completion: String,
    pub label_source: String,
    pub question_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportStats {
    pub records: usize,
    /// Rationales dropped by the positive-only strategy.
    pub dropped_incorrect: usize,
    /// Questions whose every selected rationale was dropped.
    pub omitted_questions: usize,
}

/// Builds fine-tuning records from the selected dataset.
pub fn export_sft(
    selected: &SelectedDataset,
    corpus: &Corpus,
    config: &ExportConfig,
) -> Result<(Vec<SftRecord>, ExportStats)> {
    config.validate()?;
    let mut records = Vec::new();
    let mut stats = ExportStats::default();
    for qsel in &selected.questions {
        let q = corpus
            .question(&qsel.question_id)
            .ok_or_else(|| Error::UnknownQuestion(qsel.question_id.clone()))?;
        let mut emitted = 0;
        for s in &qsel.rationales {
            let label = match config.label_strategy {
                LabelStrategy::Gold => &q.gold_answer,
                LabelStrategy::Predict => &s.rationale.predicted_answer,
                LabelStrategy::PositiveOnly => {
                    if !s.rationale.correct {
                        stats.dropped_incorrect += 1;
                        continue;
                    }
                    &q.gold_answer
                }
            };
            records.push(SftRecord {
                prompt: config.prompt_template.replace("{question}", &q.question),
                completion: config
                    .completion_template
                    .replace("{rationale}", &s.rationale.rationale_text)
                    .replace("{answer}", label),
                label_source: config.label_strategy.label_source().to_string(),
                question_id: qsel.question_id.clone(),
            });
            emitted += 1;
        }
        if emitted == 0 && !qsel.rationales.is_empty() {
            stats.omitted_questions += 1;
        }
    }
    stats.records = records.len();
    Ok((records, stats))
}

/// One `selected.jsonl` record; the answer field follows the label strategy
/// (`predict` writes the teacher prediction, anything else the gold answer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedRecord {
    pub question_id: String,
    pub question: String,
    pub rationale: String,
    pub answer: String,
    pub rd: f64,
    pub correct: bool,
    pub label_source: String,
}

pub fn selected_records(
    selected: &SelectedDataset,
    corpus: &Corpus,
    strategy: LabelStrategy,
) -> Result<Vec<SelectedRecord>> {
    let mut out = Vec::new();
    for qsel in &selected.questions {
        let q = corpus
            .question(&qsel.question_id)
            .ok_or_else(|| Error::UnknownQuestion(qsel.question_id.clone()))?;
        for s in &qsel.rationales {
            let answer = match strategy {
                LabelStrategy::Predict => s.rationale.predicted_answer.clone(),
                _ => q.gold_answer.clone(),
            };
            out.push(SelectedRecord {
                question_id: qsel.question_id.clone(),
                question: q.question.clone(),
                rationale: s.rationale.rationale_text.clone(),
                answer,
                rd: s.rd,
                correct: s.rationale.correct,
                label_source: strategy.label_source().to_string(),
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub p_value: f64,
    /// Sum of ranks of positive deltas.
    pub w_plus: f64,
    /// Sample size after dropping zero deltas.
    pub n: usize,
    /// True when every delta was zero: no evidence either way, p = 1.
    pub degenerate: bool,
    /// Exact enumeration (n <= 25) versus normal approximation.
    pub exact: bool,
}

/// Ranks of |deltas| multiplied by two, so tied (average) ranks stay integral.
fn doubled_ranks(abs_deltas: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..abs_deltas.len()).collect();
    order.sort_by(|&a, &b| abs_deltas[a].total_cmp(&abs_deltas[b]));
    let mut ranks = vec![0u64; abs_deltas.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && abs_deltas[order[j]] == abs_deltas[order[i]] {
            j += 1;
        }
        // group occupies ranks i+1..=j; doubled average rank = (i+1) + j
        let doubled = (i + 1 + j) as u64;
        for k in i..j {
            ranks[order[k]] = doubled;
        }
        i = j;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test over paired deltas.
///
/// Zero deltas are dropped first. For n <= 25 the p-value is exact: the
/// distribution of the positive-rank sum is built by dynamic programming over
/// all 2^n sign assignments and the smaller tail is doubled (capped at 1).
/// Larger samples use the normal approximation with tie-corrected variance
/// and a continuity correction.
pub fn wilcoxon_signed_rank(deltas: &[f64]) -> WilcoxonResult {
    let nonzero: Vec<f64> = deltas.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return WilcoxonResult { p_value: 1.0, w_plus: 0.0, n: 0, degenerate: true, exact: true };
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks2 = doubled_ranks(&abs);
    let w2: u64 = nonzero
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let w_plus = w2 as f64 / 2.0;

    if n <= 25 {
        let max_sum: usize = ranks2.iter().sum::<u64>() as usize;
        let mut counts = vec![0u128; max_sum + 1];
        counts[0] = 1;
        for &r in &ranks2 {
            let r = r as usize;
            for s in (r..=max_sum).rev() {
                counts[s] += counts[s - r];
            }
        }
        let total: u128 = 1 << n;
        let ge: u128 = counts[w2 as usize..].iter().sum();
        let le: u128 = counts[..=w2 as usize].iter().sum();
        let tail = ge.min(le);
        let p = ((2 * tail) as f64 / total as f64).min(1.0);
        WilcoxonResult { p_value: p, w_plus, n, degenerate: false, exact: true }
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j < sorted.len() && sorted[j] == sorted[i] {
                j += 1;
            }
            let t = (j - i) as f64;
            tie_term += t * t * t - t;
            i = j;
        }
        let variance = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let sigma = variance.sqrt();
        let correction = 0.5 * (w_plus - mean).signum();
        let z = (w_plus - mean - correction) / sigma;
        let p = erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0);
        WilcoxonResult { p_value: p, w_plus, n, degenerate: false, exact: false }
    }
}

// ---------------------------------------------------------------------------
// Run report
// ---------------------------------------------------------------------------

/// Fixed-width histogram with 50 uniform bins over [lo, hi].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub bin_width: f64,
    pub counts: Vec<u64>,
}

pub const HISTOGRAM_BINS: usize = 50;

impl Histogram {
    pub fn build(values: &[f64]) -> Self {
        let mut counts = vec![0u64; HISTOGRAM_BINS];
        if values.is_empty() {
            return Histogram { lo: 0.0, hi: 0.0, bin_width: 0.0, counts };
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bin_width = (hi - lo) / HISTOGRAM_BINS as f64;
        for &v in values {
            let idx = if bin_width == 0.0 {
                0
            } else {
                (((v - lo) / bin_width) as usize).min(HISTOGRAM_BINS - 1)
            };
            counts[idx] += 1;
        }
        Histogram { lo, hi, bin_width, counts }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RdSummary {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCheck {
    pub delta: f64,
    /// Mean correctness over all rationales surviving accuracy selection.
    pub global_avg_acc: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTotals {
    pub questions: usize,
    pub scored: usize,
    pub after_accuracy: usize,
    pub after_diversity: usize,
    pub selected: usize,
}

/// Everything a run wants to remember, written as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub selection: SelectionConfig,
    pub stages: StageToggles,
    pub totals: StageTotals,
    pub per_question: Vec<QuestionStageStats>,
    pub emptied_questions: Vec<String>,
    pub accuracy_check: AccuracyCheck,
    pub score_failures: usize,
    pub rd: RdSummary,
    pub rd_histogram_scored: Histogram,
    pub rd_histogram_selected: Histogram,
    /// (rationale token length, rd) for every scored record.
    pub rd_length_pairs: Vec<(usize, f64)>,
    pub judge: Option<JudgeSummary>,
}

/// Aggregates a run's artifacts into a report.
pub fn build_report(
    corpus: &Corpus,
    scored: &[ScoredRationale],
    outcome: &SelectionOutcome,
    judge: Option<JudgeSummary>,
    config: &SelectionConfig,
    toggles: StageToggles,
    score_failures: usize,
) -> RunReport {
    let rds: Vec<f64> = scored.iter().map(|s| s.rd).collect();
    let selected_rds: Vec<f64> = outcome.selected.iter_rationales().map(|s| s.rd).collect();
    let rd = if rds.is_empty() {
        RdSummary::default()
    } else {
        RdSummary {
            count: rds.len(),
            min: rds.iter().copied().fold(f64::INFINITY, f64::min),
            max: rds.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: rds.iter().sum::<f64>() / rds.len() as f64,
        }
    };
    let totals = StageTotals {
        questions: corpus.questions.len(),
        scored: scored.len(),
        after_accuracy: outcome.stats.per_question.iter().map(|s| s.after_accuracy).sum(),
        after_diversity: outcome.stats.per_question.iter().map(|s| s.after_diversity).sum(),
        selected: outcome.stats.per_question.iter().map(|s| s.selected).sum(),
    };
    RunReport {
        seed: config.seed,
        selection: config.clone(),
        stages: toggles,
        totals,
        per_question: outcome.stats.per_question.clone(),
        emptied_questions: outcome.stats.emptied_questions.clone(),
        accuracy_check: AccuracyCheck {
            delta: config.delta,
            global_avg_acc: outcome.stats.global_avg_acc,
            satisfied: outcome.stats.global_avg_acc_ok,
        },
        score_failures,
        rd,
        rd_histogram_scored: Histogram::build(&rds),
        rd_histogram_selected: Histogram::build(&selected_rds),
        rd_length_pairs: scored
            .iter()
            .map(|s| (s.rationale.rationale_text.split_whitespace().count(), s.rd))
            .collect(),
        judge,
    }
}

pub fn write_report(report: &RunReport, path: &Path) -> Result<()> {
    jsonl::write_atomic(path, |out| {
        let text = serde_json::to_string_pretty(report)
            .map_err(|e| Error::InvalidConfig(format!("report serialization: {e}")))?;
        out.write_all(text.as_bytes())?;
        out.write_all(b"\n")?;
        Ok(())
    })
}

pub fn write_sft(records: &[SftRecord], path: &Path, header: Option<&RunHeader>) -> Result<()> {
    jsonl::write_jsonl_atomic(path, header, records)
}

pub fn write_selected(
    records: &[SelectedRecord],
    path: &Path,
    header: Option<&RunHeader>,
) -> Result<()> {
    jsonl::write_jsonl_atomic(path, header, records)
}
