//! The three sequential selection stages: accuracy, diversity, difficulty.
//!
//! Accuracy selection removes incorrect rationales (fewest possible, ascending
//! index) until the per-question mean correctness reaches the threshold.
//! Diversity selection repeatedly finds the pair of surviving rationales with
//! the highest n-gram Jaccard similarity and randomly discards one member
//! until at most `diversity_keep` remain. Difficulty selection keeps the
//! `difficulty_keep` rationales with the lowest difficulty ratio. All stages
//! preserve input order (difficulty re-sorts by ratio) and never mutate
//! records, and every random draw comes from a per-question stream derived
//! from (seed, question_id), so parallel and serial runs agree byte for byte.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::scorer::ScoredRationale;
use crate::seeding::derive_rng;

/// All selection knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    /// Accuracy threshold in [0, 1].
    pub delta: f64,
    /// N-gram size for diversity comparison.
    pub ngram_n: usize,
    /// Rationales to keep after diversity selection (K).
    pub diversity_keep: usize,
    /// Rationales to keep after difficulty selection (k).
    pub difficulty_keep: usize,
    pub seed: u64,
    /// When false, all incorrect rationales are removed regardless of delta.
    pub retain_negatives: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            delta: 0.8,
            ngram_n: 3,
            diversity_keep: 6,
            difficulty_keep: 3,
            seed: 42,
            retain_negatives: true,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::InvalidConfig(format!("delta {} outside [0, 1]", self.delta)));
        }
        if self.ngram_n < 1 || self.diversity_keep < 1 || self.difficulty_keep < 1 {
            return Err(Error::InvalidConfig("ngram/keep/top must be at least 1".into()));
        }
        if self.difficulty_keep > self.diversity_keep {
            return Err(Error::InvalidConfig(format!(
                "difficulty_keep {} exceeds diversity_keep {}",
                self.difficulty_keep, self.diversity_keep
            )));
        }
        Ok(())
    }
}

/// Which stages run; disabling stages reproduces the ablation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageToggles {
    pub accuracy: bool,
    pub diversity: bool,
    pub difficulty: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles { accuracy: true, diversity: true, difficulty: true }
    }
}

/// Lowercased word n-grams of `text` as a set of joined keys.
///
/// Tokens are whitespace-split with leading/trailing punctuation stripped.
/// Texts shorter than `n` tokens yield the whole token sequence as a single
/// key rather than being exempt from comparison; empty texts yield the empty
/// set.
pub fn ngrams(text: &str, n: usize) -> HashSet<String> {
    assert!(n >= 1, "n must be at least 1");
    let tokens: Vec<String> = text
        .split_whitespace()
        .filter_map(|raw| {
            let tok = raw.trim_matches(|c: char| !c.is_alphanumeric());
            if tok.is_empty() {
                None
            } else {
                Some(tok.to_lowercase())
            }
        })
        .collect();
    if tokens.is_empty() {
        return HashSet::new();
    }
    if tokens.len() < n {
        return HashSet::from([tokens.join(" ")]);
    }
    tokens.windows(n).map(|w| w.join(" ")).collect()
}

/// |A ∩ B| / |A ∪ B|; 1 when both sets are empty, 0 when exactly one is.
pub fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let intersection = a.intersection(b).count();
    let union = a.len() + b.len() - intersection;
    intersection as f64 / union as f64
}

/// Removes incorrect items, earliest first, until the mean correctness of the
/// remainder reaches `delta` or no incorrect items remain. Removal count is
/// minimal because the mean depends only on how many incorrect items stay.
/// With `retain_negatives` false every incorrect item is removed.
pub fn accuracy_select<T>(
    items: Vec<T>,
    is_correct: impl Fn(&T) -> bool,
    delta: f64,
    retain_negatives: bool,
) -> Vec<T> {
    let correct = items.iter().filter(|x| is_correct(x)).count();
    let incorrect = items.len() - correct;
    let to_remove = if !retain_negatives {
        incorrect
    } else {
        let mut d = 0;
        while d < incorrect {
            let mean = correct as f64 / (items.len() - d) as f64;
            if mean >= delta {
                break;
            }
            d += 1;
        }
        d
    };
    let mut removed = 0;
    items
        .into_iter()
        .filter(|x| {
            if !is_correct(x) && removed < to_remove {
                removed += 1;
                false
            } else {
                true
            }
        })
        .collect()
}

/// Greedy near-duplicate removal.
///
/// While more than `keep` items survive: find the pair (i, j), i < j in input
/// position, with maximal Jaccard similarity of their n-gram sets (ties go to
/// the lexicographically smallest pair), then remove one member: one RNG draw
/// per removal, 0 removes i, 1 removes j. Sets are computed once; relative
/// input order is preserved. Output size is always min(keep, input size).
pub fn diversity_select<T>(
    items: Vec<T>,
    text_of: impl Fn(&T) -> &str,
    n: usize,
    keep: usize,
    rng: &mut impl Rng,
) -> Vec<T> {
    assert!(keep >= 1, "keep must be at least 1");
    if items.len() <= keep {
        return items;
    }
    let sets: Vec<HashSet<String>> = items.iter().map(|x| ngrams(text_of(x), n)).collect();
    let mut sim = vec![vec![0.0f64; items.len()]; items.len()];
    for i in 0..items.len() {
        for j in (i + 1)..items.len() {
            sim[i][j] = jaccard(&sets[i], &sets[j]);
        }
    }
    let mut alive: Vec<usize> = (0..items.len()).collect();
    while alive.len() > keep {
        let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
        for (a, &i) in alive.iter().enumerate() {
            for &j in &alive[a + 1..] {
                if sim[i][j] > best.0 {
                    best = (sim[i][j], i, j);
                }
            }
        }
        let victim = if rng.gen_range(0..2u32) == 0 { best.1 } else { best.2 };
        alive.retain(|&x| x != victim);
    }
    let alive_set: HashSet<usize> = alive.into_iter().collect();
    items
        .into_iter()
        .enumerate()
        .filter_map(|(i, x)| alive_set.contains(&i).then_some(x))
        .collect()
}

/// The `k` items with the smallest difficulty ratio, ascending, ties broken by
/// input position. Undersized inputs are returned whole (sorted).
pub fn difficulty_select<T>(items: Vec<T>, rd_of: impl Fn(&T) -> f64, k: usize) -> Vec<T> {
    let mut items = items;
    items.sort_by(|a, b| rd_of(a).total_cmp(&rd_of(b)));
    items.truncate(k);
    items
}

/// Selection result: per question, at most `difficulty_keep` rationales in
/// ascending difficulty order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectedDataset {
    pub questions: Vec<QuestionSelection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionSelection {
    pub question_id: String,
    pub rationales: Vec<ScoredRationale>,
}

impl SelectedDataset {
    pub fn total(&self) -> usize {
        self.questions.iter().map(|q| q.rationales.len()).sum()
    }

    pub fn iter_rationales(&self) -> impl Iterator<Item = &ScoredRationale> {
        self.questions.iter().flat_map(|q| q.rationales.iter())
    }
}

/// Per-question stage cardinalities for the run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionStageStats {
    pub question_id: String,
    pub input: usize,
    pub after_accuracy: usize,
    pub after_diversity: usize,
    pub selected: usize,
    pub emptied: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub per_question: Vec<QuestionStageStats>,
    /// Questions whose rationales were all removed by accuracy selection.
    pub emptied_questions: Vec<String>,
    /// Mean correctness over all rationales surviving accuracy selection.
    pub global_avg_acc: f64,
    /// Whether the global mean meets the configured delta.
    pub global_avg_acc_ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    pub selected: SelectedDataset,
    pub stats: SelectionStats,
}

/// Runs accuracy, diversity, and difficulty selection per question, in that
/// order, honoring the stage toggles. Deterministic given (corpus, config).
pub fn run_selection(
    scored: &[ScoredRationale],
    corpus: &Corpus,
    config: &SelectionConfig,
    toggles: StageToggles,
) -> Result<SelectionOutcome> {
    config.validate()?;
    let mut outcome = SelectionOutcome {
        selected: SelectedDataset::default(),
        stats: SelectionStats::default(),
    };
    let mut survivors_correct = 0usize;
    let mut survivors_total = 0usize;

    for q in &corpus.questions {
        let items: Vec<ScoredRationale> =
            scored.iter().filter(|s| s.rationale.question_id == q.id).cloned().collect();
        if items.is_empty() {
            continue;
        }
        let input = items.len();

        let after_acc = if toggles.accuracy {
            accuracy_select(items, |s| s.rationale.correct, config.delta, config.retain_negatives)
        } else {
            items
        };
        survivors_correct += after_acc.iter().filter(|s| s.rationale.correct).count();
        survivors_total += after_acc.len();
        if after_acc.is_empty() {
            outcome.stats.per_question.push(QuestionStageStats {
                question_id: q.id.clone(),
                input,
                after_accuracy: 0,
                after_diversity: 0,
                selected: 0,
                emptied: true,
            });
            outcome.stats.emptied_questions.push(q.id.clone());
            continue;
        }
        let after_acc_n = after_acc.len();

        let after_div = if toggles.diversity {
            let mut rng = derive_rng(config.seed, &["diversity", &q.id]);
            diversity_select(
                after_acc,
                |s| s.rationale.rationale_text.as_str(),
                config.ngram_n,
                config.diversity_keep,
                &mut rng,
            )
        } else {
            after_acc
        };
        let after_div_n = after_div.len();

        let chosen = if toggles.difficulty {
            difficulty_select(after_div, |s| s.rd, config.difficulty_keep)
        } else {
            after_div
        };

        outcome.stats.per_question.push(QuestionStageStats {
            question_id: q.id.clone(),
            input,
            after_accuracy: after_acc_n,
            after_diversity: after_div_n,
            selected: chosen.len(),
            emptied: false,
        });
        outcome
            .selected
            .questions
            .push(QuestionSelection { question_id: q.id.clone(), rationales: chosen });
    }

    outcome.stats.global_avg_acc = if survivors_total == 0 {
        0.0
    } else {
        survivors_correct as f64 / survivors_total as f64
    };
    outcome.stats.global_avg_acc_ok = outcome.stats.global_avg_acc >= config.delta;
    Ok(outcome)
}
