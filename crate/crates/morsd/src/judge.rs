//! Pairwise rationale quality judging with position-swapped double scoring.
//!
//! For each question, the lowest- and highest-difficulty rationales are sent
//! to a chat endpoint acting as a referee, which scores both on a 1-10 scale.
//! Every pair is judged twice with the rationale positions swapped so that any
//! position preference in the referee cancels out in aggregation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::http::{chat_text, HttpClient};
use crate::scorer::ScoredRationale;

/// Referee system prompt, fixed verbatim.
pub const JUDGE_SYSTEM_PROMPT: &str = "You are a helpful and precise assistant for checking the quality of the rationale based on a given question.";

/// Scoring instructions appended to every judge request, fixed verbatim.
pub const JUDGE_TASK_DESCRIPTION: &str = "We would like to request your feedback on the performance of two rationales in response to the question displayed above. Please rate the rationales. Each rationale receives an overall score on a scale of 1 to 10, where a higher score indicates better overall performance. Please first output a single line containing only two values indicating the scores for rationale 1 and rationale 2, respectively. The two scores are separated by a space. In the subsequent line, please provide a comprehensive explanation of your evaluation and fully compare the quality of the two rationales, avoiding any potential bias and ensuring that the order in which the rationale was presented does not affect your judgment.";

/// One judging job: the minimum- and maximum-difficulty rationales of a question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgePair {
    pub question_id: String,
    pub question: String,
    /// Rationale with the lowest difficulty ratio.
    pub rationale_low: String,
    /// Rationale with the highest difficulty ratio.
    pub rationale_high: String,
}

/// Which rationale sat in position 1 for a given verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeOrder {
    LowFirst,
    HighFirst,
}

/// One referee call's parsed scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub question_id: String,
    pub order: JudgeOrder,
    pub score_position1: u8,
    pub score_position2: u8,
    pub explanation: String,
    #[serde(skip_serializing, default)]
    pub raw_reply: String,
}

/// A pair the referee could not resolve within the retry budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncompleteJudgement {
    pub question_id: String,
    pub order: JudgeOrder,
    pub reason: String,
}

/// Renders the referee request as (system text, user text). The user text is
/// plain concatenation; bracket tags inside the question or rationales pass
/// through verbatim.
pub fn render_judge_prompt(
    question: &str,
    rationale_1: &str,
    rationale_2: &str,
) -> (String, String) {
    let user = format!(
        "[Question] {question} [The Start of Rationale1] {rationale_1} [The End of Rationale1] \
         [The Start of Rationale2] {rationale_2} [The End of Rationale2] [System] {JUDGE_TASK_DESCRIPTION}"
    );
    (JUDGE_SYSTEM_PROMPT.to_string(), user)
}

fn take_token(s: &str) -> Option<(&str, &str)> {
    let s = s.trim_start();
    if s.is_empty() {
        return None;
    }
    let end = s.find(char::is_whitespace).unwrap_or(s.len());
    Some((&s[..end], &s[end..]))
}

/// Parses a referee reply: the first line must begin with two integer scores
/// in 1..=10 separated by whitespace; anything after them is the explanation.
/// Out-of-range scores are an error, never clamped.
pub fn parse_verdict(raw_reply: &str) -> Result<(u8, u8, String)> {
    let unparseable = || Error::VerdictUnparseable(raw_reply.chars().take(120).collect());
    let (first, rest) = raw_reply.split_once('\n').unwrap_or((raw_reply, ""));
    let (tok1, after1) = take_token(first).ok_or_else(unparseable)?;
    let (tok2, after2) = take_token(after1).ok_or_else(unparseable)?;
    let s1: i64 = tok1.parse().map_err(|_| unparseable())?;
    let s2: i64 = tok2.parse().map_err(|_| unparseable())?;
    if !(1..=10).contains(&s1) || !(1..=10).contains(&s2) {
        return Err(unparseable());
    }
    let tail = after2.trim();
    let rest = rest.trim();
    let explanation = match (tail.is_empty(), rest.is_empty()) {
        (true, true) => String::new(),
        (true, false) => rest.to_string(),
        (false, true) => tail.to_string(),
        (false, false) => format!("{tail}\n{rest}"),
    };
    Ok((s1 as u8, s2 as u8, explanation))
}

/// Builds one pair per question with at least two scored rationales: the
/// minimum-difficulty rationale (first on ties) against the maximum (last on
/// ties, so equal-difficulty questions still compare two distinct records).
pub fn build_pairs(scored: &[ScoredRationale], corpus: &Corpus) -> Vec<JudgePair> {
    let mut pairs = Vec::new();
    for q in &corpus.questions {
        let records: Vec<&ScoredRationale> =
            scored.iter().filter(|s| s.rationale.question_id == q.id).collect();
        if records.len() < 2 {
            continue;
        }
        let mut low = records[0];
        let mut high = records[0];
        for r in &records[1..] {
            if r.rd < low.rd {
                low = r;
            }
            if r.rd >= high.rd {
                high = r;
            }
        }
        pairs.push(JudgePair {
            question_id: q.id.clone(),
            question: q.question.clone(),
            rationale_low: low.rationale.rationale_text.clone(),
            rationale_high: high.rationale.rationale_text.clone(),
        });
    }
    pairs
}

/// A referee implementation. The pair and order are passed alongside the
/// rendered texts so that scripted stubs can key their replies.
pub trait JudgeBackend: Send + Sync {
    fn reply(
        &self,
        pair: &JudgePair,
        order: JudgeOrder,
        system: &str,
        user: &str,
    ) -> Result<String>;
}

/// Chat-completions referee.
pub struct HttpJudge {
    client: HttpClient,
    url: String,
    model: String,
    temperature: f64,
}

impl HttpJudge {
    pub fn new(url: &str, model: &str, temperature: f64, retry_budget: u32) -> Self {
        HttpJudge {
            client: HttpClient::new(retry_budget),
            url: url.to_string(),
            model: model.to_string(),
            temperature,
        }
    }

    pub fn with_client(url: &str, model: &str, temperature: f64, client: HttpClient) -> Self {
        HttpJudge { client, url: url.to_string(), model: model.to_string(), temperature }
    }
}

impl JudgeBackend for HttpJudge {
    fn reply(&self, _: &JudgePair, _: JudgeOrder, system: &str, user: &str) -> Result<String> {
        let body = json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        chat_text(&self.client.post_json(&self.url, &body)?)
    }
}

/// Offline referee driven by a script.
pub enum StubJudge {
    /// Every call gets the same reply.
    Fixed(String),
    /// Replies keyed by (question_id, order); missing keys are an error.
    Table(BTreeMap<(String, JudgeOrder), String>),
    /// Deterministic heuristic: the longer rationale wins 8 to 6, equal
    /// lengths tie 5 5.
    LongerWins,
}

impl JudgeBackend for StubJudge {
    fn reply(&self, pair: &JudgePair, order: JudgeOrder, _: &str, _: &str) -> Result<String> {
        match self {
            StubJudge::Fixed(reply) => Ok(reply.clone()),
            StubJudge::Table(table) => table
                .get(&(pair.question_id.clone(), order))
                .cloned()
                .ok_or_else(|| Error::Endpoint {
                    msg: format!("no scripted reply for ({}, {:?})", pair.question_id, order),
                    attempts: 1,
                }),
            StubJudge::LongerWins => {
                let (len1, len2) = match order {
                    JudgeOrder::LowFirst => (pair.rationale_low.len(), pair.rationale_high.len()),
                    JudgeOrder::HighFirst => (pair.rationale_high.len(), pair.rationale_low.len()),
                };
                Ok(match len1.cmp(&len2) {
                    std::cmp::Ordering::Greater => {
                        "8 6 The first rationale explains its steps in more detail.".to_string()
                    }
                    std::cmp::Ordering::Less => {
                        "6 8 The second rationale explains its steps in more detail.".to_string()
                    }
                    std::cmp::Ordering::Equal => "5 5 Both rationales are equally detailed.".to_string(),
                })
            }
        }
    }
}

/// Judges every pair twice, once per position order. Unparseable replies are
/// retried once, then recorded as incomplete. Verdicts come back sorted by
/// (question_id, order).
pub fn judge_pairs(
    pairs: &[JudgePair],
    backend: &dyn JudgeBackend,
    max_in_flight: usize,
) -> Result<(Vec<JudgeVerdict>, Vec<IncompleteJudgement>)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;

    let jobs: Vec<(&JudgePair, JudgeOrder)> = pairs
        .iter()
        .flat_map(|p| [(p, JudgeOrder::LowFirst), (p, JudgeOrder::HighFirst)])
        .collect();

    let results: Vec<std::result::Result<JudgeVerdict, IncompleteJudgement>> =
        pool.install(|| {
            jobs.par_iter()
                .map(|(pair, order)| {
                    let (r1, r2) = match order {
                        JudgeOrder::LowFirst => (&pair.rationale_low, &pair.rationale_high),
                        JudgeOrder::HighFirst => (&pair.rationale_high, &pair.rationale_low),
                    };
                    let (system, user) = render_judge_prompt(&pair.question, r1, r2);
                    let mut last_reason = String::new();
                    for _ in 0..2 {
                        match backend.reply(pair, *order, &system, &user) {
                            Ok(raw) => match parse_verdict(&raw) {
                                Ok((s1, s2, explanation)) => {
                                    return Ok(JudgeVerdict {
                                        question_id: pair.question_id.clone(),
                                        order: *order,
                                        score_position1: s1,
                                        score_position2: s2,
                                        explanation,
                                        raw_reply: raw,
                                    })
                                }
                                Err(e) => last_reason = e.to_string(),
                            },
                            Err(e) => last_reason = e.to_string(),
                        }
                    }
                    Err(IncompleteJudgement {
                        question_id: pair.question_id.clone(),
                        order: *order,
                        reason: last_reason,
                    })
                })
                .collect()
        });

    let mut verdicts = Vec::new();
    let mut incomplete = Vec::new();
    for r in results {
        match r {
            Ok(v) => verdicts.push(v),
            Err(i) => incomplete.push(i),
        }
    }
    verdicts.sort_by(|a, b| (&a.question_id, a.order).cmp(&(&b.question_id, b.order)));
    Ok((verdicts, incomplete))
}

/// Win/tie statistics over all verdicts, per side.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JudgeSummary {
    pub verdicts: usize,
    /// Pairs excluded because fewer than two verdicts arrived.
    pub pairs_excluded: usize,
    pub wins_low: usize,
    pub wins_high: usize,
    pub ties: usize,
    pub win_frequency_low: f64,
    pub win_frequency_high: f64,
    pub mean_score_low: f64,
    pub mean_score_high: f64,
    /// Raw 1-10 scores per side, for external density plots.
    pub scores_low: Vec<u8>,
    pub scores_high: Vec<u8>,
}

/// Aggregates verdicts: per verdict the side with the strictly higher score
/// wins, equal scores are a tie (never split). Win frequency is wins over all
/// included verdicts. Pairs with fewer than two verdicts are excluded and
/// counted.
pub fn aggregate_verdicts(verdicts: &[JudgeVerdict]) -> JudgeSummary {
    let mut by_pair: BTreeMap<&str, Vec<&JudgeVerdict>> = BTreeMap::new();
    for v in verdicts {
        by_pair.entry(&v.question_id).or_default().push(v);
    }
    let mut summary = JudgeSummary::default();
    let mut included: Vec<&JudgeVerdict> = Vec::new();
    for (_, vs) in by_pair {
        if vs.len() < 2 {
            summary.pairs_excluded += 1;
        } else {
            included.extend(vs);
        }
    }
    included.sort_by(|a, b| (&a.question_id, a.order).cmp(&(&b.question_id, b.order)));
    for v in &included {
        let (score_low, score_high) = match v.order {
            JudgeOrder::LowFirst => (v.score_position1, v.score_position2),
            JudgeOrder::HighFirst => (v.score_position2, v.score_position1),
        };
        summary.scores_low.push(score_low);
        summary.scores_high.push(score_high);
        match score_low.cmp(&score_high) {
            std::cmp::Ordering::Greater => summary.wins_low += 1,
            std::cmp::Ordering::Less => summary.wins_high += 1,
            std::cmp::Ordering::Equal => summary.ties += 1,
        }
    }
    summary.verdicts = included.len();
    if summary.verdicts > 0 {
        let n = summary.verdicts as f64;
        summary.win_frequency_low = summary.wins_low as f64 / n;
        summary.win_frequency_high = summary.wins_high as f64 / n;
        summary.mean_score_low =
            summary.scores_low.iter().map(|&s| s as f64).sum::<f64>() / n;
        summary.mean_score_high =
            summary.scores_high.iter().map(|&s| s as f64).sum::<f64>() / n;
    }
    summary
}
