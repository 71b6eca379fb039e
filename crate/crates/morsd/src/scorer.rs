//! Perplexity and rationale-difficulty scoring.
//!
//! A rationale's difficulty is the ratio of two answer perplexities under the
//! student model: conditioned on the question plus the rationale, over
//! conditioned on the question alone. A ratio below 1 means the rationale made
//! the gold answer easier to produce. The student is reached through the
//! [`ScoreBackend`] trait: either a remote completions endpoint that echoes
//! per-token logprobs, or the built-in add-alpha smoothed n-gram oracle for
//! fully offline, deterministic runs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{Corpus, QuestionInstance, Rationale};
use crate::error::{Error, Result};
use crate::http::HttpClient;

/// A single likelihood measurement: how probable is `target_text` after
/// `conditioning_text`. Only target tokens enter the perplexity sum.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRequest {
    pub conditioning_text: String,
    pub target_text: String,
}

/// A rationale plus its two perplexities and their ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRationale {
    #[serde(flatten)]
    pub rationale: Rationale,
    pub ppl_with: f64,
    pub ppl_base: f64,
    pub rd: f64,
}

/// Source of per-target-token log-probabilities.
pub trait ScoreBackend: Send + Sync {
    /// Log-probabilities for each token of the target, in order.
    fn target_logprobs(&self, request: &ScoreRequest) -> Result<Vec<f64>>;
}

/// Conditioning text without a rationale: `Q: {q}\nA:`.
pub fn base_conditioning(question: &str) -> String {
    format!("Q: {question}\nA:")
}

/// Conditioning text with a rationale. An empty rationale yields exactly the
/// base conditioning so that its difficulty is 1 by construction.
pub fn rationale_conditioning(question: &str, rationale: &str) -> String {
    if rationale.is_empty() {
        base_conditioning(question)
    } else {
        format!("Q: {question}\n{rationale}\nA:")
    }
}

/// Target text for an answer: a leading space, then the answer.
pub fn answer_target(answer: &str) -> String {
    format!(" {answer}")
}

/// Full scoring-format document; also used to self-train the offline oracle.
pub fn scoring_document(question: &str, rationale: &str, answer: &str) -> String {
    format!("{}{}", rationale_conditioning(question, rationale), answer_target(answer))
}

/// exp(-mean(logprobs)), computed in log space.
///
/// The mean uses Neumaier-compensated summation with an exact division
/// remainder so that a target of identical per-token probabilities yields
/// exactly `1/p` regardless of length (a plain running sum drifts by a few
/// ulps and breaks that identity).
fn log_mean(values: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    let n = values.len() as f64;
    let q = sum / n;
    let remainder = (-q).mul_add(n, sum);
    q + (remainder + comp) / n
}

/// Perplexity of the request's target under the backend.
pub fn perplexity(backend: &dyn ScoreBackend, request: &ScoreRequest) -> Result<f64> {
    let logprobs = backend.target_logprobs(request)?;
    if logprobs.is_empty() {
        return Err(Error::EmptyTarget);
    }
    for (position, lp) in logprobs.iter().enumerate() {
        if !lp.is_finite() {
            return Err(Error::ZeroProbability { position });
        }
    }
    let ppl = (-log_mean(&logprobs)).exp();
    if !(ppl.is_finite() && ppl > 0.0) {
        return Err(Error::ZeroProbability { position: 0 });
    }
    Ok(ppl)
}

/// Both perplexities and their ratio for one rationale.
///
/// Returns `(ppl_with, ppl_base, rd)`. When the rationale is empty the two
/// conditionings are byte-identical, so the base measurement is reused and
/// the ratio is exactly 1.
pub fn rationale_difficulty(
    backend: &dyn ScoreBackend,
    question: &str,
    rationale_text: &str,
    answer: &str,
) -> Result<(f64, f64, f64)> {
    let target = answer_target(answer);
    let base = ScoreRequest {
        conditioning_text: base_conditioning(question),
        target_text: target.clone(),
    };
    let ppl_base = perplexity(backend, &base)?;
    let with_conditioning = rationale_conditioning(question, rationale_text);
    let ppl_with = if with_conditioning == base.conditioning_text {
        ppl_base
    } else {
        perplexity(backend, &ScoreRequest { conditioning_text: with_conditioning, target_text: target })?
    };
    Ok((ppl_with, ppl_base, ppl_with / ppl_base))
}

/// Per-run scoring accounting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub total: usize,
    pub failed: usize,
    /// (question_id, sample index) of records dropped because scoring failed.
    pub failed_records: Vec<(String, u32)>,
}

/// Scores every rationale in the corpus.
///
/// The base perplexity is computed once per question and reused across its
/// rationales. Individual failures drop the record and are counted; more than
/// 10% failures aborts the run. Output order is (question order, sample
/// index) regardless of scheduling.
pub fn score_corpus(
    backend: &dyn ScoreBackend,
    corpus: &Corpus,
    max_in_flight: usize,
) -> Result<(Vec<ScoredRationale>, ScoreStats)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;

    let questions: Vec<&QuestionInstance> = corpus
        .questions
        .iter()
        .filter(|q| !corpus.rationales_for(&q.id).is_empty())
        .collect();

    let base_ppls: Vec<Result<f64>> = pool.install(|| {
        use rayon::prelude::*;
        questions
            .par_iter()
            .map(|q| {
                perplexity(
                    backend,
                    &ScoreRequest {
                        conditioning_text: base_conditioning(&q.question),
                        target_text: answer_target(&q.gold_answer),
                    },
                )
            })
            .collect()
    });

    let jobs: Vec<(usize, &QuestionInstance, &Rationale)> = questions
        .iter()
        .enumerate()
        .flat_map(|(qi, q)| corpus.rationales_for(&q.id).iter().map(move |r| (qi, *q, r)))
        .collect();

    let results: Vec<Result<ScoredRationale>> = pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|(qi, q, r)| {
                let ppl_base = match &base_ppls[*qi] {
                    Ok(p) => *p,
                    Err(e) => {
                        return Err(Error::Generation {
                            question_id: q.id.clone(),
                            index: r.index,
                            source: Box::new(Error::Endpoint {
                                msg: format!("base perplexity failed: {e}"),
                                attempts: 1,
                            }),
                        })
                    }
                };
                let conditioning = rationale_conditioning(&q.question, &r.rationale_text);
                let ppl_with = if conditioning == base_conditioning(&q.question) {
                    ppl_base
                } else {
                    perplexity(
                        backend,
                        &ScoreRequest {
                            conditioning_text: conditioning,
                            target_text: answer_target(&q.gold_answer),
                        },
                    )?
                };
                let rd = ppl_with / ppl_base;
                if !(rd.is_finite() && rd > 0.0) {
                    return Err(Error::ZeroProbability { position: 0 });
                }
                Ok(ScoredRationale { rationale: (*r).clone(), ppl_with, ppl_base, rd })
            })
            .collect()
    });

    let mut scored = Vec::with_capacity(results.len());
    let mut stats = ScoreStats { total: results.len(), ..Default::default() };
    for ((_, q, r), result) in jobs.iter().zip(results) {
        match result {
            Ok(s) => scored.push(s),
            Err(_) => {
                stats.failed += 1;
                stats.failed_records.push((q.id.clone(), r.index));
            }
        }
    }
    if stats.total > 0 && stats.failed * 10 > stats.total {
        return Err(Error::TooManyScoreFailures { failed: stats.failed, total: stats.total });
    }
    Ok((scored, stats))
}

// ---------------------------------------------------------------------------
// N-gram oracle
// ---------------------------------------------------------------------------

const EOT: u32 = 0; // end-of-text sentinel, in the vocabulary for order >= 2 events
const BOS: u32 = 1; // begin padding, never predicted, not in the vocabulary
const OOV: u32 = u32::MAX;
const FIRST_TOKEN_ID: u32 = 2;

#[derive(Debug, Clone, Default)]
struct ContextCounts {
    total: u64,
    next: HashMap<u32, u64>,
}

/// Word-level add-alpha smoothed n-gram language model.
///
/// Tokens are lowercased whitespace words. Each training document is counted
/// as context -> next-token transitions with begin-of-text padding; at order 2
/// and above an end-of-text sentinel closes each document so every context's
/// successor mass is complete. Every conditional distribution is strictly
/// positive and sums to one over the vocabulary.
#[derive(Debug, Clone)]
pub struct NgramOracle {
    order: usize,
    alpha: f64,
    token_ids: HashMap<String, u32>,
    vocab_size: usize,
    contexts: HashMap<Vec<u32>, ContextCounts>,
}

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

impl NgramOracle {
    /// Trains on a document collection. `order >= 1`, `alpha > 0`.
    pub fn train<I, S>(texts: I, order: usize, alpha: f64) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        assert!(order >= 1, "order must be at least 1");
        assert!(alpha > 0.0, "alpha must be positive");
        let mut oracle = NgramOracle {
            order,
            alpha,
            token_ids: HashMap::new(),
            vocab_size: 0,
            contexts: HashMap::new(),
        };
        for text in texts {
            let ids: Vec<u32> = tokenize(text.as_ref())
                .into_iter()
                .map(|tok| oracle.intern(tok))
                .collect();
            if ids.is_empty() {
                continue;
            }
            for (i, &tok) in ids.iter().enumerate() {
                let ctx = context_window(&ids, i, order);
                oracle.count(ctx, tok);
            }
            if order >= 2 {
                let ctx = context_window(&ids, ids.len(), order);
                oracle.count(ctx, EOT);
            }
        }
        // Vocabulary over which distributions normalize: real tokens + EOT.
        oracle.vocab_size = oracle.token_ids.len() + 1;
        oracle
    }

    /// An oracle with no counts over exactly the given vocabulary: every token
    /// (including out-of-vocabulary ones) gets probability `1/|V|`.
    pub fn uniform(vocab: &[&str], order: usize, alpha: f64) -> Self {
        assert!(order >= 1, "order must be at least 1");
        assert!(alpha > 0.0, "alpha must be positive");
        assert!(!vocab.is_empty(), "vocabulary must be non-empty");
        let mut oracle = NgramOracle {
            order,
            alpha,
            token_ids: HashMap::new(),
            vocab_size: 0,
            contexts: HashMap::new(),
        };
        for word in vocab {
            oracle.intern(word.to_lowercase());
        }
        oracle.vocab_size = oracle.token_ids.len();
        oracle
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Smoothed probability of `next` after `context` (last `order - 1` words
    /// are used; shorter contexts are begin-padded). Words are lowercased.
    pub fn conditional_prob(&self, context: &[&str], next: &str) -> f64 {
        let ctx_ids: Vec<u32> = context.iter().map(|w| self.lookup(&w.to_lowercase())).collect();
        let start = ctx_ids.len().saturating_sub(self.order - 1);
        let mut window: Vec<u32> = vec![BOS; (self.order - 1).saturating_sub(ctx_ids.len())];
        window.extend_from_slice(&ctx_ids[start..]);
        self.prob(&window, self.lookup(&next.to_lowercase()))
    }

    fn intern(&mut self, token: String) -> u32 {
        let next_id = FIRST_TOKEN_ID + self.token_ids.len() as u32;
        *self.token_ids.entry(token).or_insert(next_id)
    }

    fn lookup(&self, token: &str) -> u32 {
        self.token_ids.get(token).copied().unwrap_or(OOV)
    }

    fn count(&mut self, ctx: Vec<u32>, tok: u32) {
        let entry = self.contexts.entry(ctx).or_default();
        entry.total += 1;
        *entry.next.entry(tok).or_insert(0) += 1;
    }

    fn prob(&self, ctx: &[u32], tok: u32) -> f64 {
        let (count, total) = match self.contexts.get(ctx) {
            Some(c) => (c.next.get(&tok).copied().unwrap_or(0), c.total),
            None => (0, 0),
        };
        (count as f64 + self.alpha) / (total as f64 + self.alpha * self.vocab_size as f64)
    }
}

/// Context of the token at `pos` in `ids`: the preceding `order - 1` tokens,
/// begin-padded at the document start.
fn context_window(ids: &[u32], pos: usize, order: usize) -> Vec<u32> {
    let len = order - 1;
    let start = pos.saturating_sub(len);
    let mut ctx = vec![BOS; len - (pos - start)];
    ctx.extend_from_slice(&ids[start..pos]);
    ctx
}

impl ScoreBackend for NgramOracle {
    fn target_logprobs(&self, request: &ScoreRequest) -> Result<Vec<f64>> {
        let cond: Vec<u32> =
            tokenize(&request.conditioning_text).iter().map(|t| self.lookup(t)).collect();
        let target: Vec<u32> =
            tokenize(&request.target_text).iter().map(|t| self.lookup(t)).collect();
        if target.is_empty() {
            return Err(Error::EmptyTarget);
        }
        let mut seq = cond;
        let offset = seq.len();
        seq.extend_from_slice(&target);
        Ok((offset..seq.len())
            .map(|pos| {
                let ctx = context_window(&seq, pos, self.order);
                self.prob(&ctx, seq[pos]).ln()
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Remote backend
// ---------------------------------------------------------------------------

/// Completions endpoint scorer using echo + logprobs.
///
/// The full text (conditioning + target) is echoed back with per-token
/// logprobs and byte offsets; only tokens starting at or after the
/// conditioning length contribute, matching the normalization over target
/// length.
pub struct HttpScorer {
    client: HttpClient,
    url: String,
    model: String,
}

impl HttpScorer {
    pub fn new(url: &str, model: &str, retry_budget: u32) -> Self {
        HttpScorer {
            client: HttpClient::new(retry_budget),
            url: url.to_string(),
            model: model.to_string(),
        }
    }

    pub fn with_client(url: &str, model: &str, client: HttpClient) -> Self {
        HttpScorer { client, url: url.to_string(), model: model.to_string() }
    }
}

impl ScoreBackend for HttpScorer {
    fn target_logprobs(&self, request: &ScoreRequest) -> Result<Vec<f64>> {
        let prompt = format!("{}{}", request.conditioning_text, request.target_text);
        let body = json!({
            "model": self.model,
            "prompt": prompt,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
        });
        let response = self.client.post_json(&self.url, &body)?;
        let lp = &response["choices"][0]["logprobs"];
        let token_logprobs = lp["token_logprobs"].as_array().ok_or_else(|| Error::Endpoint {
            msg: "response missing logprobs.token_logprobs".to_string(),
            attempts: 1,
        })?;
        let offsets = lp["text_offset"].as_array().ok_or_else(|| Error::Endpoint {
            msg: "response missing logprobs.text_offset".to_string(),
            attempts: 1,
        })?;
        if token_logprobs.len() != offsets.len() {
            return Err(Error::Endpoint {
                msg: "logprobs arrays disagree in length".to_string(),
                attempts: 1,
            });
        }
        let boundary = request.conditioning_text.len() as u64;
        let mut out = Vec::new();
        for (pos, (lp, off)) in token_logprobs.iter().zip(offsets).enumerate() {
            if off.as_u64().unwrap_or(0) >= boundary {
                match lp.as_f64() {
                    Some(v) => out.push(v),
                    None => return Err(Error::ZeroProbability { position: pos }),
                }
            }
        }
        Ok(out)
    }
}
