//! Teacher-side rationale generation.
//!
//! Each question is rendered into the fixed step-by-step prompt and sampled M
//! times from a completions endpoint, cycling through the configured
//! temperatures. Completions that never declare an answer trigger a second
//! call that appends the answer marker to the first completion and parses the
//! continuation, so marker-less rationales still get a prediction instead of
//! silently skewing correctness statistics. Results commit in (question order,
//! sample index) order regardless of response arrival, and long runs persist
//! question by question behind a resume cursor.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{
    answers_equal, extract_answer, normalize_answer, parse_answer_tail, Corpus, QuestionInstance,
    Rationale, TaskKind, ANSWER_MARKER,
};
use crate::error::{Error, Result};
use crate::http::{completion_text, HttpClient};
use crate::jsonl::{self, RunHeader};
use crate::seeding::derive_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// Rationales sampled per question (M).
    pub samples_per_question: u32,
    /// Cycled across sample indices.
    pub temperatures: Vec<f64>,
    pub max_tokens: u32,
    /// `stub:` selects the offline generator (`stub:?p=0.9` sets its
    /// correctness rate); anything else is POSTed to as a completions endpoint.
    pub endpoint_url: String,
    pub model_name: String,
    pub max_in_flight: usize,
    pub retry_budget: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            samples_per_question: 8,
            temperatures: vec![0.7, 1.0],
            max_tokens: 512,
            endpoint_url: "stub:".to_string(),
            model_name: "teacher".to_string(),
            max_in_flight: 4,
            retry_budget: 5,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_question < 1 || self.samples_per_question > 64 {
            return Err(Error::InvalidConfig(format!(
                "samples_per_question {} outside 1..=64",
                self.samples_per_question
            )));
        }
        if self.temperatures.is_empty()
            || self.temperatures.iter().any(|t| !t.is_finite() || *t < 0.0)
        {
            return Err(Error::InvalidConfig("temperatures must be finite and >= 0".into()));
        }
        if self.max_tokens == 0 || self.max_in_flight == 0 {
            return Err(Error::InvalidConfig("max_tokens and max_in_flight must be > 0".into()));
        }
        Ok(())
    }

    fn temperature_for(&self, sample_index: u32) -> f64 {
        self.temperatures[(sample_index as usize - 1) % self.temperatures.len()]
    }
}

/// Step-by-step generation prompt for one question. Questions already ending
/// in sentence punctuation are not given a second period.
pub fn render_generation_prompt(question: &str) -> String {
    assert!(!question.is_empty(), "question must be non-empty");
    let separator =
        if question.ends_with(['.', '!', '?']) { " " } else { ". " };
    format!("Q: {question}{separator}A: Let's think step by step.")
}

/// Why the backend is being called.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallStage {
    /// Normal rationale sampling.
    Generate,
    /// Answer-only continuation after a marker-less completion.
    AnswerFallback,
}

/// One backend call with full context, so scripted backends can key replies.
#[derive(Debug)]
pub struct TeacherCall<'a> {
    pub question: &'a QuestionInstance,
    pub sample_index: u32,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub stage: CallStage,
}

pub trait TeacherBackend: Send + Sync {
    fn complete(&self, call: &TeacherCall) -> Result<String>;
}

/// Completions-endpoint teacher.
pub struct HttpTeacher {
    client: HttpClient,
    url: String,
    model: String,
}

impl HttpTeacher {
    pub fn new(url: &str, model: &str, retry_budget: u32) -> Self {
        HttpTeacher {
            client: HttpClient::new(retry_budget),
            url: url.to_string(),
            model: model.to_string(),
        }
    }

    pub fn with_client(url: &str, model: &str, client: HttpClient) -> Self {
        HttpTeacher { client, url: url.to_string(), model: model.to_string() }
    }
}

impl TeacherBackend for HttpTeacher {
    fn complete(&self, call: &TeacherCall) -> Result<String> {
        let body = json!({
            "model": self.model,
            "prompt": call.prompt,
            "temperature": call.temperature,
            "max_tokens": call.max_tokens,
        });
        completion_text(&self.client.post_json(&self.url, &body)?)
    }
}

const STUB_TEMPLATES: [&str; 5] = [
    "Let us work through this carefully. Combining the given quantities step by step points to {answer}. Checking the arithmetic confirms it.",
    "First restate the problem. The key observation reduces everything to a single computation, which gives {answer}.",
    "Breaking the question into parts and solving each one in turn, the parts combine to {answer}. A quick check agrees.",
    "Consider exactly what is being asked. Tracking each quantity through every step leads directly to {answer}.",
    "One approach is to simplify first. After simplification the result is {answer}, which also matches a rough estimate.",
];

/// Offline deterministic teacher. Every completion follows the sampled
/// template, mentions its sampled answer in the body, and ends with the
/// answer marker; the sampled answer equals the gold answer with probability
/// `correct_prob`. Identical (seed, question, sample index) always produce
/// identical text.
pub struct StubTeacher {
    pub seed: u64,
    pub correct_prob: f64,
}

impl StubTeacher {
    pub fn new(seed: u64, correct_prob: f64) -> Self {
        StubTeacher { seed, correct_prob: correct_prob.clamp(0.0, 1.0) }
    }

    fn sampled_answer(&self, question: &QuestionInstance, sample_index: u32) -> (String, usize) {
        let mut rng = derive_rng(
            self.seed,
            &["stub", &question.id, &sample_index.to_string()],
        );
        let correct = rng.gen_bool(self.correct_prob);
        let gold = normalize_answer(&question.gold_answer, question.task_kind)
            .unwrap_or_else(|_| question.gold_answer.clone());
        let answer = if correct {
            gold
        } else {
            wrong_answer(&gold, question.task_kind, &mut rng)
        };
        let template = rng.gen_range(0..STUB_TEMPLATES.len());
        (answer, template)
    }
}

fn wrong_answer(gold: &str, task_kind: TaskKind, rng: &mut impl Rng) -> String {
    match task_kind {
        TaskKind::Numeric => {
            let base: f64 = gold.parse().unwrap_or(0.0);
            let offset = rng.gen_range(1..=9) as f64;
            normalize_answer(&format!("{}", base + offset), TaskKind::Numeric)
                .unwrap_or_else(|_| "0".to_string())
        }
        TaskKind::MultipleChoice => {
            let choices = ["A", "B", "C", "D", "E"];
            let wrong: Vec<&str> = choices.iter().copied().filter(|c| *c != gold).collect();
            wrong[rng.gen_range(0..wrong.len())].to_string()
        }
        TaskKind::Boolean => if gold == "yes" { "no" } else { "yes" }.to_string(),
        TaskKind::FreeText => format!("not {gold}"),
    }
}

/// Deterministic rationale text for (question, sample index, seed).
pub fn stub_generate(question: &QuestionInstance, sample_index: u32, stub: &StubTeacher) -> String {
    let (answer, template) = stub.sampled_answer(question, sample_index);
    let body = STUB_TEMPLATES[template].replace("{answer}", &answer);
    format!("{body} {ANSWER_MARKER} {answer}.")
}

impl TeacherBackend for StubTeacher {
    fn complete(&self, call: &TeacherCall) -> Result<String> {
        match call.stage {
            CallStage::Generate => Ok(stub_generate(call.question, call.sample_index, self)),
            CallStage::AnswerFallback => {
                let (answer, _) = self.sampled_answer(call.question, call.sample_index);
                Ok(format!(" {answer}."))
            }
        }
    }
}

/// Parses a `stub:` URL of the form `stub:` or `stub:?p=0.9`.
fn parse_stub_url(url: &str, seed: u64) -> Result<StubTeacher> {
    let rest = url.trim_start_matches("stub:").trim_start_matches('?');
    let mut correct_prob = 0.75;
    for pair in rest.split('&').filter(|s| !s.is_empty()) {
        match pair.split_once('=') {
            Some(("p", v)) => {
                correct_prob = v
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad stub probability {v:?}")))?;
            }
            _ => return Err(Error::InvalidConfig(format!("unknown stub parameter {pair:?}"))),
        }
    }
    if !(0.0..=1.0).contains(&correct_prob) {
        return Err(Error::InvalidConfig(format!("stub probability {correct_prob} outside [0, 1]")));
    }
    Ok(StubTeacher::new(seed, correct_prob))
}

#[derive(Debug, Serialize, Deserialize)]
struct ResumeCursor {
    questions_done: usize,
    seed: u64,
    samples_per_question: u32,
}

/// Orchestrates generation against a backend.
pub struct Generator {
    config: GenerationConfig,
    backend: Box<dyn TeacherBackend>,
    seed: u64,
}

impl Generator {
    /// Picks the backend from the config's endpoint URL.
    pub fn from_config(config: &GenerationConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backend: Box<dyn TeacherBackend> = if config.endpoint_url.starts_with("stub:") {
            Box::new(parse_stub_url(&config.endpoint_url, seed)?)
        } else {
            Box::new(HttpTeacher::new(&config.endpoint_url, &config.model_name, config.retry_budget))
        };
        Ok(Generator { config: config.clone(), backend, seed })
    }

    /// Injects a custom backend (tests, mock servers).
    pub fn with_backend(
        config: &GenerationConfig,
        backend: Box<dyn TeacherBackend>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Generator { config: config.clone(), backend, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generates all samples for one question, in sample-index order.
    fn generate_question(&self, pool: &rayon::ThreadPool, q: &QuestionInstance) -> Result<Vec<Rationale>> {
        let indices: Vec<u32> = (1..=self.config.samples_per_question).collect();
        let results: Vec<Result<Rationale>> = pool.install(|| {
            indices
                .par_iter()
                .map(|&index| {
                    self.generate_sample(q, index).map_err(|e| Error::Generation {
                        question_id: q.id.clone(),
                        index,
                        source: Box::new(e),
                    })
                })
                .collect()
        });
        results.into_iter().collect()
    }

    fn generate_sample(&self, q: &QuestionInstance, index: u32) -> Result<Rationale> {
        let prompt = render_generation_prompt(&q.question);
        let temperature = self.config.temperature_for(index);
        let completion = self.backend.complete(&TeacherCall {
            question: q,
            sample_index: index,
            prompt: prompt.clone(),
            temperature,
            max_tokens: self.config.max_tokens,
            stage: CallStage::Generate,
        })?;
        let (rationale_text, predicted) =
            self.extract_with_fallback(q, index, &prompt, &completion)?;
        let correct = answers_equal(&predicted, &q.gold_answer, q.task_kind);
        Ok(Rationale {
            question_id: q.id.clone(),
            index,
            rationale_text,
            predicted_answer: predicted,
            raw_completion: completion,
            temperature,
            correct,
        })
    }

    /// Extraction cascade. Unparseable answers become empty predictions (and
    /// count as incorrect) rather than aborting the run.
    fn extract_with_fallback(
        &self,
        q: &QuestionInstance,
        index: u32,
        prompt: &str,
        completion: &str,
    ) -> Result<(String, String)> {
        match extract_answer(completion, q.task_kind) {
            Ok(pair) => Ok(pair),
            Err(Error::MarkerMissing) => {
                let fallback_prompt = format!("{prompt}{completion} {ANSWER_MARKER}");
                let continuation = self.backend.complete(&TeacherCall {
                    question: q,
                    sample_index: index,
                    prompt: fallback_prompt,
                    temperature: 0.0,
                    max_tokens: 32,
                    stage: CallStage::AnswerFallback,
                })?;
                let predicted =
                    parse_answer_tail(&continuation, q.task_kind).unwrap_or_default();
                Ok((completion.trim().to_string(), predicted))
            }
            Err(Error::AnswerUnparseable(_)) => {
                let pos = completion.rfind(ANSWER_MARKER).expect("marker present");
                Ok((completion[..pos].trim().to_string(), String::new()))
            }
            Err(e) => Err(e),
        }
    }

    /// In-memory generation: every question gains exactly M rationales.
    pub fn generate(&self, corpus: &Corpus) -> Result<Corpus> {
        if corpus.questions.is_empty() {
            return Err(Error::InvalidConfig("cannot generate for an empty corpus".into()));
        }
        let pool = self.pool()?;
        let mut out = Corpus::from_questions(corpus.questions.clone())?;
        for q in &corpus.questions {
            let rationales = self.generate_question(&pool, q)?;
            out.attach_rationales(rationales)?;
        }
        Ok(out)
    }

    /// Generation with question-level persistence and resume.
    ///
    /// Completed questions are appended to `<path>.partial` with the cursor
    /// sidecar `<path>.cursor` tracking progress; the final file appears only
    /// via rename once every question is done, so an interrupted run never
    /// leaves a partial file at `path` and rerunning continues where it
    /// stopped.
    pub fn generate_to_file(
        &self,
        corpus: &Corpus,
        path: &Path,
        header: &RunHeader,
    ) -> Result<Corpus> {
        if corpus.questions.is_empty() {
            return Err(Error::InvalidConfig("cannot generate for an empty corpus".into()));
        }
        let partial = sibling(path, ".partial");
        let cursor_path = sibling(path, ".cursor");
        let mut out = Corpus::from_questions(corpus.questions.clone())?;
        let mut done = 0usize;

        if cursor_path.exists() && partial.exists() {
            let text = std::fs::read_to_string(&cursor_path)?;
            let cursor: ResumeCursor = serde_json::from_str(&text).map_err(|e| {
                Error::InvalidConfig(format!("unreadable resume cursor {}: {e}", cursor_path.display()))
            })?;
            if cursor.seed != self.seed
                || cursor.samples_per_question != self.config.samples_per_question
            {
                return Err(Error::InvalidConfig(format!(
                    "resume cursor {} was written with different settings; delete it to restart",
                    cursor_path.display()
                )));
            }
            let (_, previous): (_, Vec<Rationale>) = jsonl::read_jsonl(&partial)?;
            let expected = cursor.questions_done * self.config.samples_per_question as usize;
            if previous.len() != expected {
                return Err(Error::InvalidConfig(format!(
                    "partial file {} holds {} records, cursor expects {expected}; delete both to restart",
                    partial.display(),
                    previous.len()
                )));
            }
            done = cursor.questions_done;
            out.attach_rationales(previous)?;
        } else {
            jsonl::write_atomic(&partial, |outf| jsonl::write_jsonl::<&Rationale, _>(outf, Some(header), []))?;
            write_cursor(&cursor_path, 0, self)?;
        }

        let pool = self.pool()?;
        for q in corpus.questions.iter().skip(done) {
            let rationales = self.generate_question(&pool, q)?;
            append_records(&partial, &rationales)?;
            done += 1;
            write_cursor(&cursor_path, done, self)?;
            out.attach_rationales(rationales)?;
        }

        std::fs::rename(&partial, path)?;
        let _ = std::fs::remove_file(&cursor_path);
        Ok(out)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.max_in_flight.max(1))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
    }
}

fn write_cursor(path: &Path, questions_done: usize, generator: &Generator) -> Result<()> {
    let cursor = ResumeCursor {
        questions_done,
        seed: generator.seed,
        samples_per_question: generator.config.samples_per_question,
    };
    jsonl::write_atomic(path, |out| {
        out.write_all(serde_json::to_string(&cursor).expect("cursor serializes").as_bytes())?;
        Ok(())
    })
}

fn append_records(path: &Path, records: &[Rationale]) -> Result<()> {
    use std::io::Write;
    let mut file = std::fs::OpenOptions::new().append(true).open(path)?;
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::InvalidConfig(format!("serialization failed: {e}")))?;
        writeln!(file, "{line}")?;
    }
    file.flush()?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

/// Convenience wrapper: backend from config, then generate in memory.
pub fn generate_rationales(corpus: &Corpus, config: &GenerationConfig, seed: u64) -> Result<Corpus> {
    Generator::from_config(config, seed)?.generate(corpus)
}
