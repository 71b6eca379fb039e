//! Question/rationale data model, JSONL ingestion, and answer handling.
//!
//! Teacher completions follow the template `... {rationale} Therefore, the
//! answer is {answer}`. Extraction splits on the *last* occurrence of the
//! marker (completions sometimes restate it mid-rationale); the tail is parsed
//! according to the task kind. Answers are compared through a canonical form so
//! that e.g. `342` and `342.0` count as the same numeric answer.

use std::collections::BTreeMap;
use std::path::Path;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl::{self, RunHeader};

/// The literal answer declaration the generation template asks the teacher for.
pub const ANSWER_MARKER: &str = "Therefore, the answer is";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Numeric,
    MultipleChoice,
    Boolean,
    FreeText,
}

/// One question/gold-answer pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionInstance {
    pub id: String,
    pub question: String,
    #[serde(rename = "answer")]
    pub gold_answer: String,
    #[serde(rename = "task")]
    pub task_kind: TaskKind,
}

/// One teacher completion for a question, with the extracted answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rationale {
    pub question_id: String,
    /// 1-based sample index, unique per question.
    pub index: u32,
    #[serde(rename = "rationale")]
    pub rationale_text: String,
    pub predicted_answer: String,
    pub raw_completion: String,
    pub temperature: f64,
    pub correct: bool,
}

/// Questions in file order plus rationales keyed by question id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub questions: Vec<QuestionInstance>,
    pub rationales: BTreeMap<String, Vec<Rationale>>,
}

impl Corpus {
    pub fn from_questions(questions: Vec<QuestionInstance>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for q in &questions {
            if !seen.insert(q.id.clone()) {
                return Err(Error::DuplicateId(q.id.clone()));
            }
            if q.question.is_empty() || q.gold_answer.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "question {:?} has an empty question or answer field",
                    q.id
                )));
            }
            if q.task_kind == TaskKind::MultipleChoice
                && normalize_answer(&q.gold_answer, TaskKind::MultipleChoice).is_err()
            {
                return Err(Error::InvalidConfig(format!(
                    "question {:?}: multiple-choice answer {:?} has no letter",
                    q.id, q.gold_answer
                )));
            }
        }
        Ok(Corpus { questions, rationales: BTreeMap::new() })
    }

    pub fn question(&self, id: &str) -> Option<&QuestionInstance> {
        self.questions.iter().find(|q| q.id == id)
    }

    pub fn rationales_for(&self, id: &str) -> &[Rationale] {
        self.rationales.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn rationale_count(&self) -> usize {
        self.rationales.values().map(Vec::len).sum()
    }

    /// Attaches rationales, validating that each references a known question
    /// and that sample indices stay unique per question.
    pub fn attach_rationales(&mut self, rationales: Vec<Rationale>) -> Result<()> {
        for r in rationales {
            if self.question(&r.question_id).is_none() {
                return Err(Error::UnknownQuestion(r.question_id));
            }
            self.rationales.entry(r.question_id.clone()).or_default().push(r);
        }
        for (qid, list) in &mut self.rationales {
            list.sort_by_key(|r| r.index);
            if list.windows(2).any(|w| w[0].index == w[1].index) {
                return Err(Error::InvalidConfig(format!(
                    "question {qid:?} has duplicate rationale indices"
                )));
            }
        }
        Ok(())
    }

    /// All rationales in deterministic (question order, sample index) order.
    pub fn iter_rationales(&self) -> impl Iterator<Item = (&QuestionInstance, &Rationale)> {
        self.questions
            .iter()
            .flat_map(move |q| self.rationales_for(&q.id).iter().map(move |r| (q, r)))
    }
}

/// Loads `questions.jsonl` (fields `id`, `question`, `answer`, `task`).
pub fn load_questions(path: &Path) -> Result<Corpus> {
    let (_, questions): (_, Vec<QuestionInstance>) = jsonl::read_jsonl(path)?;
    Corpus::from_questions(questions)
}

/// Writes one record per rationale in (question order, sample index) order.
pub fn save_rationales(corpus: &Corpus, path: &Path, header: Option<&RunHeader>) -> Result<()> {
    let records: Vec<&Rationale> = corpus.iter_rationales().map(|(_, r)| r).collect();
    jsonl::write_atomic(path, |out| jsonl::write_jsonl(out, header, records))
}

/// Loads rationales from `path` onto a question-only corpus.
pub fn load_rationales(questions: &Corpus, path: &Path) -> Result<Corpus> {
    let (_, records): (_, Vec<Rationale>) = jsonl::read_jsonl(path)?;
    let mut corpus = Corpus {
        questions: questions.questions.clone(),
        rationales: BTreeMap::new(),
    };
    corpus.attach_rationales(records)?;
    Ok(corpus)
}

/// Splits a raw completion into rationale text and a normalized answer.
///
/// Returns [`Error::MarkerMissing`] when the marker never occurs, in which case
/// the caller may fall back to a second-stage extraction call (see the teacher
/// module), and [`Error::AnswerUnparseable`] when the tail has no answer of the
/// expected shape.
pub fn extract_answer(raw_completion: &str, task_kind: TaskKind) -> Result<(String, String)> {
    let pos = raw_completion.rfind(ANSWER_MARKER).ok_or(Error::MarkerMissing)?;
    let rationale = raw_completion[..pos].trim().to_string();
    let tail = &raw_completion[pos + ANSWER_MARKER.len()..];
    let answer = parse_answer_tail(tail, task_kind)?;
    Ok((rationale, answer))
}

/// Parses an answer from free-running text after the marker and normalizes it.
pub fn parse_answer_tail(tail: &str, task_kind: TaskKind) -> Result<String> {
    normalize_answer(tail, task_kind)
}

static NUMBER_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"-?\d+(?:,\d{3})*(?:\.\d+)?").expect("static regex"));

/// Canonical rendering per task kind; idempotent on its own output.
///
/// numeric: first number in the text, rendered without a trailing `.0`.
/// multiple_choice: first standalone letter (`(E)`, `E)`, `E`, `e` all give `E`).
/// boolean: first yes/no token, lowercased.
/// free_text: lowercased, whitespace collapsed, terminal punctuation stripped.
pub fn normalize_answer(text: &str, task_kind: TaskKind) -> Result<String> {
    match task_kind {
        TaskKind::Numeric => {
            let m = NUMBER_RE
                .find(text)
                .ok_or_else(|| Error::AnswerUnparseable(text.to_string()))?;
            let cleaned = m.as_str().replace(',', "");
            let value: f64 = cleaned
                .parse()
                .map_err(|_| Error::AnswerUnparseable(text.to_string()))?;
            Ok(render_number(value))
        }
        TaskKind::MultipleChoice => text
            .split_whitespace()
            .filter_map(|tok| {
                let stripped = tok.trim_matches(|c: char| !c.is_ascii_alphanumeric());
                let mut chars = stripped.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) if c.is_ascii_alphabetic() => {
                        Some(c.to_ascii_uppercase().to_string())
                    }
                    _ => None,
                }
            })
            .next()
            .ok_or_else(|| Error::AnswerUnparseable(text.to_string())),
        TaskKind::Boolean => text
            .split_whitespace()
            .filter_map(|tok| {
                let stripped = tok.trim_matches(|c: char| !c.is_ascii_alphanumeric());
                if stripped.eq_ignore_ascii_case("yes") {
                    Some("yes".to_string())
                } else if stripped.eq_ignore_ascii_case("no") {
                    Some("no".to_string())
                } else {
                    None
                }
            })
            .next()
            .ok_or_else(|| Error::AnswerUnparseable(text.to_string())),
        TaskKind::FreeText => {
            let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
            let trimmed = collapsed.trim_end_matches(|c: char| c.is_ascii_punctuation());
            Ok(trimmed.to_lowercase())
        }
    }
}

fn render_number(value: f64) -> String {
    // Integral values print without a fractional part; 2^53 bounds exact i64 conversion.
    if value.fract() == 0.0 && value.abs() < 9.0e15 {
        format!("{}", value as i64)
    } else {
        format!("{value}")
    }
}

/// Equality through canonical forms. Numeric compares parsed values with
/// absolute tolerance 1e-9; anything unparseable compares unequal rather than
/// erroring, so bad predictions count as incorrect.
pub fn answers_equal(a: &str, b: &str, task_kind: TaskKind) -> bool {
    match task_kind {
        TaskKind::Numeric => {
            let parse = |s: &str| -> Option<f64> {
                let m = NUMBER_RE.find(s)?;
                m.as_str().replace(',', "").parse().ok()
            };
            match (parse(a), parse(b)) {
                (Some(x), Some(y)) => (x - y).abs() <= 1e-9,
                _ => false,
            }
        }
        _ => match (normalize_answer(a, task_kind), normalize_answer(b, task_kind)) {
            (Ok(x), Ok(y)) => x == y,
            _ => false,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn question(id: &str) -> QuestionInstance {
        QuestionInstance {
            id: id.to_string(),
            question: "1+1?".to_string(),
            gold_answer: "2".to_string(),
            task_kind: TaskKind::Numeric,
        }
    }

    fn rationale(qid: &str, index: u32) -> Rationale {
        Rationale {
            question_id: qid.to_string(),
            index,
            rationale_text: format!("step {index}"),
            predicted_answer: "2".to_string(),
            raw_completion: format!("step {index} {ANSWER_MARKER} 2"),
            temperature: 0.7,
            correct: true,
        }
    }

    #[test]
    fn load_questions_single_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"q1\",\"question\":\"1+1?\",\"answer\":\"2\",\"task\":\"numeric\"}\n",
        )
        .unwrap();
        let corpus = load_questions(&path).unwrap();
        assert_eq!(corpus.questions.len(), 1);
        assert_eq!(corpus.questions[0].gold_answer, "2");
        assert!(corpus.rationales.is_empty());
    }

    #[test]
    fn load_questions_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.jsonl");
        std::fs::write(&path, "").unwrap();
        let corpus = load_questions(&path).unwrap();
        assert!(corpus.questions.is_empty());
    }

    #[test]
    fn load_questions_duplicate_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.jsonl");
        let line = "{\"id\":\"q1\",\"question\":\"1+1?\",\"answer\":\"2\",\"task\":\"numeric\"}\n";
        std::fs::write(&path, format!("{line}{line}")).unwrap();
        match load_questions(&path).unwrap_err() {
            Error::DuplicateId(id) => assert_eq!(id, "q1"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn extract_marker_missing() {
        let raw = "760-418=342 Therefore, Sally has 342 quarters left in her bank.";
        match extract_answer(raw, TaskKind::Numeric).unwrap_err() {
            Error::MarkerMissing => {}
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn extract_choice_with_date_tail() {
        let raw = "10 days ago from May 30, 2021 would be May 20, 2021. \
                   Therefore, the answer is (E) 05/20/2021.";
        let (rationale, answer) = extract_answer(raw, TaskKind::MultipleChoice).unwrap();
        assert_eq!(answer, "E");
        assert!(rationale.ends_with("May 20, 2021."));
    }

    #[test]
    fn extract_marker_at_start() {
        let (rationale, answer) =
            extract_answer("Therefore, the answer is 26", TaskKind::Numeric).unwrap();
        assert_eq!(rationale, "");
        assert_eq!(answer, "26");
    }

    #[test]
    fn extract_uses_last_marker() {
        let raw = format!("{ANSWER_MARKER} unclear. More steps. {ANSWER_MARKER} 5");
        let (rationale, answer) = extract_answer(&raw, TaskKind::Numeric).unwrap();
        assert_eq!(answer, "5");
        assert!(rationale.contains("More steps."));
        assert!(rationale.starts_with(ANSWER_MARKER));
    }

    #[test]
    fn extract_unparseable_tail() {
        let raw = format!("reasoning {ANSWER_MARKER} unclear");
        match extract_answer(&raw, TaskKind::Numeric).unwrap_err() {
            Error::AnswerUnparseable(_) => {}
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_answer("342.0", TaskKind::Numeric).unwrap(), "342");
        assert_eq!(normalize_answer("(e)", TaskKind::MultipleChoice).unwrap(), "E");
        assert_eq!(normalize_answer("Yes.", TaskKind::Boolean).unwrap(), "yes");
        assert_eq!(normalize_answer("3.50", TaskKind::Numeric).unwrap(), "3.5");
        assert_eq!(normalize_answer("1,234", TaskKind::Numeric).unwrap(), "1234");
        assert_eq!(
            normalize_answer("  The  Eiffel Tower. ", TaskKind::FreeText).unwrap(),
            "the eiffel tower"
        );
    }

    #[test]
    fn equality_examples() {
        assert!(answers_equal("342", "342.0", TaskKind::Numeric));
        assert!(answers_equal("E", "(E) 05/20/2021", TaskKind::MultipleChoice));
        assert!(!answers_equal("26", "27", TaskKind::Numeric));
        assert!(!answers_equal("26", "garbage", TaskKind::Numeric));
        assert!(answers_equal("Yes", "yes.", TaskKind::Boolean));
    }

    #[test]
    fn rationale_roundtrip() {
        let mut corpus = Corpus::from_questions(vec![question("q1"), question("q2")]).unwrap();
        corpus
            .attach_rationales(vec![rationale("q1", 1), rationale("q1", 2), rationale("q2", 1)])
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        save_rationales(&corpus, &path, None).unwrap();
        let questions = Corpus::from_questions(corpus.questions.clone()).unwrap();
        let reloaded = load_rationales(&questions, &path).unwrap();
        assert_eq!(reloaded, corpus);
    }

    #[test]
    fn rationale_newlines_stay_on_one_line() {
        let mut corpus = Corpus::from_questions(vec![question("q1")]).unwrap();
        let mut r = rationale("q1", 1);
        r.rationale_text = "line one\nline two".to_string();
        corpus.attach_rationales(vec![r]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        save_rationales(&corpus, &path, None).unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        assert_eq!(content.lines().count(), 1);
        let reloaded = load_rationales(
            &Corpus::from_questions(corpus.questions.clone()).unwrap(),
            &path,
        )
        .unwrap();
        assert_eq!(reloaded, corpus);
    }

    #[test]
    fn missing_field_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let good = serde_json::to_string(&rationale("q1", 1)).unwrap();
        let bad = "{\"question_id\":\"q1\",\"index\":2}";
        std::fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        let questions = Corpus::from_questions(vec![question("q1")]).unwrap();
        match load_rationales(&questions, &path).unwrap_err() {
            Error::MalformedLine { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("rationale"), "message should name the field: {msg}");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn rationale_for_unknown_question_rejected() {
        let mut corpus = Corpus::from_questions(vec![question("q1")]).unwrap();
        match corpus.attach_rationales(vec![rationale("ghost", 1)]).unwrap_err() {
            Error::UnknownQuestion(id) => assert_eq!(id, "ghost"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn duplicate_rationale_index_rejected() {
        let mut corpus = Corpus::from_questions(vec![question("q1")]).unwrap();
        let err = corpus
            .attach_rationales(vec![rationale("q1", 2), rationale("q1", 2)])
            .unwrap_err();
        assert!(err.to_string().contains("duplicate rationale indices"), "{err}");
    }

    #[test]
    fn letterless_choice_answer_rejected() {
        let q = QuestionInstance {
            id: "q1".into(),
            question: "pick one".into(),
            gold_answer: "1234".into(),
            task_kind: TaskKind::MultipleChoice,
        };
        assert!(Corpus::from_questions(vec![q]).is_err());
    }
}
