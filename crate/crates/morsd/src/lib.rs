//! Rationale selection for chain-of-thought distillation.
//!
//! Teacher-generated step-by-step rationales are scored by how much they
//! lower a student model's perplexity on the gold answer, filtered for
//! accuracy, textual diversity, and low difficulty, optionally spot-checked
//! by a referee model, and exported as a small supervised fine-tuning
//! dataset. Every stage is deterministic given one seed and runs fully
//! offline against the stub teacher and the n-gram oracle.
//!
//! See the guide under `book/` for a walkthrough; its code samples are
//! compiled as doctests. The short version:
//!
//! ```
//! use morsd::corpus::{Corpus, QuestionInstance, TaskKind};
//! use morsd::scorer::{score_corpus, scoring_document, NgramOracle};
//! use morsd::selector::{run_selection, SelectionConfig, StageToggles};
//! use morsd::teacher::{generate_rationales, GenerationConfig};
//!
//! let corpus = Corpus::from_questions(vec![QuestionInstance {
//!     id: "q1".into(),
//!     question: "What is 2 plus 5?".into(),
//!     gold_answer: "7".into(),
//!     task_kind: TaskKind::Numeric,
//! }])?;
//!
//! let config = GenerationConfig { endpoint_url: "stub:?p=0.9".into(), ..Default::default() };
//! let generated = generate_rationales(&corpus, &config, 42)?;
//!
//! let docs: Vec<String> = generated
//!     .iter_rationales()
//!     .map(|(q, r)| scoring_document(&q.question, &r.rationale_text, &r.predicted_answer))
//!     .collect();
//! let oracle = NgramOracle::train(&docs, 3, 0.1);
//! let (scored, _) = score_corpus(&oracle, &generated, 4)?;
//!
//! let outcome =
//!     run_selection(&scored, &corpus, &SelectionConfig::default(), StageToggles::default())?;
//! assert!(outcome.selected.total() <= 3);
//! # Ok::<(), morsd::Error>(())
//! ```

pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod http;
pub mod judge;
pub mod jsonl;
pub mod report;
pub mod scorer;
pub mod seeding;
pub mod selector;
pub mod teacher;

pub use error::{Error, Result};

// The guide's chapters double as doctests, keeping every snippet in book/
// compiling against the current API (mdbook itself does not run them).
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/judging.md")]
    mod judging {}
    #[doc = include_str!("../../../book/src/statistics.md")]
    mod statistics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
