//! Subcommand orchestration.
//!
//! Each stage reads its input files, runs the corresponding module, and
//! atomically writes its output file with a seed-carrying header line. Exit
//! codes are stable for scripting: 0 success, 1 stage failure, 2 usage errors
//! and missing inputs.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::corpus::{load_questions, load_rationales, Corpus};
use crate::error::{Error, Result};
use crate::jsonl::{self, RunHeader};
use crate::judge::{
    aggregate_verdicts, build_pairs, judge_pairs, HttpJudge, JudgeBackend, JudgeOrder,
    JudgeSummary, JudgeVerdict, StubJudge,
};
use crate::report::{
    build_report, export_sft, selected_records, write_report, write_selected, write_sft,
};
use crate::scorer::{score_corpus, scoring_document, HttpScorer, NgramOracle, ScoreBackend, ScoredRationale};
use crate::selector::{run_selection, SelectionOutcome, StageToggles};
use crate::teacher::Generator;

#[derive(Debug, Parser)]
#[command(name = "morsd", version, about = "Rationale selection pipeline for CoT distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Run seed, recorded in every output file header.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Accuracy threshold in [0, 1].
    #[arg(long, global = true)]
    pub delta: Option<f64>,

    /// N-gram size for diversity selection.
    #[arg(long, global = true)]
    pub ngram: Option<usize>,

    /// Rationales kept by diversity selection (K).
    #[arg(long, global = true)]
    pub keep: Option<usize>,

    /// Rationales kept by difficulty selection (k).
    #[arg(long, global = true)]
    pub top: Option<usize>,

    /// Rationales sampled per question (M).
    #[arg(long, global = true)]
    pub samples: Option<u32>,

    /// Use the built-in offline scorer.
    #[arg(long, global = true, value_parser = ["ngram"])]
    pub oracle: Option<String>,

    #[arg(long = "teacher-url", global = true, value_name = "URL")]
    pub teacher_url: Option<String>,

    #[arg(long = "student-url", global = true, value_name = "URL")]
    pub student_url: Option<String>,

    #[arg(long = "judge-url", global = true, value_name = "URL")]
    pub judge_url: Option<String>,

    /// Skip accuracy selection.
    #[arg(long = "no-accuracy", global = true)]
    pub no_accuracy: bool,

    /// Skip diversity selection.
    #[arg(long = "no-diversity", global = true)]
    pub no_diversity: bool,

    /// Skip difficulty selection.
    #[arg(long = "no-difficulty", global = true)]
    pub no_difficulty: bool,

    /// Labeling strategy for selected/exported records.
    #[arg(long, global = true, value_parser = ["gold", "predict", "positive_only"])]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Sample rationales from the teacher endpoint.
    Generate,
    /// Compute perplexities and difficulty ratios.
    Score,
    /// Apply accuracy, diversity, and difficulty selection.
    Select,
    /// Compare lowest- vs highest-difficulty rationales with a referee.
    Judge,
    /// Write report.json and the fine-tuning export.
    Report,
    /// All stages in order.
    Run,
}

impl Command {
    fn stage_name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Score => "score",
            Command::Select => "select",
            Command::Judge => "judge",
            Command::Report => "report",
            Command::Run => "run",
        }
    }
}

impl Cli {
    /// Config file + flag overrides, validated.
    pub fn effective_config(&self) -> Result<RunConfig> {
        let mut config = RunConfig::load(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            config.set_seed(seed);
        }
        if let Some(delta) = self.delta {
            config.selection.delta = delta;
        }
        if let Some(n) = self.ngram {
            config.selection.ngram_n = n;
        }
        if let Some(k) = self.keep {
            config.selection.diversity_keep = k;
        }
        if let Some(k) = self.top {
            config.selection.difficulty_keep = k;
        }
        if let Some(m) = self.samples {
            config.generation.samples_per_question = m;
        }
        if self.oracle.is_some() {
            config.scorer.endpoint_url = "oracle:ngram".to_string();
        }
        if let Some(url) = &self.teacher_url {
            config.generation.endpoint_url = url.clone();
        }
        if let Some(url) = &self.student_url {
            config.scorer.endpoint_url = url.clone();
        }
        if let Some(url) = &self.judge_url {
            config.judge.endpoint_url = url.clone();
        }
        if let Some(label) = &self.label {
            config.export.label_strategy = label.parse()?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn toggles(&self) -> StageToggles {
        StageToggles {
            accuracy: !self.no_accuracy,
            diversity: !self.no_diversity,
            difficulty: !self.no_difficulty,
        }
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let command = cli.command;
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("morsd: stage={} error: {e}", command.stage_name());
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let config = cli.effective_config()?;
    let toggles = cli.toggles();
    match cli.command {
        Command::Generate => cmd_generate(&config).map(|_| ()),
        Command::Score => cmd_score(&config).map(|_| ()),
        Command::Select => cmd_select(&config, toggles).map(|_| ()),
        Command::Judge => cmd_judge(&config).map(|_| ()),
        Command::Report => cmd_report(&config, toggles),
        Command::Run => {
            cmd_generate(&config)?;
            cmd_score(&config)?;
            cmd_select(&config, toggles)?;
            cmd_judge(&config)?;
            cmd_report(&config, toggles)
        }
    }
}

fn header(config: &RunConfig, stage: &str) -> RunHeader {
    RunHeader::new(stage, config.seed())
}

pub fn cmd_generate(config: &RunConfig) -> Result<Corpus> {
    let questions = load_questions(&config.paths.questions)?;
    let generator = Generator::from_config(&config.generation, config.seed())?;
    let corpus =
        generator.generate_to_file(&questions, &config.paths.rationales, &header(config, "generate"))?;
    println!(
        "generate: {} rationales for {} questions -> {}",
        corpus.rationale_count(),
        corpus.questions.len(),
        config.paths.rationales.display()
    );
    Ok(corpus)
}

fn scorer_backend(config: &RunConfig, corpus: &Corpus) -> Result<Box<dyn ScoreBackend>> {
    if config.scorer.endpoint_url.starts_with("oracle:") {
        let docs: Vec<String> = match &config.scorer.oracle_train_file {
            Some(path) => std::fs::read_to_string(path)
                .map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => Error::MissingInput(path.clone()),
                    _ => Error::Io(e),
                })?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string)
                .collect(),
            None => corpus
                .iter_rationales()
                .map(|(q, r)| scoring_document(&q.question, &r.rationale_text, &r.predicted_answer))
                .collect(),
        };
        if docs.is_empty() {
            return Err(Error::InvalidConfig("oracle has no training documents".into()));
        }
        Ok(Box::new(NgramOracle::train(
            &docs,
            config.scorer.oracle_order,
            config.scorer.oracle_alpha,
        )))
    } else {
        Ok(Box::new(HttpScorer::new(
            &config.scorer.endpoint_url,
            &config.scorer.model_name,
            config.scorer.retry_budget,
        )))
    }
}

pub fn cmd_score(config: &RunConfig) -> Result<Vec<ScoredRationale>> {
    let questions = load_questions(&config.paths.questions)?;
    let corpus = load_rationales(&questions, &config.paths.rationales)?;
    let backend = scorer_backend(config, &corpus)?;
    let (scored, stats) = score_corpus(backend.as_ref(), &corpus, config.scorer.max_in_flight)?;
    jsonl::write_jsonl_atomic(&config.paths.scored, Some(&header(config, "score")), &scored)?;
    println!(
        "score: {} records ({} failures) -> {}",
        scored.len(),
        stats.failed,
        config.paths.scored.display()
    );
    Ok(scored)
}

fn load_scored(config: &RunConfig) -> Result<(Corpus, Vec<ScoredRationale>)> {
    let questions = load_questions(&config.paths.questions)?;
    let (_, scored): (_, Vec<ScoredRationale>) = jsonl::read_jsonl(&config.paths.scored)?;
    Ok((questions, scored))
}

pub fn cmd_select(config: &RunConfig, toggles: StageToggles) -> Result<SelectionOutcome> {
    let (corpus, scored) = load_scored(config)?;
    let outcome = run_selection(&scored, &corpus, &config.selection, toggles)?;
    let records =
        selected_records(&outcome.selected, &corpus, config.export.label_strategy)?;
    write_selected(&records, &config.paths.selected, Some(&header(config, "select")))?;
    println!(
        "select: {} -> {} -> {} -> {} rationales ({} questions emptied) -> {}",
        scored.len(),
        outcome.stats.per_question.iter().map(|s| s.after_accuracy).sum::<usize>(),
        outcome.stats.per_question.iter().map(|s| s.after_diversity).sum::<usize>(),
        outcome.selected.total(),
        outcome.stats.emptied_questions.len(),
        config.paths.selected.display()
    );
    Ok(outcome)
}

fn judge_backend(config: &RunConfig) -> Result<Box<dyn JudgeBackend>> {
    if config.judge.endpoint_url.starts_with("stub:") {
        if let Some(path) = &config.judge.replies_file {
            #[derive(serde::Deserialize)]
            struct Scripted {
                question_id: String,
                order: JudgeOrder,
                reply: String,
            }
            let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingInput(path.clone()),
                _ => Error::Io(e),
            })?;
            let rows: Vec<Scripted> = serde_json::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
            let table: BTreeMap<(String, JudgeOrder), String> =
                rows.into_iter().map(|r| ((r.question_id, r.order), r.reply)).collect();
            Ok(Box::new(StubJudge::Table(table)))
        } else {
            Ok(Box::new(StubJudge::LongerWins))
        }
    } else {
        Ok(Box::new(HttpJudge::new(
            &config.judge.endpoint_url,
            &config.judge.model_name,
            config.judge.temperature,
            config.judge.retry_budget,
        )))
    }
}

pub fn cmd_judge(config: &RunConfig) -> Result<Vec<JudgeVerdict>> {
    let (corpus, scored) = load_scored(config)?;
    let pairs = build_pairs(&scored, &corpus);
    let backend = judge_backend(config)?;
    let (verdicts, incomplete) =
        judge_pairs(&pairs, backend.as_ref(), config.judge.max_in_flight)?;
    jsonl::write_jsonl_atomic(&config.paths.verdicts, Some(&header(config, "judge")), &verdicts)?;
    println!(
        "judge: {} pairs, {} verdicts, {} incomplete -> {}",
        pairs.len(),
        verdicts.len(),
        incomplete.len(),
        config.paths.verdicts.display()
    );
    Ok(verdicts)
}

pub fn cmd_report(config: &RunConfig, toggles: StageToggles) -> Result<()> {
    let (corpus, scored) = load_scored(config)?;
    // Selection is deterministic given (config, seed), so the report rebuilds
    // it instead of needing a stats sidecar from the select stage.
    let outcome = run_selection(&scored, &corpus, &config.selection, toggles)?;
    let judge_summary: Option<JudgeSummary> = if config.paths.verdicts.exists() {
        let (_, verdicts): (_, Vec<JudgeVerdict>) = jsonl::read_jsonl(&config.paths.verdicts)?;
        Some(aggregate_verdicts(&verdicts))
    } else {
        None
    };
    let report = build_report(
        &corpus,
        &scored,
        &outcome,
        judge_summary,
        &config.selection,
        toggles,
        0,
    );
    write_report(&report, &config.paths.report)?;
    let (records, stats) = export_sft(&outcome.selected, &corpus, &config.export)?;
    write_sft(&records, &config.paths.sft, Some(&header(config, "report")))?;
    println!(
        "report: {} selected, avg-acc {:.3} (delta {:.2}, {}) -> {}; {} sft records ({} dropped) -> {}",
        outcome.selected.total(),
        report.accuracy_check.global_avg_acc,
        report.accuracy_check.delta,
        if report.accuracy_check.satisfied { "ok" } else { "below" },
        config.paths.report.display(),
        stats.records,
        stats.dropped_incorrect,
        config.paths.sft.display()
    );
    Ok(())
}
