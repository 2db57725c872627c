//! End-to-end orchestration: retrieve, filter, select chunks, prompt and
//! generate, with a full per-query trace.

pub mod prompt;

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cda::{score_chunks, select_articles, select_chunks, ScoredChunk};
use crate::config::PipelineConfig;
use crate::corpus::{KnowledgeBase, Query, QueryLine, Tokenizer, WhitespaceTokenizer};
use crate::error::{Error, Result};
use crate::providers::Providers;
use crate::qff::{rerank_articles, QffParams};
use crate::retrieval::{RetrievalIndex, ScoredArticle};

pub use prompt::{build_prompt, Prompt, Template};

/// Everything a query needs, shared read-only across workers.
pub struct Engine {
    pub kb: KnowledgeBase,
    pub index: RetrievalIndex,
    pub params: QffParams,
    pub providers: Providers,
    pub tokenizer: Box<dyn Tokenizer>,
}

impl Engine {
    pub fn new(kb: KnowledgeBase, index: RetrievalIndex, params: QffParams, providers: Providers) -> Self {
        Engine {
            kb,
            index,
            params,
            providers,
            tokenizer: Box::new(WhitespaceTokenizer),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Retrieval, filtering and chunk selection only.
    FilterOnly,
    Full,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub retrieve: f64,
    pub qff: f64,
    pub cda: f64,
    pub generate: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub qid: String,
    pub question: String,
    pub retrieved: Vec<ScoredArticle>,
    pub filtered: Vec<ScoredArticle>,
    pub retained: Vec<ScoredArticle>,
    pub d: usize,
    pub selected: Vec<ScoredChunk>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    pub timings_ms: StageTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub qid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    pub error: StageError,
}

/// One line of a batch output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OutputLine {
    Summary { summary: Box<Summary> },
    Error(ErrorRecord),
    Answer(Box<AnswerRecord>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub answered: usize,
    pub errors: usize,
    pub mean_timings_ms: StageTimings,
    pub config: PipelineConfig,
}

fn stage<T>(name: &str, r: Result<T>) -> std::result::Result<T, StageError> {
    r.map_err(|e| StageError {
        stage: name.to_owned(),
        message: e.to_string(),
    })
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs one query through the pipeline. Failures carry the stage name.
pub fn answer(
    query: &Query,
    engine: &Engine,
    config: &PipelineConfig,
    mode: Mode,
) -> std::result::Result<AnswerRecord, StageError> {
    let start = Instant::now();
    let mut timings = StageTimings::default();
    let sel = config.selection();
    stage("config", sel.validate())?;

    let t = Instant::now();
    let image = stage(
        "retrieve",
        query
            .image
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("query `{}`", query.qid), "has no image")),
    )?;
    let query_vec = stage("retrieve", engine.providers.embedder.embed_image(image))?;
    let retrieved = stage("retrieve", engine.index.retrieve_topk(&query_vec, config.k))?;
    timings.retrieve = ms_since(t);

    let t = Instant::now();
    let filtered = stage(
        "qff",
        rerank_articles(
            retrieved.clone(),
            &engine.kb,
            &engine.params,
            &query.question,
            Some(query_vec.as_slice()),
            sel.u,
            config.alpha,
        ),
    )?;
    timings.qff = ms_since(t);

    let t = Instant::now();
    let retained = stage("cda", select_articles(&filtered, sel.u, sel.theta))?;
    let with_sections: Vec<ScoredArticle> = retained
        .iter()
        .filter(|a| !a.section_scores.is_empty())
        .cloned()
        .collect();
    let scored = if with_sections.is_empty() {
        Vec::new()
    } else {
        stage(
            "cda",
            score_chunks(
                &with_sections,
                &engine.kb,
                &query.question,
                engine.providers.reranker.as_ref(),
                sel.lambda,
                sel.chunk_len,
                engine.tokenizer.as_ref(),
            ),
        )?
    };
    let selected = select_chunks(&scored, with_sections.len(), sel.k1, sel.k2);
    timings.cda = ms_since(t);

    let (prompt, answer) = match mode {
        Mode::FilterOnly => (None, None),
        Mode::Full => {
            let t = Instant::now();
            let prompt = build_prompt(&query.question, &selected, config.template).render();
            let answer = stage(
                "generate",
                engine.providers.generator.generate(&prompt, query.image.as_ref()),
            )?;
            timings.generate = ms_since(t);
            (Some(prompt), Some(answer))
        }
    };
    timings.total = ms_since(start);

    Ok(AnswerRecord {
        qid: query.qid.clone(),
        question: query.question.clone(),
        retrieved,
        filtered,
        d: retained.len(),
        retained,
        selected,
        prompt,
        answer,
        timings_ms: timings,
    })
}

fn process_line(line: &QueryLine, engine: &Engine, config: &PipelineConfig, mode: Mode) -> OutputLine {
    match line {
        QueryLine::Ok(q) => match answer(q, engine, config, mode) {
            Ok(r) => OutputLine::Answer(Box::new(r)),
            Err(error) => {
                log::warn!("query `{}` failed in {}: {}", q.qid, error.stage, error.message);
                OutputLine::Error(ErrorRecord {
                    qid: Some(q.qid.clone()),
                    line: None,
                    error,
                })
            }
        },
        QueryLine::Malformed { line, qid, message } => OutputLine::Error(ErrorRecord {
            qid: qid.clone(),
            line: Some(*line),
            error: StageError {
                stage: "parse".into(),
                message: message.clone(),
            },
        }),
    }
}

/// Answers every query (up to `config.workers` at a time) and writes one
/// line per query in input order, then the summary line.
pub fn run_batch<W: Write>(
    lines: &[QueryLine],
    engine: &Engine,
    config: &PipelineConfig,
    mode: Mode,
    mut out: W,
) -> Result<Summary> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::invalid("workers", e.to_string()))?;
    let results: Vec<OutputLine> = pool.install(|| {
        lines
            .par_iter()
            .map(|l| process_line(l, engine, config, mode))
            .collect()
    });

    let mut sums = StageTimings::default();
    let mut answered = 0;
    for r in &results {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
        if let OutputLine::Answer(a) = r {
            answered += 1;
            let t = &a.timings_ms;
            sums.retrieve += t.retrieve;
            sums.qff += t.qff;
            sums.cda += t.cda;
            sums.generate += t.generate;
            sums.total += t.total;
        }
    }
    let n = answered.max(1) as f64;
    let summary = Summary {
        count: lines.len(),
        answered,
        errors: lines.len() - answered,
        mean_timings_ms: StageTimings {
            retrieve: sums.retrieve / n,
            qff: sums.qff / n,
            cda: sums.cda / n,
            generate: sums.generate / n,
            total: sums.total / n,
        },
        config: config.clone(),
    };
    serde_json::to_writer(
        &mut out,
        &OutputLine::Summary {
            summary: Box::new(summary.clone()),
        },
    )?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(summary)
}

/// Reads a batch output file back, skipping the summary line.
pub fn read_output<R: std::io::BufRead>(reader: R) -> Result<Vec<OutputLine>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: OutputLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !matches!(parsed, OutputLine::Summary { .. }) {
            out.push(parsed);
        }
    }
    Ok(out)
}
