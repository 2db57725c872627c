//! Knowledge-base model: articles, sections, chunks, plus the line-delimited
//! JSON readers for the KB and query files.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::providers::{Embedder, Embedding};

/// An image attached to an article or a query: either a pre-computed vector
/// in provider space or an opaque reference resolved by a provider.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageInput {
    Vector(Vec<f64>),
    Reference(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Article {
    pub id: String,
    pub title: String,
    pub abstract_text: String,
    pub image: Option<ImageInput>,
    pub sections: Vec<Section>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub article_id: String,
    pub section_index: usize,
    pub article_title: String,
    pub section_title: String,
    pub passage: String,
    pub image: Option<ImageInput>,
}

impl Section {
    pub fn key(&self) -> SectionKey {
        SectionKey {
            article_id: self.article_id.clone(),
            section_index: self.section_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SectionKey {
    pub article_id: String,
    pub section_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub article_id: String,
    pub section_index: usize,
    pub chunk_index: usize,
    /// Half-open span over the section's token sequence.
    pub token_span: (usize, usize),
    pub text: String,
    pub article_title: String,
    pub section_title: String,
}

/// Pluggable text tokenizer used for chunk lengths.
pub trait Tokenizer: Send + Sync {
    fn name(&self) -> &str;
    fn tokenize(&self, text: &str) -> Vec<String>;
    fn detokenize(&self, tokens: &[String]) -> String;
}

/// Splits on Unicode whitespace and joins with a single space, so
/// `detokenize(tokenize(x)) == x` whenever `x` is whitespace-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn name(&self) -> &str {
        "whitespace"
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_owned).collect()
    }

    fn detokenize(&self, tokens: &[String]) -> String {
        tokens.join(" ")
    }
}

/// Balanced split of `n` tokens into `ceil(n / max_len)` spans whose sizes
/// differ by at most one. Larger spans come first.
pub fn balanced_spans(n: usize, max_len: usize) -> Result<Vec<(usize, usize)>> {
    if max_len < 1 {
        return Err(Error::invalid("chunk_len", "must be >= 1"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let parts = n.div_ceil(max_len);
    let base = n / parts;
    let extra = n % parts;
    let mut spans = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        spans.push((start, start + len));
        start += len;
    }
    debug_assert_eq!(start, n);
    Ok(spans)
}

pub fn chunk_section(section: &Section, max_len: usize, tok: &dyn Tokenizer) -> Result<Vec<Chunk>> {
    if max_len < 1 {
        return Err(Error::invalid("chunk_len", "must be >= 1"));
    }
    let tokens = tok.tokenize(&section.passage);
    if tokens.is_empty() {
        return Err(Error::Empty(format!(
            "section {} of article `{}` has no tokens",
            section.section_index, section.article_id
        )));
    }
    let spans = balanced_spans(tokens.len(), max_len)?;
    Ok(spans
        .into_iter()
        .enumerate()
        .map(|(chunk_index, (start, end))| Chunk {
            article_id: section.article_id.clone(),
            section_index: section.section_index,
            chunk_index,
            token_span: (start, end),
            text: tok.detokenize(&tokens[start..end]),
            article_title: section.article_title.clone(),
            section_title: section.section_title.clone(),
        })
        .collect())
}

pub fn render_chunk(chunk: &Chunk) -> String {
    format!(
        "# Wiki Article: {}\n## Section Title: {}\n{}",
        chunk.article_title, chunk.section_title, chunk.text
    )
}

/// Ingested articles with id lookup and their image embeddings resolved
/// through a provider.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    articles: Vec<Article>,
    by_id: HashMap<String, usize>,
    images: Vec<Option<Embedding>>,
}

impl KnowledgeBase {
    pub fn new(articles: Vec<Article>, embedder: &dyn Embedder) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(articles.len());
        for (i, a) in articles.iter().enumerate() {
            if by_id.insert(a.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(a.id.clone()));
            }
        }
        let images = articles
            .iter()
            .map(|a| {
                a.image
                    .as_ref()
                    .map(|img| embedder.embed_image(img))
                    .transpose()
                    .map_err(|e| e.context(format!("embedding image of `{}`", a.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(KnowledgeBase {
            articles,
            by_id,
            images,
        })
    }

    pub fn articles(&self) -> &[Article] {
        &self.articles
    }

    pub fn get(&self, id: &str) -> Option<&Article> {
        self.by_id.get(id).map(|&i| &self.articles[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Unit-norm image vector of the article, if it has an image.
    pub fn qff_image(&self, id: &str) -> Option<&[f64]> {
        self.by_id
            .get(id)
            .and_then(|&i| self.images[i].as_ref())
            .map(Embedding::as_slice)
    }

    pub fn section(&self, key: &SectionKey) -> Option<&Section> {
        self.get(&key.article_id)
            .and_then(|a| a.sections.get(key.section_index))
    }
}

// ---------------------------------------------------------------------------
// KB file

#[derive(Debug, Serialize, Deserialize)]
struct KbRecord {
    id: String,
    title: String,
    #[serde(rename = "abstract", default)]
    abstract_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_vec: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_path: Option<String>,
    #[serde(default)]
    sections: Vec<KbSection>,
}

#[derive(Debug, Serialize, Deserialize)]
struct KbSection {
    #[serde(default)]
    title: String,
    #[serde(default)]
    text: String,
}

fn image_from_fields(
    vec: Option<Vec<f64>>,
    path: Option<String>,
    line: usize,
) -> Result<Option<ImageInput>> {
    match (vec, path) {
        (Some(_), Some(_)) => Err(Error::Parse {
            line,
            message: "both image_vec and image_path given".into(),
        }),
        (Some(v), None) => {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Parse {
                    line,
                    message: "image_vec has non-finite entries".into(),
                });
            }
            Ok(Some(ImageInput::Vector(v)))
        }
        (None, Some(p)) => Ok(Some(ImageInput::Reference(p))),
        (None, None) => Ok(None),
    }
}

fn image_to_fields(image: &Option<ImageInput>) -> (Option<Vec<f64>>, Option<String>) {
    match image {
        Some(ImageInput::Vector(v)) => (Some(v.clone()), None),
        Some(ImageInput::Reference(r)) => (None, Some(r.clone())),
        None => (None, None),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedKb {
    pub articles: Vec<Article>,
    /// Sections dropped because their passage was empty or whitespace.
    pub dropped_sections: usize,
}

/// Reads a line-delimited JSON knowledge base. Blank lines are skipped.
pub fn parse_kb<R: BufRead>(reader: R) -> Result<ParsedKb> {
    let mut articles = Vec::new();
    let mut seen = HashSet::new();
    let mut dropped_sections = 0;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: KbRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if record.title.trim().is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("article `{}` has an empty title", record.id),
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        let image = image_from_fields(record.image_vec, record.image_path, line_no)?;
        let mut sections = Vec::with_capacity(record.sections.len());
        for s in record.sections {
            if s.text.trim().is_empty() {
                dropped_sections += 1;
                log::warn!(
                    "line {line_no}: dropping empty section `{}` of article `{}`",
                    s.title,
                    record.id
                );
                continue;
            }
            sections.push(Section {
                article_id: record.id.clone(),
                section_index: sections.len(),
                article_title: record.title.clone(),
                section_title: s.title,
                passage: s.text,
                image: image.clone(),
            });
        }
        if sections.is_empty() && record.abstract_text.trim().is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("article `{}` has neither sections nor abstract", record.id),
            });
        }
        articles.push(Article {
            id: record.id,
            title: record.title,
            abstract_text: record.abstract_text,
            image,
            sections,
        });
    }
    if dropped_sections > 0 {
        log::warn!("dropped {dropped_sections} empty section(s)");
    }
    Ok(ParsedKb {
        articles,
        dropped_sections,
    })
}

fn article_record(a: &Article) -> KbRecord {
    let (image_vec, image_path) = image_to_fields(&a.image);
    KbRecord {
        id: a.id.clone(),
        title: a.title.clone(),
        abstract_text: a.abstract_text.clone(),
        image_vec,
        image_path,
        sections: a
            .sections
            .iter()
            .map(|s| KbSection {
                title: s.section_title.clone(),
                text: s.passage.clone(),
            })
            .collect(),
    }
}

pub fn write_kb<W: Write>(articles: &[Article], mut out: W) -> Result<()> {
    for a in articles {
        serde_json::to_writer(&mut out, &article_record(a))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// SHA-256 over the canonical serialization of the corpus.
pub fn corpus_hash(articles: &[Article]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for a in articles {
        // serializing plain structs to a Vec cannot fail
        let bytes = serde_json::to_vec(&article_record(a)).expect("serialize article");
        hasher.update(&bytes);
        hasher.update(b"\n");
    }
    hasher.finalize().into()
}

// ---------------------------------------------------------------------------
// Query file

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub qid: String,
    pub question: String,
    pub image: Option<ImageInput>,
    pub answers: Vec<String>,
    pub numeric_answer: Option<f64>,
    pub evidence_article_id: Option<String>,
    pub evidence_section_index: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QueryRecord {
    qid: String,
    question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_vec: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_path: Option<String>,
    #[serde(default)]
    answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    numeric_answer: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    evidence_article_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    evidence_section_index: Option<usize>,
}

/// One line of a query file. Malformed lines are kept so batch runs can
/// report them in place.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryLine {
    Ok(Query),
    Malformed {
        line: usize,
        qid: Option<String>,
        message: String,
    },
}

pub fn parse_query_line(text: &str, line: usize) -> QueryLine {
    let record: QueryRecord = match serde_json::from_str(text) {
        Ok(r) => r,
        Err(e) => {
            let qid = serde_json::from_str::<serde_json::Value>(text)
                .ok()
                .and_then(|v| v.get("qid").and_then(|q| q.as_str()).map(str::to_owned));
            return QueryLine::Malformed {
                line,
                qid,
                message: e.to_string(),
            };
        }
    };
    match image_from_fields(record.image_vec, record.image_path, line) {
        Ok(image) => QueryLine::Ok(Query {
            qid: record.qid,
            question: record.question,
            image,
            answers: record.answers,
            numeric_answer: record.numeric_answer,
            evidence_article_id: record.evidence_article_id,
            evidence_section_index: record.evidence_section_index,
        }),
        Err(e) => QueryLine::Malformed {
            line,
            qid: Some(record.qid),
            message: e.to_string(),
        },
    }
}

/// Parses every non-blank line; malformed lines become [`QueryLine::Malformed`].
pub fn parse_queries<R: BufRead>(reader: R) -> Result<Vec<QueryLine>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_query_line(&line, i + 1));
    }
    Ok(out)
}

/// Strict variant: the first malformed line is an error.
pub fn parse_queries_strict<R: BufRead>(reader: R) -> Result<Vec<Query>> {
    parse_queries(reader)?
        .into_iter()
        .map(|q| match q {
            QueryLine::Ok(q) => Ok(q),
            QueryLine::Malformed { line, message, .. } => Err(Error::Parse { line, message }),
        })
        .collect()
}

pub fn write_queries<W: Write>(queries: &[Query], mut out: W) -> Result<()> {
    for q in queries {
        let (image_vec, image_path) = image_to_fields(&q.image);
        let record = QueryRecord {
            qid: q.qid.clone(),
            question: q.question.clone(),
            image_vec,
            image_path,
            answers: q.answers.clone(),
            numeric_answer: q.numeric_answer,
            evidence_article_id: q.evidence_article_id.clone(),
            evidence_section_index: q.evidence_section_index,
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
