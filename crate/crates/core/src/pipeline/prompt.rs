//! Generator prompt templates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cda::ScoredChunk;
use crate::corpus::render_chunk;
use crate::error::{Error, Result};

pub const CONTEXT_MARKER: &str = "- Context: ";
pub const QUESTION_MARKER: &str = "- Question: ";

const SHARED_INSTRUCTION: &str = "Answer the encyclopedic question about the given image. \
Don't mention the visual content of image in your output. \
Directly output the answer of the question according to the context.";

const FALLBACK: &str = "If the context does not contain the information required to answer the question, \
you should answer the question using internal model knowledge.";

const DOLOMITES: &str = "The Dolomites, also known as the Dolomite Mountains, Dolomite Alps or Dolomitic Alps, \
are a mountain range located in northeastern Italy. The Dolomites are located in the regions of Veneto, \
Trentino-Alto Adige/Südtirol and Friuli Venezia Giulia, covering an area shared between the provinces of \
Belluno, Vicenza, Verona, Trentino, South Tyrol, Udine and Pordenone.";

const SHORT_ANSWER: &str = "Just answer the questions, no explanations needed. Short answer is:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    Evqa,
    Infoseek,
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "evqa" => Ok(Template::Evqa),
            "infoseek" => Ok(Template::Infoseek),
            other => Err(Error::UnknownTemplate(other.to_owned())),
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Template::Evqa => "evqa",
            Template::Infoseek => "infoseek",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

impl Prompt {
    /// System part, a blank line, then the user part.
    pub fn render(&self) -> String {
        format!("{}\n\n{}", self.system, self.user)
    }
}

fn system_text(template: Template) -> String {
    match template {
        Template::Evqa => format!(
            "{SHARED_INSTRUCTION}\nYou are a helpful assistant for answering encyclopedic questions.\n{FALLBACK}"
        ),
        Template::Infoseek => format!(
            "{SHARED_INSTRUCTION}\n\
             You are a helpful assistant for answering encyclopedic questions. Do not answer anything else.\n\
             If you need to answer questions about numbers or time, please output the corresponding numerical \
             format directly. {FALLBACK}\n\
             There is an example:\n\
             {CONTEXT_MARKER}# Wiki Article: Dolomites\n## Section Title: Dolomites\n{DOLOMITES}\n\
             {QUESTION_MARKER}Which city or region does this mountain locate in?\n\
             {SHORT_ANSWER} Province of Belluno"
        ),
    }
}

fn closing_line(template: Template) -> &'static str {
    match template {
        Template::Evqa => "The answer is:",
        Template::Infoseek => SHORT_ANSWER,
    }
}

/// Rendered chunks joined by a blank line, in the given order.
pub fn context_block(chunks: &[ScoredChunk]) -> String {
    chunks
        .iter()
        .map(|c| render_chunk(&c.chunk))
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn build_prompt(question: &str, chunks: &[ScoredChunk], template: Template) -> Prompt {
    Prompt {
        system: system_text(template),
        user: format!(
            "{CONTEXT_MARKER}{}\n{QUESTION_MARKER}{question}\n{}",
            context_block(chunks),
            closing_line(template)
        ),
    }
}
