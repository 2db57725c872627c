//! Deterministic planted-evidence corpora.
//!
//! Every section carries one fact sentence `"<Answer> is the <k1> <k2> <k3>"`
//! whose keyword triple occurs nowhere else in the corpus, so a question
//! naming the keywords has exactly one evidence section. Everything else is
//! filler drawn from a shared pool of pseudo-words.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Article, ImageInput, Query, Section};
use crate::providers::toy_hash_embed;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const SECTION_TITLES: [&str; 6] = ["History", "Geography", "Economy", "Culture", "Legacy", "Design"];
pub const QUESTION_WORD: &str = "Which";

/// How the articles relate to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Unrelated abstracts.
    Distinct,
    /// Consecutive pairs share all abstract text but their titles, so
    /// abstract retrieval can barely tell twins apart.
    Twins,
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub layout: Layout,
    pub articles: usize,
    pub sections: usize,
    /// Filler tokens per passage besides the fact sentence.
    pub passage_filler: usize,
    pub abstract_len: usize,
    pub filler_pool: usize,
    /// Draw keywords from a pool of this many words (each triple still
    /// unique); `None` gives every keyword its own fresh word.
    pub keyword_pool: Option<usize>,
    /// Attach an image vector (the abstract's toy embedding) to each article.
    pub article_images: bool,
    pub provider_dim: usize,
    pub provider_seed: u64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            layout: Layout::Distinct,
            articles: 20,
            sections: 3,
            passage_filler: 30,
            abstract_len: 12,
            filler_pool: 300,
            keyword_pool: None,
            article_images: true,
            provider_dim: 64,
            provider_seed: 0,
            seed: 0,
        }
    }
}

/// The planted fact of one section.
#[derive(Debug, Clone, PartialEq)]
pub struct Fact {
    pub article_id: String,
    pub section_index: usize,
    pub keywords: [String; 3],
    pub answer: String,
}

impl Fact {
    pub fn question(&self) -> String {
        format!("{QUESTION_WORD} {} {} {}?", self.keywords[0], self.keywords[1], self.keywords[2])
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub articles: Vec<Article>,
    /// `facts[a][s]` is the fact of section `s` of article `a`.
    pub facts: Vec<Vec<Fact>>,
}

struct Words {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Words {
    fn fresh(&mut self, syllables: usize) -> String {
        loop {
            let mut w = String::with_capacity(syllables * 2);
            for _ in 0..syllables {
                w.push(CONSONANTS[self.rng.gen_range(0..CONSONANTS.len())] as char);
                w.push(VOWELS[self.rng.gen_range(0..VOWELS.len())] as char);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

impl SynthCorpus {
    pub fn generate(spec: SynthSpec) -> Self {
        let mut words = Words {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            used: ["is", "the", "which"].iter().map(|s| s.to_string()).collect(),
        };
        let pool: Vec<String> = (0..spec.filler_pool).map(|_| words.fresh(2)).collect();
        let keyword_pool: Vec<String> = (0..spec.keyword_pool.unwrap_or(0)).map(|_| words.fresh(3)).collect();
        let mut triples: HashSet<Vec<String>> = HashSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
        let filler = |n: usize, rng: &mut ChaCha8Rng| -> Vec<String> {
            (0..n).map(|_| pool.choose(rng).expect("non-empty pool").clone()).collect()
        };

        let mut articles = Vec::with_capacity(spec.articles);
        let mut facts = Vec::with_capacity(spec.articles);
        let mut shared_abstract = Vec::new();
        for a in 0..spec.articles {
            let id = format!("art{a:03}");
            let title = capitalize(&words.fresh(3));
            let body = match spec.layout {
                Layout::Twins if a % 2 == 1 => shared_abstract.clone(),
                _ => {
                    shared_abstract = filler(spec.abstract_len, &mut rng);
                    shared_abstract.clone()
                }
            };
            let abstract_text = format!("{title} {}", body.join(" "));

            let mut sections = Vec::with_capacity(spec.sections);
            let mut article_facts = Vec::with_capacity(spec.sections);
            for s in 0..spec.sections {
                let keywords = if keyword_pool.len() >= 3 {
                    loop {
                        let pick: Vec<String> = keyword_pool.choose_multiple(&mut rng, 3).cloned().collect();
                        let mut key = pick.clone();
                        key.sort();
                        if triples.insert(key) {
                            break [pick[0].clone(), pick[1].clone(), pick[2].clone()];
                        }
                    }
                } else {
                    [words.fresh(3), words.fresh(3), words.fresh(3)]
                };
                let answer = format!("{} {}", capitalize(&words.fresh(2)), capitalize(&words.fresh(3)));
                let mut passage = filler(spec.passage_filler, &mut rng);
                let at = rng.gen_range(0..=passage.len());
                let sentence = format!("{answer} is the {} {} {}", keywords[0], keywords[1], keywords[2]);
                passage.insert(at, sentence);
                sections.push(Section {
                    article_id: id.clone(),
                    section_index: s,
                    article_title: title.clone(),
                    section_title: SECTION_TITLES[s % SECTION_TITLES.len()].to_owned(),
                    passage: passage.join(" "),
                    image: None,
                });
                article_facts.push(Fact {
                    article_id: id.clone(),
                    section_index: s,
                    keywords,
                    answer,
                });
            }
            let image = spec.article_images.then(|| {
                ImageInput::Vector(toy_hash_embed(&abstract_text, spec.provider_dim, spec.provider_seed).into_vec())
            });
            for s in &mut sections {
                s.image = image.clone();
            }
            articles.push(Article {
                id,
                title,
                abstract_text,
                image,
                sections,
            });
            facts.push(article_facts);
        }
        SynthCorpus { spec, articles, facts }
    }

    /// Index of the twin of article `a` (itself under [`Layout::Distinct`]).
    pub fn twin(&self, a: usize) -> usize {
        match self.spec.layout {
            Layout::Twins if a % 2 == 0 && a + 1 < self.articles.len() => a + 1,
            Layout::Twins if a % 2 == 1 => a - 1,
            _ => a,
        }
    }

    /// Toy-provider embedding of article `a`'s abstract, usable as a query image.
    pub fn abstract_image(&self, a: usize) -> Vec<f64> {
        toy_hash_embed(
            &self.articles[a].abstract_text,
            self.spec.provider_dim,
            self.spec.provider_seed,
        )
        .into_vec()
    }

    /// A query asking for the fact of section `s` of article `a`, with the
    /// given image vector.
    pub fn query(&self, qid: impl Into<String>, a: usize, s: usize, image: Vec<f64>) -> Query {
        let fact = &self.facts[a][s];
        Query {
            qid: qid.into(),
            question: fact.question(),
            image: Some(ImageInput::Vector(image)),
            answers: vec![fact.answer.clone()],
            numeric_answer: None,
            evidence_article_id: Some(fact.article_id.clone()),
            evidence_section_index: Some(s),
        }
    }
}

/// Adds uniform noise of amplitude `noise` to every component.
pub fn jitter(v: &[f64], noise: f64, rng: &mut impl Rng) -> Vec<f64> {
    v.iter().map(|x| x + noise * rng.gen_range(-1.0..=1.0)).collect()
}
