//! Coarse retrieval: exact cosine search of the query image vector against
//! article abstract vectors.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::corpus::{corpus_hash, Article};
use crate::error::{Error, Result};
use crate::providers::{Embedder, Embedding};

const INDEX_MAGIC: &[u8; 8] = b"QKFINDEX";
const INDEX_VERSION: u32 = 1;

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector("cosine"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub article_id: String,
    pub vector: Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    entries: Vec<IndexEntry>,
    dimension: usize,
    provider: String,
    corpus_hash: [u8; 32],
}

/// A candidate article with the scores accumulated across stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredArticle {
    pub article_id: String,
    /// Position of the article in the index (ingestion order).
    pub entry_index: usize,
    pub retrieval_score: f64,
    pub retrieval_rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qff_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused_score: Option<f64>,
    /// Section index achieving the article QFF score.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_section: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub section_scores: Vec<f64>,
}

impl RetrievalIndex {
    pub fn build(articles: &[Article], embedder: &dyn Embedder) -> Result<Self> {
        let mut entries = Vec::with_capacity(articles.len());
        for a in articles {
            if a.abstract_text.trim().is_empty() {
                return Err(Error::Empty(format!("abstract of article `{}`", a.id)));
            }
            let vector = embedder
                .embed_text(&a.abstract_text)
                .map_err(|e| e.context(format!("embedding abstract of `{}`", a.id)))?;
            if vector.dim() != embedder.dimension() {
                return Err(Error::DimensionMismatch {
                    expected: embedder.dimension(),
                    actual: vector.dim(),
                });
            }
            entries.push(IndexEntry {
                article_id: a.id.clone(),
                vector,
            });
        }
        Ok(RetrievalIndex {
            entries,
            dimension: embedder.dimension(),
            provider: embedder.name().to_owned(),
            corpus_hash: corpus_hash(articles),
        })
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn provider(&self) -> &str {
        &self.provider
    }

    pub fn corpus_hash(&self) -> &[u8; 32] {
        &self.corpus_hash
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Top-`k` entries by cosine to `query`, ties broken by entry order.
    pub fn retrieve_topk(&self, query: &Embedding, k: usize) -> Result<Vec<ScoredArticle>> {
        if k < 1 {
            return Err(Error::invalid("k", "must be >= 1"));
        }
        if self.entries.is_empty() {
            return Err(Error::Empty("retrieval index".into()));
        }
        if query.dim() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                actual: query.dim(),
            });
        }
        let mut scored = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| Ok((i, cosine(query.as_slice(), e.vector.as_slice())?)))
            .collect::<Result<Vec<_>>>()?;
        // stable sort keeps entry order among equal scores
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(rank, (i, score))| ScoredArticle {
                article_id: self.entries[i].article_id.clone(),
                entry_index: i,
                retrieval_score: score,
                retrieval_rank: rank + 1,
                qff_score: None,
                fused_score: None,
                best_section: None,
                section_scores: Vec::new(),
            })
            .collect())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(INDEX_MAGIC)?;
        out.write_u32::<LittleEndian>(INDEX_VERSION)?;
        out.write_u32::<LittleEndian>(self.dimension as u32)?;
        out.write_u64::<LittleEndian>(self.entries.len() as u64)?;
        out.write_all(&self.corpus_hash)?;
        write_str(&mut out, &self.provider)?;
        for e in &self.entries {
            write_str(&mut out, &e.article_id)?;
            for &x in e.vector.as_slice() {
                out.write_f64::<LittleEndian>(x)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Format("not a retrieval index".into()));
        }
        let version = input.read_u32::<LittleEndian>()?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!(
                "index version {version}, expected {INDEX_VERSION}"
            )));
        }
        let dimension = input.read_u32::<LittleEndian>()? as usize;
        let count = input.read_u64::<LittleEndian>()? as usize;
        let mut corpus_hash = [0u8; 32];
        input.read_exact(&mut corpus_hash)?;
        let provider = read_str(&mut input)?;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let article_id = read_str(&mut input)?;
            let mut values = vec![0.0; dimension];
            input.read_f64_into::<LittleEndian>(&mut values)?;
            entries.push(IndexEntry {
                article_id,
                vector: Embedding::from_raw(values),
            });
        }
        Ok(RetrievalIndex {
            entries,
            dimension,
            provider,
            corpus_hash,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

pub(crate) fn write_str<W: Write>(out: &mut W, s: &str) -> Result<()> {
    out.write_u32::<LittleEndian>(s.len() as u32)?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_str<R: Read>(input: &mut R) -> Result<String> {
    let len = input.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::ToyEmbedder;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn article(id: &str, abstract_text: &str) -> Article {
        Article {
            id: id.into(),
            title: id.to_uppercase(),
            abstract_text: abstract_text.into(),
            image: None,
            sections: Vec::new(),
        }
    }

    fn random_unit(rng: &mut impl Rng, d: usize) -> Embedding {
        Embedding::normalized((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn index_of(vectors: Vec<Embedding>) -> RetrievalIndex {
        let dimension = vectors[0].dim();
        RetrievalIndex {
            entries: vectors
                .into_iter()
                .enumerate()
                .map(|(i, vector)| IndexEntry {
                    article_id: format!("a{i}"),
                    vector,
                })
                .collect(),
            dimension,
            provider: "test".into(),
            corpus_hash: [0; 32],
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector(_))));
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn build_keeps_order_and_is_deterministic() {
        let arts = vec![article("x", "red apple"), article("y", "green pear"), article("z", "blue sky")];
        let toy = ToyEmbedder::new(16, 2);
        let idx = RetrievalIndex::build(&arts, &toy).unwrap();
        let ids: Vec<_> = idx.entries().iter().map(|e| e.article_id.as_str()).collect();
        assert_eq!(ids, ["x", "y", "z"]);
        let again = RetrievalIndex::build(&arts, &toy).unwrap();
        assert_eq!(idx.to_bytes(), again.to_bytes());
    }

    #[test]
    fn empty_abstract_query_scores_one() {
        // the empty abstract is rejected; a single-token abstract whose vector we reuse as the query scores 1
        let toy = ToyEmbedder::new(8, 0);
        assert!(RetrievalIndex::build(&[article("a", " ")], &toy).is_err());
        let idx = RetrievalIndex::build(&[article("a", "token")], &toy).unwrap();
        let q = idx.entries()[0].vector.clone();
        let top = idx.retrieve_topk(&q, 20).unwrap();
        assert_eq!(top.len(), 1);
        assert!((top[0].retrieval_score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn persisted_index_round_trips() {
        let arts = vec![article("x", "red apple"), article("y", "green pear")];
        let idx = RetrievalIndex::build(&arts, &ToyEmbedder::new(16, 2)).unwrap();
        let bytes = idx.to_bytes();
        let back = RetrievalIndex::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.to_bytes(), bytes);

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(RetrievalIndex::read_from(bad.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn truncates_and_breaks_ties_by_entry_order() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut vs: Vec<Embedding> = (0..5).map(|_| random_unit(&mut rng, 4)).collect();
        vs[3] = vs[1].clone();
        let idx = index_of(vs.clone());
        let top = idx.retrieve_topk(&vs[1], 10).unwrap();
        assert_eq!(top.len(), 5);
        assert_eq!(top[0].article_id, "a1");
        assert_eq!(top[1].article_id, "a3");
        assert_eq!(top.iter().map(|a| a.retrieval_rank).collect::<Vec<_>>(), [1, 2, 3, 4, 5]);
        assert!(matches!(idx.retrieve_topk(&vs[0], 0), Err(Error::Invalid { .. })));
    }

    /// Scores every entry, sorts all of them, takes the prefix.
    fn sort_all_oracle(vs: &[Embedding], q: &Embedding, k: usize) -> Vec<usize> {
        let mut all: Vec<(usize, f64)> = vs
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let dot: f64 = v.as_slice().iter().zip(q.as_slice()).map(|(a, b)| a * b).sum();
                (i, dot)
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.into_iter().take(k).map(|(i, _)| i).collect()
    }

    #[test]
    fn matches_sort_all_oracle_on_fifty_articles() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(50);
        let vs: Vec<Embedding> = (0..50).map(|_| random_unit(&mut rng, 12)).collect();
        let idx = index_of(vs.clone());
        for _ in 0..20 {
            let q = random_unit(&mut rng, 12);
            let got: Vec<usize> = idx.retrieve_topk(&q, 20).unwrap().iter().map(|a| a.entry_index).collect();
            assert_eq!(got, sort_all_oracle(&vs, &q, 20));
        }
    }

    proptest! {
        #[test]
        fn cosine_scale_invariant(
            u in prop::collection::vec(-5.0f64..5.0, 6),
            v in prop::collection::vec(-5.0f64..5.0, 6),
            a in 0.01f64..100.0,
        ) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
            let scaled: Vec<f64> = u.iter().map(|x| a * x).collect();
            let c1 = cosine(&u, &v).unwrap();
            let c2 = cosine(&scaled, &v).unwrap();
            prop_assert!((c1 - c2).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&c1));
        }

        #[test]
        fn topk_is_prefix_of_full_order(seed in 0u64..1000, n in 1usize..200, k in 1usize..40) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let vs: Vec<Embedding> = (0..n).map(|_| random_unit(&mut rng, 5)).collect();
            let q = random_unit(&mut rng, 5);
            let top = index_of(vs.clone()).retrieve_topk(&q, k).unwrap();
            let got: Vec<usize> = top.iter().map(|a| a.entry_index).collect();
            prop_assert_eq!(got, sort_all_oracle(&vs, &q, k));
            prop_assert!(top.windows(2).all(|w| w[0].retrieval_rank < w[1].retrieval_rank));
        }
    }
}
