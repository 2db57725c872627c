//! Negative sampling: hard negatives from the evidence article, the rest
//! from the other retrieved candidates.

use rand::seq::IteratorRandom;
use rand::Rng;

use crate::corpus::{KnowledgeBase, Section};
use crate::error::{Error, Result};

pub const DEFAULT_HARD_NEGATIVES: usize = 3;

/// Draws `m` negatives for `positive`.
///
/// Up to `hard` come from other sections of the positive's article; the
/// remainder are drawn without replacement from sections of the other
/// `candidates`. Only when the pool is exhausted are draws repeated.
pub fn sample_negatives<'a, R: Rng>(
    kb: &'a KnowledgeBase,
    candidates: &[String],
    positive: &Section,
    m: usize,
    hard: usize,
    rng: &mut R,
) -> Result<Vec<&'a Section>> {
    if m < 1 {
        return Err(Error::invalid("m", "must be >= 1"));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("negative-sampling candidates".into()));
    }
    let hard_pool: Vec<&Section> = kb
        .get(&positive.article_id)
        .map(|a| {
            a.sections
                .iter()
                .filter(|s| s.section_index != positive.section_index)
                .collect()
        })
        .unwrap_or_default();
    let other_pool: Vec<&Section> = candidates
        .iter()
        .filter(|id| **id != positive.article_id)
        .filter_map(|id| kb.get(id))
        .flat_map(|a| a.sections.iter())
        .collect();
    if hard_pool.is_empty() && other_pool.is_empty() {
        return Err(Error::Empty(format!(
            "no negative sections available for `{}`",
            positive.article_id
        )));
    }

    let n_hard = hard.min(m).min(hard_pool.len());
    let mut out: Vec<&Section> = hard_pool.iter().copied().choose_multiple(rng, n_hard);
    let n_other = (m - out.len()).min(other_pool.len());
    out.extend(other_pool.iter().copied().choose_multiple(rng, n_other));

    let pool: Vec<&Section> = hard_pool.iter().chain(other_pool.iter()).copied().collect();
    while out.len() < m {
        out.push(pool[rng.gen_range(0..pool.len())]);
    }
    Ok(out)
}
