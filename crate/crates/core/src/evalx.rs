//! Evaluation: Recall@K, exact-match and relaxed numeric accuracy, the
//! four-way article/answer outcome taxonomy, and report emission.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::AnswerRecord;
use crate::text::normalized_tokens;

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub qid: String,
    #[serde(default)]
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub numeric_answer: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence_article_id: Option<String>,
}

impl GroundTruth {
    pub fn validate(&self) -> Result<()> {
        if self.answers.is_empty() && self.numeric_answer.is_none() {
            return Err(Error::invalid(
                format!("truth `{}`", self.qid),
                "needs answers or numeric_answer",
            ));
        }
        Ok(())
    }
}

/// Reads a truth file. Query files are accepted as-is: unknown fields are ignored.
pub fn parse_truths<R: BufRead>(reader: R) -> Result<Vec<GroundTruth>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: GroundTruth = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        t.validate().map_err(|e| e.context(format!("line {}", i + 1)))?;
        out.push(t);
    }
    Ok(out)
}

/// Which candidate list of a record to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateList {
    Retrieved,
    Filtered,
}

fn candidates(record: &AnswerRecord, list: CandidateList) -> &[crate::retrieval::ScoredArticle] {
    match list {
        CandidateList::Retrieved => &record.retrieved,
        CandidateList::Filtered => &record.filtered,
    }
}

fn truth_map(truths: &[GroundTruth]) -> HashMap<&str, &GroundTruth> {
    truths.iter().map(|t| (t.qid.as_str(), t)).collect()
}

fn lookup<'a>(map: &HashMap<&str, &'a GroundTruth>, qid: &str) -> Result<&'a GroundTruth> {
    map.get(qid)
        .copied()
        .ok_or_else(|| Error::invalid(format!("record `{qid}`"), "has no ground truth"))
}

/// An exact count ratio; division happens only when a float is requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub hits: u64,
    pub total: u64,
}

impl Ratio {
    pub fn value(&self) -> Option<f64> {
        (self.total > 0).then(|| self.hits as f64 / self.total as f64)
    }
}

/// Counts queries whose evidence article is among the first `k` candidates.
/// Records without an evidence id are skipped.
pub fn recall_counts(
    records: &[AnswerRecord],
    truths: &[GroundTruth],
    k: usize,
    list: CandidateList,
) -> Result<Ratio> {
    if k < 1 {
        return Err(Error::invalid("k", "must be >= 1"));
    }
    let map = truth_map(truths);
    let mut r = Ratio { hits: 0, total: 0 };
    for rec in records {
        let truth = lookup(&map, &rec.qid)?;
        let Some(evidence) = truth.evidence_article_id.as_deref() else {
            continue;
        };
        r.total += 1;
        if candidates(rec, list).iter().take(k).any(|a| a.article_id == evidence) {
            r.hits += 1;
        }
    }
    Ok(r)
}

pub fn recall_at_k(
    records: &[AnswerRecord],
    truths: &[GroundTruth],
    k: usize,
    list: CandidateList,
) -> Result<Option<f64>> {
    recall_counts(records, truths, k, list).map(|r| r.value())
}

pub fn normalize_answer(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_end_matches(['.', ',', '!', '?', ';', ':'])
        .trim()
        .to_owned()
}

pub fn vqa_accuracy(prediction: &str, answers: &[String]) -> bool {
    let p = normalize_answer(prediction);
    answers.iter().any(|a| normalize_answer(a) == p)
}

/// The first numeric literal in `s`; thousands separators are accepted.
pub fn first_number(s: &str) -> Option<f64> {
    let chars: Vec<char> = s.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_ascii_digit() {
            let start = if i > 0 && chars[i - 1] == '-' { i - 1 } else { i };
            let mut lit = String::new();
            if start < i {
                lit.push('-');
            }
            let mut j = i;
            let mut seen_dot = false;
            while j < chars.len() {
                let c = chars[j];
                let next_digit = chars.get(j + 1).is_some_and(|n| n.is_ascii_digit());
                if c.is_ascii_digit() {
                    lit.push(c);
                } else if c == ',' && !seen_dot && next_digit {
                } else if c == '.' && !seen_dot && next_digit {
                    seen_dot = true;
                    lit.push(c);
                } else {
                    break;
                }
                j += 1;
            }
            return lit.parse().ok();
        }
        i += 1;
    }
    None
}

/// Within `tol` relative error of `truth`; a zero truth needs an exact match.
pub fn relaxed_accuracy(prediction: &str, truth: f64, tol: f64) -> Result<bool> {
    if !(tol >= 0.0) {
        return Err(Error::invalid("relaxed_tolerance", "must be >= 0"));
    }
    Ok(match first_number(prediction) {
        None => false,
        Some(p) if truth == 0.0 => p == 0.0,
        Some(p) => (p - truth).abs() <= tol * truth.abs(),
    })
}

/// Best token-level F1 against any acceptable answer.
pub fn token_f1(prediction: &str, answers: &[String]) -> f64 {
    let pred = normalized_tokens(prediction);
    answers
        .iter()
        .map(|a| {
            let gold = normalized_tokens(a);
            if pred.is_empty() || gold.is_empty() {
                return f64::from(u8::from(pred.is_empty() && gold.is_empty()));
            }
            let mut pool: HashMap<&str, usize> = HashMap::new();
            for g in &gold {
                *pool.entry(g.as_str()).or_default() += 1;
            }
            let mut common = 0usize;
            for p in &pred {
                if let Some(n) = pool.get_mut(p.as_str()) {
                    if *n > 0 {
                        *n -= 1;
                        common += 1;
                    }
                }
            }
            if common == 0 {
                return 0.0;
            }
            let precision = common as f64 / pred.len() as f64;
            let recall = common as f64 / gold.len() as f64;
            2.0 * precision * recall / (precision + recall)
        })
        .fold(0.0, f64::max)
}

/// Exact match against the string answers, or relaxed match against the
/// numeric answer when one is given.
pub fn answer_correct(prediction: &str, truth: &GroundTruth, tol: f64) -> Result<bool> {
    if !truth.answers.is_empty() && vqa_accuracy(prediction, &truth.answers) {
        return Ok(true);
    }
    match truth.numeric_answer {
        Some(n) => relaxed_accuracy(prediction, n, tol),
        None => Ok(false),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FourWay {
    /// Article first, answer correct.
    ASS,
    /// Article not first, answer correct.
    AFS,
    /// Article first, answer wrong.
    ASF,
    AFF,
}

impl FourWay {
    pub const ALL: [FourWay; 4] = [FourWay::ASS, FourWay::AFS, FourWay::ASF, FourWay::AFF];

    pub fn from_parts(article_first: bool, correct: bool) -> Self {
        match (article_first, correct) {
            (true, true) => FourWay::ASS,
            (false, true) => FourWay::AFS,
            (true, false) => FourWay::ASF,
            (false, false) => FourWay::AFF,
        }
    }
}

/// `None` when the truth has no evidence id or the record has no answer.
pub fn four_way_classify(record: &AnswerRecord, truth: &GroundTruth, tol: f64) -> Result<Option<FourWay>> {
    let (Some(evidence), Some(answer)) = (truth.evidence_article_id.as_deref(), record.answer.as_deref()) else {
        return Ok(None);
    };
    let first = record.filtered.first().is_some_and(|a| a.article_id == evidence);
    Ok(Some(FourWay::from_parts(first, answer_correct(answer, truth, tol)?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLabel {
    pub qid: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<FourWay>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourWayReport {
    pub counts: BTreeMap<FourWay, u64>,
    pub evaluable: u64,
    /// Percent of evaluable queries; null when there are none.
    pub percentages: Option<BTreeMap<FourWay, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: usize,
    pub missing_evidence: usize,
    pub unanswered: usize,
    pub relaxed_tolerance: f64,
    pub recall_retrieved: BTreeMap<usize, Option<f64>>,
    pub recall_filtered: BTreeMap<usize, Option<f64>>,
    pub vqa_accuracy: Option<f64>,
    pub relaxed_accuracy: Option<f64>,
    pub answer_accuracy: Option<f64>,
    pub token_f1: Option<f64>,
    pub four_way: FourWayReport,
    pub per_query: Vec<QueryLabel>,
}

/// Builds the full report. Every record must have a truth with the same qid.
pub fn aggregate(records: &[AnswerRecord], truths: &[GroundTruth], tol: f64) -> Result<EvalReport> {
    let map = truth_map(truths);
    let mut seen = HashSet::new();
    for r in records {
        lookup(&map, &r.qid)?;
        if !seen.insert(r.qid.as_str()) {
            return Err(Error::DuplicateId(r.qid.clone()));
        }
    }

    let mut recall_retrieved = BTreeMap::new();
    let mut recall_filtered = BTreeMap::new();
    for k in RECALL_KS {
        recall_retrieved.insert(k, recall_at_k(records, truths, k, CandidateList::Retrieved)?);
        recall_filtered.insert(k, recall_at_k(records, truths, k, CandidateList::Filtered)?);
    }

    let mut vqa = Ratio { hits: 0, total: 0 };
    let mut relaxed = Ratio { hits: 0, total: 0 };
    let mut overall = Ratio { hits: 0, total: 0 };
    let mut f1_sum = 0.0;
    let mut f1_n = 0u64;
    let mut counts: BTreeMap<FourWay, u64> = FourWay::ALL.iter().map(|l| (*l, 0)).collect();
    let mut evaluable = 0u64;
    let mut missing_evidence = 0;
    let mut unanswered = 0;
    let mut per_query = Vec::with_capacity(records.len());

    for rec in records {
        let truth = map[rec.qid.as_str()];
        if truth.evidence_article_id.is_none() {
            missing_evidence += 1;
        }
        let Some(answer) = rec.answer.as_deref() else {
            unanswered += 1;
            per_query.push(QueryLabel {
                qid: rec.qid.clone(),
                label: None,
                correct: None,
                token_f1: None,
            });
            continue;
        };
        let correct = answer_correct(answer, truth, tol)?;
        overall.total += 1;
        overall.hits += u64::from(correct);
        if !truth.answers.is_empty() {
            vqa.total += 1;
            vqa.hits += u64::from(vqa_accuracy(answer, &truth.answers));
        }
        if let Some(n) = truth.numeric_answer {
            relaxed.total += 1;
            relaxed.hits += u64::from(relaxed_accuracy(answer, n, tol)?);
        }
        let f1 = (!truth.answers.is_empty()).then(|| token_f1(answer, &truth.answers));
        if let Some(f) = f1 {
            f1_sum += f;
            f1_n += 1;
        }
        let label = four_way_classify(rec, truth, tol)?;
        if let Some(l) = label {
            evaluable += 1;
            *counts.get_mut(&l).expect("all labels present") += 1;
        }
        per_query.push(QueryLabel {
            qid: rec.qid.clone(),
            label,
            correct: Some(correct),
            token_f1: f1,
        });
    }

    let percentages = (evaluable > 0).then(|| {
        counts
            .iter()
            .map(|(l, c)| (*l, *c as f64 * 100.0 / evaluable as f64))
            .collect()
    });

    Ok(EvalReport {
        records: records.len(),
        missing_evidence,
        unanswered,
        relaxed_tolerance: tol,
        recall_retrieved,
        recall_filtered,
        vqa_accuracy: vqa.value(),
        relaxed_accuracy: relaxed.value(),
        answer_accuracy: overall.value(),
        token_f1: (f1_n > 0).then(|| f1_sum / f1_n as f64),
        four_way: FourWayReport {
            counts,
            evaluable,
            percentages,
        },
        per_query,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |x| format!("{:.1}", x * 100.0))
}

impl EvalReport {
    /// Aligned plain-text summary.
    pub fn text_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "records {}  unanswered {}  missing evidence {}  relaxed tolerance {}",
            self.records, self.unanswered, self.missing_evidence, self.relaxed_tolerance
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<12}{:>8}{:>8}{:>8}{:>8}", "Method", "R@1", "R@5", "R@10", "R@20");
        for (name, row) in [("Retrieval", &self.recall_retrieved), ("+QFF", &self.recall_filtered)] {
            let _ = write!(s, "{name:<12}");
            for k in RECALL_KS {
                let _ = write!(s, "{:>8}", pct(row.get(&k).copied().flatten()));
            }
            let _ = writeln!(s);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<20}{:>8}", "VQA accuracy", pct(self.vqa_accuracy));
        let _ = writeln!(s, "{:<20}{:>8}", "Relaxed accuracy", pct(self.relaxed_accuracy));
        let _ = writeln!(s, "{:<20}{:>8}", "Answer accuracy", pct(self.answer_accuracy));
        let _ = writeln!(s, "{:<20}{:>8}", "Token F1", pct(self.token_f1));
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<8}{:>8}{:>8}", "Outcome", "count", "%");
        for l in FourWay::ALL {
            let p = self.four_way.percentages.as_ref().map(|m| m[&l] / 100.0);
            let _ = writeln!(s, "{:<8}{:>8}{:>8}", format!("{l:?}"), self.four_way.counts[&l], pct(p));
        }
        s
    }
}
