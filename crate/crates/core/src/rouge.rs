//! ROUGE-1, ROUGE-2 and ROUGE-L F1 without stemming or stopword removal.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    /// Builds a score from an overlap count and the two denominators. An
    /// empty denominator gives zero for that side.
    pub fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        let ratio = |d: usize| if d == 0 { 0.0 } else { overlap as f64 / d as f64 };
        let precision = ratio(candidate_total);
        let recall = ratio(reference_total);
        // 2PR/(P+R) simplified to a single division, so exact ratios stay exact.
        let f1 = if overlap > 0 {
            2.0 * overlap as f64 / (candidate_total + reference_total) as f64
        } else {
            0.0
        };
        RougeScore { precision, recall, f1 }
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Result<RougeScore> {
    if n == 0 {
        return Err(Error::invalid("ROUGE-N needs n >= 1"));
    }
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap = cand
        .iter()
        .map(|(gram, &c)| c.min(refs.get(gram).copied().unwrap_or(0)))
        .sum();
    let total = |len: usize| (len + 1).saturating_sub(n);
    Ok(RougeScore::from_counts(overlap, total(candidate.len()), total(reference.len())))
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let above = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { above.max(row[j]) };
            diag = above;
        }
    }
    row[b.len()]
}

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> RougeScore {
    RougeScore::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

/// ROUGE-1, ROUGE-2 and ROUGE-L of one pair.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RougeTriple {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

impl RougeTriple {
    pub fn score<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> Self {
        RougeTriple {
            rouge1: rouge_n(candidate, reference, 1).expect("n = 1"),
            rouge2: rouge_n(candidate, reference, 2).expect("n = 2"),
            rouge_l: rouge_l(candidate, reference),
        }
    }
}

/// Corpus-level report: unweighted means of per-pair scores.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RougeReport {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
    pub pairs: usize,
}

fn mean_score(scores: impl Iterator<Item = RougeScore>, n: f64) -> RougeScore {
    let mut acc = RougeScore::default();
    for s in scores {
        acc.precision += s.precision;
        acc.recall += s.recall;
        acc.f1 += s.f1;
    }
    RougeScore {
        precision: acc.precision / n,
        recall: acc.recall / n,
        f1: acc.f1 / n,
    }
}

/// Macro-averages per-pair scores over `(candidate, reference)` pairs.
pub fn evaluate_corpus<T, C, R>(pairs: &[(C, R)]) -> Result<RougeReport>
where
    T: Eq + Hash,
    C: AsRef<[T]>,
    R: AsRef<[T]>,
{
    if pairs.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty corpus"));
    }
    let triples: Vec<RougeTriple> = pairs
        .iter()
        .map(|(c, r)| RougeTriple::score(c.as_ref(), r.as_ref()))
        .collect();
    let n = triples.len() as f64;
    Ok(RougeReport {
        rouge1: mean_score(triples.iter().map(|t| t.rouge1), n),
        rouge2: mean_score(triples.iter().map(|t| t.rouge2), n),
        rouge_l: mean_score(triples.iter().map(|t| t.rouge_l), n),
        pairs: triples.len(),
    })
}

impl fmt::Display for RougeReport {
    /// Table with one row per metric, F1 first.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "metric,f1,precision,recall")?;
        for (name, s) in [("val_rouge1", self.rouge1), ("val_rouge2", self.rouge2), ("val_rougeL", self.rouge_l)] {
            writeln!(f, "{name},{:.6},{:.6},{:.6}", s.f1, s.precision, s.recall)?;
        }
        write!(f, "pairs,{}", self.pairs)
    }
}
