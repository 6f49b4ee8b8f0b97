//! ROUGE-L near-duplicate filtering of generated instructions.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("ROUGE-L threshold {0} must be in (0, 1]")]
pub struct ThresholdError(pub f64);

fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut prev = vec![0usize; short.len() + 1];
    let mut cur = vec![0usize; short.len() + 1];
    for x in long {
        for (j, y) in short.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

fn f1_tokens(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(cand, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / cand.len() as f64;
    let recall = lcs / reference.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// ROUGE-L F1 over lowercased whitespace tokens.
pub fn rouge_l_f1(candidate: &str, reference: &str) -> f64 {
    f1_tokens(&tokens(candidate), &tokens(reference))
}

/// Greedy deduplicator: a candidate is rejected when its ROUGE-L F1 against
/// any reference reaches the threshold; accepted candidates become
/// references for later ones.
#[derive(Debug, Clone)]
pub struct RougeDeduper {
    threshold: f64,
    references: Vec<Vec<String>>,
    grow: bool,
}

impl RougeDeduper {
    pub fn new<S: AsRef<str>>(threshold: f64, references: impl IntoIterator<Item = S>) -> Result<Self, ThresholdError> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(ThresholdError(threshold));
        }
        Ok(RougeDeduper {
            threshold,
            references: references.into_iter().map(|s| tokens(s.as_ref())).collect(),
            grow: true,
        })
    }

    /// Compare against the initial references only.
    pub fn fixed_references(mut self) -> Self {
        self.grow = false;
        self
    }

    pub fn max_similarity(&self, candidate: &str) -> f64 {
        let cand = tokens(candidate);
        self.references.iter().map(|r| f1_tokens(&cand, r)).fold(0.0, f64::max)
    }

    /// Returns `true` (and records the candidate) when it is kept.
    pub fn admit(&mut self, candidate: &str) -> bool {
        if self.max_similarity(candidate) >= self.threshold {
            return false;
        }
        if self.grow {
            self.references.push(tokens(candidate));
        }
        true
    }
}

/// Indices of the kept candidates, in input order.
pub fn dedup_rouge_l<S: AsRef<str>, R: AsRef<str>>(
    candidates: &[S],
    references: &[R],
    threshold: f64,
) -> Result<Vec<usize>, ThresholdError> {
    let mut d = RougeDeduper::new(threshold, references.iter().map(|r| r.as_ref()))?;
    Ok(candidates.iter().enumerate().filter(|(_, c)| d.admit(c.as_ref())).map(|(i, _)| i).collect())
}
