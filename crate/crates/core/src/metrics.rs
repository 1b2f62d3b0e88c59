//! Corpus BLEU, exact-match METEOR and teacher-forced token accuracy.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// Cumulative BLEU-1..4, scaled to [0,100].
    pub bleu: [f64; MAX_ORDER],
    /// Modified precisions p_1..p_4 in [0,1]; 0 where no n-grams exist.
    pub precisions: [f64; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub candidate_length: usize,
    pub reference_length: usize,
    /// Set when some p_n is zero, which zeroes BLEU-n and above.
    pub zero_precision: bool,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Reference length closest to `c`; ties go to the shorter one.
fn closest_ref_len<T>(c: usize, refs: &[Vec<T>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Corpus-level BLEU with clipped n-gram counts and no smoothing.
pub fn bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<BleuReport> {
    if candidates.is_empty() {
        return Err(Error::Data("bleu needs at least one candidate".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Data(format!(
            "bleu got {} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Data("every candidate needs at least one reference".into()));
    }

    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += closest_ref_len(cand.len(), refs);
        for n in 1..=MAX_ORDER {
            let counts = ngram_counts(cand, n);
            let mut max_ref: HashMap<&[T], usize> = HashMap::new();
            for r in refs {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &counts {
                matches[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }

    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
    }
    let bp = if c_len == 0 {
        0.0
    } else if c_len >= r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let mut scores = [0.0; MAX_ORDER];
    for n in 1..=MAX_ORDER {
        if c_len > 0 && precisions[..n].iter().all(|&p| p > 0.0) {
            let log_sum: f64 = precisions[..n].iter().map(|p| p.ln() / n as f64).sum();
            scores[n - 1] = 100.0 * bp * log_sum.exp();
        }
    }
    Ok(BleuReport {
        bleu: scores,
        precisions,
        matches,
        totals,
        brevity_penalty: bp,
        candidate_length: c_len,
        reference_length: r_len,
        zero_precision: precisions.contains(&0.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeteorReport {
    pub precision: f64,
    pub recall: f64,
    pub f_mean: f64,
    pub penalty: f64,
    pub score: f64,
    pub matches: usize,
    pub chunks: usize,
}

impl MeteorReport {
    fn zero() -> Self {
        Self {
            precision: 0.0,
            recall: 0.0,
            f_mean: 0.0,
            penalty: 0.0,
            score: 0.0,
            matches: 0,
            chunks: 0,
        }
    }
}

/// Exact-match alignment with the most matches, then the fewest chunks.
/// Returns `(matches, chunks)`.
pub fn align<T: Eq>(candidate: &[T], reference: &[T]) -> (usize, usize) {
    struct Search<'a, T> {
        cand: &'a [T],
        reference: &'a [T],
        memo: HashMap<(usize, Vec<u64>, usize), (usize, usize)>,
    }

    impl<T: Eq> Search<'_, T> {
        // `prev` is the reference position matched by cand[i-1], or usize::MAX.
        fn run(&mut self, i: usize, used: &mut Vec<u64>, prev: usize) -> (usize, usize) {
            if i == self.cand.len() {
                return (0, 0);
            }
            let key = (i, used.clone(), prev);
            if let Some(&hit) = self.memo.get(&key) {
                return hit;
            }
            let mut best = self.run(i + 1, used, usize::MAX);
            for j in 0..self.reference.len() {
                let (word, bit) = (j / 64, 1u64 << (j % 64));
                if used[word] & bit != 0 || self.reference[j] != self.cand[i] {
                    continue;
                }
                used[word] |= bit;
                let (m, c) = self.run(i + 1, used, j);
                used[word] &= !bit;
                let continues = prev != usize::MAX && j == prev + 1;
                let option = (m + 1, c + usize::from(!continues));
                if option.0 > best.0 || (option.0 == best.0 && option.1 < best.1) {
                    best = option;
                }
            }
            self.memo.insert(key, best);
            best
        }
    }

    let mut search = Search {
        cand: candidate,
        reference,
        memo: HashMap::new(),
    };
    let mut used = vec![0u64; reference.len().div_ceil(64)];
    search.run(0, &mut used, usize::MAX)
}

fn meteor_single<T: Eq>(candidate: &[T], reference: &[T]) -> MeteorReport {
    let (matches, chunks) = align(candidate, reference);
    if matches == 0 {
        return MeteorReport::zero();
    }
    let m = matches as f64;
    let precision = m / candidate.len() as f64;
    let recall = m / reference.len() as f64;
    let f_mean = 10.0 * precision * recall / (recall + 9.0 * precision);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    MeteorReport {
        precision,
        recall,
        f_mean,
        penalty,
        score: f_mean * (1.0 - penalty),
        matches,
        chunks,
    }
}

/// Sentence METEOR: best score over the references. Ties keep the earlier reference.
pub fn meteor<T: Eq>(candidate: &[T], references: &[Vec<T>]) -> Result<MeteorReport> {
    if references.is_empty() {
        return Err(Error::Data("meteor needs at least one reference".into()));
    }
    let mut best = MeteorReport::zero();
    for r in references {
        let s = meteor_single(candidate, r);
        if s.score > best.score {
            best = s;
        }
    }
    Ok(best)
}

/// Mean sentence METEOR over a corpus.
pub fn corpus_meteor<T: Eq>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<f64> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::Data(
            "meteor needs aligned, non-empty candidates and references".into(),
        ));
    }
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        sum += meteor(c, r)?.score;
    }
    Ok(sum / candidates.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TokenAccuracy {
    pub correct: usize,
    pub total: usize,
}

impl TokenAccuracy {
    /// True when every target was ignored.
    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// 0 when empty.
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

impl std::ops::AddAssign for TokenAccuracy {
    fn add_assign(&mut self, rhs: Self) {
        self.correct += rhs.correct;
        self.total += rhs.total;
    }
}

/// Counts rows of `[T,V]` logits whose argmax equals a non-`ignore` target.
pub fn token_accuracy(logits: &Tensor, targets: &[usize], ignore: usize) -> Result<TokenAccuracy> {
    let (rows, width) = match *logits.shape() {
        [t, v] => (t, v),
        _ => {
            return Err(Error::Shape {
                op: "token_accuracy",
                detail: format!("expected [T,V] logits, got {:?}", logits.shape()),
            })
        }
    };
    if rows != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "token_accuracy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let mut acc = TokenAccuracy::default();
    for (row, &t) in logits.data().chunks(width).zip(targets) {
        if t == ignore {
            continue;
        }
        acc.total += 1;
        acc.correct += usize::from(argmax(row) == Some(t));
    }
    Ok(acc)
}

/// Cumulative BLEU scores as written in evaluation reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuSummary {
    #[serde(rename = "1")]
    pub bleu1: f64,
    #[serde(rename = "2")]
    pub bleu2: f64,
    #[serde(rename = "3")]
    pub bleu3: f64,
    #[serde(rename = "4")]
    pub bleu4: f64,
    pub bp: f64,
}

impl From<&BleuReport> for BleuSummary {
    fn from(r: &BleuReport) -> Self {
        Self {
            bleu1: r.bleu[0],
            bleu2: r.bleu[1],
            bleu3: r.bleu[2],
            bleu4: r.bleu[3],
            bp: r.brevity_penalty,
        }
    }
}

/// The evaluation JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub bleu: BleuSummary,
    /// Mean sentence METEOR in [0,1].
    pub meteor: f64,
    pub samples: usize,
    pub token_accuracy: f64,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}
