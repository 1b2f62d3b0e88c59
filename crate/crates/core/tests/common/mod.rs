//! Oracles and helpers shared by the integration tests.
#![allow(dead_code)]

pub mod checks;
pub mod gradsuite;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textmage::data::{END, PAD, START};
use textmage::decoder::DecoderModel;
use textmage::{Tape, Tensor};

pub const EPS: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error, so that gradients that are
/// zero in exact arithmetic do not divide by rounding noise.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `Σ out ⊙ weights`: a random linear read-out that turns any op into a scalar loss.
pub fn project(tape: &mut Tape, out: &Tensor, weights: &Tensor) -> textmage::Result<Tensor> {
    let w = weights.reshape(out.shape())?;
    let m = tape.mul(out, &w)?;
    tape.sum(&m)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradReport {
    pub checked: usize,
    /// Coordinates whose ±eps probes crossed a relu or pooling kink.
    pub skipped: usize,
    pub max_rel: f64,
}

impl GradReport {
    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.max_rel = self.max_rel.max(other.max_rel);
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Registers every input as a trainable leaf.
pub fn leaves(tape: &mut Tape, inputs: &[Tensor]) -> Vec<Tensor> {
    inputs.iter().map(|t| tape.param(t)).collect()
}

/// A scalar loss and the tape leaves it was built from, one per input.
pub type Traced = textmage::Result<(Tensor, Vec<Tensor>)>;

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> (f64, Vec<usize>)
where
    F: Fn(&mut Tape, &[Tensor]) -> Traced,
{
    let mut tape = Tape::new();
    let (loss, _) = f(&mut tape, inputs).expect("forward");
    (loss.item().expect("scalar loss"), tape.branch_signature())
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences for every coordinate of every input. `f` must return the
/// leaves it registered for the inputs, in input order.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> GradReport
where
    F: Fn(&mut Tape, &[Tensor]) -> Traced,
{
    let mut tape = Tape::new();
    let (loss, ps) = f(&mut tape, inputs).expect("forward");
    assert_eq!(ps.len(), inputs.len(), "one leaf per input");
    let base_sig = tape.branch_signature();
    let grads = tape.backward(&loss).expect("backward");
    let mut report = GradReport::default();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&ps[i]);
        for j in 0..input.numel() {
            let probe = |delta: f64| {
                let mut shifted = inputs.to_vec();
                let mut data = input.to_vec();
                data[j] += delta;
                shifted[i] = Tensor::new(input.shape(), data).unwrap();
                evaluate(&f, &shifted)
            };
            let (lp, sp) = probe(EPS);
            let (lm, sm) = probe(-EPS);
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * EPS);
            report.checked += 1;
            report.max_rel = report.max_rel.max(rel_error(analytic.data()[j], numeric));
        }
    }
    report
}

// ---------------------------------------------------------------------------
// BLEU oracle: n-grams counted by explicit scanning, no hashing

pub struct BleuOracle {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub precisions: [f64; 4],
    pub bp: f64,
    pub bleu: [f64; 4],
    pub c: usize,
    pub r: usize,
}

fn count_occurrences(hay: &[u8], needle: &[u8]) -> usize {
    if needle.len() > hay.len() {
        return 0;
    }
    (0..=hay.len() - needle.len())
        .filter(|&s| &hay[s..s + needle.len()] == needle)
        .count()
}

pub fn bleu_oracle(cands: &[Vec<u8>], refs: &[Vec<Vec<u8>>]) -> BleuOracle {
    let mut matches = [0; 4];
    let mut totals = [0; 4];
    let (mut c, mut r) = (0, 0);
    for (cand, rs) in cands.iter().zip(refs) {
        c += cand.len();
        let mut best: Option<usize> = None;
        for rf in rs {
            let l = rf.len();
            best = match best {
                None => Some(l),
                Some(b) => {
                    let (db, dl) = (b.abs_diff(cand.len()), l.abs_diff(cand.len()));
                    if dl < db || (dl == db && l < b) {
                        Some(l)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        r += best.unwrap();
        for n in 1..=4 {
            if cand.len() < n {
                continue;
            }
            totals[n - 1] += cand.len() - n + 1;
            let mut seen: Vec<&[u8]> = Vec::new();
            for s in 0..=cand.len() - n {
                let g = &cand[s..s + n];
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                let in_cand = count_occurrences(cand, g);
                let max_ref = rs.iter().map(|rf| count_occurrences(rf, g)).max().unwrap();
                matches[n - 1] += in_cand.min(max_ref);
            }
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
    }
    let bp = if c == 0 {
        0.0
    } else if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let mut bleu = [0.0; 4];
    for n in 1..=4 {
        if c > 0 && precisions[..n].iter().all(|&p| p > 0.0) {
            let log_mean: f64 = precisions[..n].iter().map(|p| p.ln() / n as f64).sum();
            bleu[n - 1] = 100.0 * bp * log_mean.exp();
        }
    }
    BleuOracle {
        matches,
        totals,
        precisions,
        bp,
        bleu,
        c,
        r,
    }
}

/// Random corpus: up to 4 candidates, vocabulary ≤ 5, lengths ≤ 6, 1–3 references each.
pub fn micro_corpus(rng: &mut impl Rng) -> (Vec<Vec<u8>>, Vec<Vec<Vec<u8>>>) {
    let vocab = rng.gen_range(1..=5u8);
    let sentence =
        |rng: &mut ChaCha8Rng| -> Vec<u8> { (0..rng.gen_range(0..=6)).map(|_| rng.gen_range(0..vocab)).collect() };
    let mut local = ChaCha8Rng::seed_from_u64(rng.gen());
    let n = local.gen_range(1..=4);
    let cands: Vec<Vec<u8>> = (0..n).map(|_| sentence(&mut local)).collect();
    let refs = (0..n)
        .map(|_| {
            let k = local.gen_range(1..=3);
            (0..k).map(|_| sentence(&mut local)).collect()
        })
        .collect();
    (cands, refs)
}

// ---------------------------------------------------------------------------
// METEOR oracle: every injective partial alignment, enumerated

/// `(matches, chunks)` of the best alignment found by exhaustive search.
pub fn meteor_alignment_oracle(cand: &[u8], reference: &[u8]) -> (usize, usize) {
    fn go(
        i: usize,
        cand: &[u8],
        reference: &[u8],
        used: &mut Vec<bool>,
        map: &mut Vec<Option<usize>>,
        best: &mut (usize, usize),
    ) {
        if i == cand.len() {
            let m = map.iter().flatten().count();
            let mut chunks = 0;
            let mut prev: Option<usize> = None;
            for slot in map.iter() {
                match (*slot, prev) {
                    (Some(j), Some(p)) if j == p + 1 => {}
                    (Some(_), _) => chunks += 1,
                    _ => {}
                }
                prev = *slot;
            }
            if m > best.0 || (m == best.0 && chunks < best.1) {
                *best = (m, chunks);
            }
            return;
        }
        map.push(None);
        go(i + 1, cand, reference, used, map, best);
        map.pop();
        for j in 0..reference.len() {
            if !used[j] && reference[j] == cand[i] {
                used[j] = true;
                map.push(Some(j));
                go(i + 1, cand, reference, used, map, best);
                map.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0);
    go(
        0,
        cand,
        reference,
        &mut vec![false; reference.len()],
        &mut Vec::new(),
        &mut best,
    );
    best
}

// ---------------------------------------------------------------------------
// Decoding oracles

/// Cumulative log-probability of emitting `tokens` (and END when `finished`),
/// stepping the model directly.
pub fn path_log_prob(model: &DecoderModel, feature: &Tensor, tokens: &[usize], finished: bool) -> f64 {
    let mut state = model.start(feature).unwrap();
    let mut prev = START;
    let mut total = 0.0;
    let mut path: Vec<usize> = tokens.to_vec();
    if finished {
        path.push(END);
    }
    for &t in &path {
        let (next, logp) = model.advance(&state, prev).unwrap();
        total += logp[t];
        state = next;
        prev = t;
    }
    total
}

/// Best length-normalised sequence among all sequences of emittable tokens
/// of length ≤ `max_len`: ended by END when shorter than `max_len`.
pub fn exhaustive_best(model: &DecoderModel, feature: &Tensor, max_len: usize) -> (Vec<usize>, f64) {
    let v = model.config.vocab_size;
    let words: Vec<usize> = (0..v).filter(|&t| t != PAD && t != START && t != END).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for len in 0..=max_len {
        for seq in &frontier {
            let finished = len < max_len;
            let score = path_log_prob(model, feature, seq, finished) / (len + usize::from(finished)) as f64;
            if best.as_ref().is_none_or(|(_, s)| score > *s) {
                best = Some((seq.clone(), score));
            }
        }
        frontier = frontier
            .iter()
            .flat_map(|s| {
                words.iter().map(move |&w| {
                    let mut n = s.clone();
                    n.push(w);
                    n
                })
            })
            .collect();
    }
    best.unwrap()
}
