//! LSTM caption decoder conditioned on an image feature vector.
//!
//! The projected feature is the input at step 0; afterwards the decoder
//! consumes word embeddings. Logit row `k` of a teacher-forced pass is
//! produced after consuming `caption[k-1]` (row 0 after the image) and is
//! scored against `caption[k]`; row 0 has no target.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mode, Tape};
use crate::curve::{CurvePoint, EpochStats};
use crate::data::{pair_batches, CaptionPair, END, PAD, START};
use crate::encoder::Dense;
use crate::error::{Error, Result};
use crate::metrics::token_accuracy;
use crate::optim::{AdamConfig, Optimizer};
use crate::tensor::{log_softmax_row, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub hidden_size: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub dropout_p: f64,
    /// Longest accepted caption, START and END included.
    pub max_caption_len: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.embed_dim == 0 || self.feature_dim == 0 {
            return Err(Error::config("decoder widths must be positive"));
        }
        if self.vocab_size < 4 {
            return Err(Error::config(format!(
                "vocab_size must cover the 4 special tokens, got {}",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        if self.max_caption_len < 2 {
            return Err(Error::config("max_caption_len must fit START and END"));
        }
        Ok(())
    }
}

/// Weights of one LSTM gate: `W: [E, H]`, `U: [H, H]`, `b: [H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub input: Tensor,
    pub recurrent: Tensor,
    pub bias: Tensor,
}

impl Gate {
    fn zeros(embed: usize, hidden: usize) -> Self {
        Self {
            input: Tensor::zeros(&[embed, hidden]),
            recurrent: Tensor::zeros(&[hidden, hidden]),
            bias: Tensor::zeros(&[hidden]),
        }
    }

    /// `x·W + h·U + b`.
    fn pre_activation(&self, tape: &mut Tape, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let a = tape.matmul(x, &self.input)?;
        let b = tape.matmul(h, &self.recurrent)?;
        let s = tape.add(&a, &b)?;
        tape.add(&s, &self.bias)
    }
}

/// Standard LSTM cell with forget gate, no peepholes.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub input_gate: Gate,
    pub forget_gate: Gate,
    pub output_gate: Gate,
    pub candidate: Gate,
}

impl LstmCell {
    pub fn zeros(embed: usize, hidden: usize) -> Self {
        Self {
            input_gate: Gate::zeros(embed, hidden),
            forget_gate: Gate::zeros(embed, hidden),
            output_gate: Gate::zeros(embed, hidden),
            candidate: Gate::zeros(embed, hidden),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.input_gate.bias.numel()
    }

    pub fn embed_dim(&self) -> usize {
        self.input_gate.input.shape()[0]
    }

    fn gates(&self) -> [&Gate; 4] {
        [&self.input_gate, &self.forget_gate, &self.output_gate, &self.candidate]
    }

    fn gates_mut(&mut self) -> [&mut Gate; 4] {
        [
            &mut self.input_gate,
            &mut self.forget_gate,
            &mut self.output_gate,
            &mut self.candidate,
        ]
    }

    /// One recurrence step on the tape: returns `(h', c')`.
    pub fn step(&self, tape: &mut Tape, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let (e, hs) = (self.embed_dim(), self.hidden_size());
        if x.shape() != [e] || h.shape() != [hs] || c.shape() != [hs] {
            return Err(Error::ShapeMismatch {
                op: "lstm_step",
                lhs: vec![e, hs],
                rhs: [x.shape(), h.shape(), c.shape()].concat(),
            });
        }
        let i = self.input_gate.pre_activation(tape, x, h)?;
        let i = tape.sigmoid(&i)?;
        let f = self.forget_gate.pre_activation(tape, x, h)?;
        let f = tape.sigmoid(&f)?;
        let o = self.output_gate.pre_activation(tape, x, h)?;
        let o = tape.sigmoid(&o)?;
        let g = self.candidate.pre_activation(tape, x, h)?;
        let g = tape.tanh(&g)?;
        let keep = tape.mul(&f, c)?;
        let write = tape.mul(&i, &g)?;
        let c_next = tape.add(&keep, &write)?;
        let squashed = tape.tanh(&c_next)?;
        let h_next = tape.mul(&o, &squashed)?;
        Ok((h_next, c_next))
    }
}

/// Untracked single step: `(h', c')` for given `x`, `h`, `c`.
pub fn lstm_step(cell: &LstmCell, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let (h, c) = cell.step(&mut tape, x, h, c)?;
    Ok((h.detach(), c.detach()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub config: DecoderConfig,
    /// `[V, E]`.
    pub embedding: Tensor,
    pub cell: LstmCell,
    /// Feature projection into embedding space, `[feature_dim, E]`.
    pub image_proj: Dense,
    /// `[H, V]`.
    pub output: Dense,
}

/// Glorot-uniform `U(−√(6/(in+out)), √(6/(in+out)))`.
fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let n = rows * cols;
    Tensor::new(&[rows, cols], (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()).expect("sized from shape")
}

pub fn build_decoder<R: Rng + ?Sized>(config: &DecoderConfig, rng: &mut R) -> Result<DecoderModel> {
    config.validate()?;
    let DecoderConfig {
        hidden_size: h,
        embed_dim: e,
        vocab_size: v,
        feature_dim: f,
        ..
    } = *config;
    let embedding = glorot(v, e, rng);
    let mut cell = LstmCell::zeros(e, h);
    for gate in cell.gates_mut() {
        gate.input = glorot(e, h, rng);
        gate.recurrent = glorot(h, h, rng);
    }
    let image_proj = Dense {
        weight: glorot(f, e, rng),
        bias: Tensor::zeros(&[e]),
    };
    let output = Dense {
        weight: glorot(h, v, rng),
        bias: Tensor::zeros(&[v]),
    };
    Ok(DecoderModel {
        config: *config,
        embedding,
        cell,
        image_proj,
        output,
    })
}

/// Recurrent state between decoding steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

/// Teacher-forced logits with targets aligned row by row (`PAD` = no target).
#[derive(Debug, Clone)]
pub struct TeacherForced {
    pub logits: Tensor,
    pub targets: Vec<usize>,
}

impl DecoderModel {
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("decoder.embedding".to_string(), &self.embedding)];
        for (name, gate) in ["input", "forget", "output", "candidate"].iter().zip(self.cell.gates()) {
            out.push((format!("decoder.lstm.{name}.input"), &gate.input));
            out.push((format!("decoder.lstm.{name}.recurrent"), &gate.recurrent));
            out.push((format!("decoder.lstm.{name}.bias"), &gate.bias));
        }
        out.push(("decoder.image_proj.weight".into(), &self.image_proj.weight));
        out.push(("decoder.image_proj.bias".into(), &self.image_proj.bias));
        out.push(("decoder.output.weight".into(), &self.output.weight));
        out.push(("decoder.output.bias".into(), &self.output.bias));
        out
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.named_parameters().into_iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    fn slots_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embedding];
        for gate in self.cell.gates_mut() {
            out.push(&mut gate.input);
            out.push(&mut gate.recurrent);
            out.push(&mut gate.bias);
        }
        out.extend([
            &mut self.image_proj.weight,
            &mut self.image_proj.bias,
            &mut self.output.weight,
            &mut self.output.bias,
        ]);
        out
    }

    pub fn with_parameters(&self, params: Vec<Tensor>) -> Result<Self> {
        let mut next = self.clone();
        let slots = next.slots_mut();
        if slots.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "with_parameters",
                lhs: vec![slots.len()],
                rhs: vec![params.len()],
            });
        }
        for (slot, p) in slots.into_iter().zip(params) {
            if slot.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "with_parameters",
                    lhs: slot.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            *slot = p.detach();
        }
        Ok(next)
    }

    pub fn bind(&self, tape: &mut Tape) -> Self {
        let mut bound = self.clone();
        for slot in bound.slots_mut() {
            *slot = tape.param(slot);
        }
        bound
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        for &t in tokens {
            if t >= self.config.vocab_size {
                return Err(Error::Index {
                    op: "decoder",
                    index: t,
                    bound: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn check_feature(&self, feature: &Tensor) -> Result<()> {
        if feature.shape() != [self.config.feature_dim] {
            return Err(Error::ShapeMismatch {
                op: "decoder feature",
                lhs: vec![self.config.feature_dim],
                rhs: feature.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn embed(&self, tape: &mut Tape, token: usize) -> Result<Tensor> {
        let row = tape.embedding(&self.embedding, &[token])?;
        tape.reshape(&row, &[self.config.embed_dim])
    }

    fn image_step(&self, tape: &mut Tape, feature: &Tensor) -> Result<LstmState> {
        self.check_feature(feature)?;
        let x = self.image_proj.forward(tape, feature)?;
        let zeros = Tensor::zeros(&[self.config.hidden_size]);
        let (h, c) = self.cell.step(tape, &x, &zeros, &zeros)?;
        Ok(LstmState { h, c })
    }

    fn project<R: Rng + ?Sized>(&self, tape: &mut Tape, h: &Tensor, mode: Mode, rng: &mut R) -> Result<Tensor> {
        let h = tape.dropout(h, self.config.dropout_p, mode, rng)?;
        self.output.forward(tape, &h)
    }

    /// Logit rows for a START…END caption, optionally followed by PAD.
    pub fn teacher_forced<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        feature: &Tensor,
        caption: &[usize],
        mode: Mode,
        rng: &mut R,
    ) -> Result<TeacherForced> {
        let content = caption.len() - caption.iter().rev().take_while(|&&t| t == PAD).count();
        if content < 2 || caption[0] != START || caption[content - 1] != END {
            return Err(Error::Data(format!(
                "caption must run START … END (optionally PAD-padded), got {caption:?}"
            )));
        }
        if content > self.config.max_caption_len {
            return Err(Error::Data(format!(
                "caption of {content} tokens exceeds max_caption_len {}",
                self.config.max_caption_len
            )));
        }
        self.check_tokens(caption)?;
        let mut state = self.image_step(tape, feature)?;
        let mut rows = Vec::with_capacity(caption.len());
        rows.push(self.project(tape, &state.h, mode, rng)?);
        for &token in &caption[..caption.len() - 1] {
            let x = self.embed(tape, token)?;
            let (h, c) = self.cell.step(tape, &x, &state.h, &state.c)?;
            state = LstmState { h, c };
            rows.push(self.project(tape, &state.h, mode, rng)?);
        }
        let logits = tape.concat_rows(&rows)?;
        let mut targets = Vec::with_capacity(caption.len());
        targets.push(PAD);
        targets.extend_from_slice(&caption[1..]);
        Ok(TeacherForced { logits, targets })
    }

    /// State after consuming the image. Feed START to
    /// [`advance`](Self::advance) to get the first word distribution.
    pub fn start(&self, feature: &Tensor) -> Result<LstmState> {
        let mut tape = Tape::new();
        let s = self.image_step(&mut tape, feature)?;
        Ok(LstmState {
            h: s.h.detach(),
            c: s.c.detach(),
        })
    }

    /// Consumes `token` and returns the next state and log-probabilities
    /// over the vocabulary (dropout off).
    pub fn advance(&self, state: &LstmState, token: usize) -> Result<(LstmState, Vec<f64>)> {
        self.check_tokens(&[token])?;
        let mut tape = Tape::new();
        let x = self.embed(&mut tape, token)?;
        let (h, c) = self.cell.step(&mut tape, &x, &state.h, &state.c)?;
        let logits = self.output.forward(&mut tape, &h)?;
        let logp = log_softmax_row(logits.data());
        Ok((
            LstmState {
                h: h.detach(),
                c: c.detach(),
            },
            logp,
        ))
    }
}

/// Teacher-forced logits `[T, V]` and mean cross-entropy (PAD ignored).
pub fn decode_train<R: Rng + ?Sized>(
    model: &DecoderModel,
    feature: &Tensor,
    caption: &[usize],
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor, f64)> {
    let mut tape = Tape::new();
    let tf = model.teacher_forced(&mut tape, feature, caption, mode, rng)?;
    let loss = tape.cross_entropy(&tf.logits, &tf.targets, Some(PAD))?;
    Ok((tf.logits.detach(), loss.item().unwrap_or(0.0)))
}

/// Tokens a decoder may emit: everything except PAD and START.
fn emittable(token: usize) -> bool {
    token != PAD && token != START
}

/// Best emittable token; ties go to the lowest id.
fn best_token(logp: &[f64]) -> usize {
    let mut best = END;
    for (t, &lp) in logp.iter().enumerate() {
        if emittable(t) && lp > logp[best] {
            best = t;
        }
    }
    best
}

/// Argmax decoding. Stops at END (not included) or after `max_len` tokens.
pub fn greedy_decode(model: &DecoderModel, feature: &Tensor, max_len: usize) -> Result<Vec<usize>> {
    let mut state = model.start(feature)?;
    let mut token = START;
    let mut out = Vec::new();
    for _ in 0..max_len {
        let (next, logp) = model.advance(&state, token)?;
        token = best_token(&logp);
        if token == END {
            break;
        }
        out.push(token);
        state = next;
    }
    Ok(out)
}

/// A scored decoding result. `tokens` excludes END; `steps` counts every
/// scored token including END when it was emitted.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub steps: usize,
    pub finished: bool,
}

impl Hypothesis {
    /// Length-normalised score.
    pub fn score(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.log_prob / self.steps as f64
        }
    }

    /// Emitted sequence including the END marker, used for tie-breaking.
    fn emitted(&self) -> Vec<usize> {
        let mut v = self.tokens.clone();
        if self.finished {
            v.push(END);
        }
        v
    }
}

/// Higher score first; equal scores go to the lexicographically lower sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score()
        .partial_cmp(&a.score())
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.emitted().cmp(&b.emitted()))
}

struct Live {
    hyp: Hypothesis,
    state: LstmState,
    last: usize,
}

/// Length-normalised beam search returning every surviving hypothesis,
/// best first. Hypotheses that emit END leave the beam, shrinking it.
pub fn beam_search(
    model: &DecoderModel,
    feature: &Tensor,
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if beam_width == 0 {
        return Err(Error::config("beam width must be at least 1"));
    }
    let mut alive = vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            steps: 0,
            finished: false,
        },
        state: model.start(feature)?,
        last: START,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        let slots = beam_width - finished.len();
        if alive.is_empty() || slots == 0 {
            break;
        }
        // (parent, token, token logp, cumulative logp)
        let mut cands: Vec<(usize, usize, f64, f64)> = Vec::new();
        let mut next_states = Vec::with_capacity(alive.len());
        for (pi, live) in alive.iter().enumerate() {
            let (next, logp) = model.advance(&live.state, live.last)?;
            for (t, &lp) in logp.iter().enumerate() {
                if emittable(t) {
                    cands.push((pi, t, lp, live.hyp.log_prob + lp));
                }
            }
            next_states.push(next);
        }
        // Candidates share a length, so raw sums order them. Within one
        // parent the token's own log-prob settles rounding ties.
        cands.sort_by(|a, b| {
            b.3.partial_cmp(&a.3)
                .unwrap_or(Ordering::Equal)
                .then_with(|| {
                    if a.0 == b.0 {
                        b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal)
                    } else {
                        Ordering::Equal
                    }
                })
                .then_with(|| {
                    let pa = &alive[a.0].hyp.tokens;
                    let pb = &alive[b.0].hyp.tokens;
                    pa.iter().chain([&a.1]).cmp(pb.iter().chain([&b.1]))
                })
        });
        cands.truncate(slots);
        let mut survivors = Vec::with_capacity(cands.len());
        for (pi, token, _, total) in cands {
            let parent = &alive[pi];
            let steps = parent.hyp.steps + 1;
            if token == END {
                finished.push(Hypothesis {
                    tokens: parent.hyp.tokens.clone(),
                    log_prob: total,
                    steps,
                    finished: true,
                });
            } else {
                let mut tokens = parent.hyp.tokens.clone();
                tokens.push(token);
                survivors.push(Live {
                    hyp: Hypothesis {
                        tokens,
                        log_prob: total,
                        steps,
                        finished: false,
                    },
                    state: next_states[pi].clone(),
                    last: token,
                });
            }
        }
        alive = survivors;
    }
    let mut all: Vec<Hypothesis> = finished.into_iter().chain(alive.into_iter().map(|l| l.hyp)).collect();
    all.sort_by(rank);
    Ok(all)
}

/// Best sequence from [`beam_search`], END excluded.
pub fn beam_decode(model: &DecoderModel, feature: &Tensor, beam_width: usize, max_len: usize) -> Result<Vec<usize>> {
    Ok(beam_search(model, feature, beam_width, max_len)?
        .into_iter()
        .next()
        .map(|h| h.tokens)
        .unwrap_or_default())
}

/// Scores a complete emitted sequence under the same rules as the searches:
/// `tokens` must contain no END, and END is scored when `tokens.len() < max_len`.
pub fn score_sequence(model: &DecoderModel, feature: &Tensor, tokens: &[usize], max_len: usize) -> Result<Hypothesis> {
    let mut state = model.start(feature)?;
    let mut last = START;
    let mut total = 0.0;
    for &t in tokens {
        let (next, logp) = model.advance(&state, last)?;
        total += logp[t];
        state = next;
        last = t;
    }
    let finished = tokens.len() < max_len;
    if finished {
        let (_, logp) = model.advance(&state, last)?;
        total += logp[END];
    }
    Ok(Hypothesis {
        tokens: tokens.to_vec(),
        log_prob: total,
        steps: tokens.len() + usize::from(finished),
        finished,
    })
}

/// Decoder captions grouped with precomputed image features.
#[derive(Debug, Clone, Copy)]
pub struct CaptionSet<'a> {
    pub features: &'a [Tensor],
    pub pairs: &'a [CaptionPair],
}

/// Teacher-forced loss and token accuracy in eval mode.
pub fn evaluate_decoder(model: &DecoderModel, data: CaptionSet<'_>) -> Result<(f64, f64)> {
    let mut stats = EpochStats::default();
    // eval mode never draws from the rng
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    for pair in data.pairs {
        let mut tape = Tape::new();
        let tf = model.teacher_forced(
            &mut tape,
            &data.features[pair.image],
            &pair.tokens,
            Mode::Eval,
            &mut rng,
        )?;
        let loss = tape.cross_entropy(&tf.logits, &tf.targets, Some(PAD))?;
        let acc = token_accuracy(&tf.logits, &tf.targets, PAD)?;
        stats.add(loss.item().unwrap_or(0.0), acc.total, acc.correct);
    }
    Ok((stats.loss(), stats.accuracy()))
}

#[derive(Debug, Clone)]
pub struct DecoderTraining {
    pub model: DecoderModel,
    /// Weights with the lowest validation loss (final weights without validation data).
    pub best: DecoderModel,
    pub best_epoch: usize,
    pub curve: Vec<CurvePoint>,
}

/// Adam training of the decoder on frozen features.
pub fn train_decoder<R: Rng + ?Sized>(
    model: &DecoderModel,
    train: CaptionSet<'_>,
    val: Option<CaptionSet<'_>>,
    adam: &AdamConfig,
    epochs: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<DecoderTraining> {
    if train.pairs.is_empty() {
        return Err(Error::Data("decoder training needs at least one caption".into()));
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let val = val.filter(|v| !v.pairs.is_empty());
    let mut current = model.clone();
    let mut optimizer = Optimizer::adam(*adam, &current.parameters())?;
    let mut curve = Vec::with_capacity(epochs);
    let mut best = (current.clone(), 0usize, f64::INFINITY);

    for epoch in 1..=epochs {
        let mut stats = EpochStats::default();
        for batch in pair_batches(train.pairs, batch_size, rng, true) {
            let mut tape = Tape::new();
            let bound = current.bind(&mut tape);
            let mut rows = Vec::with_capacity(batch.len());
            let mut targets = Vec::new();
            for (image, tokens) in batch.items.iter().zip(&batch.tokens) {
                let tf = bound.teacher_forced(&mut tape, &train.features[*image], tokens, Mode::Train, rng)?;
                rows.push(tf.logits);
                targets.extend(tf.targets);
            }
            let logits = tape.concat_rows(&rows)?;
            let loss = tape.cross_entropy(&logits, &targets, Some(PAD))?;
            let acc = token_accuracy(&logits, &targets, PAD)?;
            let grads = tape.backward(&loss)?;
            let g: Vec<Tensor> = bound.parameters().iter().map(|p| grads.get_or_zeros(p)).collect();
            current = current.with_parameters(optimizer.step(&current.parameters(), &g)?)?;
            stats.add(loss.item().unwrap_or(0.0), acc.total, acc.correct);
        }
        let (val_loss, val_acc) = match val {
            Some(v) => {
                let (l, a) = evaluate_decoder(&current, v)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        if val_loss.is_none_or(|l| l < best.2) {
            best = (current.clone(), epoch, val_loss.unwrap_or(f64::INFINITY));
        }
        curve.push(CurvePoint {
            epoch,
            train_loss: stats.loss(),
            train_accuracy: stats.accuracy(),
            val_loss,
            val_accuracy: val_acc,
        });
    }
    Ok(DecoderTraining {
        model: current,
        best: best.0,
        best_epoch: best.1,
        curve,
    })
}
