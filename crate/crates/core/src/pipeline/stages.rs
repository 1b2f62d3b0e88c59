use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta, Stage, StoredMetrics};
use super::config::RunConfig;
use super::curves::export_curves;
use crate::autograd::{Mode, Tape};
use crate::curve::{CurvePoint, EpochStats};
use crate::data::{
    build_vocabulary, caption_pairs, detokenize, load_image, pair_batches, split_dataset, tokenize, CaptionPair,
    DatasetManifest, Vocabulary, PAD,
};
use crate::decoder::{
    beam_decode, build_decoder, evaluate_decoder, greedy_decode, train_decoder, CaptionSet, DecoderModel,
};
use crate::encoder::{build_encoder, evaluate_classifier, train_encoder, EncoderModel, LabeledImages};
use crate::error::{Error, Result};
use crate::metrics::{bleu, corpus_meteor, token_accuracy, BleuSummary, EvaluationReport, TokenAccuracy};
use crate::optim::Optimizer;
use crate::tensor::Tensor;

// Independent ChaCha streams per stochastic step.
const STREAM_ENCODER_INIT: u64 = 1;
const STREAM_STAGE1: u64 = 2;
const STREAM_DECODER_INIT: u64 = 3;
const STREAM_STAGE2: u64 = 4;
const STREAM_JOINT: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Loads every image of `manifest`, in order. Decoding runs in parallel.
pub fn load_images(manifest: &DatasetManifest, size: (usize, usize)) -> Result<Vec<Tensor>> {
    manifest
        .samples
        .par_iter()
        .map(|s| load_image(&manifest.image_path(s), size, true))
        .collect()
}

/// A split manifest with its images and the training vocabulary.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub vocabulary: Vocabulary,
    pub train_images: Vec<Tensor>,
    pub val_images: Vec<Tensor>,
}

impl PreparedData {
    pub fn new(config: &RunConfig, manifest: &DatasetManifest) -> Result<Self> {
        config.validate()?;
        if manifest.is_empty() {
            return Err(Error::Data("manifest has no samples".into()));
        }
        let (train, val) = split_dataset(manifest, config.val_fraction, config.seed)?;
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let vocabulary = build_vocabulary(&train, config.vocab_min_freq)?;
        let size = config.image_size();
        Ok(Self {
            train_images: load_images(&train, size)?,
            val_images: load_images(&val, size)?,
            train,
            val,
            vocabulary,
        })
    }

    pub fn train_pairs(&self, config: &RunConfig) -> Vec<CaptionPair> {
        caption_pairs(&self.train.samples, &self.vocabulary, config.decoder.max_caption_len)
    }

    pub fn val_pairs(&self, config: &RunConfig) -> Vec<CaptionPair> {
        caption_pairs(&self.val.samples, &self.vocabulary, config.decoder.max_caption_len)
    }
}

fn meta(config: &RunConfig, stage: Stage, vocabulary: &Vocabulary, best: Option<CurvePoint>) -> CheckpointMeta {
    CheckpointMeta {
        stage,
        best,
        metrics: StoredMetrics::default(),
        vocabulary: vocabulary.clone(),
        config: config.clone(),
    }
}

fn best_point(curve: &[CurvePoint], epoch: usize) -> Option<CurvePoint> {
    curve.iter().find(|p| p.epoch == epoch).cloned()
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub curve: Vec<CurvePoint>,
}

/// Stage 1: classification training of the encoder with SGD.
pub fn train_stage1(config: &RunConfig, manifest: &DatasetManifest) -> Result<StageOutput> {
    let data = PreparedData::new(config, manifest)?;
    train_stage1_prepared(config, &data)
}

pub fn train_stage1_prepared(config: &RunConfig, data: &PreparedData) -> Result<StageOutput> {
    let encoder = build_encoder(&config.encoder, &mut stream(config.seed, STREAM_ENCODER_INIT))?;
    let labels: Vec<usize> = data.train.samples.iter().map(|s| s.class_id).collect();
    let val_labels: Vec<usize> = data.val.samples.iter().map(|s| s.class_id).collect();
    let train = LabeledImages {
        images: &data.train_images,
        labels: &labels,
    };
    let val = LabeledImages {
        images: &data.val_images,
        labels: &val_labels,
    };
    let run = train_encoder(
        &encoder,
        train,
        Some(val).filter(|v| !v.is_empty()),
        &config.sgd,
        config.epochs.stage1,
        config.batch_size.stage1,
        &mut stream(config.seed, STREAM_STAGE1),
    )?;
    let best = best_point(&run.curve, run.best_epoch);
    let mut checkpoint = Checkpoint::from_models(&run.best, None, meta(config, Stage::Stage1, &data.vocabulary, best));
    if !val.is_empty() {
        let (loss, acc) = evaluate_classifier(&checkpoint.encoder()?, val)?;
        checkpoint.meta.metrics = StoredMetrics {
            val_loss: Some(loss),
            val_accuracy: Some(acc),
        };
    }
    Ok(StageOutput {
        checkpoint,
        curve: run.curve,
    })
}

/// Encoder features computed once per image, with a count of encoder calls.
#[derive(Debug)]
pub struct FeatureCache {
    features: Vec<Tensor>,
    calls: AtomicUsize,
}

impl FeatureCache {
    pub fn build(encoder: &EncoderModel, images: &[Tensor]) -> Result<Self> {
        let calls = AtomicUsize::new(0);
        let features = images
            .par_iter()
            .map(|img| {
                calls.fetch_add(1, Ordering::Relaxed);
                encoder.encode(img)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { features, calls })
    }

    pub fn features(&self) -> &[Tensor] {
        &self.features
    }

    pub fn encoder_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub checkpoint: Checkpoint,
    pub curve: Vec<CurvePoint>,
    /// Encoder forward passes made while building the feature cache.
    pub encoder_calls: usize,
}

fn check_encoder_compatible(config: &RunConfig, checkpoint: &Checkpoint) -> Result<()> {
    let c = &checkpoint.meta.config;
    if c.encoder != config.encoder || c.image_mode != config.image_mode {
        return Err(Error::config(format!(
            "{:?} checkpoint was trained with a different encoder or image mode",
            checkpoint.meta.stage
        )));
    }
    Ok(())
}

/// Stage 2: Adam training of the decoder on features from the frozen stage 1 encoder.
pub fn train_stage2(config: &RunConfig, manifest: &DatasetManifest, stage1: &Checkpoint) -> Result<Stage2Output> {
    let data = PreparedData::new(config, manifest)?;
    train_stage2_prepared(config, &data, stage1)
}

pub fn train_stage2_prepared(config: &RunConfig, data: &PreparedData, stage1: &Checkpoint) -> Result<Stage2Output> {
    check_encoder_compatible(config, stage1)?;
    let encoder = stage1.encoder()?;
    let train_cache = FeatureCache::build(&encoder, &data.train_images)?;
    let val_cache = FeatureCache::build(&encoder, &data.val_images)?;
    let decoder = build_decoder(
        &config.decoder_config(data.vocabulary.len()),
        &mut stream(config.seed, STREAM_DECODER_INIT),
    )?;
    let train_pairs = data.train_pairs(config);
    let val_pairs = data.val_pairs(config);
    let val = CaptionSet {
        features: val_cache.features(),
        pairs: &val_pairs,
    };
    let run = train_decoder(
        &decoder,
        CaptionSet {
            features: train_cache.features(),
            pairs: &train_pairs,
        },
        Some(val),
        &config.adam,
        config.epochs.stage2,
        config.batch_size.stage2,
        &mut stream(config.seed, STREAM_STAGE2),
    )?;
    let best = best_point(&run.curve, run.best_epoch);
    let mut checkpoint = Checkpoint::from_models(
        &encoder,
        Some(&run.best),
        meta(config, Stage::Stage2, &data.vocabulary, best),
    );
    if !val_pairs.is_empty() {
        let (loss, acc) = evaluate_decoder(&checkpoint.decoder()?, val)?;
        checkpoint.meta.metrics = StoredMetrics {
            val_loss: Some(loss),
            val_accuracy: Some(acc),
        };
    }
    Ok(Stage2Output {
        checkpoint,
        curve: run.curve,
        encoder_calls: train_cache.encoder_calls() + val_cache.encoder_calls(),
    })
}

/// Teacher-forced loss and token accuracy of the stitched model (eval mode).
pub fn evaluate_joint(
    encoder: &EncoderModel,
    decoder: &DecoderModel,
    images: &[Tensor],
    pairs: &[CaptionPair],
) -> Result<(f64, f64)> {
    let cache = FeatureCache::build(encoder, images)?;
    evaluate_decoder(
        decoder,
        CaptionSet {
            features: cache.features(),
            pairs,
        },
    )
}

fn joint_init(
    config: &RunConfig,
    data: &PreparedData,
    init: Option<&Checkpoint>,
) -> Result<(EncoderModel, DecoderModel)> {
    if config.from_scratch {
        let encoder = build_encoder(&config.encoder, &mut stream(config.seed, STREAM_ENCODER_INIT))?;
        let decoder = build_decoder(
            &config.decoder_config(data.vocabulary.len()),
            &mut stream(config.seed, STREAM_DECODER_INIT),
        )?;
        return Ok((encoder, decoder));
    }
    let ck =
        init.ok_or_else(|| Error::config("joint training needs a stage 2 checkpoint unless from_scratch is set"))?;
    check_encoder_compatible(config, ck)?;
    if ck.meta.config.decoder != config.decoder {
        return Err(Error::config(
            "stage 2 checkpoint was trained with different decoder settings",
        ));
    }
    if ck.meta.vocabulary != data.vocabulary {
        return Err(Error::config(
            "stage 2 checkpoint vocabulary differs from this dataset's",
        ));
    }
    Ok((ck.encoder()?, ck.decoder()?))
}

/// Stage 3: end-to-end Adam training of encoder and decoder together.
pub fn train_joint(config: &RunConfig, manifest: &DatasetManifest, init: Option<&Checkpoint>) -> Result<StageOutput> {
    let data = PreparedData::new(config, manifest)?;
    train_joint_prepared(config, &data, init)
}

pub fn train_joint_prepared(config: &RunConfig, data: &PreparedData, init: Option<&Checkpoint>) -> Result<StageOutput> {
    let (mut encoder, mut decoder) = joint_init(config, data, init)?;
    let train_pairs = data.train_pairs(config);
    let val_pairs = data.val_pairs(config);
    let n_enc = encoder.parameters().len();
    let all_params = |e: &EncoderModel, d: &DecoderModel| {
        let mut p = e.parameters();
        p.extend(d.parameters());
        p
    };
    let mut optimizer = Optimizer::adam(config.adam, &all_params(&encoder, &decoder))?;
    let mut rng = stream(config.seed, STREAM_JOINT);
    let mut curve = Vec::with_capacity(config.epochs.stage3);
    let mut best = (encoder.clone(), decoder.clone(), 0usize, f64::INFINITY);

    for epoch in 1..=config.epochs.stage3 {
        let mut stats = EpochStats::default();
        for batch in pair_batches(&train_pairs, config.batch_size.stage3, &mut rng, true) {
            let mut tape = Tape::new();
            let enc = encoder.bind(&mut tape);
            let dec = decoder.bind(&mut tape);
            let mut features: BTreeMap<usize, Tensor> = BTreeMap::new();
            for &image in &batch.items {
                if let std::collections::btree_map::Entry::Vacant(slot) = features.entry(image) {
                    slot.insert(enc.forward(&mut tape, &data.train_images[image])?.feature);
                }
            }
            let mut rows = Vec::with_capacity(batch.len());
            let mut targets = Vec::new();
            for (image, tokens) in batch.items.iter().zip(&batch.tokens) {
                let tf = dec.teacher_forced(&mut tape, &features[image], tokens, Mode::Train, &mut rng)?;
                rows.push(tf.logits);
                targets.extend(tf.targets);
            }
            let logits = tape.concat_rows(&rows)?;
            let loss = tape.cross_entropy(&logits, &targets, Some(PAD))?;
            let acc = token_accuracy(&logits, &targets, PAD)?;
            let grads = tape.backward(&loss)?;
            let g: Vec<Tensor> = all_params(&enc, &dec).iter().map(|p| grads.get_or_zeros(p)).collect();
            let mut next = optimizer.step(&all_params(&encoder, &decoder), &g)?;
            let dec_params = next.split_off(n_enc);
            encoder = encoder.with_parameters(next)?;
            decoder = decoder.with_parameters(dec_params)?;
            stats.add(loss.item().unwrap_or(0.0), acc.total, acc.correct);
        }
        let (val_loss, val_accuracy) = if val_pairs.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_joint(&encoder, &decoder, &data.val_images, &val_pairs)?;
            (Some(l), Some(a))
        };
        if val_loss.is_none_or(|l| l < best.3) {
            best = (
                encoder.clone(),
                decoder.clone(),
                epoch,
                val_loss.unwrap_or(f64::INFINITY),
            );
        }
        curve.push(CurvePoint {
            epoch,
            train_loss: stats.loss(),
            train_accuracy: stats.accuracy(),
            val_loss,
            val_accuracy,
        });
    }

    let point = best_point(&curve, best.2);
    let mut checkpoint = Checkpoint::from_models(
        &best.0,
        Some(&best.1),
        meta(config, Stage::Joint, &data.vocabulary, point),
    );
    if !val_pairs.is_empty() {
        let (loss, acc) = evaluate_joint(
            &checkpoint.encoder()?,
            &checkpoint.decoder()?,
            &data.val_images,
            &val_pairs,
        )?;
        checkpoint.meta.metrics = StoredMetrics {
            val_loss: Some(loss),
            val_accuracy: Some(acc),
        };
    }
    Ok(StageOutput { checkpoint, curve })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

/// Word budget for decoding: the longest training caption minus START and END.
fn decode_budget(checkpoint: &Checkpoint) -> usize {
    checkpoint.meta.config.decoder.max_caption_len.saturating_sub(2).max(1)
}

fn decode_ids(
    checkpoint: &Checkpoint,
    decoder: &DecoderModel,
    feature: &Tensor,
    mode: DecodeMode,
) -> Result<Vec<usize>> {
    let budget = decode_budget(checkpoint);
    match mode {
        DecodeMode::Greedy => greedy_decode(decoder, feature, budget),
        DecodeMode::Beam(k) => beam_decode(decoder, feature, k, budget),
    }
}

/// Caption for an already loaded `[3,H,W]` image.
pub fn caption_tensor(checkpoint: &Checkpoint, image: &Tensor, mode: DecodeMode) -> Result<String> {
    let encoder = checkpoint.encoder()?;
    let decoder = checkpoint.decoder()?;
    let ids = decode_ids(checkpoint, &decoder, &encoder.encode(image)?, mode)?;
    Ok(detokenize(&checkpoint.meta.vocabulary.decode(&ids)))
}

/// Load, encode, decode and detokenize one image.
pub fn caption_image(checkpoint: &Checkpoint, path: &Path, mode: DecodeMode) -> Result<String> {
    let image = load_image(path, checkpoint.meta.config.image_size(), true)?;
    caption_tensor(checkpoint, &image, mode)
}

/// Greedy captions for every sample, scored against all of its references.
pub fn evaluate(checkpoint: &Checkpoint, manifest: &DatasetManifest) -> Result<EvaluationReport> {
    if manifest.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let encoder = checkpoint.encoder()?;
    let decoder = checkpoint.decoder()?;
    let vocab = &checkpoint.meta.vocabulary;
    let images = load_images(manifest, checkpoint.meta.config.image_size())?;
    let cache = FeatureCache::build(&encoder, &images)?;
    let candidates: Vec<Vec<String>> = cache
        .features()
        .par_iter()
        .map(|f| Ok(vocab.decode(&decode_ids(checkpoint, &decoder, f, DecodeMode::Greedy)?)))
        .collect::<Result<_>>()?;
    let references: Vec<Vec<Vec<String>>> = manifest
        .samples
        .iter()
        .map(|s| s.captions.iter().map(|c| tokenize(c)).collect())
        .collect();
    let bleu_report = bleu(&candidates, &references)?;
    let meteor = corpus_meteor(&candidates, &references)?;

    let pairs = caption_pairs(&manifest.samples, vocab, checkpoint.meta.config.decoder.max_caption_len);
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut acc = TokenAccuracy::default();
    for pair in &pairs {
        let mut tape = Tape::new();
        let tf = decoder.teacher_forced(
            &mut tape,
            &cache.features()[pair.image],
            &pair.tokens,
            Mode::Eval,
            &mut rng,
        )?;
        acc += token_accuracy(&tf.logits, &tf.targets, PAD)?;
    }
    Ok(EvaluationReport {
        bleu: BleuSummary::from(&bleu_report),
        meteor,
        samples: manifest.len(),
        token_accuracy: acc.fraction(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Train,
    Val,
}

/// The part of `manifest` selected by the split settings stored in `checkpoint`.
pub fn select_split(checkpoint: &Checkpoint, manifest: &DatasetManifest, split: Split) -> Result<DatasetManifest> {
    let config = &checkpoint.meta.config;
    let (train, val) = split_dataset(manifest, config.val_fraction, config.seed)?;
    Ok(match split {
        Split::All => manifest.clone(),
        Split::Train => train,
        Split::Val => val,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub hidden_size: usize,
    #[serde(flatten)]
    pub report: EvaluationReport,
}

/// Retrains stage 2 for each decoder width on top of the checkpoint's
/// encoder and evaluates on the validation split (the training split when
/// there is none).
pub fn hidden_sweep(
    config: &RunConfig,
    manifest: &DatasetManifest,
    encoder: &Checkpoint,
    hidden_sizes: &[usize],
) -> Result<Vec<SweepEntry>> {
    let data = PreparedData::new(config, manifest)?;
    let held_out = if data.val.is_empty() { &data.train } else { &data.val };
    hidden_sizes
        .iter()
        .map(|&hidden_size| {
            let mut c = config.clone();
            c.decoder.hidden_size = hidden_size;
            let out = train_stage2_prepared(&c, &data, encoder)?;
            Ok(SweepEntry {
                hidden_size,
                report: evaluate(&out.checkpoint, held_out)?,
            })
        })
        .collect()
}

/// File names written by [`run_all`] and the CLI.
pub fn checkpoint_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(match stage {
        Stage::Stage1 => "stage1.tmck",
        Stage::Stage2 => "stage2.tmck",
        Stage::Joint => "joint.tmck",
    })
}

pub fn curve_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(match stage {
        Stage::Stage1 => "stage1_curve.csv",
        Stage::Stage2 => "stage2_curve.csv",
        Stage::Joint => "joint_curve.csv",
    })
}

pub fn write_stage(dir: &Path, stage: Stage, checkpoint: &Checkpoint, curve: &[CurvePoint]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    checkpoint.save(&checkpoint_path(dir, stage))?;
    export_curves(curve, &curve_path(dir, stage))
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub stage1: StageOutput,
    pub stage2: Stage2Output,
    pub joint: StageOutput,
    /// Evaluation of the joint model on the validation split, or on the
    /// training split when there is none.
    pub report: EvaluationReport,
}

/// All three stages plus evaluation. Artifacts go to `out_dir`.
pub fn run_all(config: &RunConfig, manifest: &DatasetManifest, out_dir: &Path) -> Result<RunSummary> {
    let data = PreparedData::new(config, manifest)?;
    let stage1 = train_stage1_prepared(config, &data)?;
    write_stage(out_dir, Stage::Stage1, &stage1.checkpoint, &stage1.curve)?;
    let stage2 = train_stage2_prepared(config, &data, &stage1.checkpoint)?;
    write_stage(out_dir, Stage::Stage2, &stage2.checkpoint, &stage2.curve)?;
    let joint = train_joint_prepared(config, &data, Some(&stage2.checkpoint))?;
    write_stage(out_dir, Stage::Joint, &joint.checkpoint, &joint.curve)?;
    let held_out = if data.val.is_empty() { &data.train } else { &data.val };
    let report = evaluate(&joint.checkpoint, held_out)?;
    let path = out_dir.join("report.json");
    std::fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(RunSummary {
        stage1,
        stage2,
        joint,
        report,
    })
}
