//! One function per headline claim, shared by the focused test files and the
//! acceptance target. Each returns a one-line summary or the first failure.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use textmage::data::{build_vocabulary_from_captions, generate_synthetic_dataset, load_manifest, END, PAD, START};
use textmage::decoder::{
    beam_decode, beam_search, build_decoder, greedy_decode, score_sequence, DecoderConfig, DecoderModel,
};
use textmage::encoder::{build_encoder, EncoderConfig};
use textmage::metrics::{bleu, meteor};
use textmage::optim::{adam_step, sgd_step, AdamConfig, AdamState, Optimizer, SgdConfig, SgdState};
use textmage::pipeline::{run_all, Checkpoint, CheckpointMeta, RunConfig, Stage, StoredMetrics};
use textmage::{Error, Mode, Tape, Tensor};

use super::{bleu_oracle, exhaustive_best, gradsuite, meteor_alignment_oracle, micro_corpus, rng, uniform, REL_TOL};

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

pub fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let mut worst = (0.0f64, "");
    let mut checked = 0;
    for (name, check) in gradsuite::all() {
        let rep = check(gradsuite::CASES);
        ensure!(rep.checked > 0, "{name}: no coordinates checked");
        ensure!(rep.max_rel < REL_TOL, "{name}: max relative error {:.3e}", rep.max_rel);
        ensure!(rep.skipped * 20 <= rep.checked, "{name}: {} kink skips", rep.skipped);
        checked += rep.checked;
        if rep.max_rel > worst.0 {
            worst = (rep.max_rel, name);
        }
    }
    let took = t0.elapsed();
    ensure!(took < Duration::from_secs(120), "suite took {took:?}");
    Ok(format!(
        "{} ops x {} cases, {checked} coordinates, worst {:.2e} ({}), {:.1}s",
        gradsuite::all().len(),
        gradsuite::CASES,
        worst.0,
        worst.1,
        took.as_secs_f64()
    ))
}

pub fn bleu_micro_corpora(count: usize) -> Outcome {
    let mut r = rng(42);
    for case in 0..count {
        let (cands, refs) = micro_corpus(&mut r);
        let got = bleu(&cands, &refs).map_err(|e| e.to_string())?;
        let want = bleu_oracle(&cands, &refs);
        ensure!(
            got.matches == want.matches,
            "case {case}: matches {:?} vs {:?}",
            got.matches,
            want.matches
        );
        ensure!(
            got.totals == want.totals,
            "case {case}: totals {:?} vs {:?}",
            got.totals,
            want.totals
        );
        ensure!(got.precisions == want.precisions, "case {case}: precisions differ");
        ensure!(
            got.brevity_penalty == want.bp,
            "case {case}: bp {} vs {}",
            got.brevity_penalty,
            want.bp
        );
        ensure!(
            (got.candidate_length, got.reference_length) == (want.c, want.r),
            "case {case}: lengths differ"
        );
        ensure!(
            got.bleu == want.bleu,
            "case {case}: bleu {:?} vs {:?}",
            got.bleu,
            want.bleu
        );
    }
    Ok(format!("{count} micro-corpora identical"))
}

pub fn meteor_alignments(count: usize) -> Outcome {
    let mut r = rng(43);
    for case in 0..count {
        let v = r.gen_range(1..=4u8);
        let sent = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<u8> {
            (0..r.gen_range(0..=7)).map(|_| r.gen_range(0..v)).collect()
        };
        let (c, rf) = (sent(&mut r), sent(&mut r));
        let got = textmage::metrics::align(&c, &rf);
        let want = meteor_alignment_oracle(&c, &rf);
        ensure!(got == want, "case {case}: {c:?} vs {rf:?}: {got:?} != {want:?}");
    }
    Ok(format!("{count} alignments identical"))
}

pub fn metric_oracles() -> Outcome {
    let a = bleu_micro_corpora(500)?;
    let b = meteor_alignments(300)?;

    let the = || "the".to_string();
    let clip = bleu(&[vec![the(); 4]], &[vec![vec![the(), "cat".to_string()]]]).map_err(|e| e.to_string())?;
    ensure!(clip.bleu[0] == 25.0, "clipping example gives BLEU-1 {}", clip.bleu[0]);

    let sentence: Vec<&str> = "একটি লাল বৃত্ত ।".split(' ').collect();
    let ident = bleu(std::slice::from_ref(&sentence), &[vec![sentence.clone()]]).map_err(|e| e.to_string())?;
    ensure!(ident.bleu == [100.0; 4], "identity corpus gives {:?}", ident.bleu);

    let m = meteor(&sentence, std::slice::from_ref(&sentence)).map_err(|e| e.to_string())?;
    ensure!((m.score - 0.9921875).abs() < 1e-12, "identity METEOR {}", m.score);
    let disjoint = meteor(&["a", "b"], &[vec!["c", "d", "e"]]).map_err(|e| e.to_string())?;
    ensure!(disjoint.score.abs() < 1e-12, "disjoint METEOR {}", disjoint.score);
    Ok(format!("{a}; {b}; clip 25.0, identity 100.0, METEOR 0.9921875/0"))
}

fn scalar(x: f64) -> Vec<Tensor> {
    vec![Tensor::vector(&[x])]
}

fn minimise_square(mut opt: Optimizer, start: f64) -> Option<usize> {
    let mut theta = scalar(start);
    for step in 1..=1000 {
        let g = scalar(2.0 * theta[0].data()[0]);
        theta = opt.step(&theta, &g).ok()?;
        let x = theta[0].data()[0];
        if x * x < 1e-3 {
            return Some(step);
        }
    }
    None
}

pub fn optimizer_oracles() -> Outcome {
    let plain = SgdConfig {
        lr: 0.01,
        decay: 0.0,
        momentum: 0.0,
        nesterov: false,
    };
    let (p, _) =
        sgd_step(&scalar(1.0), &scalar(0.5), &SgdState::new(&scalar(1.0)), &plain, 0).map_err(|e| e.to_string())?;
    ensure!(p[0].data()[0] == 0.995, "plain SGD gives {}", p[0].data()[0]);

    let nesterov = SgdConfig {
        lr: 0.01,
        decay: 0.0,
        momentum: 0.7,
        nesterov: true,
    };
    let (p, _) =
        sgd_step(&scalar(1.0), &scalar(0.5), &SgdState::new(&scalar(1.0)), &nesterov, 0).map_err(|e| e.to_string())?;
    ensure!(p[0].data()[0] == 0.9915, "Nesterov SGD gives {}", p[0].data()[0]);

    let adam = AdamConfig::default();
    let mut r = rng(7);
    let theta = uniform(&[16], -1.0, 1.0, &mut r);
    let g = uniform(&[16], -1.0, 1.0, &mut r);
    let first = |grad: &Tensor| -> Vec<f64> {
        let (p, _) = adam_step(
            std::slice::from_ref(&theta),
            std::slice::from_ref(grad),
            &AdamState::new(std::slice::from_ref(&theta)),
            &adam,
        )
        .unwrap();
        p[0].data().iter().zip(theta.data()).map(|(a, b)| a - b).collect()
    };
    let base = first(&g);
    for k in [1e-3, 10.0, 1e4] {
        let scaled = first(&g.map(|x| x * k));
        let dev = base.iter().zip(&scaled).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure!(
            dev < 1e-6,
            "Adam first step changes by {dev:e} under gradient scale {k}"
        );
    }

    let sgd_steps = minimise_square(Optimizer::sgd(SgdConfig::default(), &scalar(1.0)).unwrap(), 1.0)
        .ok_or("SGD did not reach θ² < 1e-3")?;
    let adam_cfg = AdamConfig {
        lr: 0.01,
        ..AdamConfig::default()
    };
    let adam_steps =
        minimise_square(Optimizer::adam(adam_cfg, &scalar(1.0)).unwrap(), 1.0).ok_or("Adam did not reach θ² < 1e-3")?;
    Ok(format!(
        "0.995 and 0.9915 exact, Adam scale-invariant, θ² < 1e-3 after {sgd_steps} (SGD) / {adam_steps} (Adam) steps"
    ))
}

pub fn overfit(workdir: &Path, seed: u64) -> Outcome {
    let t0 = Instant::now();
    let data = workdir.join("data");
    let manifest = generate_synthetic_dataset(8, seed, &data).map_err(|e| e.to_string())?;
    ensure!(
        manifest.len() == 8 && manifest.caption_count() == 16,
        "dataset has wrong size"
    );
    let summary = run_all(&RunConfig::overfit(seed), &manifest, &workdir.join("run")).map_err(|e| e.to_string())?;
    let r = &summary.report;
    let took = t0.elapsed();
    ensure!(r.samples == 8, "report covers {} samples", r.samples);
    ensure!(r.token_accuracy >= 0.99, "token accuracy {:.4}", r.token_accuracy);
    ensure!(r.bleu.bleu1 == 100.0, "BLEU-1 {:.3}", r.bleu.bleu1);
    ensure!(took < Duration::from_secs(600), "took {took:?}");
    Ok(format!(
        "token accuracy {:.4}, BLEU-1 {:.1}, BLEU-4 {:.1}, {:.1}s",
        r.token_accuracy,
        r.bleu.bleu1,
        r.bleu.bleu4,
        took.as_secs_f64()
    ))
}

/// Small config with a validation split, so every code path runs.
pub fn quick_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::overfit(seed);
    c.epochs.stage1 = 2;
    c.epochs.stage2 = 3;
    c.epochs.stage3 = 2;
    c.val_fraction = 0.25;
    c.decoder.dropout_p = 0.3;
    c
}

fn artifact_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

pub fn determinism(workdir: &Path) -> Outcome {
    let manifest = generate_synthetic_dataset(8, 5, &workdir.join("data")).map_err(|e| e.to_string())?;
    let config = quick_config(11);
    let (a, b) = (workdir.join("a"), workdir.join("b"));
    run_all(&config, &manifest, &a).map_err(|e| e.to_string())?;
    run_all(&config, &manifest, &b).map_err(|e| e.to_string())?;
    let (fa, fb) = (artifact_bytes(&a), artifact_bytes(&b));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    ensure!(fa.len() == 7, "expected 7 artifacts, found {names:?}");
    ensure!(
        fa.iter().map(|f| &f.0).eq(fb.iter().map(|f| &f.0)),
        "artifact sets differ"
    );
    for ((name, x), (_, y)) in fa.iter().zip(&fb) {
        ensure!(x == y, "{name} differs between runs");
    }
    Ok(format!("{} byte-identical: {}", fa.len(), names.join(" ")))
}

pub fn random_decoder(r: &mut rand_chacha::ChaCha8Rng, vocab_size: usize, scale: f64) -> DecoderModel {
    let config = DecoderConfig {
        hidden_size: r.gen_range(2..=6),
        embed_dim: r.gen_range(2..=5),
        vocab_size,
        feature_dim: 3,
        dropout_p: 0.0,
        max_caption_len: 12,
    };
    let model = build_decoder(&config, r).unwrap();
    let params = model.parameters().iter().map(|p| p.map(|x| x * scale)).collect();
    model.with_parameters(params).unwrap()
}

pub fn width_one_is_greedy(models: usize) -> Outcome {
    let mut r = rng(99);
    for case in 0..models {
        let v = r.gen_range(4..=10);
        let scale = r.gen_range(1.0..4.0);
        let model = random_decoder(&mut r, v, scale);
        let f = uniform(&[3], 0.0, 1.0, &mut r);
        let max_len = r.gen_range(1..=8);
        let greedy = greedy_decode(&model, &f, max_len).map_err(|e| e.to_string())?;
        let beam = beam_search(&model, &f, 1, max_len).map_err(|e| e.to_string())?;
        ensure!(beam.len() == 1, "case {case}: width 1 kept {} hypotheses", beam.len());
        ensure!(
            beam[0].tokens == greedy,
            "case {case}: beam {:?} vs greedy {greedy:?}",
            beam[0].tokens
        );
        let rescored = score_sequence(&model, &f, &greedy, max_len).map_err(|e| e.to_string())?;
        ensure!(
            rescored.score().to_bits() == beam[0].score().to_bits(),
            "case {case}: scores {} vs {}",
            rescored.score(),
            beam[0].score()
        );
        ensure!(
            !greedy.iter().any(|&t| t == PAD || t == START || t == END),
            "case {case}: special token emitted"
        );
    }
    Ok(format!("{models} models, tokens and scores bit-identical"))
}

pub fn beam_matches_exhaustive(vocab_size: usize, models: usize) -> Outcome {
    let max_len = 3;
    let width = vocab_size.pow(max_len as u32);
    let mut r = rng(1000 + vocab_size as u64);
    for case in 0..models {
        let scale = r.gen_range(1.0..4.0);
        let model = random_decoder(&mut r, vocab_size, scale);
        let f = uniform(&[3], 0.0, 1.0, &mut r);
        let (want, want_score) = exhaustive_best(&model, &f, max_len);
        let got = beam_search(&model, &f, width, max_len).map_err(|e| e.to_string())?;
        ensure!(
            got[0].tokens == want,
            "V={vocab_size} case {case}: beam {:?} vs exhaustive {want:?}",
            got[0].tokens
        );
        ensure!(
            (got[0].score() - want_score).abs() <= 1e-12,
            "V={vocab_size} case {case}: score {} vs {want_score}",
            got[0].score()
        );
        ensure!(
            beam_decode(&model, &f, width, max_len).map_err(|e| e.to_string())? == want,
            "beam_decode disagrees with beam_search"
        );
    }
    Ok(format!("V={vocab_size}: {models} models"))
}

pub fn beam_correctness() -> Outcome {
    let a = width_one_is_greedy(100)?;
    let b = beam_matches_exhaustive(4, 30)?;
    let c = beam_matches_exhaustive(8, 10)?;
    Ok(format!("{a}; exhaustive {b}, {c}"))
}

pub fn sample_checkpoint(seed: u64) -> Checkpoint {
    let config = RunConfig::desk();
    let vocab = build_vocabulary_from_captions(["একটি লাল বৃত্ত।", "একটি নীল বর্গ।"], 1).unwrap();
    let mut r = rng(seed);
    let encoder = build_encoder(&config.encoder, &mut r).unwrap();
    let decoder = build_decoder(&config.decoder_config(vocab.len()), &mut r).unwrap();
    let meta = CheckpointMeta {
        stage: Stage::Joint,
        best: None,
        metrics: StoredMetrics::default(),
        vocabulary: vocab,
        config,
    };
    Checkpoint::from_models(&encoder, Some(&decoder), meta)
}

pub fn serialization(workdir: &Path) -> Outcome {
    let ckpt = sample_checkpoint(3);
    let (p1, p2) = (workdir.join("a.tmck"), workdir.join("b.tmck"));
    ckpt.save(&p1).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&p1).map_err(|e| e.to_string())?;
    ensure!(loaded == ckpt, "loaded checkpoint differs from the saved one");
    loaded.save(&p2).map_err(|e| e.to_string())?;
    let (b1, b2) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    ensure!(b1 == b2, "save/load/save changed the bytes");

    let manifest = generate_synthetic_dataset(6, 2, &workdir.join("data")).map_err(|e| e.to_string())?;
    let copy = workdir.join("copy.jsonl");
    manifest.save(&copy).map_err(|e| e.to_string())?;
    let back = load_manifest(&copy).map_err(|e| e.to_string())?;
    ensure!(back.samples == manifest.samples, "manifest round trip changed samples");

    let mut bad = b1.clone();
    bad[0] = b'X';
    let corrupt = workdir.join("corrupt.tmck");
    std::fs::write(&corrupt, &bad).unwrap();
    match Checkpoint::load(&corrupt) {
        Err(e @ Error::Format { .. }) => {
            let msg = e.to_string();
            ensure!(msg.contains("corrupt.tmck"), "error does not name the file: {msg}");
            ensure!(e.exit_code() == 2, "corruption maps to exit code {}", e.exit_code());
            Ok(format!(
                "{} bytes stable, manifest identical, corrupted magic: {msg}",
                b1.len()
            ))
        }
        Err(e) => Err(format!("wrong error for corrupted magic: {e}")),
        Ok(_) => Err("corrupted checkpoint accepted".into()),
    }
}

pub fn full_scale_shapes() -> Outcome {
    let config = EncoderConfig::default();
    ensure!(
        config.input_shape == [3, 224, 224],
        "default input {:?}",
        config.input_shape
    );
    let conv = config.conv_output_shape().map_err(|e| e.to_string())?;
    ensure!(conv == [64, 14, 14], "conv output {conv:?}");
    let mut r = rng(0);
    let encoder = build_encoder(&config, &mut r).map_err(|e| e.to_string())?;
    let image = uniform(&[3, 224, 224], 0.0, 1.0, &mut r);
    let mut tape = Tape::new();
    let out = encoder.forward(&mut tape, &image).map_err(|e| e.to_string())?;
    ensure!(out.feature.shape() == [256], "feature {:?}", out.feature.shape());
    ensure!(out.logits.shape() == [25], "logits {:?}", out.logits.shape());

    let run = RunConfig::full();
    let vocab_size = 40;
    let dconfig = run.decoder_config(vocab_size);
    ensure!(
        dconfig.hidden_size == 256 && dconfig.feature_dim == 256,
        "decoder config {dconfig:?}"
    );
    let decoder = build_decoder(&dconfig, &mut r).map_err(|e| e.to_string())?;
    let caption = [START, 5, 9, 17, END, PAD];
    let mut tape = Tape::new();
    let feature = out.feature.detach();
    let tf = decoder
        .teacher_forced(&mut tape, &feature, &caption, Mode::Eval, &mut r)
        .map_err(|e| e.to_string())?;
    ensure!(
        tf.logits.shape() == [caption.len(), vocab_size],
        "decoder logits {:?}",
        tf.logits.shape()
    );
    let greedy = greedy_decode(&decoder, &feature, dconfig.max_caption_len - 2).map_err(|e| e.to_string())?;
    ensure!(greedy.len() <= 18, "greedy produced {} tokens", greedy.len());
    Ok(format!(
        "3x224x224 -> conv {conv:?} -> flat {} -> feature [256] + logits [25]; decoder H=256 logits {:?}",
        config.flat_dim().unwrap(),
        tf.logits.shape()
    ))
}
