//! Finite-difference checks for every differentiable op and for the two
//! small networks built from them. Each check runs `cases` seeded draws.

use rand::Rng;
use textmage::decoder::{build_decoder, DecoderConfig, Gate, LstmCell};
use textmage::encoder::{build_encoder, ConvBlock, EncoderConfig};
use textmage::{Conv2dSpec, Mode, Padding, Tape, Tensor};

use super::{grad_check, leaves, project, rng, uniform, GradReport, Traced};

pub const CASES: usize = 100;

fn run(cases: usize, salt: u64, mut case: impl FnMut(&mut rand_chacha::ChaCha8Rng) -> GradReport) -> GradReport {
    let mut total = GradReport::default();
    for i in 0..cases {
        let mut r = rng(salt * 10_000 + i as u64);
        total.merge(case(&mut r));
    }
    total
}

/// Output shape of `f` on the unperturbed inputs, for drawing read-out weights.
fn out_shape(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Tensor]) -> textmage::Result<Tensor>) -> Vec<usize> {
    let mut tape = Tape::new();
    f(&mut tape, inputs).unwrap().shape().to_vec()
}

/// Random read-out of a single op applied to fresh leaves.
fn check_op<R: Rng>(
    inputs: Vec<Tensor>,
    rng: &mut R,
    op: impl Fn(&mut Tape, &[Tensor]) -> textmage::Result<Tensor>,
) -> GradReport {
    let shape = out_shape(&inputs, &op);
    let w = uniform(&shape, -1.0, 1.0, rng);
    grad_check(&inputs, |tape, xs| -> Traced {
        let ps = leaves(tape, xs);
        let out = op(tape, &ps)?;
        Ok((project(tape, &out, &w)?, ps))
    })
}

pub fn matmul(cases: usize) -> GradReport {
    run(cases, 1, |r| {
        let (m, k, n) = (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4));
        let lhs = if r.gen_bool(0.5) {
            uniform(&[k], -1.0, 1.0, r)
        } else {
            uniform(&[m, k], -1.0, 1.0, r)
        };
        let rhs = uniform(&[k, n], -1.0, 1.0, r);
        check_op(vec![lhs, rhs], r, |t, x| t.matmul(&x[0], &x[1]))
    })
}

pub fn add_mul(cases: usize) -> GradReport {
    run(cases, 2, |r| {
        let shape = [r.gen_range(1..=3), r.gen_range(1..=4)];
        let a = uniform(&shape, -1.0, 1.0, r);
        let b = uniform(&shape, -1.0, 1.0, r);
        let c = uniform(&shape, -1.0, 1.0, r);
        check_op(vec![a, b, c], r, |t, x| {
            let s = t.add(&x[0], &x[1])?;
            t.mul(&s, &x[2])
        })
    })
}

pub fn relu(cases: usize) -> GradReport {
    run(cases, 3, |r| {
        let x = uniform(&[r.gen_range(1..=12)], -1.0, 1.0, r);
        check_op(vec![x], r, |t, x| t.relu(&x[0]))
    })
}

pub fn sigmoid_tanh(cases: usize) -> GradReport {
    run(cases, 4, |r| {
        let a = uniform(&[r.gen_range(1..=8)], -3.0, 3.0, r);
        let b = uniform(&[r.gen_range(1..=8)], -3.0, 3.0, r);
        let mut rep = check_op(vec![a], r, |t, x| t.sigmoid(&x[0]));
        rep.merge(check_op(vec![b], r, |t, x| t.tanh(&x[0])));
        rep
    })
}

pub fn softmax(cases: usize) -> GradReport {
    run(cases, 5, |r| {
        let x = if r.gen_bool(0.5) {
            uniform(&[r.gen_range(1..=6)], -2.0, 2.0, r)
        } else {
            uniform(&[r.gen_range(1..=3), r.gen_range(1..=6)], -2.0, 2.0, r)
        };
        check_op(vec![x], r, |t, x| t.softmax(&x[0]))
    })
}

pub fn cross_entropy(cases: usize) -> GradReport {
    run(cases, 6, |r| {
        let (rows, v) = (r.gen_range(1..=5), r.gen_range(2..=6));
        let logits = uniform(&[rows, v], -2.0, 2.0, r);
        let targets: Vec<usize> = (0..rows).map(|_| r.gen_range(0..v)).collect();
        let ignore = r.gen_bool(0.5).then(|| targets[0]);
        grad_check(&[logits], |tape, xs| -> Traced {
            let ps = leaves(tape, xs);
            Ok((tape.cross_entropy(&ps[0], &targets, ignore)?, ps))
        })
    })
}

pub fn conv2d(cases: usize) -> GradReport {
    run(cases, 7, |r| {
        let (c, f, k) = (r.gen_range(1..=2), r.gen_range(1..=2), [1, 2, 3][r.gen_range(0..3)]);
        let (h, w) = (r.gen_range(k..=6), r.gen_range(k..=6));
        let spec = Conv2dSpec {
            stride: r.gen_range(1..=2),
            padding: if r.gen_bool(0.5) { Padding::Same } else { Padding::Valid },
        };
        let input = uniform(&[c, h, w], -1.0, 1.0, r);
        let kernels = uniform(&[f, c, k, k], -1.0, 1.0, r);
        let bias = uniform(&[f], -1.0, 1.0, r);
        check_op(vec![input, kernels, bias], r, move |t, x| {
            t.conv2d(&x[0], &x[1], &x[2], spec)
        })
    })
}

pub fn maxpool2d(cases: usize) -> GradReport {
    run(cases, 8, |r| {
        let shape = [r.gen_range(1..=2), r.gen_range(1..=7), r.gen_range(1..=7)];
        let x = uniform(&shape, -1.0, 1.0, r);
        check_op(vec![x], r, |t, x| t.maxpool2d(&x[0], 2))
    })
}

pub fn embedding(cases: usize) -> GradReport {
    run(cases, 9, |r| {
        let (v, e) = (r.gen_range(1..=5), r.gen_range(1..=4));
        let table = uniform(&[v, e], -1.0, 1.0, r);
        let len = r.gen_range(1..=6);
        let ids: Vec<usize> = (0..len).map(|_| r.gen_range(0..v)).collect();
        check_op(vec![table], r, move |t, x| t.embedding(&x[0], &ids))
    })
}

pub fn reshape_concat_sum(cases: usize) -> GradReport {
    run(cases, 10, |r| {
        let n = r.gen_range(1..=4);
        let a = uniform(&[n], -1.0, 1.0, r);
        let b = uniform(&[2, n], -1.0, 1.0, r);
        let c = uniform(&[n, 2], -1.0, 1.0, r);
        let w = uniform(&[4, n], -1.0, 1.0, r);
        grad_check(&[a, b, c], |tape, xs| -> Traced {
            let ps = leaves(tape, xs);
            let c2 = tape.reshape(&ps[2], &[1, 2 * n])?;
            let c2 = tape.reshape(&c2, &[2, n])?;
            let stacked = tape.concat_rows(&[ps[0].clone(), ps[1].clone()])?;
            let flat = tape.flatten(&stacked)?;
            let head = tape.reshape(&flat, &[3, n])?;
            let all = tape.concat_rows(&[head, c2])?;
            let all = tape.concat_rows(&[all, ps[0].clone()])?;
            let trimmed = tape.embedding(&all, &[0, 1, 3, 5])?;
            let s1 = project(tape, &trimmed, &w)?;
            let s2 = tape.sum(&all)?;
            let sq = tape.mul(&s2, &s2)?;
            Ok((tape.add(&s1, &sq)?, ps))
        })
    })
}

pub fn dropout(cases: usize) -> GradReport {
    run(cases, 11, |r| {
        let x = uniform(&[r.gen_range(1..=10)], -1.0, 1.0, r);
        let p = r.gen_range(0.1..0.7);
        let mask_seed: u64 = r.gen();
        check_op(vec![x], r, move |t, x| {
            let mut mask_rng = rng(mask_seed);
            t.dropout(&x[0], p, Mode::Train, &mut mask_rng)
        })
    })
}

fn gate_from(ts: &[Tensor]) -> Gate {
    Gate {
        input: ts[0].clone(),
        recurrent: ts[1].clone(),
        bias: ts[2].clone(),
    }
}

pub fn lstm_step(cases: usize) -> GradReport {
    run(cases, 12, |r| {
        let (e, h) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let mut inputs = Vec::new();
        for _ in 0..4 {
            inputs.push(uniform(&[e, h], -1.0, 1.0, r));
            inputs.push(uniform(&[h, h], -1.0, 1.0, r));
            inputs.push(uniform(&[h], -1.0, 1.0, r));
        }
        inputs.push(uniform(&[e], -1.0, 1.0, r));
        inputs.push(uniform(&[h], -1.0, 1.0, r));
        inputs.push(uniform(&[h], -1.0, 1.0, r));
        let r1 = uniform(&[h], -1.0, 1.0, r);
        let r2 = uniform(&[h], -1.0, 1.0, r);
        grad_check(&inputs, |tape, xs| -> Traced {
            let ps = leaves(tape, xs);
            let cell = LstmCell {
                input_gate: gate_from(&ps[0..3]),
                forget_gate: gate_from(&ps[3..6]),
                output_gate: gate_from(&ps[6..9]),
                candidate: gate_from(&ps[9..12]),
            };
            let (h1, c1) = cell.step(tape, &ps[12], &ps[13], &ps[14])?;
            let a = project(tape, &h1, &r1)?;
            let b = project(tape, &c1, &r2)?;
            Ok((tape.add(&a, &b)?, ps))
        })
    })
}

pub fn encoder(cases: usize) -> GradReport {
    let config = EncoderConfig {
        input_shape: [2, 6, 6],
        conv_blocks: vec![ConvBlock::new(3)],
        fc_dims: vec![4],
        feature_dim: 5,
        num_classes: 3,
    };
    run(cases, 13, |r| {
        let model = build_encoder(&config, r).unwrap();
        let image = uniform(&[2, 6, 6], 0.0, 1.0, r);
        let class = r.gen_range(0..3);
        let wf = uniform(&[5], -1.0, 1.0, r);
        let mut inputs = model.parameters();
        let n = inputs.len();
        inputs.push(image);
        grad_check(&inputs, |tape, xs| -> Traced {
            let bound = model.with_parameters(xs[..n].to_vec())?.bind(tape);
            let mut ps = bound.parameters();
            let img = tape.param(&xs[n]);
            ps.push(img.clone());
            let out = bound.forward(tape, &img)?;
            let logits = tape.reshape(&out.logits, &[1, 3])?;
            let ce = tape.cross_entropy(&logits, &[class], None)?;
            let read = project(tape, &out.feature, &wf)?;
            Ok((tape.add(&ce, &read)?, ps))
        })
    })
}

pub fn decoder(cases: usize) -> GradReport {
    let config = DecoderConfig {
        hidden_size: 4,
        embed_dim: 3,
        vocab_size: 6,
        feature_dim: 3,
        dropout_p: 0.3,
        max_caption_len: 8,
    };
    run(cases, 14, |r| {
        let model = build_decoder(&config, r).unwrap();
        let feature = uniform(&[3], 0.0, 1.0, r);
        let words = r.gen_range(0..=4);
        let mut caption = vec![textmage::data::START];
        caption.extend((0..words).map(|_| r.gen_range(3..6)));
        caption.push(textmage::data::END);
        caption.extend(std::iter::repeat_n(textmage::data::PAD, r.gen_range(0..=2)));
        let mask_seed: u64 = r.gen();
        let mut inputs = model.parameters();
        let n = inputs.len();
        inputs.push(feature);
        grad_check(&inputs, |tape, xs| -> Traced {
            let bound = model.with_parameters(xs[..n].to_vec())?.bind(tape);
            let mut ps = bound.parameters();
            let f = tape.param(&xs[n]);
            ps.push(f.clone());
            let mut mask_rng = rng(mask_seed);
            let tf = bound.teacher_forced(tape, &f, &caption, Mode::Train, &mut mask_rng)?;
            let loss = tape.cross_entropy(&tf.logits, &tf.targets, Some(textmage::data::PAD))?;
            Ok((loss, ps))
        })
    })
}

pub type Check = fn(usize) -> GradReport;

/// Every check in the suite, by name.
pub fn all() -> Vec<(&'static str, Check)> {
    vec![
        ("matmul", matmul),
        ("add_mul", add_mul),
        ("relu", relu),
        ("sigmoid_tanh", sigmoid_tanh),
        ("softmax", softmax),
        ("cross_entropy", cross_entropy),
        ("conv2d", conv2d),
        ("maxpool2d", maxpool2d),
        ("embedding", embedding),
        ("reshape_concat_sum", reshape_concat_sum),
        ("dropout", dropout),
        ("lstm_step", lstm_step),
        ("encoder", encoder),
        ("decoder", decoder),
    ]
}
