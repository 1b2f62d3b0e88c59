//! Convolutional image encoder: `[Conv2D → ReLU → MaxPool]×N → Flatten →
//! FC…` ending in a ReLU feature layer and a linear classification head.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::curve::{CurvePoint, EpochStats};
use crate::data::index_batches;
use crate::error::{Error, Result};
use crate::optim::{Optimizer, SgdConfig};
use crate::tensor::{Conv2dSpec, Padding, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvBlock {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvBlock {
    pub fn new(filters: usize) -> Self {
        Self {
            filters,
            ..Self::default()
        }
    }

    fn spec(&self) -> Conv2dSpec {
        Conv2dSpec {
            stride: self.stride,
            padding: self.padding,
        }
    }
}

impl Default for ConvBlock {
    fn default() -> Self {
        Self {
            filters: 16,
            kernel: 3,
            stride: 1,
            padding: Padding::Same,
        }
    }
}

/// Architecture of the encoder. Every conv block is followed by a 2×2 max pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub conv_blocks: Vec<ConvBlock>,
    /// Hidden FC widths between the flattened maps and the feature layer.
    pub fc_dims: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Default for EncoderConfig {
    /// Full-size mode: 3×224×224 inputs, four blocks down to 14×14.
    fn default() -> Self {
        Self {
            input_shape: [3, 224, 224],
            conv_blocks: [16, 32, 64, 64].map(ConvBlock::new).to_vec(),
            fc_dims: vec![256],
            feature_dim: 256,
            num_classes: 25,
        }
    }
}

impl EncoderConfig {
    /// Small 32×32 configuration for fast experiments and tests.
    pub fn desk() -> Self {
        Self {
            input_shape: [3, 32, 32],
            conv_blocks: vec![ConvBlock::new(8), ConvBlock::new(16)],
            fc_dims: vec![],
            feature_dim: 64,
            num_classes: 25,
        }
    }

    /// `[filters, H, W]` after the last pool.
    pub fn conv_output_shape(&self) -> Result<[usize; 3]> {
        let [c, mut h, mut w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config("input extents must be positive"));
        }
        let mut channels = c;
        for (i, block) in self.conv_blocks.iter().enumerate() {
            if block.filters == 0 || block.kernel == 0 || block.stride == 0 {
                return Err(Error::config(format!("conv block {i}: zero filters, kernel or stride")));
            }
            (h, w) = match block.padding {
                Padding::Same => (h.div_ceil(block.stride), w.div_ceil(block.stride)),
                Padding::Valid => {
                    if block.kernel > h || block.kernel > w {
                        return Err(Error::config(format!(
                            "conv block {i}: kernel {} exceeds {h}x{w} map",
                            block.kernel
                        )));
                    }
                    (
                        (h - block.kernel) / block.stride + 1,
                        (w - block.kernel) / block.stride + 1,
                    )
                }
            };
            if h < 2 || w < 2 {
                return Err(Error::config(format!(
                    "conv block {i}: pooling a {h}x{w} map would leave nothing to downsample"
                )));
            }
            (h, w) = (h.div_ceil(2), w.div_ceil(2));
            channels = block.filters;
        }
        Ok([channels, h, w])
    }

    pub fn flat_dim(&self) -> Result<usize> {
        Ok(self.conv_output_shape()?.iter().product())
    }

    pub fn validate(&self) -> Result<()> {
        self.conv_output_shape()?;
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.feature_dim == 0 || self.fc_dims.contains(&0) {
            return Err(Error::config("FC widths must be positive"));
        }
        Ok(())
    }
}

/// Fully-connected layer `y = x·W + b`, `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub(crate) fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let y = tape.matmul(x, &self.weight)?;
        tape.add(&y, &self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernels: Tensor,
    pub bias: Tensor,
}

/// He-uniform tensor: `U(−√(6/fan_in), √(6/fan_in))`.
pub(crate) fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("sized from shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub conv: Vec<ConvLayer>,
    pub hidden: Vec<Dense>,
    pub feature: Dense,
    pub head: Dense,
}

/// Feature vector and class logits from one forward pass.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub feature: Tensor,
    pub logits: Tensor,
}

pub fn build_encoder<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<EncoderModel> {
    config.validate()?;
    let mut channels = config.input_shape[0];
    let mut conv = Vec::with_capacity(config.conv_blocks.len());
    for block in &config.conv_blocks {
        let fan_in = channels * block.kernel * block.kernel;
        conv.push(ConvLayer {
            kernels: he_uniform(&[block.filters, channels, block.kernel, block.kernel], fan_in, rng),
            bias: Tensor::zeros(&[block.filters]),
        });
        channels = block.filters;
    }
    let mut dense = |fan_in: usize, out: usize| Dense {
        weight: he_uniform(&[fan_in, out], fan_in, rng),
        bias: Tensor::zeros(&[out]),
    };
    let mut width = config.flat_dim()?;
    let mut hidden = Vec::with_capacity(config.fc_dims.len());
    for &d in &config.fc_dims {
        hidden.push(dense(width, d));
        width = d;
    }
    let feature = dense(width, config.feature_dim);
    let head = dense(config.feature_dim, config.num_classes);
    Ok(EncoderModel {
        config: config.clone(),
        conv,
        hidden,
        feature,
        head,
    })
}

impl EncoderModel {
    /// Parameters in a fixed order with stable names.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.conv.iter().enumerate() {
            out.push((format!("encoder.conv{i}.weight"), &l.kernels));
            out.push((format!("encoder.conv{i}.bias"), &l.bias));
        }
        for (i, l) in self.hidden.iter().enumerate() {
            out.push((format!("encoder.fc{i}.weight"), &l.weight));
            out.push((format!("encoder.fc{i}.bias"), &l.bias));
        }
        out.push(("encoder.feature.weight".into(), &self.feature.weight));
        out.push(("encoder.feature.bias".into(), &self.feature.bias));
        out.push(("encoder.head.weight".into(), &self.head.weight));
        out.push(("encoder.head.bias".into(), &self.head.bias));
        out
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.named_parameters().into_iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    fn slots_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.conv {
            out.push(&mut l.kernels);
            out.push(&mut l.bias);
        }
        for l in &mut self.hidden {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.extend([
            &mut self.feature.weight,
            &mut self.feature.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]);
        out
    }

    /// Copy with parameters replaced, in [`parameters`](Self::parameters) order.
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

    /// Copy whose parameters are trainable leaves on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Self {
        let mut bound = self.clone();
        for slot in bound.slots_mut() {
            *slot = tape.param(slot);
        }
        bound
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.config.input_shape {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: self.config.input_shape.to_vec(),
                rhs: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, image: &Tensor) -> Result<EncoderOutput> {
        self.check_image(image)?;
        let mut x = image.clone();
        for (layer, block) in self.conv.iter().zip(&self.config.conv_blocks) {
            x = tape.conv2d(&x, &layer.kernels, &layer.bias, block.spec())?;
            x = tape.relu(&x)?;
            x = tape.maxpool2d(&x, 2)?;
        }
        x = tape.flatten(&x)?;
        for layer in &self.hidden {
            x = layer.forward(tape, &x)?;
            x = tape.relu(&x)?;
        }
        x = self.feature.forward(tape, &x)?;
        let feature = tape.relu(&x)?;
        let logits = self.head.forward(tape, &feature)?;
        Ok(EncoderOutput { feature, logits })
    }

    /// Output of the ReLU feature layer.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        Ok(self.forward(&mut tape, image)?.feature.detach())
    }

    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        Ok(self.forward(&mut tape, image)?.logits.detach())
    }

    /// Class probabilities.
    pub fn classify(&self, image: &Tensor) -> Result<Tensor> {
        self.logits(image)?.softmax()
    }
}

/// Images with class labels, aligned by index.
#[derive(Debug, Clone, Copy)]
pub struct LabeledImages<'a> {
    pub images: &'a [Tensor],
    pub labels: &'a [usize],
}

impl LabeledImages<'_> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Mean cross-entropy and top-1 accuracy.
pub fn evaluate_classifier(model: &EncoderModel, data: LabeledImages<'_>) -> Result<(f64, f64)> {
    let mut stats = EpochStats::default();
    for (image, &label) in data.images.iter().zip(data.labels) {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, image)?;
        let row = tape_row(&mut tape, &out.logits)?;
        let loss = tape.cross_entropy(&row, &[label], None)?;
        let hit = usize::from(out.logits.argmax() == Some(label));
        stats.add(loss.item().unwrap_or(0.0), 1, hit);
    }
    Ok((stats.loss(), stats.accuracy()))
}

fn tape_row(tape: &mut Tape, logits: &Tensor) -> Result<Tensor> {
    tape.reshape(logits, &[1, logits.numel()])
}

#[derive(Debug, Clone)]
pub struct EncoderTraining {
    pub model: EncoderModel,
    /// Weights from the epoch with the highest validation accuracy (the
    /// final weights when there is no validation data).
    pub best: EncoderModel,
    pub best_epoch: usize,
    pub curve: Vec<CurvePoint>,
}

/// Classification training with SGD on mini-batches of images.
pub fn train_encoder<R: Rng + ?Sized>(
    model: &EncoderModel,
    train: LabeledImages<'_>,
    val: Option<LabeledImages<'_>>,
    sgd: &SgdConfig,
    epochs: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<EncoderTraining> {
    if train.is_empty() || train.images.len() != train.labels.len() {
        return Err(Error::Data("encoder training needs a non-empty labelled set".into()));
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    for &label in train.labels {
        if label >= model.config.num_classes {
            return Err(Error::Index {
                op: "train_encoder",
                index: label,
                bound: model.config.num_classes,
            });
        }
    }
    let val = val.filter(|v| !v.is_empty());
    let mut current = model.clone();
    let mut optimizer = Optimizer::sgd(*sgd, &current.parameters())?;
    let mut curve = Vec::with_capacity(epochs);
    let mut best = (current.clone(), 0usize, f64::NEG_INFINITY);

    for epoch in 1..=epochs {
        let mut stats = EpochStats::default();
        for batch in index_batches(train.len(), batch_size, rng, true) {
            let mut tape = Tape::new();
            let bound = current.bind(&mut tape);
            let mut rows = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            let mut correct = 0;
            for &i in &batch {
                let out = bound.forward(&mut tape, &train.images[i])?;
                correct += usize::from(out.logits.argmax() == Some(train.labels[i]));
                rows.push(out.logits);
                labels.push(train.labels[i]);
            }
            let logits = tape.concat_rows(&rows)?;
            let loss = tape.cross_entropy(&logits, &labels, None)?;
            let grads = tape.backward(&loss)?;
            let g: Vec<Tensor> = bound.parameters().iter().map(|p| grads.get_or_zeros(p)).collect();
            let next = optimizer.step(&current.parameters(), &g)?;
            current = current.with_parameters(next)?;
            stats.add(loss.item().unwrap_or(0.0), batch.len(), correct);
        }
        let (val_loss, val_acc) = match val {
            Some(v) => {
                let (l, a) = evaluate_classifier(&current, v)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        let score = val_acc.unwrap_or(f64::INFINITY);
        if val.is_none() || score > best.2 {
            best = (current.clone(), epoch, score);
        }
        curve.push(CurvePoint {
            epoch,
            train_loss: stats.loss(),
            train_accuracy: stats.accuracy(),
            val_loss,
            val_accuracy: val_acc,
        });
    }
    Ok(EncoderTraining {
        model: current,
        best: best.0,
        best_epoch: best.1,
        curve,
    })
}
