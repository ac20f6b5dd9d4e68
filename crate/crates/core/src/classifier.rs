//! Feed-forward classifier: hidden ReLU layers, a linear embedding layer and a
//! linear logits head, trained with mini-batch SGD on mean cross-entropy.
//!
//! All arithmetic is `f64` and every source of randomness is a seeded
//! `ChaCha8Rng`, so training is bit-for-bit reproducible.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Format tag written into model checkpoints.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// A labeled training sample: feature slice and class index.
pub type Sample<'a> = (&'a [f64], usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer. `weights` is row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for both
    /// weights and biases.
    pub fn uniform<R: Rng>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let mut layer = Self::zeros(in_dim, out_dim, activation);
        let bound = 1.0 / (in_dim as f64).sqrt();
        for w in layer.weights.iter_mut() {
            *w = rng.random_range(-bound..bound);
        }
        for b in layer.bias.iter_mut() {
            *b = rng.random_range(-bound..bound);
        }
        layer
    }

    /// Writes the pre-activation `W x + b` into `z`.
    fn affine(&self, x: &[f64], z: &mut Vec<f64>) {
        z.clear();
        for (row, b) in self.weights.chunks_exact(self.in_dim).zip(&self.bias) {
            let dot: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
            z.push(dot + b);
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
}

impl Architecture {
    /// Two hidden layers of 64 units and a 32-dimensional embedding.
    pub fn standard(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64, 64],
            embedding_dim: 32,
        }
    }
}

/// The classification network. The embedding is the output of the last
/// layer in `body` (linear), and `head` maps it to one logit per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    body: Vec<Dense>,
    head: Dense,
    /// Version of the label set the head was sized for.
    pub label_version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub embedding: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Numerically stable softmax: `exp(z_i - max z) / sum_j exp(z_j - max z)`.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax of an empty vector".into()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::InvalidInput("softmax input is not finite".into()));
    }
    Ok(softmax_unchecked(logits))
}

fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Cached activations of one sample, used by backprop.
struct Trace {
    /// Layer inputs: `inputs[l]` feeds layer `l` (the head is the last layer).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl Classifier {
    pub fn new(arch: &Architecture, n_classes: usize, seed: u64) -> Result<Self> {
        if arch.input_dim == 0 || arch.embedding_dim == 0 || n_classes == 0 {
            return Err(Error::InvalidInput(
                "input, embedding and output dimensions must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut body = Vec::with_capacity(arch.hidden.len() + 1);
        let mut prev = arch.input_dim;
        for &h in &arch.hidden {
            body.push(Dense::uniform(prev, h, Activation::Relu, &mut rng));
            prev = h;
        }
        body.push(Dense::uniform(prev, arch.embedding_dim, Activation::Identity, &mut rng));
        let head = Dense::uniform(arch.embedding_dim, n_classes, Activation::Identity, &mut rng);
        Ok(Self {
            body,
            head,
            label_version: 0,
        })
    }

    /// Assembles a classifier from explicit layers. The dimensions must chain.
    pub fn from_layers(body: Vec<Dense>, head: Dense) -> Result<Self> {
        if body.is_empty() {
            return Err(Error::InvalidInput("at least one body layer is required".into()));
        }
        let mut prev = body[0].in_dim;
        for layer in body.iter().chain(std::iter::once(&head)) {
            if layer.in_dim != prev
                || layer.weights.len() != layer.in_dim * layer.out_dim
                || layer.bias.len() != layer.out_dim
            {
                return Err(Error::InvalidInput("layer dimensions do not chain".into()));
            }
            prev = layer.out_dim;
        }
        let model = Self {
            body,
            head,
            label_version: 0,
        };
        model.check_finite()?;
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.body[0].in_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.head.in_dim
    }

    pub fn n_classes(&self) -> usize {
        self.head.out_dim
    }

    pub fn body(&self) -> &[Dense] {
        &self.body
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.body.iter().chain(std::iter::once(&self.head))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.body.iter_mut().chain(std::iter::once(&mut self.head))
    }

    fn check_finite(&self) -> Result<()> {
        let ok = self
            .layers()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()));
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput("model parameters are not finite".into()))
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        let mut z = Vec::new();
        for layer in &self.body {
            layer.affine(&a, &mut z);
            a = z.iter().map(|&v| layer.activation.apply(v)).collect();
        }
        let embedding = a;
        let mut logits = Vec::new();
        self.head.affine(&embedding, &mut logits);
        let probs = softmax_unchecked(&logits);
        Ok(Forward {
            embedding,
            logits,
            probs,
        })
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.embedding)
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.body.len() + 1);
        let mut pre = Vec::with_capacity(self.body.len() + 1);
        let mut a = x.to_vec();
        for layer in self.layers() {
            let mut z = Vec::with_capacity(layer.out_dim);
            layer.affine(&a, &mut z);
            let next = z.iter().map(|&v| layer.activation.apply(v)).collect();
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(z);
        }
        let probs = softmax_unchecked(&a);
        Trace { inputs, pre, probs }
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Dense::param_count).sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        let mut offset = 0;
        for l in self.layers_mut() {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    fn check_labels(&self, batch: &[Sample<'_>]) -> Result<()> {
        for (x, y) in batch {
            self.check_input(x)?;
            if *y >= self.n_classes() {
                return Err(Error::LabelOutOfRange {
                    label: *y,
                    classes: self.n_classes(),
                });
            }
        }
        Ok(())
    }

    /// Mean cross-entropy of `batch`.
    pub fn loss(&self, batch: &[Sample<'_>]) -> Result<f64> {
        self.check_labels(batch)?;
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut total = 0.0;
        for (x, y) in batch {
            let probs = self.forward(x)?.probs;
            total -= probs[*y].max(f64::MIN_POSITIVE).ln();
        }
        Ok(total / batch.len() as f64)
    }

    /// Mean cross-entropy of `batch` and its gradient with respect to
    /// [`Classifier::parameters`].
    pub fn loss_and_gradient(&self, batch: &[Sample<'_>]) -> Result<(f64, Vec<f64>)> {
        self.check_labels(batch)?;
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        Ok(self.backprop(batch))
    }

    fn backprop(&self, batch: &[Sample<'_>]) -> (f64, Vec<f64>) {
        let layers: Vec<&Dense> = self.layers().collect();
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = layers
            .iter()
            .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
            .collect();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;

        for (x, y) in batch {
            let trace = self.trace(x);
            loss -= trace.probs[*y].max(f64::MIN_POSITIVE).ln();

            // dL/dlogits for softmax + cross-entropy.
            let mut delta: Vec<f64> = trace.probs.clone();
            delta[*y] -= 1.0;

            for li in (0..layers.len()).rev() {
                let layer = layers[li];
                // delta holds dL/d(output of layer li); turn it into dL/d(pre-activation).
                if layer.activation != Activation::Identity {
                    for (d, z) in delta.iter_mut().zip(&trace.pre[li]) {
                        *d *= layer.activation.derivative(*z);
                    }
                }
                let input = &trace.inputs[li];
                let (gw, gb) = &mut grads[li];
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (g, a) in row.iter_mut().zip(input) {
                        *g += d * a * scale;
                    }
                    gb[o] += d * scale;
                }
                if li > 0 {
                    let mut prev = vec![0.0; layer.in_dim];
                    for (o, d) in delta.iter().enumerate() {
                        if *d == 0.0 {
                            continue;
                        }
                        let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                        for (p, w) in prev.iter_mut().zip(row) {
                            *p += d * w;
                        }
                    }
                    delta = prev;
                }
            }
        }

        let mut flat = Vec::with_capacity(self.param_count());
        for (gw, gb) in grads {
            flat.extend(gw);
            flat.extend(gb);
        }
        (loss * scale, flat)
    }

    /// One gradient step; `weight_decay` shrinks weights (not biases).
    fn sgd_step(&mut self, grad: &[f64], lr: f64, weight_decay: f64) {
        let mut offset = 0;
        for l in self.layers_mut() {
            for w in l.weights.iter_mut() {
                *w -= lr * (grad[offset] + weight_decay * *w);
                offset += 1;
            }
            for b in l.bias.iter_mut() {
                *b -= lr * grad[offset];
                offset += 1;
            }
        }
    }

    /// Grows the logits head to `new_k` classes. Existing rows are kept as
    /// they are; the new rows are drawn with the standard initialization from
    /// a generator seeded with `seed`.
    pub fn expand_output(&self, new_k: usize, seed: u64) -> Result<Self> {
        let k = self.n_classes();
        if new_k <= k {
            return Err(Error::InvalidInput(format!(
                "cannot expand a {k}-class head to {new_k} classes"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fresh = Dense::uniform(self.head.in_dim, new_k - k, Activation::Identity, &mut rng);
        let mut out = self.clone();
        out.head.weights.extend_from_slice(&fresh.weights);
        out.head.bias.extend_from_slice(&fresh.bias);
        out.head.out_dim = new_k;
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            model: self.clone(),
        };
        let text = serde_json::to_string(&file)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("corrupt model file: {e}")))?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "model format version {} is not supported (expected {MODEL_FORMAT_VERSION})",
                file.format_version
            )));
        }
        Self::from_layers(file.model.body, file.model.head).map(|mut m| {
            m.label_version = file.model.label_version;
            m
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    model: Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// L2 penalty on weights, applied in the update step.
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            learning_rate: 0.05,
            patience: 10,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config(
                "epochs, batch_size and patience must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.patience > self.epochs {
            return Err(Error::Config("patience must not exceed epochs".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub model: Classifier,
    /// Mean training loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation loss of the kept checkpoint, when validation data was given.
    pub best_validation_loss: Option<f64>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
}

/// Mini-batch SGD on mean cross-entropy.
///
/// With a non-empty `validation` set, training stops once the validation loss
/// has not strictly improved for `patience` epochs and the best checkpoint is
/// returned (an equal loss keeps the earlier checkpoint).
pub fn train(
    model: &Classifier,
    samples: &[Sample<'_>],
    validation: &[Sample<'_>],
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("no labeled samples to train on".into()));
    }
    model.check_labels(samples)?;
    model.check_labels(validation)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = model.clone();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Classifier, usize)> = None;
    let mut stale = 0;
    let mut batch: Vec<Sample<'_>> = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| samples[i]));
            let (loss, grad) = current.backprop(&batch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    last_finite: Box::new(current),
                });
            }
            let before = current.clone();
            current.sgd_step(&grad, cfg.learning_rate, cfg.weight_decay);
            if current.check_finite().is_err() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    last_finite: Box::new(before),
                });
            }
            epoch_loss += loss * chunk.len() as f64;
        }
        epoch_losses.push(epoch_loss / samples.len() as f64);

        if !validation.is_empty() {
            let val_loss = current.loss(validation)?;
            match &best {
                Some((b, _, _)) if val_loss >= *b => {
                    stale += 1;
                    if stale >= cfg.patience {
                        break;
                    }
                }
                _ => {
                    best = Some((val_loss, current.clone(), epoch + 1));
                    stale = 0;
                }
            }
        }
    }

    let epochs_run = epoch_losses.len();
    Ok(match best {
        Some((loss, model, epoch)) => Trained {
            model,
            epoch_losses,
            best_validation_loss: Some(loss),
            best_epoch: epoch,
        },
        None => Trained {
            model: current,
            epoch_losses,
            best_validation_loss: None,
            best_epoch: epochs_run,
        },
    })
}
