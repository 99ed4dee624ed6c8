//! Small feed-forward classifiers with hand-rolled forward and backward
//! passes.
//!
//! A [`SubModel`] is a fully-connected network `d0 -> d1 -> … -> dL` with ReLU
//! on hidden layers and identity on the output. Training uses softmax
//! cross-entropy with SGD plus momentum, and every stochastic choice consumes
//! an explicit seed, so repeated runs are bit-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::Dataset;
use crate::rng::RngStream;
use crate::transform::{KeyId, ShuffleKey};

const MODEL_MAGIC: [u8; 4] = *b"KSMD";
const MODEL_FORMAT_VERSION: u16 = 1;

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties broken by lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-parameter gradients, shaped like the model's weights and biases.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// One row-major `[out x in]` matrix per layer.
    pub weights: Vec<Vec<f64>>,
    /// One `[out]` vector per layer.
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(model: &SubModel) -> Self {
        Self {
            weights: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            for v in w {
                *v *= factor;
            }
        }
        for b in &mut self.biases {
            for v in b {
                *v *= factor;
            }
        }
    }
}

/// Training hyperparameters. All randomness derives from `rng_seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub rng_seed: u64,
    /// Hidden layer widths between the flattened input and the logits.
    pub hidden_dims: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            rng_seed: 0,
            hidden_dims: vec![128],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One line of training progress.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
}

/// A feed-forward classifier, optionally bound to the shuffle key it was
/// trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct SubModel {
    key_id: Option<KeyId>,
    layer_dims: Vec<usize>,
    // Row-major [out x in] per layer.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl SubModel {
    /// He-scaled random weights (`N(0, 2 / fan_in)`), zero biases,
    /// deterministic from `rng_seed`. Weights are drawn layer by layer in
    /// row-major order.
    pub fn init(layer_dims: &[usize], rng_seed: u64) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = RngStream::new(rng_seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..layer_dims.len() - 1 {
            let fan_in = layer_dims[l];
            let fan_out = layer_dims[l + 1];
            let std = (2.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| std * rng.next_gaussian())
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            key_id: None,
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        })
    }

    /// Builds a model from explicit parameters (test fixtures, hand-built
    /// linear models). Shapes must be consistent with `layer_dims`.
    pub fn from_parts(
        layer_dims: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        validate_dims(&layer_dims)?;
        if weights.len() != layer_dims.len() - 1 || biases.len() != layer_dims.len() - 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected {} layers of parameters",
                layer_dims.len() - 1
            )));
        }
        for l in 0..weights.len() {
            if weights[l].len() != layer_dims[l] * layer_dims[l + 1] {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l} weights: expected {}, got {}",
                    layer_dims[l] * layer_dims[l + 1],
                    weights[l].len()
                )));
            }
            if biases[l].len() != layer_dims[l + 1] {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l} biases: expected {}, got {}",
                    layer_dims[l + 1],
                    biases[l].len()
                )));
            }
        }
        Ok(Self {
            key_id: None,
            layer_dims,
            weights,
            biases,
        })
    }

    pub fn key_id(&self) -> Option<KeyId> {
        self.key_id
    }

    pub(crate) fn bind_key(&mut self, key_id: KeyId) {
        self.key_id = Some(key_id);
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    /// Per-layer weight matrices, row-major `[out x in]`.
    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    /// Per-layer bias vectors.
    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input length {} does not match model input dim {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Logits for one flattened input. Pure function.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut activation = x.to_vec();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            activation = affine(w, b, &activation, self.layer_dims[l + 1]);
            if l != last {
                for v in &mut activation {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        Ok(activation)
    }

    /// Post-activation values for every layer, ending with the logits.
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut trace = Vec::with_capacity(self.weights.len());
        let mut activation = x.to_vec();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            activation = affine(w, b, &activation, self.layer_dims[l + 1]);
            if l != last {
                for v in &mut activation {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            trace.push(activation.clone());
        }
        trace
    }

    /// Smallest `|pre-activation|` over all hidden units for this input.
    ///
    /// Finite-difference gradient checks are only valid away from ReLU kinks;
    /// this lets instrumentation reject instances where a hidden unit sits
    /// within the differencing interval of zero.
    pub fn min_hidden_preactivation_magnitude(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let mut min_abs = f64::INFINITY;
        let mut activation = x.to_vec();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            activation = affine(w, b, &activation, self.layer_dims[l + 1]);
            if l != last {
                for v in &mut activation {
                    min_abs = min_abs.min(v.abs());
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        Ok(min_abs)
    }

    /// Softmax cross-entropy loss with analytic gradients for every parameter
    /// and for the input.
    pub fn loss_and_grads(&self, x: &[f64], label: usize) -> Result<(f64, Gradients, Vec<f64>)> {
        self.check_input(x)?;
        if label >= self.num_classes() {
            return Err(Error::InvalidLabel {
                label,
                num_classes: self.num_classes(),
            });
        }
        let mut grads = Gradients::zeros_like(self);
        let (loss, input_grad, _) = self.backprop_into(x, label, &mut grads, true);
        Ok((loss, grads, input_grad.unwrap()))
    }

    /// Cross-entropy toward `label` and its gradient w.r.t. the input only.
    ///
    /// Same math as [`SubModel::loss_and_grads`] without materializing
    /// parameter gradients; attack loops call this once per step.
    pub fn ce_loss_and_input_grad(&self, x: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        if label >= self.num_classes() {
            return Err(Error::InvalidLabel {
                label,
                num_classes: self.num_classes(),
            });
        }
        let trace = self.forward_trace(x);
        let (loss, probs) = cross_entropy(trace.last().unwrap(), label);
        let mut dlogits = probs;
        dlogits[label] -= 1.0;
        Ok((loss, self.backward_input_only(x, &trace, dlogits)))
    }

    /// Gradient of an arbitrary scalar loss w.r.t. the input, given its
    /// gradient w.r.t. this model's softmax probabilities.
    ///
    /// Used by ensemble pipelines, where the attacked loss is a function of
    /// the averaged probabilities rather than one model's cross-entropy.
    pub fn input_grad_from_prob_grad(&self, x: &[f64], dloss_dprobs: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if dloss_dprobs.len() != self.num_classes() {
            return Err(Error::ShapeMismatch(format!(
                "probability cotangent length {} != {} classes",
                dloss_dprobs.len(),
                self.num_classes()
            )));
        }
        let trace = self.forward_trace(x);
        let probs = softmax(trace.last().unwrap());
        // Softmax Jacobian-transpose product: p .* (v - <v, p>).
        let dot: f64 = dloss_dprobs.iter().zip(&probs).map(|(v, p)| v * p).sum();
        let dlogits: Vec<f64> = probs
            .iter()
            .zip(dloss_dprobs)
            .map(|(p, v)| p * (v - dot))
            .collect();
        Ok(self.backward_input_only(x, &trace, dlogits))
    }

    /// Shared backward pass. Returns `(loss, input_grad, correct)`; the input
    /// gradient is computed only when requested.
    fn backprop_into(
        &self,
        x: &[f64],
        label: usize,
        grads: &mut Gradients,
        want_input_grad: bool,
    ) -> (f64, Option<Vec<f64>>, bool) {
        let trace = self.forward_trace(x);
        let logits = trace.last().unwrap();
        let (loss, probs) = cross_entropy(logits, label);
        let correct = argmax(logits) == label;

        // dL/dlogits = p - onehot(label)
        let mut delta: Vec<f64> = probs;
        delta[label] -= 1.0;

        let num_layers = self.weights.len();
        let mut input_grad = None;
        for l in (0..num_layers).rev() {
            let below: &[f64] = if l == 0 { x } else { &trace[l - 1] };
            let (in_dim, out_dim) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let gw = &mut grads.weights[l];
            let gb = &mut grads.biases[l];
            for o in 0..out_dim {
                let d = delta[o];
                gb[o] += d;
                let row = &mut gw[o * in_dim..(o + 1) * in_dim];
                for (gv, &a) in row.iter_mut().zip(below) {
                    *gv += d * a;
                }
            }
            if l > 0 {
                // Propagate through the affine layer and the ReLU below it.
                let mut next_delta = vec![0.0; in_dim];
                for o in 0..out_dim {
                    let d = delta[o];
                    let row = &self.weights[l][o * in_dim..(o + 1) * in_dim];
                    for (nd, &w) in next_delta.iter_mut().zip(row) {
                        *nd += d * w;
                    }
                }
                for (nd, &a) in next_delta.iter_mut().zip(below) {
                    if a <= 0.0 {
                        *nd = 0.0;
                    }
                }
                delta = next_delta;
            } else if want_input_grad {
                let mut g0 = vec![0.0; in_dim];
                for o in 0..out_dim {
                    let d = delta[o];
                    let row = &self.weights[0][o * in_dim..(o + 1) * in_dim];
                    for (gv, &w) in g0.iter_mut().zip(row) {
                        *gv += d * w;
                    }
                }
                input_grad = Some(g0);
            }
        }
        (loss, input_grad, correct)
    }

    /// Backward pass for the input gradient only, from a logit cotangent.
    fn backward_input_only(&self, x: &[f64], trace: &[Vec<f64>], dlogits: Vec<f64>) -> Vec<f64> {
        let num_layers = self.weights.len();
        let mut delta = dlogits;
        for l in (0..num_layers).rev() {
            let below: &[f64] = if l == 0 { x } else { &trace[l - 1] };
            let (in_dim, out_dim) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let mut next_delta = vec![0.0; in_dim];
            for o in 0..out_dim {
                let d = delta[o];
                let row = &self.weights[l][o * in_dim..(o + 1) * in_dim];
                for (nd, &w) in next_delta.iter_mut().zip(row) {
                    *nd += d * w;
                }
            }
            if l > 0 {
                for (nd, &a) in next_delta.iter_mut().zip(below) {
                    if a <= 0.0 {
                        *nd = 0.0;
                    }
                }
            }
            delta = next_delta;
        }
        delta
    }

    /// Writes the checkpoint: magic `KSMD`, format version, layer dims, then
    /// all weights and biases as little-endian 64-bit floats, layer by layer
    /// (weights row-major `[out x in]`, then that layer's biases).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.layer_dims.len() as u16).to_le_bytes());
        for &d in &self.layer_dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in b {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Loads a checkpoint saved with [`SubModel::save`]. The returned model is
    /// not bound to a key; ensemble manifests rebind on load.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::MalformedRecord(format!(
                    "checkpoint truncated at byte {}",
                    *pos
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let magic: [u8; 4] = take(&mut pos, 4)?.try_into().unwrap();
        if magic != MODEL_MAGIC {
            return Err(Error::BadMagic {
                expected: MODEL_MAGIC,
                found: magic,
            });
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: MODEL_FORMAT_VERSION,
                found: version,
            });
        }
        let num_dims = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        if num_dims < 2 {
            return Err(Error::MalformedRecord(format!(
                "checkpoint declares {num_dims} layer dims"
            )));
        }
        let mut layer_dims = Vec::with_capacity(num_dims);
        for _ in 0..num_dims {
            layer_dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        validate_dims(&layer_dims)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..num_dims - 1 {
            let (in_dim, out_dim) = (layer_dims[l], layer_dims[l + 1]);
            let mut w = Vec::with_capacity(in_dim * out_dim);
            for _ in 0..in_dim * out_dim {
                w.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            let mut b = Vec::with_capacity(out_dim);
            for _ in 0..out_dim {
                b.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            weights.push(w);
            biases.push(b);
        }
        if pos != bytes.len() {
            return Err(Error::MalformedRecord(format!(
                "checkpoint has {} trailing bytes",
                bytes.len() - pos
            )));
        }
        Ok(Self {
            key_id: None,
            layer_dims,
            weights,
            biases,
        })
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::InvalidDimensions(
            "layer_dims needs at least input and output".into(),
        ));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidDimensions(
            "layer dimensions must be positive".into(),
        ));
    }
    Ok(())
}

/// `W a + b` with `W` row-major `[out x in]`.
fn affine(w: &[f64], b: &[f64], a: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = a.len();
    let mut out = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = b[o];
        for (wv, av) in row.iter().zip(a) {
            acc += wv * av;
        }
        out.push(acc);
    }
    out
}

/// Stable cross-entropy: returns `(loss, softmax(logits))`.
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + m - logits[label];
    let probs = exps.into_iter().map(|e| e / sum).collect();
    (loss, probs)
}

/// Trains a sub-model on the dataset encrypted with `key`.
///
/// Every training image is encrypted with the key before the forward pass;
/// updates are SGD with momentum (`v = mu v + g`, `w -= lr v`) on
/// batch-averaged gradients. The returned model is bound to the key's id.
/// Deterministic given `cfg.rng_seed`.
pub fn train_submodel(dataset: &Dataset, key: &ShuffleKey, cfg: &TrainConfig) -> Result<SubModel> {
    train_submodel_observed(dataset, key, cfg, |_| {})
}

/// [`train_submodel`] with a per-epoch progress observer.
pub fn train_submodel_observed(
    dataset: &Dataset,
    key: &ShuffleKey,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<SubModel> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let (h, w, c) = dataset.image_shape();
    let input_dim = h * w * c;
    let mut layer_dims = Vec::with_capacity(cfg.hidden_dims.len() + 2);
    layer_dims.push(input_dim);
    layer_dims.extend_from_slice(&cfg.hidden_dims);
    layer_dims.push(dataset.num_classes());

    let encrypted: Vec<Vec<f64>> = dataset
        .images()
        .iter()
        .map(|img| key.encrypt(img).map(|e| e.as_slice().to_vec()))
        .collect::<Result<_>>()?;
    let labels = dataset.labels();

    let root = RngStream::new(cfg.rng_seed);
    let mut model = SubModel::init(&layer_dims, root.derive(b"init").seed())?;
    let mut shuffle_rng = root.derive(b"shuffle");

    let n = encrypted.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut velocity = Gradients::zeros_like(&model);
    let mut batch_grads = Gradients::zeros_like(&model);

    for epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            for g in batch_grads.weights.iter_mut().chain(batch_grads.biases.iter_mut()) {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
            for &idx in batch {
                let (loss, _, correct) =
                    model.backprop_into(&encrypted[idx], labels[idx], &mut batch_grads, false);
                epoch_loss += loss;
                epoch_correct += usize::from(correct);
            }
            batch_grads.scale(1.0 / batch.len() as f64);
            for l in 0..model.weights.len() {
                for (v, g) in velocity.weights[l].iter_mut().zip(&batch_grads.weights[l]) {
                    *v = cfg.momentum * *v + g;
                }
                for (wv, v) in model.weights[l].iter_mut().zip(&velocity.weights[l]) {
                    *wv -= cfg.learning_rate * v;
                }
                for (v, g) in velocity.biases[l].iter_mut().zip(&batch_grads.biases[l]) {
                    *v = cfg.momentum * *v + g;
                }
                for (bv, v) in model.biases[l].iter_mut().zip(&velocity.biases[l]) {
                    *bv -= cfg.learning_rate * v;
                }
            }
        }
        on_epoch(&EpochRecord {
            epoch,
            loss: epoch_loss / n as f64,
            train_acc: epoch_correct as f64 / n as f64,
        });
    }
    model.bind_key(key.id());
    Ok(model)
}
