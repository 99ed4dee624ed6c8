//! Prediction pipelines: the surfaces attacks run against.
//!
//! [`Oracle`] is the black-box contract — probabilities only, no gradients
//! reachable through the type. [`Pipeline`] extends it with a cross-entropy
//! input gradient for white-box attacks. Pipelines are read-only and
//! reentrant; all randomness comes from the caller's stream, so a randomized
//! pipeline gives a fresh draw on every query.

use crate::ensemble::RandomEnsemble;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::{argmax, softmax, SubModel};
use crate::rng::RngStream;
use crate::transform::ShuffleKey;

/// Query-only prediction interface.
pub trait Oracle: Sync {
    fn num_classes(&self) -> usize;

    /// Softmax probabilities for `x`. Randomized pipelines consume `rng`;
    /// deterministic ones ignore it.
    fn probs(&self, x: &ImageTensor, rng: &mut RngStream) -> Result<Vec<f64>>;
}

/// White-box interface: adds the cross-entropy gradient w.r.t. the plaintext
/// input (pulled back through any encryption in the pipeline).
pub trait Pipeline: Oracle {
    /// Cross-entropy toward `class` at `x`, and its input gradient.
    fn ce_loss_and_input_grad(
        &self,
        x: &ImageTensor,
        class: usize,
        rng: &mut RngStream,
    ) -> Result<(f64, ImageTensor)>;
}

/// Predicted class under one draw of the pipeline's randomness.
pub fn predicted_class(oracle: &dyn Oracle, x: &ImageTensor, rng: &mut RngStream) -> Result<usize> {
    Ok(argmax(&oracle.probs(x, rng)?))
}

/// How white-box attacks see a random ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// Every gradient query runs the randomized forward pass with a fresh
    /// subset draw; the attacker receives stochastic gradients.
    Stochastic,
    /// Gradients flow through the deterministic all-members ensemble.
    FullKnowledge,
}

impl GradientMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GradientMode::Stochastic => "stochastic",
            GradientMode::FullKnowledge => "full-knowledge",
        }
    }
}

/// One key-encrypted sub-model.
pub struct SingleModelPipeline<'a> {
    key: &'a ShuffleKey,
    model: &'a SubModel,
}

impl<'a> SingleModelPipeline<'a> {
    /// Pairs a key with a model. A model already bound to a key must be
    /// paired with that key.
    pub fn new(key: &'a ShuffleKey, model: &'a SubModel) -> Result<Self> {
        if let Some(bound) = model.key_id() {
            if bound != key.id() {
                return Err(Error::KeyMismatch {
                    expected: key.id().to_string(),
                    actual: bound.to_string(),
                });
            }
        }
        Ok(Self { key, model })
    }
}

impl Oracle for SingleModelPipeline<'_> {
    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn probs(&self, x: &ImageTensor, _rng: &mut RngStream) -> Result<Vec<f64>> {
        let enc = self.key.encrypt(x)?;
        Ok(softmax(&self.model.forward(enc.as_slice())?))
    }
}

impl Pipeline for SingleModelPipeline<'_> {
    fn ce_loss_and_input_grad(
        &self,
        x: &ImageTensor,
        class: usize,
        _rng: &mut RngStream,
    ) -> Result<(f64, ImageTensor)> {
        let enc = self.key.encrypt(x)?;
        let (loss, grad_enc) = self.model.ce_loss_and_input_grad(enc.as_slice(), class)?;
        let (h, w, c) = x.shape();
        let grad_img = ImageTensor::new(h, w, c, grad_enc)?;
        Ok((loss, self.key.backprop_through_encrypt(&grad_img)?))
    }
}

/// Cross-entropy of the mean probability over `selected` members, with its
/// plaintext input gradient accumulated through every selected member.
fn ensemble_ce_over(
    ensemble: &RandomEnsemble,
    selected: &[usize],
    x: &ImageTensor,
    class: usize,
) -> Result<(f64, ImageTensor)> {
    let k = ensemble.num_classes();
    if class >= k {
        return Err(Error::InvalidLabel {
            label: class,
            num_classes: k,
        });
    }
    let (h, w, c) = x.shape();
    let s = selected.len() as f64;

    let mut encrypted = Vec::with_capacity(selected.len());
    let mut mean = vec![0.0; k];
    for &idx in selected {
        let member = &ensemble.members()[idx];
        let enc = member.key().encrypt(x)?;
        let probs = softmax(&member.model().forward(enc.as_slice())?);
        for (m, p) in mean.iter_mut().zip(&probs) {
            *m += p;
        }
        encrypted.push(enc);
    }
    for m in &mut mean {
        *m /= s;
    }

    let p_class = mean[class].max(f64::MIN_POSITIVE);
    let loss = -p_class.ln();

    // dL/dp_i[class] = -1 / (S * mean[class]) for every selected member.
    let mut cotangent = vec![0.0; k];
    cotangent[class] = -1.0 / (s * p_class);

    let mut grad = ImageTensor::zeros(h, w, c)?;
    for (&idx, enc) in selected.iter().zip(&encrypted) {
        let member = &ensemble.members()[idx];
        let g_enc = member
            .model()
            .input_grad_from_prob_grad(enc.as_slice(), &cotangent)?;
        let g_plain = member
            .key()
            .backprop_through_encrypt(&ImageTensor::new(h, w, c, g_enc)?)?;
        for (g, v) in grad.as_mut_slice().iter_mut().zip(g_plain.as_slice()) {
            *g += v;
        }
    }
    Ok((loss, grad))
}

/// Deterministic all-members ensemble.
pub struct SimpleEnsemblePipeline<'a> {
    ensemble: &'a RandomEnsemble,
}

impl<'a> SimpleEnsemblePipeline<'a> {
    pub fn new(ensemble: &'a RandomEnsemble) -> Self {
        Self { ensemble }
    }
}

impl Oracle for SimpleEnsemblePipeline<'_> {
    fn num_classes(&self) -> usize {
        self.ensemble.num_classes()
    }

    fn probs(&self, x: &ImageTensor, _rng: &mut RngStream) -> Result<Vec<f64>> {
        Ok(self.ensemble.predict_simple(x)?.probs)
    }
}

impl Pipeline for SimpleEnsemblePipeline<'_> {
    fn ce_loss_and_input_grad(
        &self,
        x: &ImageTensor,
        class: usize,
        _rng: &mut RngStream,
    ) -> Result<(f64, ImageTensor)> {
        let all: Vec<usize> = (0..self.ensemble.num_members()).collect();
        ensemble_ce_over(self.ensemble, &all, x, class)
    }
}

/// Random-subset ensemble. Queries draw a fresh `S`-subset from the caller's
/// stream; gradients follow the configured [`GradientMode`].
pub struct RandomEnsemblePipeline<'a> {
    ensemble: &'a RandomEnsemble,
    gradient_mode: GradientMode,
}

impl<'a> RandomEnsemblePipeline<'a> {
    pub fn new(ensemble: &'a RandomEnsemble, gradient_mode: GradientMode) -> Self {
        Self {
            ensemble,
            gradient_mode,
        }
    }

    pub fn gradient_mode(&self) -> GradientMode {
        self.gradient_mode
    }
}

impl Oracle for RandomEnsemblePipeline<'_> {
    fn num_classes(&self) -> usize {
        self.ensemble.num_classes()
    }

    fn probs(&self, x: &ImageTensor, rng: &mut RngStream) -> Result<Vec<f64>> {
        Ok(self.ensemble.predict_random(x, rng)?.probs)
    }
}

impl Pipeline for RandomEnsemblePipeline<'_> {
    fn ce_loss_and_input_grad(
        &self,
        x: &ImageTensor,
        class: usize,
        rng: &mut RngStream,
    ) -> Result<(f64, ImageTensor)> {
        let selected: Vec<usize> = match self.gradient_mode {
            GradientMode::Stochastic => rng.uniform_subset(
                self.ensemble.num_members(),
                self.ensemble.selection_size(),
            )?,
            GradientMode::FullKnowledge => (0..self.ensemble.num_members()).collect(),
        };
        ensemble_ce_over(self.ensemble, &selected, x, class)
    }
}

/// Adapter exposing a query-only oracle through the [`Pipeline`] trait.
///
/// Gradient calls fail with [`Error::GradientUnavailable`]; used when a
/// dynamically configured attack list meets a black-box-only target.
pub struct OracleOnly<'a> {
    inner: &'a dyn Oracle,
}

impl<'a> OracleOnly<'a> {
    pub fn new(inner: &'a dyn Oracle) -> Self {
        Self { inner }
    }
}

impl Oracle for OracleOnly<'_> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn probs(&self, x: &ImageTensor, rng: &mut RngStream) -> Result<Vec<f64>> {
        self.inner.probs(x, rng)
    }
}

impl Pipeline for OracleOnly<'_> {
    fn ce_loss_and_input_grad(
        &self,
        _x: &ImageTensor,
        _class: usize,
        _rng: &mut RngStream,
    ) -> Result<(f64, ImageTensor)> {
        Err(Error::GradientUnavailable(
            "pipeline exposes probabilities only".into(),
        ))
    }
}
