//! Feature extractor, multi-label classifier, the two domain discriminators,
//! the common-label recognizer, and gradient reversal.
//!
//! Both discriminators read the features through a [`GradientReversal`]; the
//! classifier and the recognizer read them directly. All heads produce
//! probabilities; the backward pass takes gradients w.r.t. their logits.

mod extractor;
pub mod layers;

pub use extractor::{ConvCache, ConvConfig, ConvExtractor, FeatureExtractor, FeatureMap};
pub use layers::{sigmoid, Linear, Mlp, MlpCache};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};

/// Architecture of a [`ModelState`] built on the default extractor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub extractor: ConvConfig,
    /// Width of both hidden layers of the discriminator and recognizer heads.
    pub hidden_dim: usize,
    /// Keep the recognizer loss from reaching the extractor.
    pub detach_recognizer: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            extractor: ConvConfig::default(),
            hidden_dim: 64,
            detach_recognizer: false,
        }
    }
}

/// Identity on the forward pass; multiplies the gradient by `-coeff` on the
/// backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReversal {
    coeff: f64,
}

impl GradientReversal {
    pub fn new(coeff: f64) -> Result<Self> {
        if !(coeff >= 0.0) || !coeff.is_finite() {
            return Err(Error::invalid(format!(
                "gradient reversal coefficient must be finite and >= 0, got {coeff}"
            )));
        }
        Ok(Self { coeff })
    }

    pub fn coeff(&self) -> f64 {
        self.coeff
    }

    pub fn forward(&self, h: &[f64]) -> Vec<f64> {
        h.to_vec()
    }

    pub fn backward(&self, upstream: &[f64]) -> Vec<f64> {
        upstream.iter().map(|g| -self.coeff * g).collect()
    }
}

/// How discriminator gradients reach the extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdversarialWiring {
    /// Through gradient reversal with the model's `grl_coeff`.
    Reversed,
    /// Straight through, as if the reversal were replaced by identity.
    Identity,
}

/// `2 / (1 + exp(-10 p)) - 1` for training progress `p ∈ [0, 1]`.
pub fn grl_ramp(progress: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * progress.clamp(0.0, 1.0)).exp()) - 1.0
}

/// Parameters of all five learnable components.
///
/// A zeroed clone (see [`ModelState::zeros_like`]) is used as the gradient
/// buffer, so gradients share the parameter layout exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<E: FeatureExtractor = ConvExtractor> {
    pub extractor: E,
    pub classifier: Linear,
    pub dg_head: Mlp,
    pub dc_head: Mlp,
    pub r_head: Mlp,
    pub hidden_dim: usize,
    pub grl_coeff: f64,
    pub detach_recognizer: bool,
}

/// Gradients with the same layout as the model.
pub type Gradients<E = ConvExtractor> = ModelState<E>;

/// Public view of one sample's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub h: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub d_g_hat: f64,
    pub d_c_hat: f64,
    pub r_hat: f64,
    pub conv_activations: FeatureMap,
}

/// Forward pass of one sample with everything the backward pass needs.
pub struct Forward<E: FeatureExtractor> {
    pub h: Vec<f64>,
    pub y_logits: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub dg: MlpCache,
    pub dc: MlpCache,
    pub r: MlpCache,
    pub d_g_hat: f64,
    pub d_c_hat: f64,
    pub r_hat: f64,
    pub cache: E::Cache,
}

impl<E: FeatureExtractor> Forward<E> {
    pub fn trace(&self) -> ForwardTrace {
        ForwardTrace {
            h: self.h.clone(),
            y_hat: self.y_hat.clone(),
            d_g_hat: self.d_g_hat,
            d_c_hat: self.d_c_hat,
            r_hat: self.r_hat,
            conv_activations: E::activation_map(&self.cache),
        }
    }
}

/// Loss gradients w.r.t. one sample's head logits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadGrads {
    pub y_hat: Vec<f64>,
    pub d_g_hat: f64,
    pub d_c_hat: f64,
    pub r_hat: f64,
}

impl HeadGrads {
    pub fn zeros(num_labels: usize) -> Self {
        Self {
            y_hat: vec![0.0; num_labels],
            ..Default::default()
        }
    }
}

impl ModelState<ConvExtractor> {
    /// Fresh model with seeded initialization.
    pub fn new(config: &ModelConfig, num_labels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extractor = ConvExtractor::new(config.extractor.clone(), &mut rng)?;
        let mut model = Self::with_extractor(extractor, num_labels, config.hidden_dim, &mut rng)?;
        model.detach_recognizer = config.detach_recognizer;
        Ok(model)
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            extractor: self.extractor.config().clone(),
            hidden_dim: self.hidden_dim,
            detach_recognizer: self.detach_recognizer,
        }
    }
}

impl<E: FeatureExtractor> ModelState<E> {
    pub fn with_extractor<R: rand::Rng>(
        extractor: E,
        num_labels: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_labels == 0 || hidden_dim == 0 {
            return Err(Error::invalid("num_labels and hidden_dim must be positive"));
        }
        let f = extractor.feature_dim();
        Ok(Self {
            classifier: Linear::new(f, num_labels, rng),
            dg_head: Mlp::new(f, hidden_dim, rng),
            dc_head: Mlp::new(f, hidden_dim, rng),
            r_head: Mlp::new(f, hidden_dim, rng),
            extractor,
            hidden_dim,
            grl_coeff: 1.0,
            detach_recognizer: false,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim()
    }

    pub fn num_labels(&self) -> usize {
        self.classifier.out_dim
    }

    pub fn zeros_like(&self) -> Gradients<E> {
        Self {
            extractor: self.extractor.zeros_like(),
            classifier: self.classifier.zeros_like(),
            dg_head: self.dg_head.zeros_like(),
            dc_head: self.dc_head.zeros_like(),
            r_head: self.r_head.zeros_like(),
            hidden_dim: self.hidden_dim,
            grl_coeff: self.grl_coeff,
            detach_recognizer: self.detach_recognizer,
        }
    }

    /// All parameter tensors in declaration order: extractor, classifier,
    /// general discriminator, common discriminator, recognizer.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.extractor.tensors();
        v.extend(self.classifier.tensors());
        v.extend(self.dg_head.tensors());
        v.extend(self.dc_head.tensors());
        v.extend(self.r_head.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.extractor.tensors_mut();
        v.extend(self.classifier.tensors_mut());
        v.extend(self.dg_head.tensors_mut());
        v.extend(self.dc_head.tensors_mut());
        v.extend(self.r_head.tensors_mut());
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn check_h(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.feature_dim() {
            return Err(Error::LengthMismatch {
                expected: self.feature_dim(),
                actual: h.len(),
            });
        }
        Ok(())
    }

    pub fn forward_features(&self, x: &Image) -> Result<Vec<f64>> {
        Ok(self.extractor.forward(x)?.0)
    }

    pub fn classify(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.check_h(h)?;
        Ok(self.classifier.forward(h).into_iter().map(sigmoid).collect())
    }

    pub fn discriminate_general(&self, h: &[f64]) -> Result<f64> {
        self.check_h(h)?;
        Ok(sigmoid(self.dg_head.forward(&self.reversal().forward(h)).logit))
    }

    pub fn discriminate_common(&self, h: &[f64]) -> Result<f64> {
        self.check_h(h)?;
        Ok(sigmoid(self.dc_head.forward(&self.reversal().forward(h)).logit))
    }

    pub fn recognize(&self, h: &[f64]) -> Result<f64> {
        self.check_h(h)?;
        Ok(sigmoid(self.r_head.forward(h).logit))
    }

    fn reversal(&self) -> GradientReversal {
        GradientReversal {
            coeff: self.grl_coeff,
        }
    }

    /// Runs every head on one image.
    pub fn forward(&self, x: &Image) -> Result<Forward<E>> {
        let (h, cache) = self.extractor.forward(x)?;
        let y_logits = self.classifier.forward(&h);
        let y_hat = y_logits.iter().copied().map(sigmoid).collect();
        let reversed = self.reversal().forward(&h);
        let dg = self.dg_head.forward(&reversed);
        let dc = self.dc_head.forward(&reversed);
        let r = self.r_head.forward(&h);
        Ok(Forward {
            d_g_hat: sigmoid(dg.logit),
            d_c_hat: sigmoid(dc.logit),
            r_hat: sigmoid(r.logit),
            h,
            y_logits,
            y_hat,
            dg,
            dc,
            r,
            cache,
        })
    }

    /// Backpropagates `upstream` (gradients w.r.t. head logits) for one
    /// sample and accumulates parameter gradients into `grad`.
    pub fn backward(&self, fwd: &Forward<E>, upstream: &HeadGrads, wiring: AdversarialWiring, grad: &mut Gradients<E>) {
        let mut dh = self.classifier.backward(&fwd.h, &upstream.y_hat, &mut grad.classifier);

        if upstream.r_hat != 0.0 {
            let dr = self.r_head.backward(&fwd.h, &fwd.r, upstream.r_hat, &mut grad.r_head);
            if !self.detach_recognizer {
                layers::axpy(1.0, &dr, &mut dh);
            }
        }

        let mut adversarial = vec![0.0; dh.len()];
        let mut any_adversarial = false;
        if upstream.d_g_hat != 0.0 {
            let d = self.dg_head.backward(&fwd.h, &fwd.dg, upstream.d_g_hat, &mut grad.dg_head);
            layers::axpy(1.0, &d, &mut adversarial);
            any_adversarial = true;
        }
        if upstream.d_c_hat != 0.0 {
            let d = self.dc_head.backward(&fwd.h, &fwd.dc, upstream.d_c_hat, &mut grad.dc_head);
            layers::axpy(1.0, &d, &mut adversarial);
            any_adversarial = true;
        }
        if any_adversarial {
            let into_extractor = match wiring {
                AdversarialWiring::Reversed => self.reversal().backward(&adversarial),
                AdversarialWiring::Identity => adversarial,
            };
            layers::axpy(1.0, &into_extractor, &mut dh);
        }

        self.extractor.backward(&fwd.cache, &dh, &mut grad.extractor);
    }

    /// Gradient of the pre-sigmoid logit of `label_index` w.r.t. the last
    /// convolutional activation map, together with that map.
    pub fn logit_activation_gradient(&self, x: &Image, label_index: usize) -> Result<(FeatureMap, FeatureMap)> {
        if label_index >= self.num_labels() {
            return Err(Error::invalid(format!("label index {label_index} out of range")));
        }
        let (_h, cache) = self.extractor.forward(x)?;
        let f = self.feature_dim();
        let dh = self.classifier.weight[label_index * f..(label_index + 1) * f].to_vec();
        let grad = self.extractor.activation_gradient(&cache, &dh);
        Ok((E::activation_map(&cache), grad))
    }
}
