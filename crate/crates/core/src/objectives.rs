//! Classifier, recognizer and discriminator losses and their weighted sum.
//!
//! Every expectation is a mean over the matching minibatch group; an empty
//! group contributes 0. Probabilities are clamped to `[EPS, 1 - EPS]` before
//! taking logarithms. The clamp bounds reported values only: gradients are
//! those of the unclamped logarithm, which through the sigmoid become the
//! bounded logit-space cross-entropy gradients. A discriminator pushed past
//! the clamp therefore still receives a gradient and can recover.
//!
//! The recognizer output weighs unlabeled samples in both discriminator
//! losses as a constant: those terms never produce a gradient for it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_space::{LabelTopology, LabelVector};
use crate::network::HeadGrads;

pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_dg: f64,
    pub lambda_dc_label: f64,
    pub lambda_dc_un: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_r: 1.0,
            lambda_dg: 1.0,
            lambda_dc_label: 1.0,
            lambda_dc_un: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zeros() -> Self {
        Self {
            lambda_r: 0.0,
            lambda_dg: 0.0,
            lambda_dc_label: 0.0,
            lambda_dc_un: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_r, self.lambda_dg, self.lambda_dc_label, self.lambda_dc_un];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Head outputs of one sample plus its training-visible labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutputs {
    pub y_hat: Vec<f64>,
    pub d_g_hat: f64,
    pub d_c_hat: f64,
    pub r_hat: f64,
    pub labels: Option<LabelVector>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchOutputs {
    pub source: Vec<SampleOutputs>,
    pub target_labeled: Vec<SampleOutputs>,
    pub target_unlabeled: Vec<SampleOutputs>,
}

/// Gradients w.r.t. head logits, laid out like [`BatchOutputs`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchGrads {
    pub source: Vec<HeadGrads>,
    pub target_labeled: Vec<HeadGrads>,
    pub target_unlabeled: Vec<HeadGrads>,
}

impl BatchGrads {
    pub fn zeros_like(batch: &BatchOutputs, num_labels: usize) -> Self {
        let z = |n: usize| vec![HeadGrads::zeros(num_labels); n];
        Self {
            source: z(batch.source.len()),
            target_labeled: z(batch.target_labeled.len()),
            target_unlabeled: z(batch.target_unlabeled.len()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_gy: f64,
    pub l_r: f64,
    pub l_dg: f64,
    pub l_dc_label: f64,
    pub l_dc_un: f64,
    pub total: f64,
    pub n_source: usize,
    pub n_target_labeled: usize,
    pub n_target_unlabeled: usize,
}

/// `-log(clamp(p))` and the derivative of `-log(p)` w.r.t. the logit of `p`.
fn neg_log(p: f64) -> (f64, f64) {
    let c = p.clamp(EPS, 1.0 - EPS);
    (-c.ln(), p - 1.0)
}

/// `-log(1 - clamp(p))` and the derivative of `-log(1 - p)` w.r.t. the logit.
fn neg_log1m(p: f64) -> (f64, f64) {
    let c = p.clamp(EPS, 1.0 - EPS);
    (-(1.0 - c).ln(), p)
}

fn labels_of(s: &SampleOutputs) -> Result<&LabelVector> {
    s.labels
        .as_ref()
        .ok_or_else(|| Error::invalid("labeled group contains a sample without labels"))
}

/// Group-wise gradient sink; `None` when only the value is wanted.
type Sink<'a> = Option<(&'a mut BatchGrads, f64)>;

fn sink(g: &mut BatchGrads, lambda: f64) -> Sink<'_> {
    (lambda != 0.0).then_some((g, lambda))
}

fn classifier_term(batch: &BatchOutputs, mut sink: Sink<'_>) -> Result<f64> {
    let n = batch.source.len() + batch.target_labeled.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (group, which) in [(&batch.source, 0), (&batch.target_labeled, 1)] {
        for (k, s) in group.iter().enumerate() {
            let labels = labels_of(s)?;
            if labels.len() != s.y_hat.len() {
                return Err(Error::LengthMismatch {
                    expected: labels.len(),
                    actual: s.y_hat.len(),
                });
            }
            let active = labels.mask().iter().filter(|&&m| m).count();
            if active == 0 {
                continue;
            }
            let mut sample_loss = 0.0;
            let coef = 1.0 / (n as f64 * active as f64);
            for (l, (&y, &m)) in labels.values().iter().zip(labels.mask()).enumerate() {
                if !m {
                    continue;
                }
                let (v, d) = if y { neg_log(s.y_hat[l]) } else { neg_log1m(s.y_hat[l]) };
                sample_loss += v;
                if let Some((g, scale)) = sink.as_mut() {
                    let grads = if which == 0 { &mut g.source } else { &mut g.target_labeled };
                    grads[k].y_hat[l] += *scale * coef * d;
                }
            }
            total += sample_loss / active as f64;
        }
    }
    Ok(total / n as f64)
}

fn domain_general_term(batch: &BatchOutputs, mut sink: Sink<'_>) -> f64 {
    let mut total = 0.0;
    let ns = batch.source.len();
    if ns > 0 {
        let mut acc = 0.0;
        for (k, s) in batch.source.iter().enumerate() {
            let (v, d) = neg_log(s.d_g_hat);
            acc += v;
            if let Some((g, scale)) = sink.as_mut() {
                g.source[k].d_g_hat += *scale * d / ns as f64;
            }
        }
        total += acc / ns as f64;
    }
    let nl = batch.target_labeled.len();
    if nl > 0 {
        let mut acc = 0.0;
        for (k, s) in batch.target_labeled.iter().enumerate() {
            let (v, d) = neg_log1m(s.d_g_hat);
            acc += v;
            if let Some((g, scale)) = sink.as_mut() {
                g.target_labeled[k].d_g_hat += *scale * d / nl as f64;
            }
        }
        total += acc / nl as f64;
    }
    let nu = batch.target_unlabeled.len();
    if nu > 0 {
        let mut acc = 0.0;
        for (k, s) in batch.target_unlabeled.iter().enumerate() {
            let (v, d) = neg_log1m(s.d_g_hat);
            // r_hat is a constant weight here.
            acc += s.r_hat * v;
            if let Some((g, scale)) = sink.as_mut() {
                g.target_unlabeled[k].d_g_hat += *scale * s.r_hat * d / nu as f64;
            }
        }
        total += acc / nu as f64;
    }
    total
}

fn domain_common_labeled_term(batch: &BatchOutputs, topology: &LabelTopology, mut sink: Sink<'_>) -> Result<f64> {
    let mut total = 0.0;
    for (group, is_source) in [(&batch.source, true), (&batch.target_labeled, false)] {
        let mut qualifying = Vec::new();
        for (k, s) in group.iter().enumerate() {
            if topology.has_common_label(labels_of(s)?)? {
                qualifying.push(k);
            }
        }
        if qualifying.is_empty() {
            continue;
        }
        let n = qualifying.len() as f64;
        let mut acc = 0.0;
        for &k in &qualifying {
            let p = group[k].d_c_hat;
            let (v, d) = if is_source { neg_log(p) } else { neg_log1m(p) };
            acc += v;
            if let Some((g, scale)) = sink.as_mut() {
                let grads = if is_source { &mut g.source } else { &mut g.target_labeled };
                grads[k].d_c_hat += *scale * d / n;
            }
        }
        total += acc / n;
    }
    Ok(total)
}

fn domain_common_unlabeled_term(batch: &BatchOutputs, mut sink: Sink<'_>) -> f64 {
    let nu = batch.target_unlabeled.len();
    if nu == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (k, s) in batch.target_unlabeled.iter().enumerate() {
        let (v, d) = neg_log1m(s.d_c_hat);
        acc += s.r_hat * v;
        if let Some((g, scale)) = sink.as_mut() {
            g.target_unlabeled[k].d_c_hat += *scale * s.r_hat * d / nu as f64;
        }
    }
    acc / nu as f64
}

fn recognizer_term(batch: &BatchOutputs, topology: &LabelTopology, mut sink: Sink<'_>) -> Result<f64> {
    let mut with_common = Vec::new();
    let mut without = Vec::new();
    for (group, which) in [(&batch.source, 0), (&batch.target_labeled, 1)] {
        for (k, s) in group.iter().enumerate() {
            if topology.has_common_label(labels_of(s)?)? {
                with_common.push((which, k));
            } else {
                without.push((which, k));
            }
        }
    }
    let mut total = 0.0;
    for (members, positive) in [(&with_common, true), (&without, false)] {
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        let mut acc = 0.0;
        for &(which, k) in members.iter() {
            let group = if which == 0 { &batch.source } else { &batch.target_labeled };
            let (v, d) = if positive { neg_log(group[k].r_hat) } else { neg_log1m(group[k].r_hat) };
            acc += v;
            if let Some((g, scale)) = sink.as_mut() {
                let grads = if which == 0 { &mut g.source } else { &mut g.target_labeled };
                grads[k].r_hat += *scale * d / n;
            }
        }
        total += acc / n;
    }
    Ok(total)
}

/// Masked multi-label binary cross-entropy over source and labeled-target samples.
pub fn loss_classifier(batch: &BatchOutputs) -> Result<f64> {
    classifier_term(batch, None)
}

pub fn loss_domain_general(batch: &BatchOutputs) -> f64 {
    domain_general_term(batch, None)
}

/// Computed only on labeled samples that carry at least one common label.
pub fn loss_domain_common_labeled(batch: &BatchOutputs, topology: &LabelTopology) -> Result<f64> {
    domain_common_labeled_term(batch, topology, None)
}

pub fn loss_domain_common_unlabeled(batch: &BatchOutputs) -> f64 {
    domain_common_unlabeled_term(batch, None)
}

pub fn loss_recognizer(batch: &BatchOutputs, topology: &LabelTopology) -> Result<f64> {
    recognizer_term(batch, topology, None)
}

/// Weighted sum of the five parts, rejecting non-finite inputs.
pub fn total_objective(report: &LossReport, w: &LossWeights) -> Result<f64> {
    let parts = [
        ("l_gy", report.l_gy),
        ("l_r", report.l_r),
        ("l_dg", report.l_dg),
        ("l_dc_label", report.l_dc_label),
        ("l_dc_un", report.l_dc_un),
    ];
    for (name, v) in parts {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name.into() });
        }
    }
    Ok(report.l_gy
        + w.lambda_r * report.l_r
        + w.lambda_dg * report.l_dg
        + w.lambda_dc_label * report.l_dc_label
        + w.lambda_dc_un * report.l_dc_un)
}

/// All five losses, their weighted total, and the gradient of the total
/// w.r.t. every head logit. Terms with zero weight contribute no
/// gradient at all.
///
/// Minimizing the total with the discriminators behind gradient reversal
/// trains the discriminators on their own cross-entropy while pushing the
/// extractor the opposite way.
pub fn objective(batch: &BatchOutputs, topology: &LabelTopology, w: &LossWeights) -> Result<(LossReport, BatchGrads)> {
    w.validate()?;
    let mut grads = BatchGrads::zeros_like(batch, topology.len());

    let l_gy = classifier_term(batch, Some((&mut grads, 1.0)))?;
    let l_r = recognizer_term(batch, topology, sink(&mut grads, w.lambda_r))?;
    let l_dg = domain_general_term(batch, sink(&mut grads, w.lambda_dg));
    let l_dc_label = domain_common_labeled_term(batch, topology, sink(&mut grads, w.lambda_dc_label))?;
    let l_dc_un = domain_common_unlabeled_term(batch, sink(&mut grads, w.lambda_dc_un));

    let mut report = LossReport {
        l_gy,
        l_r,
        l_dg,
        l_dc_label,
        l_dc_un,
        total: 0.0,
        n_source: batch.source.len(),
        n_target_labeled: batch.target_labeled.len(),
        n_target_unlabeled: batch.target_unlabeled.len(),
    };
    report.total = total_objective(&report, w)?;
    Ok((report, grads))
}
