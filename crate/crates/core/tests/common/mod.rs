//! Shared fixtures for the integration and acceptance tests.
#![allow(dead_code)]

use soda::data::{generate_synthetic, Batch, DomainData, GroupSizes, SyntheticCounts, SyntheticSpec};
use soda::label_space::LabelTopology;
use soda::network::{AdversarialWiring, ConvConfig, ModelConfig, ModelState};
use soda::objectives::{objective, EPS, BatchOutputs, LossWeights, SampleOutputs};
use soda::trainer::{batch_for_step, compute_gradients, TrainConfig};

/// feature_dim = hidden_dim = 8 on an 8×8 canvas.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        extractor: ConvConfig {
            height: 8,
            width: 8,
            channels: 1,
            block_channels: vec![2, 3],
            feature_dim: 8,
        },
        hidden_dim: 8,
        detach_recognizer: false,
    }
}

pub fn small_data(seed: u64) -> DomainData {
    generate_synthetic(&SyntheticSpec {
        canvas_size: 8,
        counts: SyntheticCounts {
            source: 10,
            target_labeled: 6,
            target_unlabeled: 8,
        },
        seed,
        ..Default::default()
    })
    .unwrap()
}

pub fn small_batch(data: &DomainData, seed: u64) -> Batch {
    let cfg = TrainConfig {
        seed,
        group_sizes: GroupSizes {
            source: 3,
            target_labeled: 3,
            target_unlabeled: 3,
        },
        ..Default::default()
    };
    batch_for_step(data, &cfg, 1).unwrap()
}

pub fn outputs(model: &ModelState, batch: &Batch) -> BatchOutputs {
    let run = |g: &[soda::data::Sample]| -> Vec<SampleOutputs> {
        g.iter()
            .map(|s| {
                let f = model.forward(&s.image).unwrap();
                SampleOutputs {
                    y_hat: f.y_hat,
                    d_g_hat: f.d_g_hat,
                    d_c_hat: f.d_c_hat,
                    r_hat: f.r_hat,
                    labels: s.labels().cloned(),
                }
            })
            .collect()
    };
    BatchOutputs {
        source: run(&batch.source_group),
        target_labeled: run(&batch.target_labeled_group),
        target_unlabeled: run(&batch.target_unlabeled_group),
    }
}

/// Total objective with the unlabeled recognizer outputs pinned to `frozen`:
/// the function whose gradient the stop-gradient convention describes.
pub fn frozen_total(model: &ModelState, batch: &Batch, topology: &LabelTopology, w: &LossWeights, frozen: &[f64]) -> f64 {
    let mut out = outputs(model, batch);
    for (s, &r) in out.target_unlabeled.iter_mut().zip(frozen) {
        s.r_hat = r;
    }
    objective(&out, topology, w).unwrap().0.total
}

pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates where the perturbation crosses a ReLU or max-pool switch,
    /// detected by central differences at `h` and `h / 2` disagreeing or by
    /// the two one-sided differences disagreeing (a switch exactly at the
    /// base point).
    pub kinks: usize,
}

/// Central differences with step `h` on every parameter, against the
/// identity-wired analytic gradient. Relative error is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(model: &ModelState, batch: &Batch, topology: &LabelTopology, w: &LossWeights, h: f64, floor: f64) -> GradCheck {
    let frozen: Vec<f64> = outputs(model, batch).target_unlabeled.iter().map(|s| s.r_hat).collect();
    let (_, grads) = compute_gradients(model, batch, topology, w, AdversarialWiring::Identity, true).unwrap();
    let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.to_vec()).collect();
    let f0 = frozen_total(model, batch, topology, w, &frozen);

    let mut probe = model.clone();
    let mut result = GradCheck {
        max_rel: 0.0,
        checked: 0,
        kinks: 0,
    };
    let mut flat = 0;
    let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    for (ti, &len) in shapes.iter().enumerate() {
        for i in 0..len {
            let orig = probe.tensors()[ti][i];
            let mut central = |step: f64| {
                probe.tensors_mut()[ti][i] = orig + step;
                let fp = frozen_total(&probe, batch, topology, w, &frozen);
                probe.tensors_mut()[ti][i] = orig - step;
                let fm = frozen_total(&probe, batch, topology, w, &frozen);
                probe.tensors_mut()[ti][i] = orig;
                (fp, fm)
            };
            let (fp, fm) = central(h);
            let numeric = (fp - fm) / (2.0 * h);
            let (hp, hm) = central(h / 2.0);
            let half = (hp - hm) / h;
            let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
            let a = analytic[flat];
            flat += 1;
            let switched = (numeric - half).abs() > 1e-7 * numeric.abs().max(1.0);
            let at_switch = (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1e-2);
            if switched || at_switch {
                result.kinks += 1;
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            result.max_rel = result.max_rel.max(rel);
            result.checked += 1;
        }
    }
    result
}

/// True when no probability in the batch is inside the loss clamp, where
/// reported values are flat but gradients are not.
pub fn clamp_inactive(model: &ModelState, batch: &Batch) -> bool {
    let ok = |p: f64| (EPS..=1.0 - EPS).contains(&p);
    let o = outputs(model, batch);
    o.source.iter().chain(&o.target_labeled).chain(&o.target_unlabeled).all(|s| {
        ok(s.d_g_hat) && ok(s.d_c_hat) && ok(s.r_hat) && s.y_hat.iter().all(|&p| ok(p))
    })
}

pub fn small_model(topology: &LabelTopology, seed: u64) -> ModelState {
    ModelState::new(&small_config(), topology.len(), seed).unwrap()
}
