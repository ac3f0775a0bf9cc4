//! Browser demo: renders synthetic benchmark samples, scores AUC on typed-in
//! data, and measures the proxy-A-distance between two Gaussian clouds.
//!
//! The `#[wasm_bindgen]` wrappers are thin; the logic lives in plain
//! functions so it can be tested natively.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use soda::data::{generate_synthetic, ShiftParams, SyntheticCounts, SyntheticSpec};
use soda::evaluation::{auc_roc, proxy_a_distance, PadConfig};
use wasm_bindgen::prelude::*;

/// One rendered sample, ready for `ImageData`.
#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct DemoImage {
    size: usize,
    rgba: Vec<u8>,
    labels: String,
}

#[wasm_bindgen]
impl DemoImage {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// Comma-separated label names.
    #[wasm_bindgen(getter)]
    pub fn labels(&self) -> String {
        self.labels.clone()
    }
}

pub fn render(target: bool, shift: ShiftParams, seed: u64) -> Result<DemoImage, String> {
    let spec = SyntheticSpec {
        counts: SyntheticCounts {
            source: 1,
            target_labeled: 1,
            target_unlabeled: 1,
        },
        shift,
        seed,
        ..Default::default()
    };
    let data = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let s = if target { &data.target_unlabeled[0] } else { &data.source[0] };
    let labels = s.evaluation_labels().expect("synthetic samples keep their labels");
    let rgba = s
        .image
        .data
        .iter()
        .flat_map(|&v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect();
    Ok(DemoImage {
        size: spec.canvas_size,
        rgba,
        labels: data.topology.decode(labels).map_err(|e| e.to_string())?.join(","),
    })
}

/// Parses `score,label` lines (label 0 or 1) and returns the AUC.
pub fn auc_from_text(text: &str) -> Result<f64, String> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().map(str::trim).enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = || format!("line {}: expected `score,label`", i + 1);
        let (s, l) = line.split_once(',').ok_or_else(bad)?;
        scores.push(s.trim().parse::<f64>().map_err(|_| bad())?);
        labels.push(match l.trim() {
            "1" => true,
            "0" => false,
            _ => return Err(bad()),
        });
    }
    auc_roc(&scores, &labels).map_err(|e| e.to_string())
}

/// d_A between `n` standard-normal points and `n` points shifted by
/// `separation` along every axis of a `dim`-dimensional space.
pub fn pad_between_clouds(separation: f64, n: usize, dim: usize, seed: u64) -> Result<f64, String> {
    if n < 4 || dim == 0 {
        return Err("need at least 4 points per cloud and 1 dimension".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = |shift: f64| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) + shift).collect())
            .collect()
    };
    let a = cloud(0.0);
    let b = cloud(separation);
    let cfg = PadConfig {
        seed,
        ..Default::default()
    };
    proxy_a_distance(&a, &b, &cfg).map(|r| r.d_a).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = renderSample)]
pub fn render_sample(target: bool, gamma: f64, noise_sigma: f64, vignette: f64, seed: u32) -> Result<DemoImage, JsError> {
    let shift = ShiftParams {
        gamma,
        noise_sigma,
        vignette,
    };
    render(target, shift, u64::from(seed)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = aucFromText)]
pub fn auc_from_text_js(text: &str) -> Result<f64, JsError> {
    auc_from_text(text).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = padBetweenClouds)]
pub fn pad_between_clouds_js(separation: f64, n: usize, dim: usize, seed: u32) -> Result<f64, JsError> {
    pad_between_clouds(separation, n, dim, u64::from(seed)).map_err(|e| JsError::new(&e))
}
