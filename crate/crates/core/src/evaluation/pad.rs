//! Proxy-A-Distance between two feature clouds.
//!
//! Features are labeled by domain, shuffled and split per domain; a linear max-margin
//! classifier (hinge loss with an L2 penalty weighted by `1/C`) is fit by
//! full-batch subgradient descent for every `C` in the grid, and the smallest
//! held-out error `ε` gives `d_A = 2 (1 - 2 ε)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PadConfig {
    pub c_grid: Vec<f64>,
    /// Fraction of the pooled samples held out for measuring the error.
    pub split_fraction: f64,
    pub epochs: usize,
    /// Initial subgradient step; epoch `t` uses `step_size / sqrt(t)`.
    pub step_size: f64,
    pub seed: u64,
    /// Independent shuffles; the reported distance is their mean.
    pub repeats: usize,
}

impl Default for PadConfig {
    fn default() -> Self {
        Self {
            c_grid: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            split_fraction: 0.5,
            epochs: 200,
            step_size: 0.5,
            seed: 0,
            repeats: 1,
        }
    }
}

impl PadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_grid.is_empty() || self.c_grid.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
            return Err(Error::invalid("c_grid must be non-empty with positive entries"));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::invalid("split_fraction must lie in (0, 1)"));
        }
        if self.epochs == 0 || self.repeats == 0 || !(self.step_size > 0.0) {
            return Err(Error::invalid("epochs, repeats and step_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PadReport {
    pub d_a: f64,
    /// Smallest held-out error of each repeat.
    pub min_errors: Vec<f64>,
    /// `(C, error)` pairs of the first repeat.
    pub errors_by_c: Vec<(f64, f64)>,
    /// Sample standard deviation of `d_A` across repeats (0 for one repeat).
    pub d_a_std: f64,
}

/// `2 (1 - 2 ε)`.
pub fn pad_from_error(error: f64) -> f64 {
    2.0 * (1.0 - 2.0 * error)
}

/// Linear classifier `sign(w·x + b)`, source = +1.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearSvm {
    /// Minimizes `(1 / (2 C n)) |w|² + mean hinge(y (w·x + b))`.
    pub fn fit(x: &[Vec<f64>], y: &[f64], c: f64, epochs: usize, step_size: f64) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let n = x.len() as f64;
        let lambda = 1.0 / (c * n);
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let mut gw = vec![0.0; d];
        for t in 1..=epochs {
            gw.iter_mut().zip(&w).for_each(|(g, wi)| *g = lambda * wi);
            let mut gb = 0.0;
            for (xi, &yi) in x.iter().zip(y) {
                let margin = yi * (dot(&w, xi) + b);
                if margin < 1.0 {
                    for (g, v) in gw.iter_mut().zip(xi) {
                        *g -= yi * v / n;
                    }
                    gb -= yi / n;
                }
            }
            let eta = step_size / (t as f64).sqrt();
            w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= eta * g);
            b -= eta * gb;
        }
        Self { weights: w, bias: b }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        if dot(&self.weights, x) + self.bias >= 0.0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Fraction of misclassified rows, labels in `{-1, +1}`.
    pub fn error(&self, x: &[Vec<f64>], y: &[f64]) -> f64 {
        let wrong = x.iter().zip(y).filter(|(xi, &yi)| self.predict(xi) != yi).count();
        wrong as f64 / x.len() as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn standardize(train: &mut [Vec<f64>], test: &mut [Vec<f64>]) {
    let d = train[0].len();
    let n = train.len() as f64;
    for j in 0..d {
        let mean = train.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = train.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for r in train.iter_mut().chain(test.iter_mut()) {
            r[j] = (r[j] - mean) / sd;
        }
    }
}

fn one_repeat(source: &[Vec<f64>], target: &[Vec<f64>], cfg: &PadConfig, seed: u64) -> Result<Vec<(f64, f64)>> {
    // Each domain is split separately so train and test share the class
    // ratio. Both shuffles restart from the same seed, so equally sized
    // domains are split by the same permutation: row i of each lands on the
    // same side. With complementary halves drawn independently, any shared
    // rows would make the train and test mean differences exact negatives of
    // each other and push the error above one half.
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (rows, y) in [(source, 1.0), (target, -1.0)] {
        let mut idx: Vec<usize> = (0..rows.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (cfg.split_fraction * rows.len() as f64).round() as usize;
        if n_test == 0 || n_test == rows.len() {
            return Err(Error::invalid("too few samples per domain to split for PAD"));
        }
        for (k, &i) in idx.iter().enumerate() {
            let dst = if k < n_test { &mut test } else { &mut train };
            dst.push((rows[i].clone(), y));
        }
    }
    train.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let (mut train_x, train_y): (Vec<_>, Vec<_>) = train.into_iter().unzip();
    let (mut test_x, test_y): (Vec<_>, Vec<_>) = test.into_iter().unzip();
    standardize(&mut train_x, &mut test_x);
    Ok(cfg
        .c_grid
        .iter()
        .map(|&c| {
            let svm = LinearSvm::fit(&train_x, &train_y, c, cfg.epochs, cfg.step_size);
            (c, svm.error(&test_x, &test_y))
        })
        .collect())
}

pub fn proxy_a_distance(source: &[Vec<f64>], target: &[Vec<f64>], cfg: &PadConfig) -> Result<PadReport> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::invalid("both feature sets must be non-empty"));
    }
    let d = source[0].len();
    if d == 0 {
        return Err(Error::invalid("features must have positive width"));
    }
    for r in source.iter().chain(target) {
        if r.len() != d {
            return Err(Error::LengthMismatch {
                expected: d,
                actual: r.len(),
            });
        }
    }
    let mut min_errors = Vec::with_capacity(cfg.repeats);
    let mut errors_by_c = Vec::new();
    for k in 0..cfg.repeats {
        let errs = one_repeat(source, target, cfg, cfg.seed.wrapping_add(k as u64))?;
        min_errors.push(errs.iter().map(|e| e.1).fold(f64::INFINITY, f64::min));
        if k == 0 {
            errors_by_c = errs;
        }
    }
    let ds: Vec<f64> = min_errors.iter().map(|&e| pad_from_error(e)).collect();
    let mean = ds.iter().sum::<f64>() / ds.len() as f64;
    let std = if ds.len() > 1 {
        (ds.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (ds.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(PadReport {
        d_a: mean,
        min_errors,
        errors_by_c,
        d_a_std: std,
    })
}
