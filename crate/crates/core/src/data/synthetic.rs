//! Procedural open-set benchmark: source labels {A, B, C}, target labels
//! {A, D}, common label A.
//!
//! Glyphs: A is a centered filled disc, B a horizontal bar, C a ring and D two
//! small discs in opposite corners. Source images are clean renders; target
//! images go through gamma adjustment, a radial vignette and additive Gaussian
//! noise, clipped back to `[0, 1]`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DomainData, Image, Sample};
use crate::error::{Error, Result};
use crate::label_space::{Domain, LabelTopology};

pub const SOURCE_LABELS: [&str; 3] = ["A", "B", "C"];
pub const TARGET_LABELS: [&str; 2] = ["A", "D"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftParams {
    /// Target pixels become `x^gamma`.
    pub gamma: f64,
    pub noise_sigma: f64,
    /// Target pixels are scaled by `1 - vignette * (r / r_max)^2`.
    pub vignette: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            noise_sigma: 0.25,
            vignette: 0.6,
        }
    }
}

impl ShiftParams {
    pub fn none() -> Self {
        Self {
            gamma: 1.0,
            noise_sigma: 0.0,
            vignette: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCounts {
    pub source: usize,
    pub target_labeled: usize,
    pub target_unlabeled: usize,
}

impl Default for SyntheticCounts {
    fn default() -> Self {
        Self {
            source: 400,
            target_labeled: 80,
            target_unlabeled: 120,
        }
    }
}

impl SyntheticCounts {
    pub fn total(&self) -> usize {
        self.source + self.target_labeled + self.target_unlabeled
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub canvas_size: usize,
    pub counts: SyntheticCounts,
    pub shift: ShiftParams,
    /// Probability that a sample carries a second, distinct label.
    pub multilabel_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            canvas_size: 32,
            counts: SyntheticCounts::default(),
            shift: ShiftParams::default(),
            multilabel_prob: 0.3,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let c = &self.counts;
        if c.source == 0 || c.target_labeled == 0 || c.target_unlabeled == 0 {
            return Err(Error::invalid("synthetic counts must all be positive"));
        }
        if self.canvas_size < 8 {
            return Err(Error::invalid("canvas_size must be at least 8"));
        }
        let s = &self.shift;
        if !(s.gamma > 0.0) || !s.gamma.is_finite() {
            return Err(Error::invalid("gamma must be positive"));
        }
        if !(s.noise_sigma >= 0.0) || !s.noise_sigma.is_finite() {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        if !(0.0..=1.0).contains(&s.vignette) {
            return Err(Error::invalid("vignette strength must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.multilabel_prob) {
            return Err(Error::invalid("multilabel_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Per-glyph placement jitter.
#[derive(Debug, Clone, Copy)]
struct Pose {
    dx: f64,
    dy: f64,
    scale: f64,
    intensity: f64,
}

impl Pose {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        Self {
            dx: rng.random_range(-1.5..1.5),
            dy: rng.random_range(-1.5..1.5),
            scale: rng.random_range(0.85..1.15),
            intensity: rng.random_range(0.7..1.0),
        }
    }
}

/// Soft edge: 1 inside, 0 outside, linear over one pixel at the boundary.
fn coverage(signed_dist: f64) -> f64 {
    (0.5 - signed_dist).clamp(0.0, 1.0)
}

fn glyph_value(label: &str, px: f64, py: f64, size: f64, pose: Pose) -> f64 {
    let cx = size / 2.0 + pose.dx;
    let cy = size / 2.0 + pose.dy;
    let s = size * pose.scale;
    let disc = |x0: f64, y0: f64, r: f64| coverage(((px - x0).powi(2) + (py - y0).powi(2)).sqrt() - r);
    let v = match label {
        "A" => disc(cx, cy, 0.2 * s),
        "B" => {
            let ex = (px - cx).abs() - 0.38 * s;
            let ey = (py - cy).abs() - 0.06 * s;
            coverage(ex.max(ey))
        }
        "C" => {
            let r = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            coverage((r - 0.32 * s).abs() - 0.05 * s)
        }
        "D" => {
            let r = 0.09 * s;
            let a = disc(0.18 * size + pose.dx, 0.18 * size + pose.dy, r);
            let b = disc(0.82 * size + pose.dx, 0.82 * size + pose.dy, r);
            a.max(b)
        }
        _ => 0.0,
    };
    v * pose.intensity
}

fn render<R: Rng>(labels: &[&str], size: usize, rng: &mut R) -> Vec<f64> {
    let poses: Vec<Pose> = labels.iter().map(|_| Pose::draw(rng)).collect();
    let n = size as f64;
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            out[y * size + x] = labels
                .iter()
                .zip(&poses)
                .map(|(l, &p)| glyph_value(l, px, py, n, p))
                .fold(0.0, f64::max);
        }
    }
    out
}

fn apply_shift<R: Rng>(pixels: &mut [f64], size: usize, shift: &ShiftParams, rng: &mut R) {
    let c = size as f64 / 2.0;
    let r_max2 = 2.0 * c * c;
    let noise = Normal::new(0.0, shift.noise_sigma).expect("validated sigma");
    for y in 0..size {
        for x in 0..size {
            let v = &mut pixels[y * size + x];
            let r2 = (x as f64 + 0.5 - c).powi(2) + (y as f64 + 0.5 - c).powi(2);
            let mut p = v.powf(shift.gamma);
            p *= 1.0 - shift.vignette * r2 / r_max2;
            if shift.noise_sigma > 0.0 {
                p += noise.sample(rng);
            }
            *v = p.clamp(0.0, 1.0);
        }
    }
}

fn pick_labels<R: Rng>(domain_labels: &[&'static str], multilabel_prob: f64, rng: &mut R) -> Vec<&'static str> {
    let first = rng.random_range(0..domain_labels.len());
    let mut labels = vec![domain_labels[first]];
    if domain_labels.len() > 1 && rng.random::<f64>() < multilabel_prob {
        let mut second = rng.random_range(0..domain_labels.len() - 1);
        if second >= first {
            second += 1;
        }
        labels.push(domain_labels[second]);
    }
    labels
}

/// The label topology of the synthetic benchmark.
pub fn synthetic_topology() -> LabelTopology {
    LabelTopology::new(&SOURCE_LABELS, &TARGET_LABELS).expect("fixed label sets are valid")
}

/// Generates the three datasets; deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DomainData> {
    spec.validate()?;
    let topology = synthetic_topology();
    let size = spec.canvas_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let make = |domain: Domain, rng: &mut ChaCha8Rng| -> Result<(Image, crate::label_space::LabelVector)> {
        let set: &[&'static str] = match domain {
            Domain::Source => &SOURCE_LABELS,
            Domain::Target => &TARGET_LABELS,
        };
        let labels = pick_labels(set, spec.multilabel_prob, rng);
        let mut pixels = render(&labels, size, rng);
        if domain == Domain::Target {
            apply_shift(&mut pixels, size, &spec.shift, rng);
        }
        let image = Image::new(1, size, size, pixels)?;
        Ok((image, topology.encode(&labels, domain)?))
    };

    let mut source = Vec::with_capacity(spec.counts.source);
    for _ in 0..spec.counts.source {
        let (img, l) = make(Domain::Source, &mut rng)?;
        source.push(Sample::labeled(img, Domain::Source, l));
    }
    let mut target_labeled = Vec::with_capacity(spec.counts.target_labeled);
    for _ in 0..spec.counts.target_labeled {
        let (img, l) = make(Domain::Target, &mut rng)?;
        target_labeled.push(Sample::labeled(img, Domain::Target, l));
    }
    let mut target_unlabeled = Vec::with_capacity(spec.counts.target_unlabeled);
    for _ in 0..spec.counts.target_unlabeled {
        let (img, l) = make(Domain::Target, &mut rng)?;
        target_unlabeled.push(Sample::unlabeled(img, Domain::Target, Some(l)));
    }

    Ok(DomainData {
        topology,
        source,
        target_labeled,
        target_unlabeled,
    })
}
