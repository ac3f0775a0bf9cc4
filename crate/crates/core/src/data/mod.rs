//! Samples, datasets and three-group minibatches.

mod manifest;
mod synthetic;

pub use manifest::{infer_topology, load_manifest, read_manifest_rows, write_manifest, ManifestRow};
pub use synthetic::{generate_synthetic, synthetic_topology, ShiftParams, SyntheticCounts, SyntheticSpec};

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_space::{Domain, LabelTopology, LabelVector};

/// Channel-major image with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::LengthMismatch {
                expected: channels * height * width,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Mean over channels at each pixel, row-major `height × width`.
    pub fn luminance(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        (0..plane)
            .map(|i| (0..self.channels).map(|c| self.data[c * plane + i]).sum::<f64>() / self.channels as f64)
            .collect()
    }
}

/// One image with its domain tag and, if labeled, its labels.
///
/// `hidden_labels` holds ground truth for unlabeled samples and is only
/// reachable through [`Sample::evaluation_labels`].
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub domain: Domain,
    labels: Option<LabelVector>,
    hidden_labels: Option<LabelVector>,
}

impl Sample {
    pub fn labeled(image: Image, domain: Domain, labels: LabelVector) -> Self {
        Self {
            image,
            domain,
            labels: Some(labels),
            hidden_labels: None,
        }
    }

    /// Unlabeled sample, optionally retaining ground truth for evaluation.
    pub fn unlabeled(image: Image, domain: Domain, hidden_labels: Option<LabelVector>) -> Self {
        Self {
            image,
            domain,
            labels: None,
            hidden_labels,
        }
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// Labels visible to training.
    pub fn labels(&self) -> Option<&LabelVector> {
        self.labels.as_ref()
    }

    /// True or hidden labels, for evaluation only.
    pub fn evaluation_labels(&self) -> Option<&LabelVector> {
        self.labels.as_ref().or(self.hidden_labels.as_ref())
    }

    /// Copy carrying no hidden labels.
    pub fn for_training(&self) -> Sample {
        Sample {
            image: self.image.clone(),
            domain: self.domain,
            labels: self.labels.clone(),
            hidden_labels: None,
        }
    }

    /// Moves the visible labels into the hidden slot.
    pub fn into_unlabeled(self) -> Sample {
        Sample {
            hidden_labels: self.labels.or(self.hidden_labels),
            labels: None,
            ..self
        }
    }

    /// Replaces hidden labels (test support for information-flow checks).
    pub fn set_hidden_labels(&mut self, labels: Option<LabelVector>) {
        self.hidden_labels = labels;
    }
}

/// Source, labeled-target and unlabeled-target datasets over one topology.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub topology: LabelTopology,
    pub source: Vec<Sample>,
    pub target_labeled: Vec<Sample>,
    pub target_unlabeled: Vec<Sample>,
}

impl DomainData {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.source.len(), self.target_labeled.len(), self.target_unlabeled.len())
    }

    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.source
            .iter()
            .chain(&self.target_labeled)
            .chain(&self.target_unlabeled)
            .next()
            .map(|s| s.image.shape())
    }

    /// Re-splits all target samples into labeled/unlabeled parts by a seeded
    /// shuffle; `labeled_fraction` of them (rounded) keep their labels.
    pub fn resplit_target(&mut self, labeled_fraction: f64, seed: u64) -> Result<()> {
        if !(0.0..=1.0).contains(&labeled_fraction) {
            return Err(Error::invalid("labeled_fraction must lie in [0, 1]"));
        }
        let mut all: Vec<Sample> = self
            .target_labeled
            .drain(..)
            .chain(self.target_unlabeled.drain(..))
            .map(|s| {
                let labels = s.evaluation_labels().cloned();
                match labels {
                    Some(l) => Sample::labeled(s.image, s.domain, l),
                    None => s,
                }
            })
            .collect();
        if all.iter().any(|s| !s.is_labeled()) {
            return Err(Error::invalid("every target sample needs ground truth to re-split"));
        }
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_labeled = (labeled_fraction * all.len() as f64).round() as usize;
        let rest = all.split_off(n_labeled);
        self.target_labeled = all;
        self.target_unlabeled = rest.into_iter().map(Sample::into_unlabeled).collect();
        Ok(())
    }

    /// Moves a seeded `fraction` of the labeled-target set out as a held-out
    /// validation set.
    pub fn take_validation(&mut self, fraction: f64, seed: u64) -> Result<Vec<Sample>> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::invalid("validation fraction must lie in [0, 1)"));
        }
        let n = (fraction * self.target_labeled.len() as f64).round() as usize;
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, self.target_labeled.len(), n).into_vec();
        picked.sort_unstable();
        let mut validation = Vec::with_capacity(n);
        for &i in picked.iter().rev() {
            validation.push(self.target_labeled.remove(i));
        }
        validation.reverse();
        Ok(validation)
    }
}

/// Per-batch sample counts for the three groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupSizes {
    pub source: usize,
    pub target_labeled: usize,
    pub target_unlabeled: usize,
}

impl Default for GroupSizes {
    fn default() -> Self {
        Self {
            source: 8,
            target_labeled: 4,
            target_unlabeled: 8,
        }
    }
}

/// One minibatch. Samples are training views: they never carry hidden labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub source_group: Vec<Sample>,
    pub target_labeled_group: Vec<Sample>,
    pub target_unlabeled_group: Vec<Sample>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.source_group.len() + self.target_labeled_group.len() + self.target_unlabeled_group.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn draw<R: Rng>(pool: &[Sample], n: usize, with_replacement: bool, rng: &mut R, what: &str) -> Result<Vec<Sample>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if pool.is_empty() {
        return Err(Error::invalid(format!("{what} group requested but the dataset is empty")));
    }
    if with_replacement {
        Ok((0..n).map(|_| pool[rng.random_range(0..pool.len())].for_training()).collect())
    } else {
        if n > pool.len() {
            return Err(Error::invalid(format!(
                "{what} group of {n} exceeds dataset size {} without replacement",
                pool.len()
            )));
        }
        Ok(index::sample(rng, pool.len(), n)
            .into_iter()
            .map(|i| pool[i].for_training())
            .collect())
    }
}

/// Draws the three groups independently and uniformly.
pub fn sample_batch<R: Rng>(data: &DomainData, sizes: GroupSizes, with_replacement: bool, rng: &mut R) -> Result<Batch> {
    if sizes.source + sizes.target_labeled + sizes.target_unlabeled == 0 {
        return Err(Error::invalid("all batch group sizes are zero"));
    }
    Ok(Batch {
        source_group: draw(&data.source, sizes.source, with_replacement, rng, "source")?,
        target_labeled_group: draw(&data.target_labeled, sizes.target_labeled, with_replacement, rng, "labeled target")?,
        target_unlabeled_group: draw(&data.target_unlabeled, sizes.target_unlabeled, with_replacement, rng, "unlabeled target")?,
    })
}
