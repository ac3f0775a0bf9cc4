use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{max_pool2, max_pool2_backward, relu_backward, relu_in_place, Conv2d, Linear, Padded};
use crate::data::Image;
use crate::error::{Error, Result};

/// Spatial activation map, `channels × height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// A differentiable image-to-feature map.
///
/// Gradients are accumulated into a value of the implementing type obtained
/// from [`FeatureExtractor::zeros_like`]. Parameter tensors are exposed in a
/// fixed declaration order, which checkpoints and the optimizer rely on.
pub trait FeatureExtractor: Clone + Send + Sync {
    type Cache: Send;

    /// `(channels, height, width)` of accepted images.
    fn input_shape(&self) -> (usize, usize, usize);
    fn feature_dim(&self) -> usize;

    fn forward(&self, x: &Image) -> Result<(Vec<f64>, Self::Cache)>;
    fn backward(&self, cache: &Self::Cache, dh: &[f64], grad: &mut Self);

    /// Last convolutional activation map retained by `forward`.
    fn activation_map(cache: &Self::Cache) -> FeatureMap;
    /// `dL/dA` for the map returned by [`FeatureExtractor::activation_map`].
    fn activation_gradient(&self, cache: &Self::Cache, dh: &[f64]) -> FeatureMap;

    fn zeros_like(&self) -> Self;
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
}

/// Shape of the default convolutional extractor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Output channels of each `conv3×3 → ReLU → maxpool2×2` block.
    pub block_channels: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ConvConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 1,
            block_channels: vec![16, 32, 64],
            feature_dim: 64,
        }
    }
}

impl ConvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_channels.is_empty() || self.block_channels.contains(&0) {
            return Err(Error::invalid("block_channels must be non-empty and positive"));
        }
        if self.channels == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("channels and feature_dim must be positive"));
        }
        let div = 1usize << self.block_channels.len();
        if self.height == 0 || self.width == 0 || self.height % div != 0 || self.width % div != 0 {
            return Err(Error::invalid(format!(
                "canvas {}x{} must be a positive multiple of {div} for {} pooling blocks",
                self.height,
                self.width,
                self.block_channels.len()
            )));
        }
        Ok(())
    }

    fn flat_dim(&self) -> usize {
        let div = 1usize << self.block_channels.len();
        self.block_channels.last().copied().unwrap_or(0) * (self.height / div) * (self.width / div)
    }
}

/// Stacked `conv3×3 → ReLU → maxpool2×2` blocks, flattened into an affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvExtractor {
    config: ConvConfig,
    convs: Vec<Conv2d>,
    projection: Linear,
}

#[derive(Debug)]
struct BlockCache {
    input: Padded,
    /// Post-ReLU convolution output.
    activation: Vec<f64>,
    argmax: Vec<usize>,
}

#[derive(Debug)]
pub struct ConvCache {
    blocks: Vec<BlockCache>,
    flat: Vec<f64>,
    last_shape: (usize, usize, usize),
}

impl ConvExtractor {
    pub fn new<R: Rng>(config: ConvConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::with_capacity(config.block_channels.len());
        let mut in_ch = config.channels;
        for &out_ch in &config.block_channels {
            convs.push(Conv2d::new(in_ch, out_ch, rng));
            in_ch = out_ch;
        }
        let projection = Linear::new(config.flat_dim(), config.feature_dim, rng);
        Ok(Self {
            config,
            convs,
            projection,
        })
    }

    pub fn config(&self) -> &ConvConfig {
        &self.config
    }

    /// Gradient of the loss w.r.t. each block's post-ReLU activation,
    /// walking back from `dh`. Stops after `stop_at` (inclusive, from the end).
    fn backward_inner(&self, cache: &ConvCache, dh: &[f64], mut grad: Option<&mut Self>, stop_at_last: bool) -> Option<FeatureMap> {
        let mut scratch = self.projection.zeros_like();
        let proj_grad = match grad.as_deref_mut() {
            Some(g) => &mut g.projection,
            None => &mut scratch,
        };
        let mut d = self.projection.backward(&cache.flat, dh, proj_grad);
        let n = self.convs.len();
        for b in (0..n).rev() {
            let block = &cache.blocks[b];
            let (h, w) = (block.input.height, block.input.width);
            let out_ch = self.convs[b].out_ch;
            let mut da = max_pool2_backward(&d, &block.argmax, out_ch * h * w);
            if stop_at_last && b == n - 1 {
                return Some(FeatureMap {
                    channels: out_ch,
                    height: h,
                    width: w,
                    data: da,
                });
            }
            relu_backward(&block.activation, &mut da);
            let g = grad.as_deref_mut().expect("full backward requires a gradient buffer");
            match self.convs[b].backward(&block.input, &da, &mut g.convs[b], b > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
        None
    }
}

impl FeatureExtractor for ConvExtractor {
    type Cache = ConvCache;

    fn input_shape(&self) -> (usize, usize, usize) {
        (self.config.channels, self.config.height, self.config.width)
    }

    fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn forward(&self, x: &Image) -> Result<(Vec<f64>, ConvCache)> {
        let expected = self.input_shape();
        if (x.channels, x.height, x.width) != expected {
            return Err(Error::invalid(format!(
                "image shape {}x{}x{} does not match extractor input {}x{}x{}",
                x.channels, x.height, x.width, expected.0, expected.1, expected.2
            )));
        }
        let (mut c, mut h, mut w) = expected;
        let mut current = x.data.clone();
        let mut blocks = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let input = Padded::from_map(&current, c, h, w);
            let mut activation = conv.forward(&input);
            relu_in_place(&mut activation);
            let (pooled, argmax) = max_pool2(&activation, conv.out_ch, h, w);
            blocks.push(BlockCache {
                input,
                activation,
                argmax,
            });
            current = pooled;
            c = conv.out_ch;
            h /= 2;
            w /= 2;
        }
        let last = self.convs.len() - 1;
        let last_shape = (self.convs[last].out_ch, h * 2, w * 2);
        let feature = self.projection.forward(&current);
        Ok((
            feature,
            ConvCache {
                blocks,
                flat: current,
                last_shape,
            },
        ))
    }

    fn backward(&self, cache: &ConvCache, dh: &[f64], grad: &mut Self) {
        self.backward_inner(cache, dh, Some(grad), false);
    }

    fn activation_map(cache: &ConvCache) -> FeatureMap {
        let (channels, height, width) = cache.last_shape;
        FeatureMap {
            channels,
            height,
            width,
            data: cache.blocks.last().map(|b| b.activation.clone()).unwrap_or_default(),
        }
    }

    fn activation_gradient(&self, cache: &ConvCache, dh: &[f64]) -> FeatureMap {
        self.backward_inner(cache, dh, None, true)
            .expect("extractor has at least one block")
    }

    fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            convs: self.convs.iter().map(Conv2d::zeros_like).collect(),
            projection: self.projection.zeros_like(),
        }
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.convs.iter().flat_map(Conv2d::tensors).collect();
        v.extend(self.projection.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.convs.iter_mut().flat_map(Conv2d::tensors_mut).collect();
        v.extend(self.projection.tensors_mut());
        v
    }
}
