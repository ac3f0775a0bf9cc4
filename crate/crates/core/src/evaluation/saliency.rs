//! Grad-CAM over the last convolutional activation map.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::label_space::LabelTopology;
use crate::network::{FeatureExtractor, ModelState};

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub label: String,
    /// Map at the activation resolution, row-major `height × width`.
    pub grid: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Bilinear upsampling of `grid` to the image resolution.
    pub overlay: Vec<f64>,
    pub image_height: usize,
    pub image_width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaliencySidecar {
    pub label: String,
    pub image_path: String,
    pub map_shape: [usize; 2],
}

/// Channel weights are the spatial means of `d logit / d A`; the map is the
/// ReLU of the weighted channel sum, divided by its maximum when non-constant.
pub fn grad_cam<E: FeatureExtractor>(
    model: &ModelState<E>,
    x: &Image,
    label: &str,
    topology: &LabelTopology,
) -> Result<SaliencyMap> {
    let index = topology
        .index_of(label)
        .ok_or_else(|| Error::invalid(format!("unknown label `{label}`")))?;
    let (act, grad) = model.logit_activation_gradient(x, index)?;
    let plane = act.height * act.width;
    let mut grid = vec![0.0; plane];
    for k in 0..act.channels {
        let g = &grad.data[k * plane..][..plane];
        let alpha = g.iter().sum::<f64>() / plane as f64;
        if alpha == 0.0 {
            continue;
        }
        for (m, a) in grid.iter_mut().zip(&act.data[k * plane..][..plane]) {
            *m += alpha * a;
        }
    }
    for v in &mut grid {
        *v = v.max(0.0);
    }
    let max = grid.iter().copied().fold(0.0, f64::max);
    let min = grid.iter().copied().fold(f64::INFINITY, f64::min);
    if max > min && max > 0.0 {
        for v in &mut grid {
            *v /= max;
        }
    }
    let overlay = bilinear_upsample(&grid, act.height, act.width, x.height, x.width);
    Ok(SaliencyMap {
        label: label.to_owned(),
        grid,
        height: act.height,
        width: act.width,
        overlay,
        image_height: x.height,
        image_width: x.width,
    })
}

/// Half-pixel-centered bilinear resampling with edge clamping.
pub fn bilinear_upsample(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let sample = |y: f64, x: f64| -> f64 {
        let y = y.clamp(0.0, (sh - 1) as f64);
        let x = x.clamp(0.0, (sw - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(sh - 1), (x0 + 1).min(sw - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
        let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
        top * (1.0 - fy) + bottom * fy
    };
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let sy = (y as f64 + 0.5) * sh as f64 / dh as f64 - 0.5;
        for x in 0..dw {
            let sx = (x as f64 + 0.5) * sw as f64 / dw as f64 - 0.5;
            out.push(sample(sy, sx));
        }
    }
    out
}

impl SaliencyMap {
    /// Mass-weighted centroid `(x, y)` of the grid in image pixel
    /// coordinates, or `None` for an all-zero map.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mass: f64 = self.grid.iter().sum();
        if mass <= 0.0 {
            return None;
        }
        let sy = self.image_height as f64 / self.height as f64;
        let sx = self.image_width as f64 / self.width as f64;
        let (mut cx, mut cy) = (0.0, 0.0);
        for y in 0..self.height {
            for x in 0..self.width {
                let m = self.grid[y * self.width + x];
                cx += m * (x as f64 + 0.5) * sx;
                cy += m * (y as f64 + 0.5) * sy;
            }
        }
        Some((cx / mass, cy / mass))
    }

    /// Image blended with the upsampled map in red, as RGB.
    pub fn overlay_image(&self, x: &Image) -> Image {
        let base = x.luminance();
        let plane = base.len();
        let mut data = vec![0.0; 3 * plane];
        for i in 0..plane {
            let s = self.overlay[i].clamp(0.0, 1.0);
            let g = base[i] * 0.6;
            data[i] = (g + 0.4 * s).min(1.0);
            data[plane + i] = g;
            data[2 * plane + i] = g * (1.0 - s);
        }
        Image {
            channels: 3,
            height: x.height,
            width: x.width,
            data,
        }
    }

    /// Writes `<stem>.png` and `<stem>.json` into `dir`; returns the PNG path.
    pub fn write(&self, x: &Image, image_path: &Path, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let png = dir.join(format!("{stem}.png"));
        self.overlay_image(x).save_png(&png)?;
        let sidecar = SaliencySidecar {
            label: self.label.clone(),
            image_path: image_path.display().to_string(),
            map_shape: [self.height, self.width],
        };
        let json = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        Ok(png)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_constant_and_shape() {
        let up = bilinear_upsample(&[0.25; 4], 2, 2, 8, 8);
        assert_eq!(up.len(), 64);
        assert!(up.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let up = bilinear_upsample(&[0.0, 1.0], 1, 2, 1, 4);
        assert_eq!(up, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn centroid_of_single_cell() {
        let mut grid = vec![0.0; 16];
        grid[5] = 1.0;
        let m = SaliencyMap {
            label: "A".into(),
            grid,
            height: 4,
            width: 4,
            overlay: vec![],
            image_height: 32,
            image_width: 32,
        };
        assert_eq!(m.centroid(), Some((12.0, 12.0)));
    }

    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::network::{ConvConfig, ModelConfig};

    fn setup() -> (ModelState, crate::data::DomainData) {
        let data = generate_synthetic(&SyntheticSpec {
            canvas_size: 16,
            ..Default::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            extractor: ConvConfig {
                height: 16,
                width: 16,
                channels: 1,
                block_channels: vec![4, 6],
                feature_dim: 8,
            },
            hidden_dim: 8,
            detach_recognizer: false,
        };
        (ModelState::new(&cfg, data.topology.len(), 3).unwrap(), data)
    }

    #[test]
    fn map_is_normalized_and_sized() {
        let (model, data) = setup();
        for s in data.source.iter().take(10) {
            let m = grad_cam(&model, &s.image, "A", &data.topology).unwrap();
            assert_eq!((m.height, m.width, m.grid.len()), (8, 8, 64));
            assert_eq!(m.overlay.len(), 256);
            assert!(m.grid.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let max = m.grid.iter().copied().fold(0.0, f64::max);
            assert!(max == 0.0 || max == 1.0);
        }
    }

    #[test]
    fn logit_offset_leaves_map_unchanged() {
        let (mut model, data) = setup();
        let x = &data.source[0].image;
        let before = grad_cam(&model, x, "B", &data.topology).unwrap();
        let b = data.topology.index_of("B").unwrap();
        model.classifier.bias[b] += 3.0;
        assert_eq!(grad_cam(&model, x, "B", &data.topology).unwrap(), before);
    }

    #[test]
    fn zero_classifier_row_gives_zero_map() {
        let (mut model, data) = setup();
        let a = data.topology.index_of("A").unwrap();
        let d = model.feature_dim();
        model.classifier.weight[a * d..(a + 1) * d].fill(0.0);
        let m = grad_cam(&model, &data.source[0].image, "A", &data.topology).unwrap();
        assert!(m.grid.iter().chain(&m.overlay).all(|&v| v == 0.0));
        assert_eq!(m.centroid(), None);
    }

    #[test]
    fn unknown_label_is_rejected() {
        let (model, data) = setup();
        assert!(matches!(
            grad_cam(&model, &data.source[0].image, "Z", &data.topology),
            Err(Error::Invalid(_))
        ));
    }
}
