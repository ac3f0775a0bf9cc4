//! CSV manifest with header `path,domain,labeled,labels`.
//!
//! `labels` is a semicolon-separated list of names and may be empty. Paths are
//! resolved relative to the manifest's directory. Rows with `labeled=0` become
//! unlabeled target samples; any labels they list are kept for evaluation only.
//! Row numbers in errors count data rows from 1.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use super::{DomainData, Image, Sample};
use crate::error::{Error, Result};
use crate::label_space::{Domain, LabelTopology};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub domain: Domain,
    pub labeled: bool,
    pub labels: Vec<String>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawRow {
    path: String,
    domain: String,
    labeled: String,
    labels: String,
}

pub fn read_manifest_rows(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Manifest { row: 0, message: e.to_string() })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "domain", "labeled", "labels"] {
        return Err(Error::Manifest {
            row: 0,
            message: "header must be `path,domain,labeled,labels`".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<RawRow>().enumerate() {
        let row = i + 1;
        let bad = |message: String| Error::Manifest { row, message };
        let raw = rec.map_err(|e| bad(e.to_string()))?;
        let domain: Domain = raw.domain.trim().parse().map_err(|e: Error| bad(e.to_string()))?;
        let labeled = match raw.labeled.trim() {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("labeled must be 0 or 1, got `{other}`"))),
        };
        if domain == Domain::Source && !labeled {
            return Err(bad("source rows must be labeled".into()));
        }
        if raw.path.is_empty() {
            return Err(bad("empty path".into()));
        }
        let labels = raw
            .labels
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_owned)
            .collect();
        rows.push(ManifestRow {
            path: raw.path,
            domain,
            labeled,
            labels,
        });
    }
    Ok(rows)
}

/// Label sets in order of first appearance per domain.
pub fn infer_topology(rows: &[ManifestRow]) -> Result<LabelTopology> {
    let mut source: Vec<&str> = Vec::new();
    let mut target: Vec<&str> = Vec::new();
    for r in rows {
        let list = match r.domain {
            Domain::Source => &mut source,
            Domain::Target => &mut target,
        };
        for l in &r.labels {
            if !list.contains(&l.as_str()) {
                list.push(l);
            }
        }
    }
    LabelTopology::new(&source, &target)
}

impl Image {
    /// Loads an image file, converting to `channels` (1 or 3) and resizing to
    /// `height × width` with bilinear filtering.
    pub fn load(path: &Path, channels: usize, height: usize, width: usize) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        let (w, h) = (width as u32, height as u32);
        let data: Vec<f64> = match channels {
            1 => {
                let mut g = img.to_luma8();
                if g.dimensions() != (w, h) {
                    g = image::imageops::resize(&g, w, h, FilterType::Triangle);
                }
                g.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect()
            }
            3 => {
                let mut rgb = img.to_rgb8();
                if rgb.dimensions() != (w, h) {
                    rgb = image::imageops::resize(&rgb, w, h, FilterType::Triangle);
                }
                let raw = rgb.into_raw();
                let plane = height * width;
                let mut out = vec![0.0; 3 * plane];
                for (i, px) in raw.chunks_exact(3).enumerate() {
                    for c in 0..3 {
                        out[c * plane + i] = f64::from(px[c]) / 255.0;
                    }
                }
                out
            }
            n => {
                return Err(Error::invalid(format!("unsupported channel count {n}")));
            }
        };
        Image::new(channels, height, width, data)
    }

    /// 8-bit PNG (grayscale for one channel, RGB for three).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let plane = self.height * self.width;
        let result = match self.channels {
            1 => image::GrayImage::from_raw(w, h, self.data.iter().map(|&v| to_u8(v)).collect())
                .expect("buffer size matches")
                .save(path),
            3 => {
                let raw = (0..plane)
                    .flat_map(|i| (0..3).map(move |c| (c, i)))
                    .map(|(c, i)| to_u8(self.data[c * plane + i]))
                    .collect();
                image::RgbImage::from_raw(w, h, raw).expect("buffer size matches").save(path)
            }
            n => return Err(Error::invalid(format!("cannot save {n}-channel image"))),
        };
        result.map_err(|e| Error::Image {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }
}

/// Loads every row of the manifest at `path`.
pub fn load_manifest(path: &Path, topology: &LabelTopology, shape: (usize, usize, usize)) -> Result<DomainData> {
    let rows = read_manifest_rows(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let (channels, height, width) = shape;
    let mut data = DomainData {
        topology: topology.clone(),
        source: Vec::new(),
        target_labeled: Vec::new(),
        target_unlabeled: Vec::new(),
    };
    for (i, row) in rows.iter().enumerate() {
        let n = i + 1;
        let names: Vec<&str> = row.labels.iter().map(String::as_str).collect();
        let labels = topology.encode(&names, row.domain).map_err(|e| Error::Manifest {
            row: n,
            message: e.to_string(),
        })?;
        let image_path = base.join(&row.path);
        if !image_path.is_file() {
            return Err(Error::Manifest {
                row: n,
                message: format!("missing image file {}", image_path.display()),
            });
        }
        let image = Image::load(&image_path, channels, height, width).map_err(|e| Error::Manifest {
            row: n,
            message: e.to_string(),
        })?;
        match (row.domain, row.labeled) {
            (Domain::Source, _) => data.source.push(Sample::labeled(image, Domain::Source, labels)),
            (Domain::Target, true) => data.target_labeled.push(Sample::labeled(image, Domain::Target, labels)),
            (Domain::Target, false) => {
                let hidden = (!row.labels.is_empty()).then_some(labels);
                data.target_unlabeled.push(Sample::unlabeled(image, Domain::Target, hidden));
            }
        }
    }
    Ok(data)
}

/// Writes every sample as a PNG under `dir/images/` plus `dir/manifest.csv`.
/// Unlabeled rows list their hidden labels, if any.
pub fn write_manifest(data: &DomainData, dir: &Path) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let manifest = dir.join("manifest.csv");
    let file = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut writer = csv::Writer::from_writer(file);
    let groups = [
        ("source", &data.source),
        ("target_labeled", &data.target_labeled),
        ("target_unlabeled", &data.target_unlabeled),
    ];
    let csv_err = |e: csv::Error| Error::io(&manifest, std::io::Error::other(e.to_string()));
    for (prefix, samples) in groups {
        for (i, s) in samples.iter().enumerate() {
            let rel = format!("images/{prefix}_{i:05}.png");
            s.image.save_png(&dir.join(&rel))?;
            let labels = match s.evaluation_labels() {
                Some(v) => data.topology.decode(v)?.join(";"),
                None => String::new(),
            };
            writer
                .serialize(RawRow {
                    path: rel,
                    domain: s.domain.to_string(),
                    labeled: if s.is_labeled() { "1" } else { "0" }.into(),
                    labels,
                })
                .map_err(csv_err)?;
        }
    }
    writer.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}
