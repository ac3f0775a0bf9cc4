//! Feature CSV: header `domain,labeled,labels,f0..f{D-1}`, one row per sample,
//! floats written with 17 significant digits.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::label_space::{Domain, LabelTopology};
use crate::network::{FeatureExtractor, ModelState};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub domain: Domain,
    pub labeled: bool,
    pub labels: Vec<String>,
    pub h: Vec<f64>,
}

pub fn compute_features<E: FeatureExtractor>(model: &ModelState<E>, samples: &[Sample], topology: &LabelTopology) -> Result<Vec<FeatureRow>> {
    samples
        .iter()
        .map(|s| {
            let labels = match s.evaluation_labels() {
                Some(v) => topology.decode(v)?,
                None => Vec::new(),
            };
            Ok(FeatureRow {
                domain: s.domain,
                labeled: s.is_labeled(),
                labels,
                h: model.forward_features(&s.image)?,
            })
        })
        .collect()
}

pub fn write_features(rows: &[FeatureRow], path: &Path) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.h.len());
    let mut out = String::new();
    out.push_str("domain,labeled,labels");
    for j in 0..dim {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for r in rows {
        if r.h.len() != dim {
            return Err(Error::LengthMismatch {
                expected: dim,
                actual: r.h.len(),
            });
        }
        out.push_str(&format!("{},{},{}", r.domain, u8::from(r.labeled), r.labels.join(";")));
        for v in &r.h {
            out.push_str(&format!(",{v:.16e}"));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Features of every sample, written to `path`.
pub fn export_features<E: FeatureExtractor>(model: &ModelState<E>, samples: &[Sample], topology: &LabelTopology, path: &Path) -> Result<Vec<FeatureRow>> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to export"));
    }
    let rows = compute_features(model, samples, topology)?;
    write_features(&rows, path)?;
    Ok(rows)
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::invalid(format!("{}: empty feature file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[..3] != ["domain", "labeled", "labels"] {
        return Err(Error::invalid(format!("{}: bad feature header", path.display())));
    }
    let dim = cols.len() - 3;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = |m: String| Error::Manifest { row: i + 1, message: m };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 3 {
            return Err(bad(format!("expected {} fields, got {}", dim + 3, fields.len())));
        }
        let domain: Domain = fields[0].parse().map_err(|e: Error| bad(e.to_string()))?;
        let labeled = match fields[1] {
            "1" => true,
            "0" => false,
            o => return Err(bad(format!("bad labeled flag `{o}`"))),
        };
        let labels = fields[2].split(';').filter(|s| !s.is_empty()).map(str::to_owned).collect();
        let h = fields[3..]
            .iter()
            .map(|v| v.parse::<f64>().map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        rows.push(FeatureRow { domain, labeled, labels, h });
    }
    Ok(rows)
}

/// Splits rows into `(source, target)` feature matrices.
pub fn split_by_domain(rows: &[FeatureRow]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let pick = |d: Domain| rows.iter().filter(|r| r.domain == d).map(|r| r.h.clone()).collect();
    (pick(Domain::Source), pick(Domain::Target))
}
