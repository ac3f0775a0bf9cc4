//! Versioned binary checkpoints.
//!
//! Layout (all integers u64 little-endian unless noted):
//!
//! ```text
//! magic "SODACKPT" | version u32
//! feature_dim | hidden_dim | num_labels | detach_recognizer u8
//! canvas height | width | channels | block count | block widths...
//! per label: name length u32, UTF-8 name, membership u8 (1 source, 2 target)
//! target label count | unified index of each target label, in target order
//! gradient reversal coefficient f64
//! tensor count | per tensor: length, f64 values
//! optimizer flag u8 [step | m tensors | v tensors]
//! best-model flag u8 [best step | best score f64 | tensors]
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::label_space::{Domain, LabelTopology};
use crate::network::{ConvConfig, ModelConfig, ModelState};

const MAGIC: &[u8; 8] = b"SODACKPT";
pub const FORMAT_VERSION: u32 = 1;

/// First and second moment estimates of the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestModel {
    pub step: u64,
    pub score: f64,
    pub model: ModelState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub topology: LabelTopology,
    pub optimizer: Option<OptimizerState>,
    pub best: Option<BestModel>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensors<T: AsRef<[f64]>>(&mut self, ts: &[T]) {
        self.u64(ts.len());
        for t in ts {
            let t = t.as_ref();
            self.u64(t.len());
            for &v in t {
                self.f64(v);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("truncated or corrupt file while reading {what}"))
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| corrupt(what))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn tensors(&mut self, what: &str) -> Result<Vec<Vec<f64>>> {
        let n = self.u64(what)?;
        let mut out = Vec::new();
        for _ in 0..n {
            let len = self.u64(what)?;
            let bytes = self.take(len.checked_mul(8).ok_or_else(|| corrupt(what))?, what)?;
            out.push(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
        }
        Ok(out)
    }
}

fn fill(model: &mut ModelState, tensors: &[Vec<f64>], what: &str) -> Result<()> {
    let mut dst = model.tensors_mut();
    if dst.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{what}: expected {} tensors, found {}",
            dst.len(),
            tensors.len()
        )));
    }
    for (i, (d, s)) in dst.iter_mut().zip(tensors).enumerate() {
        if d.len() != s.len() {
            return Err(Error::Checkpoint(format!(
                "{what}: tensor {i} has {} values, architecture needs {}",
                s.len(),
                d.len()
            )));
        }
        d.copy_from_slice(s);
    }
    Ok(())
}

fn check_layout(model: &ModelState, tensors: &[Vec<f64>], what: &str) -> Result<()> {
    fill(&mut model.clone(), tensors, what)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        let cfg = self.model.config();
        w.u64(self.model.feature_dim());
        w.u64(self.model.hidden_dim);
        w.u64(self.topology.len());
        w.u8(u8::from(self.model.detach_recognizer));
        let e = &cfg.extractor;
        w.u64(e.height);
        w.u64(e.width);
        w.u64(e.channels);
        w.u64(e.block_channels.len());
        for &b in &e.block_channels {
            w.u64(b);
        }
        for (i, name) in self.topology.unified().iter().enumerate() {
            w.u32(name.len() as u32);
            w.0.extend_from_slice(name.as_bytes());
            let mut member = 0u8;
            if self.topology.in_domain(i, Domain::Source) {
                member |= 1;
            }
            if self.topology.in_domain(i, Domain::Target) {
                member |= 2;
            }
            w.u8(member);
        }
        w.u64(self.topology.target_labels().len());
        for name in self.topology.target_labels() {
            w.u64(self.topology.index_of(name).expect("target label is unified"));
        }
        w.f64(self.model.grl_coeff);
        w.tensors(&self.model.tensors());
        match &self.optimizer {
            Some(o) => {
                w.u8(1);
                w.u64(o.step as usize);
                w.tensors(&o.m);
                w.tensors(&o.v);
            }
            None => w.u8(0),
        }
        match &self.best {
            Some(b) => {
                w.u8(1);
                w.u64(b.step as usize);
                w.f64(b.score);
                w.tensors(&b.model.tensors());
            }
            None => w.u8(0),
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let feature_dim = r.u64("header")?;
        let hidden_dim = r.u64("header")?;
        let num_labels = r.u64("header")?;
        let detach_recognizer = r.u8("header")? != 0;
        let height = r.u64("extractor config")?;
        let width = r.u64("extractor config")?;
        let channels = r.u64("extractor config")?;
        let blocks = r.u64("extractor config")?;
        if blocks > 64 || num_labels > 1 << 20 {
            return Err(corrupt("header"));
        }
        let block_channels = (0..blocks).map(|_| r.u64("extractor config")).collect::<Result<Vec<_>>>()?;

        let mut unified = Vec::with_capacity(num_labels);
        let mut source = Vec::new();
        let mut in_target = Vec::new();
        for _ in 0..num_labels {
            let len = r.u32("label names")? as usize;
            let name = std::str::from_utf8(r.take(len, "label names")?)
                .map_err(|_| Error::Checkpoint("label name is not UTF-8".into()))?
                .to_owned();
            let member = r.u8("label names")?;
            if member & 1 != 0 {
                source.push(name.clone());
            }
            in_target.push(member & 2 != 0);
            unified.push(name);
        }
        let n_target = r.u64("target order")?;
        if n_target != in_target.iter().filter(|&&t| t).count() {
            return Err(Error::Checkpoint("target order disagrees with label membership".into()));
        }
        let mut target = Vec::with_capacity(n_target);
        for _ in 0..n_target {
            let i = r.u64("target order")?;
            if !in_target.get(i).copied().unwrap_or(false) {
                return Err(Error::Checkpoint(format!("target order names non-target label index {i}")));
            }
            target.push(unified[i].clone());
        }
        let grl_coeff = r.f64("header")?;
        let topology = LabelTopology::new(&source, &target).map_err(|e| Error::Checkpoint(format!("label header: {e}")))?;
        if topology.unified() != unified.as_slice() {
            return Err(Error::Checkpoint("label header disagrees with label count".into()));
        }

        let config = ModelConfig {
            extractor: ConvConfig {
                height,
                width,
                channels,
                block_channels,
                feature_dim,
            },
            hidden_dim,
            detach_recognizer,
        };
        let mut model = ModelState::new(&config, num_labels, 0).map_err(|e| Error::Checkpoint(format!("architecture: {e}")))?;
        fill(&mut model, &r.tensors("parameters")?, "parameters")?;
        model.grl_coeff = grl_coeff;

        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            _ => {
                let step = r.u64("optimizer")? as u64;
                let m = r.tensors("optimizer")?;
                let v = r.tensors("optimizer")?;
                check_layout(&model, &m, "optimizer first moments")?;
                check_layout(&model, &v, "optimizer second moments")?;
                Some(OptimizerState { step, m, v })
            }
        };
        let best = match r.u8("best-model flag")? {
            0 => None,
            _ => {
                let step = r.u64("best model")? as u64;
                let score = r.f64("best model")?;
                let mut best = model.clone();
                fill(&mut best, &r.tensors("best model")?, "best model")?;
                Some(BestModel { step, score, model: best })
            }
        };
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            model,
            topology,
            optimizer,
            best,
        })
    }

    /// Writes through a temporary sibling and renames it into place, so an
    /// interrupted write never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Like [`Checkpoint::load`], additionally requiring the stored labels
    /// to match `topology`.
    pub fn load_for(path: &Path, topology: &LabelTopology) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.topology.unified() != topology.unified() || ck.topology.target_specific() != topology.target_specific() {
            return Err(Error::Checkpoint(format!(
                "{}: label set {:?} does not match {:?}",
                path.display(),
                ck.topology.unified(),
                topology.unified()
            )));
        }
        Ok(ck)
    }
}
