//! The training loop: three-group batches, one simultaneous update of every
//! component per step, periodic evaluation, checkpoints and a JSONL log.

mod adam;

pub use adam::{Adam, AdamConfig};

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{BestModel, Checkpoint};
use crate::data::{sample_batch, Batch, DomainData, GroupSizes, Sample};
use crate::error::{Error, Result};
use crate::evaluation::{mean_auc, per_label_auc, proxy_a_distance, PadConfig};
use crate::label_space::{Domain, LabelTopology};
use crate::network::{grl_ramp, AdversarialWiring, FeatureExtractor, Gradients, ModelState};
use crate::objectives::{objective, BatchOutputs, LossReport, LossWeights, SampleOutputs};

/// Coefficient of the gradient reversal over the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrlSchedule {
    Constant(f64),
    /// `2 / (1 + exp(-10 p)) - 1` at progress `p = (step - 1) / steps`.
    Ramp,
}

impl GrlSchedule {
    pub fn coeff(&self, step: usize, steps: usize) -> f64 {
        match *self {
            GrlSchedule::Constant(c) => c,
            GrlSchedule::Ramp => grl_ramp((step - 1) as f64 / steps as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub group_sizes: GroupSizes,
    pub with_replacement: bool,
    pub grl: GrlSchedule,
    pub seed: u64,
    /// Steps between evaluations and checkpoints; 0 disables both until the
    /// final step.
    pub eval_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    /// Continue from `checkpoint_path` if it exists.
    pub resume: bool,
    /// Weigh unlabeled samples in the discriminator losses by the recognizer
    /// output. When off every unlabeled sample counts fully as target.
    pub recognizer_weighting: bool,
    /// Train on source batches alone up to this step, then on labeled-target
    /// batches alone, with every adversarial and recognizer weight at zero.
    pub fine_tune_after: Option<usize>,
    /// Also report the proxy-A-distance of the features at each evaluation.
    pub pad: Option<PadConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 1e-4,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            group_sizes: GroupSizes::default(),
            with_replacement: true,
            grl: GrlSchedule::Ramp,
            seed: 0,
            eval_every: 200,
            checkpoint_path: None,
            log_path: None,
            resume: false,
            recognizer_weighting: true,
            fine_tune_after: None,
            pad: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        self.adam.validate()?;
        self.weights.validate()?;
        if let GrlSchedule::Constant(c) = self.grl {
            if !(c >= 0.0) || !c.is_finite() {
                return Err(Error::invalid("constant GRL coefficient must be finite and >= 0"));
            }
        }
        if self.resume && self.checkpoint_path.is_none() {
            return Err(Error::invalid("resume requires checkpoint_path"));
        }
        if let Some(p) = &self.pad {
            p.validate()?;
        }
        Ok(())
    }

    /// Group sizes and loss weights in effect at `step` (1-based).
    pub fn phase(&self, step: usize) -> (GroupSizes, LossWeights) {
        let Some(k) = self.fine_tune_after else {
            return (self.group_sizes, self.weights);
        };
        let n = self.group_sizes.source + self.group_sizes.target_labeled;
        let sizes = if step <= k {
            GroupSizes {
                source: n,
                target_labeled: 0,
                target_unlabeled: 0,
            }
        } else {
            GroupSizes {
                source: 0,
                target_labeled: n,
                target_unlabeled: 0,
            }
        };
        (sizes, LossWeights::zeros())
    }
}

/// Which alignment terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub enable_dg: bool,
    pub enable_dc: bool,
    pub enable_r: bool,
    /// Source-only training followed by labeled-target fine-tuning; overrides
    /// the other switches.
    pub fine_tune: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::soda()
    }
}

impl Ablation {
    pub fn soda() -> Self {
        Self {
            enable_dg: true,
            enable_dc: true,
            enable_r: true,
            fine_tune: false,
        }
    }

    /// The general discriminator alone, every unlabeled target sample
    /// weighted fully.
    pub fn dann() -> Self {
        Self {
            enable_dg: true,
            enable_dc: false,
            enable_r: false,
            fine_tune: false,
        }
    }

    pub fn fine_tune() -> Self {
        Self {
            enable_dg: false,
            enable_dc: false,
            enable_r: false,
            fine_tune: true,
        }
    }

    /// Zeroes the weights of disabled terms. The fine-tune baseline switches
    /// to target batches halfway through the run.
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if self.fine_tune {
            cfg.weights = LossWeights::zeros();
            cfg.recognizer_weighting = false;
            cfg.fine_tune_after = Some(cfg.steps / 2);
            return;
        }
        if !self.enable_dg {
            cfg.weights.lambda_dg = 0.0;
        }
        if !self.enable_dc {
            cfg.weights.lambda_dc_label = 0.0;
            cfg.weights.lambda_dc_un = 0.0;
        }
        if !self.enable_r {
            cfg.weights.lambda_r = 0.0;
            cfg.recognizer_weighting = false;
        }
    }
}

/// Forward pass of every batch sample, the losses, and the parameter
/// gradients of the weighted total.
pub fn compute_gradients<E: FeatureExtractor>(
    model: &ModelState<E>,
    batch: &Batch,
    topology: &LabelTopology,
    weights: &LossWeights,
    wiring: AdversarialWiring,
    recognizer_weighting: bool,
) -> Result<(LossReport, Gradients<E>)> {
    let run = |group: &[Sample], unlabeled: bool| -> Result<(Vec<_>, Vec<SampleOutputs>)> {
        let mut fwds = Vec::with_capacity(group.len());
        let mut outs = Vec::with_capacity(group.len());
        for s in group {
            let f = model.forward(&s.image)?;
            outs.push(SampleOutputs {
                y_hat: f.y_hat.clone(),
                d_g_hat: f.d_g_hat,
                d_c_hat: f.d_c_hat,
                r_hat: if unlabeled && !recognizer_weighting { 1.0 } else { f.r_hat },
                labels: s.labels().cloned(),
            });
            fwds.push(f);
        }
        Ok((fwds, outs))
    };
    let (f_s, o_s) = run(&batch.source_group, false)?;
    let (f_l, o_l) = run(&batch.target_labeled_group, false)?;
    let (f_u, o_u) = run(&batch.target_unlabeled_group, true)?;
    let outputs = BatchOutputs {
        source: o_s,
        target_labeled: o_l,
        target_unlabeled: o_u,
    };
    let (report, head_grads) = objective(&outputs, topology, weights)?;

    let mut grads = model.zeros_like();
    for (fwds, hg) in [
        (&f_s, &head_grads.source),
        (&f_l, &head_grads.target_labeled),
        (&f_u, &head_grads.target_unlabeled),
    ] {
        for (f, g) in fwds.iter().zip(hg) {
            model.backward(f, g, wiring, &mut grads);
        }
    }
    check_finite(&grads)?;
    Ok((report, grads))
}

fn check_finite<E: FeatureExtractor>(g: &Gradients<E>) -> Result<()> {
    let parts: [(&str, Vec<&[f64]>); 5] = [
        ("extractor", g.extractor.tensors()),
        ("classifier", g.classifier.tensors().to_vec()),
        ("general discriminator", g.dg_head.tensors()),
        ("common discriminator", g.dc_head.tensors()),
        ("recognizer", g.r_head.tensors()),
    ];
    for (name, ts) in parts {
        if ts.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                term: format!("{name} gradient"),
            });
        }
    }
    Ok(())
}

/// Batch drawn for `step`: each step has its own RNG stream, so a resumed
/// run draws exactly what an uninterrupted one would.
pub fn batch_for_step(data: &DomainData, cfg: &TrainConfig, step: usize) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step as u64);
    let (sizes, _) = cfg.phase(step);
    sample_batch(data, sizes, cfg.with_replacement, &mut rng)
}

/// One simultaneous update of all parameters.
pub fn train_step<E: FeatureExtractor>(
    model: &mut ModelState<E>,
    adam: &mut Adam,
    batch: &Batch,
    topology: &LabelTopology,
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossReport> {
    let (_, weights) = cfg.phase(step);
    model.grl_coeff = cfg.grl.coeff(step, cfg.steps);
    let (report, grads) = compute_gradients(
        model,
        batch,
        topology,
        &weights,
        AdversarialWiring::Reversed,
        cfg.recognizer_weighting,
    )?;
    adam.update(model, &grads, cfg.learning_rate);
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Target-label AUCs over validation plus hidden-label unlabeled samples.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auc_by_label: Option<BTreeMap<String, Option<f64>>>,
    /// Mean target-label AUC on the validation split alone.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pad: Option<f64>,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossReport,
    #[serde(flatten)]
    pub eval: EvalReport,
    /// Wall-clock duration of the step.
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: ModelState,
    /// Highest validation AUC seen at an evaluation step, if any.
    pub best: Option<BestModel>,
    pub records: Vec<TrainRecord>,
}

impl FitOutcome {
    /// The best model by validation AUC, falling back to the final one.
    pub fn selected(&self) -> &ModelState {
        self.best.as_ref().map_or(&self.model, |b| &b.model)
    }
}

/// Evaluates `model` on the validation set plus the hidden labels of the
/// unlabeled target set.
pub fn evaluate(model: &ModelState, data: &DomainData, validation: &[Sample], pad: Option<&PadConfig>) -> Result<EvalReport> {
    let topology = &data.topology;
    let mut report = EvalReport::default();
    let pool: Vec<Sample> = validation.iter().chain(&data.target_unlabeled).cloned().collect();
    if pool.iter().any(|s| s.domain == Domain::Target && s.evaluation_labels().is_some()) {
        report.auc_by_label = Some(per_label_auc(model, &pool, topology)?);
    }
    if !validation.is_empty() {
        report.val_auc = mean_auc(&per_label_auc(model, validation, topology)?);
    }
    if let Some(cfg) = pad {
        let feats = |xs: &[&Sample]| -> Result<Vec<Vec<f64>>> { xs.iter().map(|s| model.forward_features(&s.image)).collect() };
        let src: Vec<&Sample> = data.source.iter().collect();
        let tgt: Vec<&Sample> = data.target_labeled.iter().chain(&data.target_unlabeled).collect();
        report.pad = Some(proxy_a_distance(&feats(&src)?, &feats(&tgt)?, cfg)?.d_a);
    }
    Ok(report)
}

/// Stateful training run; [`fit`] drives it to completion.
pub struct Trainer<'a> {
    pub model: ModelState,
    adam: Adam,
    best: Option<BestModel>,
    records: Vec<TrainRecord>,
    step: usize,
    data: &'a DomainData,
    validation: &'a [Sample],
    cfg: TrainConfig,
    log: Option<BufWriter<File>>,
}

impl<'a> Trainer<'a> {
    /// Starts a run from `model`, or from the checkpoint when resuming.
    pub fn new(model: ModelState, data: &'a DomainData, validation: &'a [Sample], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model.num_labels() != data.topology.len() {
            return Err(Error::invalid(format!(
                "model predicts {} labels, topology has {}",
                model.num_labels(),
                data.topology.len()
            )));
        }
        let mut t = Self {
            adam: Adam::new(cfg.adam, &model),
            model,
            best: None,
            records: Vec::new(),
            step: 0,
            data,
            validation,
            cfg: cfg.clone(),
            log: None,
        };
        let resume_from = cfg.checkpoint_path.as_ref().filter(|p| cfg.resume && p.exists());
        if let Some(path) = resume_from {
            let ck = Checkpoint::load_for(path, &data.topology)?;
            let state = ck
                .optimizer
                .ok_or_else(|| Error::Checkpoint(format!("{}: no optimizer state to resume from", path.display())))?;
            t.step = state.step as usize;
            t.adam = Adam::from_state(cfg.adam, state);
            t.model = ck.model;
            t.best = ck.best;
        }
        if let Some(path) = &cfg.log_path {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            if t.step > 0 && path.exists() {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                for line in text.lines() {
                    let r: TrainRecord = serde_json::from_str(line)
                        .map_err(|e| Error::invalid(format!("{}: unreadable log line: {e}", path.display())))?;
                    if r.step <= t.step {
                        t.records.push(r);
                    }
                }
            }
            let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
            for r in &t.records {
                writeln!(w, "{}", serde_json::to_string(r).expect("record serializes")).map_err(|e| Error::io(path, e))?;
            }
            t.log = Some(w);
        }
        Ok(t)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn records(&self) -> &[TrainRecord] {
        &self.records
    }

    /// Runs steps until `last` (clamped to the configured total).
    pub fn run_until(&mut self, last: usize) -> Result<()> {
        let last = last.min(self.cfg.steps);
        while self.step < last {
            let step = self.step + 1;
            let start = Instant::now();
            let batch = batch_for_step(self.data, &self.cfg, step)?;
            let loss = train_step(&mut self.model, &mut self.adam, &batch, &self.data.topology, &self.cfg, step)?;
            self.step = step;

            let due = (self.cfg.eval_every > 0 && step % self.cfg.eval_every == 0) || step == self.cfg.steps;
            let mut eval = EvalReport::default();
            if due {
                eval = evaluate(&self.model, self.data, self.validation, self.cfg.pad.as_ref())?;
                if let Some(score) = eval.val_auc {
                    if self.best.as_ref().is_none_or(|b| score > b.score) {
                        self.best = Some(BestModel {
                            step: step as u64,
                            score,
                            model: self.model.clone(),
                        });
                    }
                }
            }
            let record = TrainRecord {
                step,
                loss,
                eval,
                seconds: start.elapsed().as_secs_f64(),
            };
            self.write_record(&record)?;
            self.records.push(record);
            if due {
                self.save_checkpoint()?;
            }
        }
        Ok(())
    }

    fn write_record(&mut self, r: &TrainRecord) -> Result<()> {
        if let (Some(w), Some(path)) = (self.log.as_mut(), self.cfg.log_path.as_ref()) {
            writeln!(w, "{}", serde_json::to_string(r).expect("record serializes")).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    fn save_checkpoint(&mut self) -> Result<()> {
        if let (Some(w), Some(path)) = (self.log.as_mut(), self.cfg.log_path.as_ref()) {
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        if let Some(path) = &self.cfg.checkpoint_path {
            self.checkpoint().save(path)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            topology: self.data.topology.clone(),
            optimizer: Some(self.adam.state.clone()),
            best: self.best.clone(),
        }
    }

    pub fn finish(mut self) -> Result<FitOutcome> {
        if let (Some(w), Some(path)) = (self.log.as_mut(), self.cfg.log_path.as_ref()) {
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(FitOutcome {
            model: self.model,
            best: self.best,
            records: self.records,
        })
    }
}

/// Runs `cfg.steps` training steps from `model` (or from the checkpoint when
/// resuming).
pub fn fit(model: ModelState, data: &DomainData, validation: &[Sample], cfg: &TrainConfig) -> Result<FitOutcome> {
    let mut t = Trainer::new(model, data, validation, cfg)?;
    t.run_until(cfg.steps)?;
    t.finish()
}
