//! `soda` command-line interface.
//!
//! Every command reads the same JSON run configuration (`--config`), with
//! any field overridable by a `--dotted.key=value` flag. Flags win over the
//! file.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use soda::checkpoint::Checkpoint;
use soda::config::RunConfig;
use soda::data::{write_manifest, Image, Sample};
use soda::evaluation::{export_features, grad_cam, proxy_a_distance, read_features, split_by_domain};
use soda::network::ModelState;
use soda::trainer::{evaluate, fit};
use soda::Error;

const OVERRIDE_HELP: &str = "Any other `--key=value` flag overrides the config field at that dotted \
path, e.g. `--train.steps=500` or `--manifest=data/manifest.csv`. Values are parsed as JSON when \
possible and taken as strings otherwise.";

#[derive(Parser)]
#[command(name = "soda", version, about = "Semi-supervised open-set domain-adversarial training", after_help = OVERRIDE_HELP)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark as PNG images plus a manifest.
    Synth {
        /// Dataset directory [default: <output_dir>/data].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model, writing checkpoints and a JSONL metrics log.
    Train,
    /// Per-label AUC on the validation and hidden-label target samples.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        /// Report path [default: <output_dir>/eval.json].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Proxy-A-distance between source and target features.
    Pad {
        #[arg(long, conflicts_with = "features", required_unless_present = "features")]
        checkpoint: Option<PathBuf>,
        /// Feature CSV written by `export-features`.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Use the final weights instead of the best validation model.
        #[arg(long)]
        last: bool,
        /// Report path [default: <output_dir>/pad.json].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write every sample's feature vector to CSV.
    ExportFeatures {
        #[command(flatten)]
        model: ModelArgs,
        /// [default: <output_dir>/features.csv]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grad-CAM map of one label on one image.
    Saliency {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        label: String,
        /// [default: <output_dir>/saliency]
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Use the final weights instead of the best validation model.
    #[arg(long)]
    last: bool,
}

/// Flags the parser owns; every other `--key=value` is a config override.
const OWN_FLAGS: [&str; 9] = ["config", "out", "checkpoint", "features", "last", "image", "label", "help", "version"];

fn split_overrides(args: impl IntoIterator<Item = String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        if let Some((key, value)) = arg.strip_prefix("--").and_then(|a| a.split_once('=')) {
            if !OWN_FLAGS.contains(&key) {
                overrides.push((key.to_owned(), value.to_owned()));
                continue;
            }
        }
        rest.push(arg);
    }
    (rest, overrides)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => 3,
        Error::Io { .. } | Error::Image { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli, &overrides) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli, overrides: &[(String, String)]) -> soda::Result<String> {
    let cfg = RunConfig::load(cli.config.as_deref(), overrides)?;
    let out_dir = cfg.output_dir();
    match cli.command {
        Command::Synth { out } => {
            if cfg.synthetic.is_none() {
                return Err(Error::Invalid("synth needs a synthetic spec, not a manifest".into()));
            }
            let (data, _) = load_all(&cfg)?;
            let dir = out.unwrap_or_else(|| out_dir.join("data"));
            let manifest = write_manifest(&data, &dir)?;
            let (s, l, u) = data.sizes();
            Ok(format!("synth: {} rows ({s} source, {l} labeled target, {u} unlabeled target) -> {}", s + l + u, manifest.display()))
        }
        Command::Train => {
            let (data, validation) = cfg.load_data()?;
            let train = cfg.effective_train();
            create_dir(&out_dir)?;
            write_file(&out_dir.join("config.json"), cfg.to_json().as_bytes())?;
            let model = ModelState::new(&cfg.model, data.topology.len(), train.seed)?;
            let outcome = fit(model, &data, &validation, &train)?;
            let last = outcome.records.last().expect("at least one step");
            let best = match &outcome.best {
                Some(b) => format!("best val_auc {:.4} at step {}", b.score, b.step),
                None => "no validation set".to_owned(),
            };
            Ok(format!(
                "train: {} steps, final loss {:.4}, {best} -> {}",
                last.step,
                last.loss.total,
                train.checkpoint_path.expect("defaulted").display()
            ))
        }
        Command::Eval { model, out } => {
            let (data, validation) = cfg.load_data()?;
            let net = load_model(&model, &data.topology)?;
            let report = evaluate(&net, &data, &validation, None)?;
            let path = out.unwrap_or_else(|| out_dir.join("eval.json"));
            write_json(&path, &report)?;
            let mean = report.val_auc.map_or("n/a".to_owned(), |v| format!("{v:.4}"));
            let per: Vec<String> = report
                .auc_by_label
                .iter()
                .flatten()
                .map(|(k, v)| format!("{k}={}", v.map_or("n/a".to_owned(), |a| format!("{a:.4}"))))
                .collect();
            Ok(format!("eval: val_auc {mean}, target AUC {} -> {}", per.join(" "), path.display()))
        }
        Command::Pad {
            checkpoint,
            features,
            last,
            out,
        } => {
            let (source, target) = match (checkpoint, features) {
                (_, Some(csv)) => split_by_domain(&read_features(&csv)?),
                (Some(checkpoint), None) => {
                    let (data, validation) = cfg.load_data()?;
                    let net = load_model(&ModelArgs { checkpoint, last }, &data.topology)?;
                    let feats = |xs: &mut dyn Iterator<Item = &Sample>| -> soda::Result<Vec<Vec<f64>>> {
                        xs.map(|s| net.forward_features(&s.image)).collect()
                    };
                    let src = feats(&mut data.source.iter())?;
                    let tgt = feats(&mut data.target_labeled.iter().chain(&validation).chain(&data.target_unlabeled))?;
                    (src, tgt)
                }
                (None, None) => unreachable!("clap requires one of them"),
            };
            let report = proxy_a_distance(&source, &target, &cfg.pad)?;
            let path = out.unwrap_or_else(|| out_dir.join("pad.json"));
            write_json(&path, &report)?;
            Ok(format!(
                "pad: d_A {:.4} (std {:.4}) over {} source and {} target rows -> {}",
                report.d_a,
                report.d_a_std,
                source.len(),
                target.len(),
                path.display()
            ))
        }
        Command::ExportFeatures { model, out } => {
            let (data, validation) = cfg.load_data()?;
            let net = load_model(&model, &data.topology)?;
            let samples: Vec<Sample> = data
                .source
                .iter()
                .chain(&data.target_labeled)
                .chain(&validation)
                .chain(&data.target_unlabeled)
                .cloned()
                .collect();
            let path = out.unwrap_or_else(|| out_dir.join("features.csv"));
            let rows = export_features(&net, &samples, &data.topology, &path)?;
            Ok(format!("export-features: {} rows of dimension {} -> {}", rows.len(), net.feature_dim(), path.display()))
        }
        Command::Saliency { model, image, label, out } => {
            let ck = Checkpoint::load(&model.checkpoint)?;
            let net = pick(ck.model, ck.best.map(|b| b.model), model.last);
            let e = net.config().extractor;
            let x = Image::load(&image, e.channels, e.height, e.width)?;
            let map = grad_cam(&net, &x, &label, &ck.topology)?;
            let dir = out.unwrap_or_else(|| out_dir.join("saliency"));
            let stem = format!("{}_{label}", image.file_stem().and_then(|s| s.to_str()).unwrap_or("image"));
            let png = map.write(&x, &image, &dir, &stem)?;
            let centroid = map.centroid().map_or("none".to_owned(), |(cx, cy)| format!("({cx:.1}, {cy:.1})"));
            let score = net.forward(&x)?.y_hat[ck.topology.index_of(&label).expect("checked by grad_cam")];
            Ok(format!("saliency: label {label}, score {score:.4}, centroid {centroid} -> {}", png.display()))
        }
    }
}

/// Synthetic data without the validation hold-out.
fn load_all(cfg: &RunConfig) -> soda::Result<(soda::data::DomainData, Vec<Sample>)> {
    let mut cfg = cfg.clone();
    cfg.validation_fraction = 0.0;
    cfg.load_data()
}

fn load_model(args: &ModelArgs, topology: &soda::label_space::LabelTopology) -> soda::Result<ModelState> {
    let ck = Checkpoint::load_for(&args.checkpoint, topology)?;
    Ok(pick(ck.model, ck.best.map(|b| b.model), args.last))
}

fn pick(last: ModelState, best: Option<ModelState>, use_last: bool) -> ModelState {
    match best {
        Some(b) if !use_last => b,
        _ => last,
    }
}

fn create_dir(dir: &Path) -> soda::Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_owned(), source })
}

fn write_file(path: &Path, bytes: &[u8]) -> soda::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(path, bytes).map_err(|source| Error::Io { path: path.to_owned(), source })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> soda::Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}
