//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dg::{inference_anchors, train_common_baseline, train_disentangled, MultiDomainBank};
use crate::embedding::{Matrix, Temperature};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradCheckConfig};
use crate::io::{self, Dataset, LoadedSplit};
use crate::report::{percent, Method, RunReport, SplitResult, TrainingSummary};
use crate::selftrain::{adapted_anchors, train_task_residual, TrainConfig};
use crate::synth::{generate, SynthConfig};
use crate::zeroshot::{accuracy, classify_batch, ClassAnchorSet};

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "RESADAPT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "resadapt", version, about = "Embedding-space zero-shot classification and residual self-training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Zero-shot accuracy of plain or domain-prior anchors on labeled splits.
    Zeroshot(ZeroshotArgs),
    /// Self-train a task residual on one unlabeled target split.
    Selftrain(SelftrainArgs),
    /// Train on several unlabeled domains and evaluate a held-out one.
    Dgtrain(DgtrainArgs),
    /// Write a seeded synthetic problem as banks, labels and a manifest.
    Synth(SynthArgs),
    /// Check the analytic residual gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Also write the report as JSON to this path.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ZeroshotArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Use the domain-decorated anchors of each split's domain.
    #[arg(long)]
    pub domain_prior: bool,
    #[arg(long, default_value_t = 0.01, value_parser = parse_tau)]
    pub tau: f64,
    /// Splits to evaluate (default: all).
    #[arg(long = "split")]
    pub splits: Vec<String>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Pseudo-label confidence threshold in [0, 1].
    #[arg(long, default_value_t = 0.5, value_parser = parse_gamma)]
    pub gamma: f64,
    #[arg(long, default_value_t = 3e-4, value_parser = parse_positive)]
    pub lr: f64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch: u64,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.01, value_parser = parse_tau)]
    pub tau: f64,
    /// Relabel with the current model at the start of every epoch after the first.
    #[arg(long)]
    pub refresh_pseudo_labels: bool,
}

impl TrainArgs {
    pub fn config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch as usize,
            epochs: self.epochs,
            gamma: self.gamma,
            tau: Temperature::new(self.tau)?,
            seed: self.seed,
            refresh_pseudo_labels_each_epoch: self.refresh_pseudo_labels,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SelftrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Target split to adapt to (may be omitted when the manifest has one split).
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub domain_prior: bool,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Where to write the trained residual (EMB1).
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the per-epoch training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Common,
    Disentangled,
}

#[derive(Debug, Args)]
pub struct DgtrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub heldout: String,
    /// Training splits (default: every split except the held-out one).
    #[arg(long = "train")]
    pub train_splits: Vec<String>,
    #[arg(long, value_enum, default_value_t = Baseline::Disentangled)]
    pub baseline: Baseline,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Output: a directory for disentangled residuals, an EMB1 file for common.
    #[arg(long, required_unless_present = "eval_only")]
    pub out: Option<PathBuf>,
    /// Skip training and evaluate the held-out split with a saved residual.
    #[arg(long, requires = "residual")]
    pub eval_only: bool,
    /// Saved residual used by --eval-only.
    #[arg(long)]
    pub residual: Option<PathBuf>,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub domains: usize,
    #[arg(long, default_value_t = 100)]
    pub samples_per_class: usize,
    #[arg(long, default_value_t = 0.1)]
    pub separation: f64,
    #[arg(long, default_value_t = 0.3)]
    pub shift: f64,
    #[arg(long, default_value_t = 0.4)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.3)]
    pub anchor_noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    #[arg(long, default_value_t = 1.0, value_parser = parse_tau)]
    pub tau: f64,
    /// Negates the analytic gradient (negative control for test harnesses).
    #[arg(long, hide = true)]
    pub inject_sign_flip: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

fn parse_gamma(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("gamma must lie in [0, 1], got {v}"))
    }
}

fn parse_positive(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("expected a positive number, got {v}"))
    }
}

fn parse_tau(s: &str) -> std::result::Result<f64, String> {
    parse_positive(s)
}

/// What a successful command produced: text for stdout and, when asked,
/// a JSON document for a file.
pub struct Outcome {
    pub text: String,
    pub json: Option<(PathBuf, String)>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn finish(report: RunReport, output: &OutputArgs) -> Outcome {
    Outcome {
        text: report.to_table(),
        json: output.json.clone().map(|p| (p, report.to_json())),
    }
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let outcome = match cli.command {
        Command::Zeroshot(a) => cmd_zeroshot(&a)?,
        Command::Selftrain(a) => cmd_selftrain(&a)?,
        Command::Dgtrain(a) => cmd_dgtrain(&a)?,
        Command::Synth(a) => cmd_synth(&a)?,
        Command::Gradcheck(a) => cmd_gradcheck(&a)?,
    };
    if let Some((path, json)) = &outcome.json {
        write_text(path, json)?;
    }
    Ok(outcome)
}

fn eval_accuracy(bank: &Matrix, labels: &[u32], anchors: &ClassAnchorSet, tau: Temperature) -> Result<f64> {
    let preds = classify_batch(bank, anchors, tau)?;
    Ok(percent(accuracy(&preds, labels)?))
}

fn labels_of(split: &LoadedSplit) -> Result<&[u32]> {
    split
        .labels
        .as_deref()
        .ok_or_else(|| Error::MissingLabels(split.name.clone()))
}

pub fn cmd_zeroshot(a: &ZeroshotArgs) -> Result<Outcome> {
    let data = Dataset::load(&a.manifest)?;
    let tau = Temperature::new(a.tau)?;
    let selected: Vec<&LoadedSplit> = if a.splits.is_empty() {
        data.splits.iter().collect()
    } else {
        a.splits.iter().map(|n| data.split(n)).collect::<Result<_>>()?
    };
    let mut splits = Vec::with_capacity(selected.len());
    for split in selected {
        let labels = labels_of(split)?;
        let anchors = data.anchors_for(split, a.domain_prior)?;
        splits.push(SplitResult {
            name: split.name.clone(),
            domain: split.domain_name.clone(),
            role: "eval".into(),
            accuracy_before: None,
            accuracy: Some(eval_accuracy(&split.bank, labels, &anchors, tau)?),
            retained: None,
            candidates: None,
        });
    }
    let report = RunReport {
        method: if a.domain_prior {
            Method::DomainPrior
        } else {
            Method::ZeroShot
        },
        tau,
        domain_prior: a.domain_prior,
        train_config: None,
        protocol: None,
        splits,
        training: None,
    };
    Ok(finish(report, &a.output))
}

fn resolve_target<'a>(data: &'a Dataset, target: Option<&str>) -> Result<&'a LoadedSplit> {
    match target {
        Some(name) => data.split(name),
        None if data.splits.len() == 1 => Ok(&data.splits[0]),
        None => Err(Error::ConfigInvalid(
            "--target is required when the manifest has more than one split".into(),
        )),
    }
}

pub fn cmd_selftrain(a: &SelftrainArgs) -> Result<Outcome> {
    let cfg = a.train.config()?;
    let data = Dataset::load(&a.manifest)?;
    let target = resolve_target(&data, a.target.as_deref())?;
    let anchors = data.anchors_for(target, a.domain_prior)?;
    let run = train_task_residual(&target.bank, &anchors, &cfg)?;
    io::write_residual(&run.residual, &a.out)?;
    if let Some(p) = &a.log {
        write_text(p, &run.log.to_text())?;
    }
    let (before, after) = match &target.labels {
        Some(labels) => {
            let adapted = adapted_anchors(&anchors, &run.residual)?;
            (
                Some(eval_accuracy(&target.bank, labels, &anchors, cfg.tau)?),
                Some(eval_accuracy(&target.bank, labels, &adapted, cfg.tau)?),
            )
        }
        None => (None, None),
    };
    let report = RunReport {
        method: Method::SelfTraining,
        tau: cfg.tau,
        domain_prior: a.domain_prior,
        train_config: Some(cfg.clone()),
        protocol: None,
        splits: vec![SplitResult {
            name: target.name.clone(),
            domain: target.domain_name.clone(),
            role: "target".into(),
            accuracy_before: before,
            accuracy: after,
            retained: Some(run.initial_pseudo_labels.len()),
            candidates: Some(run.initial_pseudo_labels.total_candidates),
        }],
        training: Some(TrainingSummary {
            epochs: run.log.epochs,
            dropped_domains: Vec::new(),
        }),
    };
    Ok(finish(report, &a.output))
}

pub fn cmd_dgtrain(a: &DgtrainArgs) -> Result<Outcome> {
    let cfg = a.train.config()?;
    let data = Dataset::load(&a.manifest)?;
    let heldout = data.split(&a.heldout)?;
    let train_splits: Vec<&LoadedSplit> = if a.train_splits.is_empty() {
        data.splits.iter().filter(|s| s.name != heldout.name).collect()
    } else {
        a.train_splits
            .iter()
            .map(|n| data.split(n))
            .collect::<Result<_>>()?
    };
    if train_splits.is_empty() {
        return Err(Error::ConfigInvalid("no training splits".into()));
    }
    if a.baseline == Baseline::Disentangled && train_splits.len() < 2 {
        return Err(Error::ConfigInvalid(format!(
            "disentangled training needs at least 2 training domains, got {}",
            train_splits.len()
        )));
    }
    let anchors = data.anchors.clone();
    let method = match a.baseline {
        Baseline::Common => Method::DgCommonBaseline,
        Baseline::Disentangled => Method::DgShared,
    };

    let mut splits = Vec::new();
    let mut training = None;
    let eval_anchors = if a.eval_only {
        let path = a.residual.as_ref().expect("clap enforces --residual");
        match a.baseline {
            Baseline::Disentangled => {
                let (shared, _) = io::read_dg_shared(path)?;
                anchors.with_anchors(anchors.anchors().add(&shared)?)?
            }
            Baseline::Common => adapted_anchors(&anchors, &io::read_residual(path)?)?,
        }
    } else {
        let out = a.out.as_ref().expect("clap enforces --out");
        let bank = MultiDomainBank::new(
            train_splits.iter().map(|s| s.bank.clone()).collect(),
            train_splits.iter().map(|s| s.domain_name.clone()).collect(),
        )
        .map_err(|e| match e {
            Error::ConfigInvalid(m) => Error::ManifestInvalid(m),
            other => other,
        })?;
        let (eval_anchors, log, retained, dropped) = match a.baseline {
            Baseline::Disentangled => {
                let run = train_disentangled(&bank, &anchors, &cfg)?;
                io::write_dg_residual(&run.residual, out)?;
                let retained: Vec<(usize, usize)> = run
                    .pseudo_labels
                    .iter()
                    .map(|p| (p.len(), p.total_candidates))
                    .collect();
                (
                    inference_anchors(&anchors, &run.residual)?,
                    run.log,
                    retained,
                    run.dropped_domains,
                )
            }
            Baseline::Common => {
                let run = train_common_baseline(&bank, &anchors, &cfg)?;
                io::write_residual(&run.residual, out)?;
                // Pooled pseudo-labels split back per domain, in pooling order.
                let retained = per_domain_retained(&bank, &run.initial_pseudo_labels.sample_indices);
                (adapted_anchors(&anchors, &run.residual)?, run.log, retained, Vec::new())
            }
        };
        if let Some(p) = &a.log {
            write_text(p, &log.to_text())?;
        }
        for (split, (kept, total)) in train_splits.iter().zip(retained) {
            let (before, after) = match &split.labels {
                Some(l) => (
                    Some(eval_accuracy(&split.bank, l, &anchors, cfg.tau)?),
                    Some(eval_accuracy(&split.bank, l, &eval_anchors, cfg.tau)?),
                ),
                None => (None, None),
            };
            splits.push(SplitResult {
                name: split.name.clone(),
                domain: split.domain_name.clone(),
                role: "train".into(),
                accuracy_before: before,
                accuracy: after,
                retained: Some(kept),
                candidates: Some(total),
            });
        }
        training = Some(TrainingSummary {
            epochs: log.epochs,
            dropped_domains: dropped,
        });
        eval_anchors
    };

    let labels = labels_of(heldout)?;
    splits.push(SplitResult {
        name: heldout.name.clone(),
        domain: heldout.domain_name.clone(),
        role: "held-out".into(),
        accuracy_before: Some(eval_accuracy(&heldout.bank, labels, &anchors, cfg.tau)?),
        accuracy: Some(eval_accuracy(&heldout.bank, labels, &eval_anchors, cfg.tau)?),
        retained: None,
        candidates: None,
    });
    let report = RunReport {
        method,
        tau: cfg.tau,
        domain_prior: false,
        train_config: Some(cfg),
        protocol: Some("leave-one-domain-out".into()),
        splits,
        training,
    };
    Ok(finish(report, &a.output))
}

/// Maps pooled row indices back to (retained, candidates) per domain. The
/// common baseline pools domains sorted by name.
fn per_domain_retained(bank: &MultiDomainBank, pooled_rows: &[usize]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..bank.num_domains()).collect();
    order.sort_by(|&x, &y| bank.domain_names()[x].cmp(&bank.domain_names()[y]));
    let mut out = vec![(0, 0); bank.num_domains()];
    let mut start = 0;
    for n in order {
        let rows = bank.banks()[n].rows();
        let kept = pooled_rows
            .iter()
            .filter(|&&r| r >= start && r < start + rows)
            .count();
        out[n] = (kept, rows);
        start += rows;
    }
    out
}

pub fn cmd_synth(a: &SynthArgs) -> Result<Outcome> {
    let cfg = SynthConfig {
        num_classes: a.classes,
        dim: a.dim,
        num_domains: a.domains,
        samples_per_class_per_domain: a.samples_per_class,
        class_separation: a.separation,
        domain_shift: a.shift,
        noise: a.noise,
        anchor_noise: a.anchor_noise,
        seed: a.seed,
    };
    let problem = generate(&cfg)?;
    let manifest = io::save_synthetic(&problem, &a.out)?;
    Ok(Outcome {
        text: format!("wrote {}\n", manifest.display()),
        json: None,
    })
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<Outcome> {
    let cfg = GradCheckConfig {
        seed: a.seed,
        instances: a.instances,
        num_classes: a.classes,
        dim: a.dim,
        samples: a.samples,
        tau: a.tau,
        inject_sign_flip: a.inject_sign_flip,
        ..GradCheckConfig::default()
    };
    let report = run_gradcheck(&cfg)?;
    let mut text = format!(
        "checked {} coordinates over {} instances; max relative error {:e} (tolerance {:e})\n",
        report.coordinates_checked, cfg.instances, report.max_rel_err, cfg.tolerance
    );
    if let Some(w) = &report.worst {
        text.push_str(&format!(
            "worst: instance {} class {} coord {}: analytic {:e}, finite difference {:e}\n",
            w.instance, w.class, w.coord, w.analytic, w.numeric
        ));
    }
    if let Some(path) = &a.output.json {
        let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
        json.push('\n');
        write_text(path, &json)?;
    }
    print!("{text}");
    report.into_result()?;
    Ok(Outcome { text: String::new(), json: None })
}

/// Sizes the global worker pool from `RESADAPT_THREADS`, if set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::ConfigInvalid(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::ConfigInvalid(format!("cannot size thread pool: {e}")))
}
