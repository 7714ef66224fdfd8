//! Run reports: a human-readable table plus a JSON document that echoes
//! every effective hyperparameter.

use std::fmt::Write as _;

use serde::Serialize;

use crate::embedding::Temperature;
use crate::selftrain::{EpochRecord, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ZeroShot,
    DomainPrior,
    SelfTraining,
    DgShared,
    DgCommonBaseline,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::ZeroShot => "zero-shot",
            Method::DomainPrior => "domain-prior",
            Method::SelfTraining => "self-training",
            Method::DgShared => "dg-shared",
            Method::DgCommonBaseline => "dg-common-baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitResult {
    pub name: String,
    pub domain: String,
    /// `eval`, `target`, `train` or `held-out`.
    pub role: String,
    /// Zero-shot accuracy (%) before adaptation, when labels exist.
    pub accuracy_before: Option<f64>,
    /// Accuracy (%) of the reported method, when labels exist.
    pub accuracy: Option<f64>,
    pub retained: Option<usize>,
    pub candidates: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingSummary {
    pub epochs: Vec<EpochRecord>,
    pub dropped_domains: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub method: Method,
    pub tau: Temperature,
    pub domain_prior: bool,
    /// Full training configuration for training commands.
    pub train_config: Option<TrainConfig>,
    pub protocol: Option<String>,
    pub splits: Vec<SplitResult>,
    pub training: Option<TrainingSummary>,
}

pub fn percent(fraction: f64) -> f64 {
    100.0 * fraction
}

fn cell(v: Option<f64>) -> String {
    v.map(|a| format!("{a:.2}")).unwrap_or_else(|| "-".into())
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "method: {}", self.method.tag());
        let _ = writeln!(out, "tau: {}", self.tau.value());
        if self.domain_prior {
            let _ = writeln!(out, "domain prior: yes");
        }
        if let Some(c) = &self.train_config {
            let _ = writeln!(
                out,
                "gamma: {}  lr: {}  batch: {}  epochs: {}  seed: {}  refresh: {}",
                c.gamma,
                c.learning_rate,
                c.batch_size,
                c.epochs,
                c.seed,
                c.refresh_pseudo_labels_each_epoch
            );
            let _ = writeln!(
                out,
                "adam: beta1 {}  beta2 {}  epsilon {}",
                c.adam_beta1, c.adam_beta2, c.adam_epsilon
            );
        }
        if let Some(p) = &self.protocol {
            let _ = writeln!(out, "protocol: {p}");
        }
        let _ = writeln!(
            out,
            "{:<20} {:<16} {:<9} {:>9} {:>9} {:>15}",
            "split", "domain", "role", "before%", "acc%", "retained"
        );
        for s in &self.splits {
            let retained = match (s.retained, s.candidates) {
                (Some(r), Some(n)) => format!("{r}/{n}"),
                _ => "-".into(),
            };
            let _ = writeln!(
                out,
                "{:<20} {:<16} {:<9} {:>9} {:>9} {:>15}",
                s.name,
                s.domain,
                s.role,
                cell(s.accuracy_before),
                cell(s.accuracy),
                retained
            );
        }
        if let Some(t) = &self.training {
            for d in &t.dropped_domains {
                let _ = writeln!(out, "warning: domain {d:?} retained no pseudo-labels and was skipped");
            }
            for e in &t.epochs {
                let loss = e.mean_loss.map(|l| format!("{l:.6}")).unwrap_or_else(|| "-".into());
                let _ = writeln!(
                    out,
                    "epoch {:>3}  retained {:>7}  steps {:>5}  mean loss {}",
                    e.epoch, e.retained, e.steps, loss
                );
            }
        }
        out
    }
}
