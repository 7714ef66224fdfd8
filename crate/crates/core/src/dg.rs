//! Label-free multi-source domain generalization with a residual split into
//! a domain-shared table and one domain-specific table per training domain.
//!
//! Training adapts class `i` for a batch from domain `n` as
//! `t_i + (shared_i + specific[n]_i)`; inference uses `t_i + shared_i` only.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::Matrix;
use crate::error::{Error, Result};
use crate::selftrain::{
    adam_step, batch_loss_and_gradient, epoch_loss_mean, generate_pseudo_labels,
    train_task_residual, EpochRecord, OptimizerState, PseudoLabelSet, TaskResidual, TrainConfig,
    TrainingLog, TrainingRun,
};
use crate::zeroshot::ClassAnchorSet;

/// Unlabeled embedding banks from several named domains.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiDomainBank {
    banks: Vec<Matrix>,
    domain_names: Vec<String>,
}

impl MultiDomainBank {
    /// At least one domain is required here; the disentangled trainer
    /// additionally requires two.
    pub fn new(banks: Vec<Matrix>, domain_names: Vec<String>) -> Result<Self> {
        if banks.is_empty() {
            return Err(Error::ConfigInvalid("no domains given".into()));
        }
        if banks.len() != domain_names.len() {
            return Err(Error::dim(banks.len(), domain_names.len()));
        }
        let dim = banks[0].dim();
        if let Some(b) = banks.iter().find(|b| b.dim() != dim) {
            return Err(Error::dim(dim, b.dim()));
        }
        let mut seen = HashSet::new();
        for n in &domain_names {
            if !seen.insert(n.as_str()) {
                return Err(Error::ConfigInvalid(format!("duplicate domain name {n:?}")));
            }
        }
        Ok(MultiDomainBank {
            banks,
            domain_names,
        })
    }

    pub fn num_domains(&self) -> usize {
        self.banks.len()
    }

    pub fn dim(&self) -> usize {
        self.banks[0].dim()
    }

    pub fn banks(&self) -> &[Matrix] {
        &self.banks
    }

    pub fn bank(&self, domain: usize) -> Result<&Matrix> {
        self.banks.get(domain).ok_or(Error::DomainIndexOutOfRange {
            index: domain,
            count: self.banks.len(),
        })
    }

    pub fn domain_names(&self) -> &[String] {
        &self.domain_names
    }
}

/// Shared residual plus one specific residual per training domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DisentangledResidual {
    pub domain_names: Vec<String>,
    pub shared: Matrix,
    pub specific: Vec<Matrix>,
}

impl DisentangledResidual {
    pub fn zeros(num_classes: usize, dim: usize, domain_names: Vec<String>) -> Self {
        DisentangledResidual {
            specific: vec![Matrix::zeros(num_classes, dim); domain_names.len()],
            shared: Matrix::zeros(num_classes, dim),
            domain_names,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.specific.len() != self.domain_names.len() {
            return Err(Error::dim(self.domain_names.len(), self.specific.len()));
        }
        for s in &self.specific {
            self.shared.check_shape(s)?;
        }
        Ok(())
    }

    fn specific_table(&self, domain: usize) -> Result<&Matrix> {
        self.specific.get(domain).ok_or(Error::DomainIndexOutOfRange {
            index: domain,
            count: self.specific.len(),
        })
    }

    /// `shared + specific[domain]`, the residual seen by a batch from `domain`.
    pub fn combined(&self, domain: usize) -> Result<Matrix> {
        self.shared.add(self.specific_table(domain)?)
    }
}

/// Anchors used while training on `domain`: `t + (shared + specific[domain])`.
pub fn dg_adapted_anchors(
    anchors: &ClassAnchorSet,
    res: &DisentangledResidual,
    domain: usize,
) -> Result<ClassAnchorSet> {
    let combined = res.combined(domain)?;
    anchors.with_anchors(anchors.anchors().add(&combined)?)
}

/// Anchors used at inference: `t + shared`. Specific tables are never read.
pub fn inference_anchors(
    anchors: &ClassAnchorSet,
    res: &DisentangledResidual,
) -> Result<ClassAnchorSet> {
    anchors.with_anchors(anchors.anchors().add(&res.shared)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DgOptions {
    /// Keep every specific table at zero and never update it.
    pub freeze_specific: bool,
}

/// What the trainer saw on one optimizer step.
#[derive(Debug)]
pub struct DgStep<'a> {
    pub epoch: usize,
    pub domain: usize,
    pub batch_len: usize,
    pub loss: f64,
    pub grad_shared: &'a Matrix,
    pub grad_specific: &'a Matrix,
}

#[derive(Debug, Clone)]
pub struct DgTrainingRun {
    pub residual: DisentangledResidual,
    pub log: TrainingLog,
    pub pseudo_labels: Vec<PseudoLabelSet>,
    /// Domains dropped from the rotation because nothing passed the threshold.
    pub dropped_domains: Vec<String>,
}

/// Trains shared and specific residuals on at least two unlabeled domains.
pub fn train_disentangled(
    data: &MultiDomainBank,
    anchors: &ClassAnchorSet,
    cfg: &TrainConfig,
) -> Result<DgTrainingRun> {
    if data.num_domains() < 2 {
        return Err(Error::ConfigInvalid(format!(
            "disentangled training needs at least 2 domains, got {}",
            data.num_domains()
        )));
    }
    train_disentangled_with(data, anchors, cfg, DgOptions::default(), |_| {})
}

/// [`train_disentangled`] with options and a per-step observer. Accepts a
/// single domain, which together with `freeze_specific` reduces exactly to
/// [`train_task_residual`].
///
/// Every batch comes from one domain. Within an epoch domains take turns
/// (round-robin over batch positions); each domain's retained samples are
/// shuffled independently by the seeded generator, in domain order.
pub fn train_disentangled_with<F>(
    data: &MultiDomainBank,
    anchors: &ClassAnchorSet,
    cfg: &TrainConfig,
    opts: DgOptions,
    mut observer: F,
) -> Result<DgTrainingRun>
where
    F: FnMut(&DgStep<'_>),
{
    cfg.validate()?;
    if data.dim() != anchors.dim() {
        return Err(Error::dim(anchors.dim(), data.dim()));
    }
    let (k, d) = (anchors.num_classes(), anchors.dim());
    let initial = data
        .banks()
        .iter()
        .map(|b| generate_pseudo_labels(b, anchors, cfg.tau, cfg.gamma))
        .collect::<Result<Vec<_>>>()?;
    let active: Vec<usize> = (0..data.num_domains())
        .filter(|&n| !initial[n].is_empty())
        .collect();
    if active.is_empty() {
        let max_confidence = initial.iter().map(|p| p.max_confidence).fold(0.0, f64::max);
        return Err(Error::NoRetainedSamples {
            gamma: cfg.gamma,
            max_confidence,
        });
    }
    let dropped_domains = (0..data.num_domains())
        .filter(|n| !active.contains(n))
        .map(|n| data.domain_names()[n].clone())
        .collect();

    let mut res = DisentangledResidual::zeros(k, d, data.domain_names().to_vec());
    let mut shared = TaskResidual::zeros(k, d);
    let mut specific: Vec<TaskResidual> = (0..data.num_domains())
        .map(|_| TaskResidual::zeros(k, d))
        .collect();
    let mut shared_state = OptimizerState::new(k, d);
    let mut specific_state: Vec<OptimizerState> = (0..data.num_domains())
        .map(|_| OptimizerState::new(k, d))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pseudo = initial.clone();
    let mut log = TrainingLog {
        total_candidates: initial.iter().map(|p| p.total_candidates).sum(),
        initial_retained: initial.iter().map(|p| p.len()).sum(),
        epochs: Vec::with_capacity(cfg.epochs),
    };

    for epoch in 0..cfg.epochs {
        if epoch > 0 && cfg.refresh_pseudo_labels_each_epoch {
            for &n in &active {
                let residual = combined_residual(&shared, &specific[n], opts)?;
                let current = anchors.with_anchors(anchors.anchors().add(&residual)?)?;
                pseudo[n] = generate_pseudo_labels(&data.banks()[n], &current, cfg.tau, cfg.gamma)?;
            }
        }
        // Per active domain: (domain, retained (row, label) pairs, shuffled order).
        let mut schedules: Vec<Schedule> = Vec::new();
        for &n in &active {
            let samples = pseudo[n].samples();
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            schedules.push((n, samples, order));
        }
        let rounds = schedules
            .iter()
            .map(|(_, _, order)| order.len().div_ceil(cfg.batch_size))
            .max()
            .unwrap_or(0);

        let mut weighted = 0.0;
        let mut seen = 0;
        let mut steps = 0;
        for round in 0..rounds {
            for (n, samples, order) in &schedules {
                let start = round * cfg.batch_size;
                if start >= order.len() {
                    continue;
                }
                let end = (start + cfg.batch_size).min(order.len());
                let batch: Vec<(usize, usize)> =
                    order[start..end].iter().map(|&i| samples[i]).collect();

                let residual = combined_residual(&shared, &specific[*n], opts)?;
                let adapted = anchors.anchors().add(&residual)?;
                let (loss, grad) =
                    batch_loss_and_gradient(&data.banks()[*n], &batch, &adapted, cfg.tau)?;
                // The adapted anchor is t + shared + specific[n], so both tables
                // receive the gradient with respect to the combined residual.
                let grad_specific = grad.clone();
                observer(&DgStep {
                    epoch,
                    domain: *n,
                    batch_len: batch.len(),
                    loss,
                    grad_shared: &grad,
                    grad_specific: &grad_specific,
                });
                adam_step(&mut shared, &grad, &mut shared_state, cfg)?;
                if !opts.freeze_specific {
                    adam_step(&mut specific[*n], &grad_specific, &mut specific_state[*n], cfg)?;
                }
                weighted += loss * batch.len() as f64;
                seen += batch.len();
                steps += 1;
            }
        }
        log.epochs.push(EpochRecord {
            epoch,
            retained: active.iter().map(|&n| pseudo[n].len()).sum(),
            steps,
            mean_loss: epoch_loss_mean(weighted, seen),
        });
    }

    res.shared = shared.into_matrix();
    res.specific = specific.into_iter().map(TaskResidual::into_matrix).collect();
    Ok(DgTrainingRun {
        residual: res,
        log,
        pseudo_labels: initial,
        dropped_domains,
    })
}

type Schedule = (usize, Vec<(usize, usize)>, Vec<usize>);

fn combined_residual(shared: &TaskResidual, specific: &TaskResidual, opts: DgOptions) -> Result<Matrix> {
    if opts.freeze_specific {
        Ok(shared.matrix().clone())
    } else {
        shared.matrix().add(specific.matrix())
    }
}

/// Baseline: one common residual trained on all domains pooled together.
///
/// Domains are pooled in lexicographic order of their names, so the result
/// does not depend on the order in which domains were supplied.
pub fn train_common_baseline(
    data: &MultiDomainBank,
    anchors: &ClassAnchorSet,
    cfg: &TrainConfig,
) -> Result<TrainingRun> {
    let mut order: Vec<usize> = (0..data.num_domains()).collect();
    order.sort_by(|&a, &b| data.domain_names()[a].cmp(&data.domain_names()[b]));
    let parts: Vec<&Matrix> = order.iter().map(|&n| &data.banks()[n]).collect();
    let pooled = Matrix::vstack(&parts)?;
    train_task_residual(&pooled, anchors, cfg)
}
