use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{Matrix, Temperature};
use crate::error::{Error, Result};
use crate::selftrain::{
    adam_step, adapted_anchors, batch_loss_and_gradient, check_gamma, generate_pseudo_labels,
    OptimizerState, PseudoLabelSet, TaskResidual,
};
use crate::zeroshot::ClassAnchorSet;

/// Hyperparameters shared by every trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub tau: Temperature,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub refresh_pseudo_labels_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 64,
            epochs: 5,
            gamma: 0.5,
            tau: Temperature::CLIP,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            refresh_pseudo_labels_each_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        if self.batch_size == 0 {
            return Err(Error::ConfigInvalid("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::ConfigInvalid(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::ConfigInvalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_epsilon.is_finite() && self.adam_epsilon > 0.0) {
            return Err(Error::ConfigInvalid("adam_epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub retained: usize,
    pub steps: usize,
    /// Sample-weighted mean of the batch losses; `None` when no batch ran.
    pub mean_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingLog {
    pub total_candidates: usize,
    pub initial_retained: usize,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    /// One line per epoch: `epoch<TAB>retained<TAB>mean_loss`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            let loss = e
                .mean_loss
                .map(|l| format!("{l:.9}"))
                .unwrap_or_else(|| "nan".into());
            out.push_str(&format!("{}\t{}\t{}\n", e.epoch, e.retained, loss));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub residual: TaskResidual,
    pub log: TrainingLog,
    /// Pseudo-labels generated from the zero residual before training.
    pub initial_pseudo_labels: PseudoLabelSet,
}

pub(crate) fn epoch_loss_mean(weighted_sum: f64, count: usize) -> Option<f64> {
    (count > 0).then(|| weighted_sum / count as f64)
}

/// Self-trains a zero-initialized task residual on the unlabeled `bank`.
///
/// Pseudo-labels come from the zero-shot classifier (unless per-epoch
/// refresh is enabled, in which case epochs after the first relabel with
/// the current adapted anchors). Each epoch shuffles the retained samples
/// with the seeded generator and takes one Adam step per batch.
pub fn train_task_residual(
    bank: &Matrix,
    anchors: &ClassAnchorSet,
    cfg: &TrainConfig,
) -> Result<TrainingRun> {
    cfg.validate()?;
    if bank.is_empty() {
        return Err(Error::ConfigInvalid("training bank is empty".into()));
    }
    if bank.dim() != anchors.dim() {
        return Err(Error::dim(anchors.dim(), bank.dim()));
    }
    let initial = generate_pseudo_labels(bank, anchors, cfg.tau, cfg.gamma)?;
    if initial.is_empty() {
        return Err(initial.no_retained_error());
    }

    let mut residual = TaskResidual::for_anchors(anchors);
    let mut state = OptimizerState::for_residual(&residual);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pseudo = initial.clone();
    let mut log = TrainingLog {
        total_candidates: initial.total_candidates,
        initial_retained: initial.len(),
        epochs: Vec::with_capacity(cfg.epochs),
    };

    for epoch in 0..cfg.epochs {
        if epoch > 0 && cfg.refresh_pseudo_labels_each_epoch {
            let current = adapted_anchors(anchors, &residual)?;
            pseudo = generate_pseudo_labels(bank, &current, cfg.tau, cfg.gamma)?;
        }
        let samples = pseudo.samples();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);

        let mut weighted = 0.0;
        let mut seen = 0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(usize, usize)> = chunk.iter().map(|&i| samples[i]).collect();
            let adapted = anchors.anchors().add(residual.matrix())?;
            let (loss, grad) = batch_loss_and_gradient(bank, &batch, &adapted, cfg.tau)?;
            adam_step(&mut residual, &grad, &mut state, cfg)?;
            weighted += loss * batch.len() as f64;
            seen += batch.len();
            steps += 1;
        }
        log.epochs.push(EpochRecord {
            epoch,
            retained: samples.len(),
            steps,
            mean_loss: epoch_loss_mean(weighted, seen),
        });
    }

    Ok(TrainingRun {
        residual,
        log,
        initial_pseudo_labels: initial,
    })
}
