//! Masked pseudo-label cross-entropy over residual-adapted anchors, and its
//! analytic gradient with respect to the residual.
//!
//! For a retained sample `f` with pseudo-label `y` and adapted anchors
//! `t'_k = t_k + r_k`:
//!
//! ```text
//! s_k  = <f, t'_k> / (|f| |t'_k|)
//! loss = -ln softmax(s / tau)[y]
//! d loss / d s_k   = (p_k - [k == y]) / tau
//! d s_k / d r_k    = f / (|f| |t'_k|) - s_k t'_k / |t'_k|^2
//! ```
//!
//! The batch loss is the mean over retained samples.
//!
//! Per-sample work runs in parallel; every reduction over samples is a
//! sequential sum in sample order, so results do not depend on the number
//! of worker threads.

use rayon::prelude::*;

use crate::embedding::{checked_norm, neg_log_softmax, softmax_scaled, Matrix, Temperature};
use crate::error::{Error, Result};
use crate::selftrain::PseudoLabelSet;
use crate::zeroshot::{ClassAnchorSet, PreparedAnchors};

/// Per-class additive offsets on the text anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskResidual(Matrix);

impl TaskResidual {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        TaskResidual(Matrix::zeros(num_classes, dim))
    }

    pub fn for_anchors(anchors: &ClassAnchorSet) -> Self {
        TaskResidual::zeros(anchors.num_classes(), anchors.dim())
    }

    pub fn from_matrix(m: Matrix) -> Self {
        TaskResidual(m)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Row `i` of the result is `anchor_i + residual_i`.
pub fn adapted_anchors(anchors: &ClassAnchorSet, residual: &TaskResidual) -> Result<ClassAnchorSet> {
    anchors.with_anchors(anchors.anchors().add(residual.matrix())?)
}

/// Per-sample quantities shared by the loss and its gradient.
struct SampleTerms {
    loss: f64,
    inv_norm: f64,
    scores: Vec<f64>,
    /// `d loss_n / d s_k`, before division by the sample count.
    dscore: Vec<f64>,
}

fn sample_terms(
    prepared: &PreparedAnchors<'_>,
    f: &[f32],
    label: usize,
    tau: Temperature,
) -> Result<SampleTerms> {
    let nf = checked_norm(f)?;
    let scores = prepared.scores_with_norm(f, nf);
    let probs = softmax_scaled(&scores, tau);
    // -ln p keeps the loss consistent with the classifier's own probability;
    // the log-domain form only takes over once p underflows.
    let py = probs[label];
    let loss = if py >= f64::MIN_POSITIVE {
        -py.ln()
    } else {
        neg_log_softmax(&scores, tau, label)
    };
    let t = tau.value();
    let dscore = probs
        .iter()
        .enumerate()
        .map(|(k, &p)| (p - if k == label { 1.0 } else { 0.0 }) / t)
        .collect();
    Ok(SampleTerms {
        loss,
        inv_norm: 1.0 / nf,
        scores,
        dscore,
    })
}

fn validate(bank: &Matrix, samples: &[(usize, usize)], adapted: &Matrix) -> Result<()> {
    if bank.dim() != adapted.dim() {
        return Err(Error::dim(adapted.dim(), bank.dim()));
    }
    for &(row, label) in samples {
        if row >= bank.rows() {
            return Err(Error::ConfigInvalid(format!(
                "pseudo-label refers to row {row} of a {}-row bank",
                bank.rows()
            )));
        }
        if label >= adapted.rows() {
            return Err(Error::ConfigInvalid(format!(
                "pseudo-label class {label} out of range for {} classes",
                adapted.rows()
            )));
        }
    }
    Ok(())
}

/// Mean loss over `samples` (row, label) against already-adapted anchor rows.
pub(crate) fn batch_loss(
    bank: &Matrix,
    samples: &[(usize, usize)],
    adapted: &Matrix,
    tau: Temperature,
) -> Result<f64> {
    validate(bank, samples, adapted)?;
    if samples.is_empty() {
        return Ok(0.0);
    }
    let prepared = PreparedAnchors::new(adapted)?;
    let losses = samples
        .par_iter()
        .map(|&(row, label)| sample_terms(&prepared, bank.row(row), label, tau).map(|s| s.loss))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len() as f64)
}

/// Mean loss and its gradient with respect to the residual (equivalently,
/// with respect to the adapted anchor rows).
pub(crate) fn batch_loss_and_gradient(
    bank: &Matrix,
    samples: &[(usize, usize)],
    adapted: &Matrix,
    tau: Temperature,
) -> Result<(f64, Matrix)> {
    validate(bank, samples, adapted)?;
    let (k, d) = (adapted.rows(), adapted.dim());
    if samples.is_empty() {
        return Ok((0.0, Matrix::zeros(k, d)));
    }
    let prepared = PreparedAnchors::new(adapted)?;
    let terms = samples
        .par_iter()
        .map(|&(row, label)| sample_terms(&prepared, bank.row(row), label, tau))
        .collect::<Result<Vec<_>>>()?;
    let m = samples.len() as f64;
    let loss = terms.iter().map(|t| t.loss).sum::<f64>() / m;

    let rows: Vec<Vec<f32>> = (0..k)
        .into_par_iter()
        .map(|class| {
            let t = adapted.row(class);
            let nt = prepared.norms[class];
            let mut image_part = vec![0f64; d];
            let mut score_part = 0f64;
            for (term, &(row, _)) in terms.iter().zip(samples) {
                let c = term.dscore[class] / m;
                if c == 0.0 {
                    continue;
                }
                let w = c * term.inv_norm;
                for (acc, &x) in image_part.iter_mut().zip(bank.row(row)) {
                    *acc += w * x as f64;
                }
                score_part += c * term.scores[class];
            }
            image_part
                .iter()
                .zip(t)
                .map(|(&a, &tv)| (a / nt - score_part * tv as f64 / (nt * nt)) as f32)
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(k * d);
    for r in rows {
        data.extend(r);
    }
    Ok((loss, Matrix::new(k, d, data)?))
}

/// Mean negative log pseudo-label probability over the retained samples,
/// using residual-adapted anchors. Zero when nothing is retained.
pub fn self_training_loss(
    bank: &Matrix,
    pseudo: &PseudoLabelSet,
    anchors: &ClassAnchorSet,
    residual: &TaskResidual,
    tau: Temperature,
) -> Result<f64> {
    let adapted = anchors.anchors().add(residual.matrix())?;
    batch_loss(bank, &pseudo.samples(), &adapted, tau)
}

/// Gradient of [`self_training_loss`] with respect to every residual entry.
pub fn loss_gradient(
    bank: &Matrix,
    pseudo: &PseudoLabelSet,
    anchors: &ClassAnchorSet,
    residual: &TaskResidual,
    tau: Temperature,
) -> Result<Matrix> {
    let adapted = anchors.anchors().add(residual.matrix())?;
    batch_loss_and_gradient(bank, &pseudo.samples(), &adapted, tau).map(|(_, g)| g)
}
