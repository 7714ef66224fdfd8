//! Finite-difference verification of the analytic residual gradient.
//!
//! The reference loss here is a separate, all-`f64` evaluation that shares
//! no code with the production objective. Perturbations are applied to a
//! 64-bit shadow of the adapted anchors `t + r` (stored as `f32` in
//! production), which is equivalent to perturbing `r` and keeps the base
//! point identical to the one the analytic gradient sees.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::embedding::{Matrix, Temperature};
use crate::error::{Error, Result};
use crate::selftrain::{loss_gradient, PseudoLabelSet, TaskResidual};
use crate::zeroshot::{ClassAnchorSet, PLAIN_TEMPLATE};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub samples: usize,
    pub tau: f64,
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates whose finite difference is at most this are skipped.
    pub min_magnitude: f64,
    /// Negates the analytic gradient; negative control for the harness.
    pub inject_sign_flip: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 0,
            instances: 20,
            num_classes: 5,
            dim: 16,
            samples: 32,
            tau: 1.0,
            step: 1e-3,
            tolerance: 1e-4,
            min_magnitude: 1e-8,
            inject_sign_flip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Worst {
    pub instance: usize,
    pub class: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub coordinates_checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Worst>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.config.tolerance
    }

    pub fn into_result(self) -> Result<GradCheckReport> {
        match (&self.worst, self.passed()) {
            (Some(w), false) => Err(Error::GradientMismatch {
                class: w.class,
                coord: w.coord,
                analytic: w.analytic,
                numeric: w.numeric,
                rel_err: w.rel_err,
            }),
            _ => Ok(self),
        }
    }
}

/// A random problem for gradient checking: every sample retained.
pub struct GradInstance {
    pub bank: Matrix,
    pub anchors: ClassAnchorSet,
    pub residual: TaskResidual,
    pub pseudo: PseudoLabelSet,
}

pub fn random_instance(
    rng: &mut impl Rng,
    num_classes: usize,
    dim: usize,
    samples: usize,
) -> Result<GradInstance> {
    let mut gauss = |n: usize, scale: f64| -> Vec<f32> {
        (0..n)
            .map(|_| (rng.sample::<f64, _>(StandardNormal) * scale) as f32)
            .collect()
    };
    let anchors = Matrix::new(num_classes, dim, gauss(num_classes * dim, 1.0))?;
    let bank = Matrix::new(samples, dim, gauss(samples * dim, 1.0))?;
    let residual = Matrix::new(num_classes, dim, gauss(num_classes * dim, 0.1))?;
    let names = (0..num_classes).map(|i| format!("c{i}")).collect();
    let anchors = ClassAnchorSet::from_template(names, anchors, PLAIN_TEMPLATE, None)?;
    let labels: Vec<usize> = (0..samples).map(|_| rng.random_range(0..num_classes)).collect();
    let pseudo = PseudoLabelSet {
        sample_indices: (0..samples).collect(),
        confidences: vec![1.0; samples],
        labels,
        gamma: 0.0,
        total_candidates: samples,
        max_confidence: 1.0,
    };
    Ok(GradInstance {
        bank,
        anchors,
        residual: TaskResidual::from_matrix(residual),
        pseudo,
    })
}

/// Reference loss evaluated entirely in `f64`, given the adapted anchors
/// `t + r` as a row-major 64-bit buffer.
pub fn reference_loss(inst: &GradInstance, adapted: &[f64], tau: f64) -> f64 {
    let d = inst.bank.dim();
    let rows: Vec<&[f64]> = adapted.chunks_exact(d).collect();
    let mut total = 0.0;
    for (&row, &label) in inst.pseudo.sample_indices.iter().zip(&inst.pseudo.labels) {
        let f: Vec<f64> = inst.bank.row(row).iter().map(|&x| x as f64).collect();
        let f_norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        let logits: Vec<f64> = rows
            .iter()
            .map(|t| {
                let t_norm = t.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dot: f64 = f.iter().zip(t.iter()).map(|(a, b)| a * b).sum();
                dot / (f_norm * t_norm) / tau
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - logits[label];
    }
    if inst.pseudo.is_empty() {
        0.0
    } else {
        total / inst.pseudo.len() as f64
    }
}

/// The adapted anchors exactly as the production path stores them (`f32`),
/// widened to `f64`. Since `t' = t + r`, perturbing `t'` is perturbing `r`,
/// and the base point matches the analytic gradient's bit-for-bit.
pub fn adapted_shadow(inst: &GradInstance) -> Result<Vec<f64>> {
    Ok(inst
        .anchors
        .anchors()
        .add(inst.residual.matrix())?
        .as_slice()
        .iter()
        .map(|&v| v as f64)
        .collect())
}

/// Central differences of [`reference_loss`] around the instance residual.
pub fn finite_difference_gradient(inst: &GradInstance, tau: f64, step: f64) -> Result<Vec<f64>> {
    let base = adapted_shadow(inst)?;
    let mut shadow = base.clone();
    Ok((0..base.len())
        .map(|i| {
            shadow[i] = base[i] + step;
            let plus = reference_loss(inst, &shadow, tau);
            shadow[i] = base[i] - step;
            let minus = reference_loss(inst, &shadow, tau);
            shadow[i] = base[i];
            (plus - minus) / (2.0 * step)
        })
        .collect())
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Compares the analytic gradient against finite differences on
/// `cfg.instances` seeded random instances.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let tau = Temperature::new(cfg.tau)?;
    if cfg.num_classes < 2 || cfg.dim < 1 || cfg.samples < 1 {
        return Err(Error::ConfigInvalid(
            "gradcheck needs >= 2 classes, dim >= 1 and >= 1 sample".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        config: cfg.clone(),
        coordinates_checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let d = cfg.dim;
    for instance in 0..cfg.instances {
        let inst = random_instance(&mut rng, cfg.num_classes, cfg.dim, cfg.samples)?;
        let analytic = loss_gradient(&inst.bank, &inst.pseudo, &inst.anchors, &inst.residual, tau)?;
        let numeric = finite_difference_gradient(&inst, cfg.tau, cfg.step)?;
        for (i, (&a, &n)) in analytic.as_slice().iter().zip(&numeric).enumerate() {
            if n.abs() <= cfg.min_magnitude {
                continue;
            }
            let a = if cfg.inject_sign_flip { -(a as f64) } else { a as f64 };
            let err = relative_error(a, n);
            report.coordinates_checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(Worst {
                    instance,
                    class: i / d,
                    coord: i % d,
                    analytic: a,
                    numeric: n,
                    rel_err: err,
                });
            }
        }
    }
    Ok(report)
}
