//! Seeded synthetic multi-domain classification problems in embedding space.
//!
//! Construction, all vectors renormalized to the unit sphere:
//! - `K` isotropic Gaussian draws, pulled toward (`class_separation < 1`) or
//!   pushed away from (`> 1`) their mean direction, give the base prototypes;
//! - each domain offsets every prototype by a random vector of norm
//!   `domain_shift`;
//! - samples add isotropic noise with expected norm about `noise` to their
//!   domain prototype;
//! - text anchors are base prototypes plus noise with expected norm about
//!   `anchor_noise`.
//!
//! Gaussian-plus-renormalize stands in for von Mises-Fisher sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dg::MultiDomainBank;
use crate::embedding::{l2_normalize, Matrix, Temperature};
use crate::error::{Error, Result};
use crate::zeroshot::{accuracy, classify_batch, ClassAnchorSet, Prediction, PLAIN_TEMPLATE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub num_domains: usize,
    pub samples_per_class_per_domain: usize,
    pub class_separation: f64,
    pub domain_shift: f64,
    pub noise: f64,
    pub anchor_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 5,
            dim: 32,
            num_domains: 3,
            samples_per_class_per_domain: 100,
            class_separation: 0.1,
            domain_shift: 0.3,
            noise: 0.4,
            anchor_noise: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// The moderate-shift instance used by the self-training checks:
    /// K = 5, D = 32, noise 0.4, anchor noise 0.3, shift 0.3, with prototypes
    /// clustered around a common direction (separation 0.1) as image/text
    /// embeddings are in practice.
    pub fn moderate(seed: u64) -> Self {
        SynthConfig {
            samples_per_class_per_domain: 500,
            seed,
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::ConfigInvalid("num_classes must be >= 2".into()));
        }
        if self.dim < 2 {
            return Err(Error::ConfigInvalid("dim must be >= 2".into()));
        }
        if self.num_domains < 1 {
            return Err(Error::ConfigInvalid("num_domains must be >= 1".into()));
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("domain_shift", self.domain_shift),
            ("noise", self.noise),
            ("anchor_noise", self.anchor_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::ConfigInvalid(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthProblem {
    pub config: SynthConfig,
    pub anchors: ClassAnchorSet,
    pub domains: MultiDomainBank,
    /// Ground-truth labels per domain; evaluation only.
    pub labels: Vec<Vec<u32>>,
    /// Per-domain class prototypes the samples were drawn around.
    pub true_prototypes: Vec<Matrix>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect()
}

fn unit(v: &[f64]) -> Result<Vec<f32>> {
    let as32: Vec<f32> = v.iter().map(|&x| x as f32).collect();
    l2_normalize(&as32).map_err(|_| {
        Error::ConfigInvalid("generated a zero vector; adjust class_separation or seed".into())
    })
}

fn perturbed(base: &[f32], offset: &[f64]) -> Result<Vec<f32>> {
    let sum: Vec<f64> = base.iter().zip(offset).map(|(&b, &o)| b as f64 + o).collect();
    unit(&sum)
}

/// Deterministically builds a problem from `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthProblem> {
    cfg.validate()?;
    let (k, d) = (cfg.num_classes, cfg.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_coord = |magnitude: f64| magnitude / (d as f64).sqrt();

    let draws: Vec<Vec<f32>> = (0..k)
        .map(|_| unit(&gaussian(&mut rng, d, 1.0)))
        .collect::<Result<_>>()?;
    let mean: Vec<f64> = (0..d)
        .map(|j| draws.iter().map(|u| u[j] as f64).sum::<f64>() / k as f64)
        .collect();
    let base: Vec<Vec<f32>> = draws
        .iter()
        .map(|u| {
            let v: Vec<f64> = u
                .iter()
                .zip(&mean)
                .map(|(&x, &m)| m + cfg.class_separation * (x as f64 - m))
                .collect();
            unit(&v)
        })
        .collect::<Result<_>>()?;

    let anchor_rows: Vec<Vec<f32>> = base
        .iter()
        .map(|p| perturbed(p, &gaussian(&mut rng, d, per_coord(cfg.anchor_noise))))
        .collect::<Result<_>>()?;
    let class_names: Vec<String> = (0..k).map(|i| format!("class_{i}")).collect();
    let anchors = ClassAnchorSet::from_template(
        class_names,
        Matrix::from_rows(&anchor_rows)?,
        PLAIN_TEMPLATE,
        None,
    )?;

    let mut banks = Vec::with_capacity(cfg.num_domains);
    let mut labels = Vec::with_capacity(cfg.num_domains);
    let mut prototypes = Vec::with_capacity(cfg.num_domains);
    for _ in 0..cfg.num_domains {
        let protos: Vec<Vec<f32>> = base
            .iter()
            .map(|p| {
                let dir = unit(&gaussian(&mut rng, d, 1.0))?;
                let offset: Vec<f64> = dir.iter().map(|&x| x as f64 * cfg.domain_shift).collect();
                perturbed(p, &offset)
            })
            .collect::<Result<_>>()?;
        let mut rows = Vec::with_capacity(k * cfg.samples_per_class_per_domain);
        let mut y = Vec::with_capacity(rows.capacity());
        for (class, proto) in protos.iter().enumerate() {
            for _ in 0..cfg.samples_per_class_per_domain {
                rows.push(perturbed(proto, &gaussian(&mut rng, d, per_coord(cfg.noise)))?);
                y.push(class as u32);
            }
        }
        let bank = if rows.is_empty() {
            Matrix::new(0, d, vec![])?
        } else {
            Matrix::from_rows(&rows)?
        };
        banks.push(bank);
        labels.push(y);
        prototypes.push(Matrix::from_rows(&protos)?);
    }
    let domain_names = (0..cfg.num_domains).map(|i| format!("domain_{i}")).collect();

    Ok(SynthProblem {
        config: cfg.clone(),
        anchors,
        domains: MultiDomainBank::new(banks, domain_names)?,
        labels,
        true_prototypes: prototypes,
    })
}

impl SynthProblem {
    pub fn zero_shot_accuracy(&self, domain: usize, tau: Temperature) -> Result<f64> {
        let preds = classify_batch(self.domains.bank(domain)?, &self.anchors, tau)?;
        accuracy(&preds, &self.labels[domain])
    }
}

/// Accuracy of the nearest-true-prototype (cosine) classifier on `domain`.
pub fn oracle_accuracy(problem: &SynthProblem, domain: usize) -> Result<f64> {
    let bank = problem.domains.bank(domain)?;
    let protos = &problem.true_prototypes[domain];
    let preds = (0..bank.rows())
        .map(|i| {
            let scores = protos
                .iter_rows()
                .map(|p| crate::embedding::cosine_sim(bank.row(i), p))
                .collect::<Result<Vec<_>>>()?;
            // Only the argmax matters; reuse the prediction tie-break rule.
            Ok(Prediction::from_probs(scores))
        })
        .collect::<Result<Vec<_>>>()?;
    accuracy(&preds, &problem.labels[domain])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::norm64;

    #[test]
    fn noiseless_problem_is_perfect() {
        let cfg = SynthConfig {
            noise: 0.0,
            anchor_noise: 0.0,
            domain_shift: 0.0,
            samples_per_class_per_domain: 10,
            seed: 3,
            ..SynthConfig::default()
        };
        let p = generate(&cfg).unwrap();
        for n in 0..cfg.num_domains {
            assert_eq!(p.zero_shot_accuracy(n, Temperature::CLIP).unwrap(), 1.0);
            assert_eq!(oracle_accuracy(&p, n).unwrap(), 1.0);
        }
    }

    #[test]
    fn same_seed_same_problem() {
        let cfg = SynthConfig {
            samples_per_class_per_domain: 7,
            seed: 42,
            ..SynthConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SynthConfig { seed: 43, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn all_vectors_unit_norm() {
        let p = generate(&SynthConfig {
            samples_per_class_per_domain: 5,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut all: Vec<&Matrix> = p.domains.banks().iter().collect();
        all.extend(p.true_prototypes.iter());
        all.push(p.anchors.anchors());
        for m in all {
            for r in m.iter_rows() {
                assert!((norm64(r) - 1.0).abs() < 1e-6);
            }
        }
        assert!(p.labels.iter().flatten().all(|&y| (y as usize) < 5));
    }

    #[test]
    fn config_validation() {
        for cfg in [
            SynthConfig { num_classes: 1, ..SynthConfig::default() },
            SynthConfig { dim: 1, ..SynthConfig::default() },
            SynthConfig { noise: -0.1, ..SynthConfig::default() },
            SynthConfig { domain_shift: f64::INFINITY, ..SynthConfig::default() },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::ConfigInvalid(_))));
        }
    }

    #[test]
    fn domain_index_checked() {
        let p = generate(&SynthConfig {
            samples_per_class_per_domain: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        assert!(matches!(
            oracle_accuracy(&p, 3),
            Err(Error::DomainIndexOutOfRange { index: 3, count: 3 })
        ));
    }
}
