use serde::Serialize;

use crate::embedding::{Matrix, Temperature};
use crate::error::{Error, Result};
use crate::zeroshot::{classify_batch, ClassAnchorSet};

/// Confidence-filtered zero-shot pseudo-labels for one bank.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseudoLabelSet {
    pub sample_indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
    pub gamma: f64,
    pub total_candidates: usize,
    /// Highest confidence seen over all candidates, retained or not.
    pub max_confidence: f64,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }

    /// `(row index, label)` pairs in retention order.
    pub fn samples(&self) -> Vec<(usize, usize)> {
        self.sample_indices
            .iter()
            .copied()
            .zip(self.labels.iter().copied())
            .collect()
    }

    pub(crate) fn no_retained_error(&self) -> Error {
        Error::NoRetainedSamples {
            gamma: self.gamma,
            max_confidence: self.max_confidence,
        }
    }
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::InvalidGamma(gamma))
    }
}

/// Labels every row of `bank` with its argmax class and keeps those whose
/// confidence is at least `gamma`.
pub fn generate_pseudo_labels(
    bank: &Matrix,
    anchors: &ClassAnchorSet,
    tau: Temperature,
    gamma: f64,
) -> Result<PseudoLabelSet> {
    check_gamma(gamma)?;
    let predictions = classify_batch(bank, anchors, tau)?;
    let mut out = PseudoLabelSet {
        sample_indices: Vec::new(),
        labels: Vec::new(),
        confidences: Vec::new(),
        gamma,
        total_candidates: bank.rows(),
        max_confidence: 0.0,
    };
    for (i, p) in predictions.into_iter().enumerate() {
        out.max_confidence = out.max_confidence.max(p.confidence);
        if p.confidence >= gamma {
            out.sample_indices.push(i);
            out.labels.push(p.label);
            out.confidences.push(p.confidence);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zeroshot::PLAIN_TEMPLATE;

    fn anchors() -> ClassAnchorSet {
        ClassAnchorSet::from_template(
            vec!["a".into(), "b".into()],
            Matrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap(),
            PLAIN_TEMPLATE,
            None,
        )
        .unwrap()
    }

    const TAU: f64 = 0.5;

    /// Image row whose probability on class 0 at `TAU` is `p0` (up to
    /// rounding): cos difference tau * ln(p0 / (1 - p0)).
    fn row_with_prob(p0: f64) -> [f32; 2] {
        let delta = TAU * (p0 / (1.0 - p0)).ln();
        // Unit vector at angle theta: cos(theta) - sin(theta) = sqrt(2) cos(theta + pi/4) = delta.
        let theta = (delta / 2f64.sqrt()).acos() - std::f64::consts::FRAC_PI_4;
        [theta.cos() as f32, theta.sin() as f32]
    }

    #[test]
    fn threshold_examples() {
        let tau = Temperature::new(TAU).unwrap();
        let bank = Matrix::from_rows(&[row_with_prob(0.9), row_with_prob(0.6)]).unwrap();
        let p = generate_pseudo_labels(&bank, &anchors(), tau, 0.8).unwrap();
        assert_eq!(p.sample_indices, vec![0]);
        assert_eq!(p.labels, vec![0]);
        assert!((p.confidences[0] - 0.9).abs() < 1e-6);
        assert_eq!(p.total_candidates, 2);

        let all = generate_pseudo_labels(&bank, &anchors(), tau, 0.0).unwrap();
        assert_eq!(all.len(), 2);
        let none = generate_pseudo_labels(&bank, &anchors(), tau, 1.0).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn gamma_one_keeps_only_certain_samples() {
        let tau = Temperature::new(1e-4).unwrap();
        let bank = Matrix::from_rows(&[[1.0f32, 0.0], [0.5, 0.5]]).unwrap();
        let p = generate_pseudo_labels(&bank, &anchors(), tau, 1.0).unwrap();
        assert_eq!(p.sample_indices, vec![0]);
        assert_eq!(p.confidences, vec![1.0]);
    }

    #[test]
    fn gamma_out_of_range_rejected() {
        let bank = Matrix::from_rows(&[[1.0f32, 0.0]]).unwrap();
        for g in [-0.1, 1.0 + 1e-9, f64::NAN] {
            assert!(matches!(
                generate_pseudo_labels(&bank, &anchors(), Temperature::CLIP, g),
                Err(Error::InvalidGamma(_))
            ));
        }
    }
}
