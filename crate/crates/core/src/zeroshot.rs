//! Zero-shot classification against prompt-keyed class anchors.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{checked_norm, cosine_with_norms, softmax_scaled, Matrix, Temperature};
use crate::error::{Error, Result};

const CLASS_SLOT: &str = "{class}";
const DOMAIN_SLOT: &str = "{domain}";

/// Plain CLIP-style template.
pub const PLAIN_TEMPLATE: &str = "a photo of a {class}";
/// Template carrying a domain description.
pub const DOMAIN_TEMPLATE: &str = "a {domain} photo of a {class}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptKey {
    pub template: String,
    pub domain_description: Option<String>,
    pub class_name: String,
}

impl PromptKey {
    pub fn new(template: &str, domain_description: Option<&str>, class_name: &str) -> Self {
        PromptKey {
            template: template.to_owned(),
            domain_description: domain_description.map(str::to_owned),
            class_name: class_name.to_owned(),
        }
    }

    pub fn render(&self) -> Result<String> {
        render_prompt(self)
    }
}

/// Substitutes the class name and optional domain description into the template.
///
/// Without a domain description the `{domain}` placeholder is dropped along
/// with one adjacent space, so `"a {domain} photo of a {class}"` renders as
/// `"a photo of a dog"`.
pub fn render_prompt(key: &PromptKey) -> Result<String> {
    match key.template.matches(CLASS_SLOT).count() {
        1 => {}
        0 => {
            return Err(Error::MalformedTemplate {
                template: key.template.clone(),
                reason: "missing {class} placeholder",
            })
        }
        _ => {
            return Err(Error::MalformedTemplate {
                template: key.template.clone(),
                reason: "{class} placeholder appears more than once",
            })
        }
    }
    let with_domain = match &key.domain_description {
        Some(d) => key.template.replace(DOMAIN_SLOT, d),
        None => strip_domain_slot(&key.template),
    };
    Ok(with_domain.replace(CLASS_SLOT, &key.class_name))
}

fn strip_domain_slot(template: &str) -> String {
    let mut out = template.to_owned();
    while let Some(pos) = out.find(DOMAIN_SLOT) {
        let end = pos + DOMAIN_SLOT.len();
        if out[end..].starts_with(' ') {
            out.replace_range(pos..end + 1, "");
        } else if pos > 0 && out[..pos].ends_with(' ') {
            out.replace_range(pos - 1..end, "");
        } else {
            out.replace_range(pos..end, "");
        }
    }
    out
}

/// Per-class text anchors (one row per class) with their class names and
/// the rendered prompts that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAnchorSet {
    class_names: Vec<String>,
    anchors: Matrix,
    prompt_keys: Vec<String>,
}

impl ClassAnchorSet {
    pub fn new(class_names: Vec<String>, anchors: Matrix, prompt_keys: Vec<String>) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::ConfigInvalid(format!(
                "an anchor set needs at least 2 classes, got {}",
                class_names.len()
            )));
        }
        if anchors.rows() != class_names.len() {
            return Err(Error::dim(class_names.len(), anchors.rows()));
        }
        if prompt_keys.len() != class_names.len() {
            return Err(Error::dim(class_names.len(), prompt_keys.len()));
        }
        let mut seen = HashSet::new();
        for name in &class_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::ConfigInvalid(format!("duplicate class name {name:?}")));
            }
        }
        for row in anchors.iter_rows() {
            checked_norm(row)?;
        }
        Ok(ClassAnchorSet {
            class_names,
            anchors,
            prompt_keys,
        })
    }

    /// Builds an anchor set whose prompt keys are rendered from `template`.
    pub fn from_template(
        class_names: Vec<String>,
        anchors: Matrix,
        template: &str,
        domain_description: Option<&str>,
    ) -> Result<Self> {
        let keys = class_names
            .iter()
            .map(|c| render_prompt(&PromptKey::new(template, domain_description, c)))
            .collect::<Result<Vec<_>>>()?;
        ClassAnchorSet::new(class_names, anchors, keys)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.anchors.dim()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn prompt_keys(&self) -> &[String] {
        &self.prompt_keys
    }

    pub fn anchors(&self) -> &Matrix {
        &self.anchors
    }

    /// Same names and keys, different anchor rows. Degenerate rows are
    /// accepted here and rejected when the set is used for scoring.
    pub(crate) fn with_anchors(&self, anchors: Matrix) -> Result<Self> {
        self.anchors.check_shape(&anchors)?;
        Ok(ClassAnchorSet {
            class_names: self.class_names.clone(),
            anchors,
            prompt_keys: self.prompt_keys.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
    pub confidence: f64,
}

impl Prediction {
    pub(crate) fn from_probs(probs: Vec<f64>) -> Self {
        let mut label = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[label] {
                label = i;
            }
        }
        let confidence = probs[label];
        Prediction {
            probs,
            label,
            confidence,
        }
    }
}

/// Anchor rows with cached norms; scoring an image row is then one dot
/// product per class.
pub(crate) struct PreparedAnchors<'a> {
    pub(crate) rows: &'a Matrix,
    pub(crate) norms: Vec<f64>,
}

impl<'a> PreparedAnchors<'a> {
    pub(crate) fn new(anchors: &'a Matrix) -> Result<Self> {
        let norms = anchors
            .iter_rows()
            .map(checked_norm)
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedAnchors {
            rows: anchors,
            norms,
        })
    }

    pub(crate) fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.rows.dim() {
            return Err(Error::dim(self.rows.dim(), dim));
        }
        Ok(())
    }

    /// Cosine similarity of `f` (with norm `nf`) to every anchor.
    pub(crate) fn scores_with_norm(&self, f: &[f32], nf: f64) -> Vec<f64> {
        self.rows
            .iter_rows()
            .zip(&self.norms)
            .map(|(t, &nt)| cosine_with_norms(f, nf, t, nt))
            .collect()
    }

    pub(crate) fn predict(&self, f: &[f32], tau: Temperature) -> Result<Prediction> {
        self.check_dim(f.len())?;
        let nf = checked_norm(f)?;
        let scores = self.scores_with_norm(f, nf);
        Ok(Prediction::from_probs(softmax_scaled(&scores, tau)))
    }
}

pub fn classify(f: &[f32], anchors: &ClassAnchorSet, tau: Temperature) -> Result<Prediction> {
    PreparedAnchors::new(anchors.anchors())?.predict(f, tau)
}

/// Classifies every row of `bank`; element `i` equals `classify(bank.row(i), ..)`.
pub fn classify_batch(
    bank: &Matrix,
    anchors: &ClassAnchorSet,
    tau: Temperature,
) -> Result<Vec<Prediction>> {
    let prepared = PreparedAnchors::new(anchors.anchors())?;
    prepared.check_dim(bank.dim())?;
    (0..bank.rows())
        .into_par_iter()
        .map(|i| prepared.predict(bank.row(i), tau))
        .collect()
}

/// Fraction of predictions whose label matches the ground truth.
pub fn accuracy(predictions: &[Prediction], labels: &[u32]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, &y)| p.label == y as usize)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}
