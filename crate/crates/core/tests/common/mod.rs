#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use resadapt::zeroshot::{ClassAnchorSet, PLAIN_TEMPLATE};
use resadapt::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, dim: usize, scale: f64) -> Matrix {
    let data = (0..rows * dim)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * scale) as f32)
        .collect();
    Matrix::new(rows, dim, data).unwrap()
}

pub fn class_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("c{i}")).collect()
}

pub fn anchor_set(m: Matrix) -> ClassAnchorSet {
    let k = m.rows();
    ClassAnchorSet::from_template(class_names(k), m, PLAIN_TEMPLATE, None).unwrap()
}

pub fn random_anchors(rng: &mut impl Rng, k: usize, dim: usize) -> ClassAnchorSet {
    anchor_set(gaussian_matrix(rng, k, dim, 1.0))
}

/// Bank rows drawn around random anchors so predictions are not uniform.
pub fn clustered_bank(rng: &mut impl Rng, anchors: &ClassAnchorSet, n: usize, noise: f64) -> Matrix {
    let d = anchors.dim();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let c = rng.random_range(0..anchors.num_classes());
        for &a in anchors.anchors().row(c) {
            data.push(a + (rng.sample::<f64, _>(StandardNormal) * noise) as f32);
        }
    }
    Matrix::new(n, d, data).unwrap()
}

pub fn scaled(m: &Matrix, s: f32) -> Matrix {
    Matrix::new(m.rows(), m.dim(), m.as_slice().iter().map(|v| v * s).collect()).unwrap()
}
