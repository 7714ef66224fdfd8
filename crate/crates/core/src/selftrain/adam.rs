use crate::embedding::Matrix;
use crate::error::{Error, Result};
use crate::selftrain::{TaskResidual, TrainConfig};

/// Adaptive-moment optimizer state for one parameter table.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(rows: usize, dim: usize) -> Self {
        OptimizerState {
            first_moment: Matrix::zeros(rows, dim),
            second_moment: Matrix::zeros(rows, dim),
            step_count: 0,
        }
    }

    pub fn for_residual(residual: &TaskResidual) -> Self {
        let m = residual.matrix();
        OptimizerState::new(m.rows(), m.dim())
    }
}

/// One bias-corrected Adam update of `residual` along `grad`.
pub fn adam_step(
    residual: &mut TaskResidual,
    grad: &Matrix,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    residual.matrix().check_shape(grad)?;
    residual.matrix().check_shape(&state.first_moment)?;
    residual.matrix().check_shape(&state.second_moment)?;

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    let lr = cfg.learning_rate;
    let eps = cfg.adam_epsilon;

    let params = residual.matrix_mut().as_mut_slice();
    let m = state.first_moment.as_mut_slice();
    let v = state.second_moment.as_mut_slice();
    for (i, &g) in grad.as_slice().iter().enumerate() {
        let g = g as f64;
        let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
        let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let m_hat = mi / correction1;
        let v_hat = vi / correction2;
        let updated = params[i] as f64 - lr * m_hat / (v_hat.sqrt() + eps);
        params[i] = updated as f32;
        if !params[i].is_finite() {
            return Err(Error::NonFinite(i));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad() -> Matrix {
        Matrix::from_rows(&[[0.5f32, -2.0, 1e-3], [-0.25, 0.0, 7.0]]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_everything_at_zero() {
        let cfg = TrainConfig::default();
        let mut r = TaskResidual::zeros(2, 3);
        let mut s = OptimizerState::for_residual(&r);
        adam_step(&mut r, &Matrix::zeros(2, 3), &mut s, &cfg).unwrap();
        assert_eq!(r, TaskResidual::zeros(2, 3));
        assert!(s.first_moment.as_slice().iter().all(|&v| v == 0.0));
        assert!(s.second_moment.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        let cfg = TrainConfig::default();
        let mut r = TaskResidual::zeros(2, 3);
        let mut s = OptimizerState::for_residual(&r);
        let g = grad();
        adam_step(&mut r, &g, &mut s, &cfg).unwrap();
        for (&p, &gv) in r.matrix().as_slice().iter().zip(g.as_slice()) {
            // Closed form: -lr * g / (|g| + eps).
            let expect = -cfg.learning_rate * gv as f64 / ((gv as f64).abs() + cfg.adam_epsilon);
            assert!((p as f64 - expect).abs() < 1e-9, "{p} vs {expect}");
            if gv != 0.0 {
                assert!((p as f64 + cfg.learning_rate * (gv as f64).signum()).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn momentum_accrues_across_calls() {
        let cfg = TrainConfig::default();
        let g = grad();
        let mut once = TaskResidual::zeros(2, 3);
        let mut s1 = OptimizerState::for_residual(&once);
        adam_step(&mut once, &g, &mut s1, &cfg).unwrap();

        let mut twice = TaskResidual::zeros(2, 3);
        let mut s2 = OptimizerState::for_residual(&twice);
        adam_step(&mut twice, &g, &mut s2, &cfg).unwrap();
        adam_step(&mut twice, &g, &mut s2, &cfg).unwrap();
        assert_ne!(once, twice);
        assert_ne!(s1, s2);
        assert_eq!(s2.step_count, 2);
        assert!(s2.second_moment.as_slice().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn deterministic() {
        let cfg = TrainConfig::default();
        let run = || {
            let mut r = TaskResidual::zeros(2, 3);
            let mut s = OptimizerState::for_residual(&r);
            for _ in 0..5 {
                adam_step(&mut r, &grad(), &mut s, &cfg).unwrap();
            }
            r
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch() {
        let cfg = TrainConfig::default();
        let mut r = TaskResidual::zeros(2, 3);
        let mut s = OptimizerState::for_residual(&r);
        assert!(matches!(
            adam_step(&mut r, &Matrix::zeros(3, 3), &mut s, &cfg),
            Err(Error::DimMismatch { .. })
        ));
    }
}
