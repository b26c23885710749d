//! Adam optimizer over a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(cfg: &TrainConfig) -> Self {
        AdamHyper {
            learning_rate: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            epsilon: cfg.adam_epsilon,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { t: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }
}

/// One Adam update in place:
///
/// ```text
/// m <- b1 m + (1 - b1) g        mhat = m / (1 - b1^t)
/// v <- b2 v + (1 - b2) g^2      vhat = v / (1 - b2^t)
/// theta <- theta - lr * mhat / (sqrt(vhat) + eps)
/// ```
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hp: &AdamHyper,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::LengthMismatch {
            left: params.len(),
            right: grads.len().min(state.m.len()),
            context: "adam buffers".into(),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - hp.beta1.powi(t);
    let bias2 = 1.0 - hp.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        params[i] -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HP: AdamHyper =
        AdamHyper { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };

    #[test]
    fn first_step_is_bias_corrected() {
        // With g = 1: mhat = 1, vhat = 1, so the step is lr / (1 + eps),
        // not lr * (1 - b1).
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut st, &HP).unwrap();
        let expected = -HP.learning_rate / (1.0 + HP.epsilon);
        assert!((p[0] - expected).abs() < 1e-18, "got {}", p[0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn constant_gradient_moves_linearly() {
        // With constant g, mhat = g and vhat = g^2 at every step, so each
        // update is exactly lr * sign(g) * |g| / (|g| + eps).
        let g = -2.0;
        let mut p = vec![1.0];
        let mut st = AdamState::new(1);
        for _ in 0..5 {
            adam_step(&mut p, &[g], &mut st, &HP).unwrap();
        }
        let per_step = HP.learning_rate * g.abs() / (g.abs() + HP.epsilon);
        let expected = 1.0 + 5.0 * per_step;
        assert!((p[0] - expected).abs() < 1e-12, "got {} want {expected}", p[0]);
    }

    #[test]
    fn zero_betas_reduce_to_sign_sgd() {
        let hp = AdamHyper { beta1: 0.0, beta2: 0.0, ..HP };
        let mut p = vec![0.0, 0.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[3.0, -0.5], &mut st, &hp).unwrap();
        for (i, &g) in [3.0, -0.5].iter().enumerate() {
            let expected = -hp.learning_rate * g / (g.abs() + hp.epsilon);
            assert!((p[i] - expected).abs() < 1e-18);
        }
    }

    #[test]
    fn zero_gradient_leaves_params_fixed() {
        let mut p = vec![0.7, -1.3];
        let before = p.clone();
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, &HP).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn update_is_elementwise() {
        // A coordinate with zero gradient must not move even when others do.
        let mut p = vec![1.0, 1.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[1.0, 0.0], &mut st, &HP).unwrap();
        assert!(p[0] < 1.0);
        assert_eq!(p[1], 1.0);
    }

    #[test]
    fn shape_and_finiteness_are_checked() {
        let mut p = vec![0.0; 2];
        let mut st = AdamState::new(2);
        assert!(adam_step(&mut p, &[1.0], &mut st, &HP).is_err());
        assert!(adam_step(&mut p, &[f64::NAN, 0.0], &mut st, &HP).is_err());
        let mut st_bad = AdamState::new(1);
        assert!(adam_step(&mut p, &[1.0, 1.0], &mut st_bad, &HP).is_err());
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut p = vec![0.3, -0.7, 0.1];
            let mut st = AdamState::new(3);
            for k in 0..50 {
                let g = [(k as f64).sin(), 0.5, -1.0 + k as f64 * 0.01];
                adam_step(&mut p, &g, &mut st, &HP).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
