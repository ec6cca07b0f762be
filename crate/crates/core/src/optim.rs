//! First-order optimizers for flat parameter buffers.

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter-buffer Adam state: first and second moment estimates
/// plus the shared step counter used for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One Adam update, in place.
///
/// m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;  t <- t+1
/// p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
///
/// With beta1 = beta2 = 0 the moments equal the current gradient and
/// the update degenerates to p - lr * g / (|g| + eps).
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(CoreError::dimension(
            "adam_step",
            format!("{} params", params.len()),
            format!("{} grads / {} state", grads.len(), state.m.len()),
        ));
    }
    if let Some(bad) = grads.iter().find(|g| !g.is_finite()) {
        return Err(CoreError::Numerical(format!("non-finite gradient {bad} in adam_step")));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn first_step_matches_closed_form() {
        // After one step m_hat = g, v_hat = g^2, so the update is
        // -lr * g / (|g| + eps) regardless of beta values.
        let cfg = AdamConfig::default();
        let mut p = vec![1.0, -2.0];
        let g = vec![0.5, -3.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        for i in 0..2 {
            let want = [1.0, -2.0][i]
                - cfg.learning_rate * g[i] / (g[i].abs() + cfg.epsilon);
            assert_relative_eq!(p[i], want, max_relative = 1e-12);
        }
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_betas_degenerate_to_sign_sgd() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 1e-8,
        };
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        for _ in 0..5 {
            let g = vec![2.0];
            adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        }
        // Each step is -lr * g / (|g| + eps) ~= -lr.
        assert_relative_eq!(p[0], -0.5, max_relative = 1e-6);
    }

    #[test]
    fn converges_on_quadratic() {
        // Minimize f(p) = (p - 3)^2; gradient 2(p - 3).
        let cfg = AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        };
        let mut p = vec![-4.0];
        let mut st = AdamState::new(1);
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 3.0)];
            adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        }
        assert_relative_eq!(p[0], 3.0, epsilon = 1e-3);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        assert!(adam_step(&mut p, &[f64::NAN], &mut st, &cfg).is_err());
    }

    #[test]
    fn rejects_length_mismatch() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0; 3];
        let mut st = AdamState::new(3);
        assert!(adam_step(&mut p, &[0.0; 2], &mut st, &cfg).is_err());
    }
}
