//! Optimizers and the warm-restart cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::{Result, TensorError};

/// Cosine annealing with warm restarts. Period `i` has length `t0 * t_mul^i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub l_max: f64,
    pub l_min: f64,
    pub t0: f64,
    pub t_mul: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { l_max: 0.05, l_min: 0.0005, t0: 10.0, t_mul: 2.0 }
    }
}

/// `l_min + (l_max - l_min) * (1 + cos(pi * t_cur / t_i)) / 2`
pub fn cosine_annealing(l_min: f64, l_max: f64, t_cur: f64, t_i: f64) -> f64 {
    l_min + 0.5 * (l_max - l_min) * (1.0 + (std::f64::consts::PI * t_cur / t_i).cos())
}

impl LrSchedule {
    /// Offset into the current restart period and that period's length.
    pub fn period(&self, epoch: f64) -> (f64, f64) {
        let mut t_cur = epoch.max(0.0);
        let mut t_i = self.t0;
        if self.t_mul == 1.0 {
            return (t_cur % t_i, t_i);
        }
        while t_cur >= t_i {
            t_cur -= t_i;
            t_i *= self.t_mul;
        }
        (t_cur, t_i)
    }

    pub fn lr(&self, epoch: f64) -> f64 {
        let (t_cur, t_i) = self.period(epoch);
        cosine_annealing(self.l_min, self.l_max, t_cur, t_i).clamp(self.l_min, self.l_max)
    }
}

fn check_finite(grads: &[f64], what: &str) -> Result<()> {
    match grads.iter().position(|g| !g.is_finite()) {
        Some(i) => Err(TensorError::NonFinite(format!("{what} gradient at element {i}"))),
        None => Ok(()),
    }
}

/// Nesterov SGD in the formulation `v = mu * v + g; p -= lr * (g + mu * v)`.
pub fn sgd_nesterov_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(TensorError::ShapeMismatch {
            kind: "sgd_nesterov_step",
            detail: format!("params {} grads {} velocity {}", params.len(), grads.len(), velocity.len()),
        });
    }
    check_finite(grads, "sgd")?;
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * (g + momentum * *v);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.0035, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], cfg: &AdamConfig, state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TensorError::ShapeMismatch {
            kind: "adam_step",
            detail: format!("params {} grads {} state {}", params.len(), grads.len(), state.m.len()),
        });
    }
    check_finite(grads, "adam")?;
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::default();
        assert_eq!(s.lr(0.0), 0.05);
        // start of the second (length 20) and third (length 40) periods
        assert_eq!(s.lr(10.0), 0.05);
        assert_eq!(s.lr(30.0), 0.05);
        assert_eq!(s.period(35.0), (5.0, 40.0));
        assert!((cosine_annealing(0.0005, 0.05, 10.0, 10.0) - 0.0005).abs() < 1e-15);
        assert!((cosine_annealing(0.0005, 0.05, 5.0, 10.0) - 0.02525).abs() < 1e-15);
        assert!((s.lr(5.0) - 0.02525).abs() < 1e-15);
        assert!((s.lr(20.0) - 0.02525).abs() < 1e-15);
        assert!((s.lr(10.0 - 1e-9) - 0.0005).abs() < 1e-9);
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = [1.0];
        let mut v = [0.0];
        sgd_nesterov_step(&mut p, &[1.0], &mut v, 0.1, 0.0).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = [1.0, -2.0];
        let mut v = [0.0, 0.0];
        sgd_nesterov_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p, [1.0, -2.0]);
        assert_eq!(v, [0.0, 0.0]);
    }

    #[test]
    fn nan_grad_rejected_without_mutation() {
        let mut p = [1.0, 1.0];
        let mut v = [0.0, 0.0];
        let err = sgd_nesterov_step(&mut p, &[0.5, f64::NAN], &mut v, 0.1, 0.9).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite(_)));
        assert_eq!(p, [1.0, 1.0]);
        let mut st = AdamState::new(1);
        assert!(adam_step(&mut p[..1], &[f64::INFINITY], &AdamConfig::default(), &mut st).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn adam_first_step_hand_value() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let g = 0.5;
        let lr = 0.0035;
        let eps = 1e-8;
        let expected = 1.0 - lr * 0.5 / (0.5 + eps);
        let mut p = [1.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[g], &AdamConfig { lr, eps, ..AdamConfig::default() }, &mut st).unwrap();
        assert!((p[0] - expected).abs() < 1e-15, "{} vs {expected}", p[0]);
        assert!((p[0] - 0.99650000007).abs() < 1e-10);
    }

    #[test]
    fn nesterov_two_steps() {
        // v1 = 1, p1 = 1 - 0.1 * (1 + 0.9) = 0.81
        // v2 = 0.9 + 1 = 1.9, p2 = 0.81 - 0.1 * (1 + 1.71) = 0.539
        let mut p = [1.0];
        let mut v = [0.0];
        sgd_nesterov_step(&mut p, &[1.0], &mut v, 0.1, 0.9).unwrap();
        assert!((p[0] - 0.81).abs() < 1e-15);
        sgd_nesterov_step(&mut p, &[1.0], &mut v, 0.1, 0.9).unwrap();
        assert!((p[0] - 0.539).abs() < 1e-14);
    }
}
