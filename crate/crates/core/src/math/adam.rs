//! Adam with bias correction and a step-halving learning-rate schedule.

use crate::error::{NffbError, Result};
use crate::real::Real;

pub const LR_HALVING_PERIOD: u64 = 5000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            base_lr: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// `1e-4 * 0.5^floor(step / 5000)`.
pub fn lr_at(step: u64) -> f64 {
    lr_at_with(step, AdamConfig::default().base_lr)
}

pub fn lr_at_with(step: u64, base_lr: f64) -> f64 {
    let halvings = (step / LR_HALVING_PERIOD).min(i32::MAX as u64) as i32;
    base_lr * 0.5f64.powi(halvings)
}

/// One Adam update in place. Params and state are untouched on error.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || state.v.len() != state.m.len() {
        return Err(NffbError::Config(format!(
            "adam: {} params, {} grads, state of {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(NffbError::Config(format!("learning rate must be positive, got {lr}")));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(NffbError::Numerics(format!(
            "non-finite gradient {} at parameter {i}",
            grads[i]
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let one = T::one();
    let bc1 = T::of(1.0 - cfg.beta1.powi(t));
    let bc2 = T::of(1.0 - cfg.beta2.powi(t));
    let lr = T::of(lr);
    let eps = T::of(cfg.eps);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        assert_eq!(lr_at(0), 1e-4);
        assert_eq!(lr_at(4999), 1e-4);
        assert_eq!(lr_at(5000), 5e-5);
        assert_eq!(lr_at(12000), 2.5e-5);
        let mut prev = lr_at(0);
        for s in (0..40_000).step_by(250) {
            let cur = lr_at(s);
            assert!(cur <= prev);
            assert_eq!(cur, lr_at(s - s % LR_HALVING_PERIOD));
            prev = cur;
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![0.3f64, -1.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 1e-4, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![0.3, -1.0]);
        assert_eq!(s.m, vec![0.0, 0.0]);
        assert_eq!(s.v, vec![0.0, 0.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.0f64];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[0.5], &mut s, 1e-4, &AdamConfig::default()).unwrap();
        assert!((p[0] + 1e-4).abs() < 1e-11);
    }

    #[test]
    fn steady_state_step_approaches_lr() {
        let mut p = vec![0.0f64];
        let mut s = AdamState::new(1);
        let cfg = AdamConfig::default();
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p[0];
            adam_step(&mut p, &[2.0], &mut s, 1e-3, &cfg).unwrap();
            last = before - p[0];
        }
        assert!((last - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn deterministic_bitwise() {
        let run = || {
            let mut p = vec![0.1f32, 0.2, 0.3];
            let mut s = AdamState::new(3);
            for k in 0..10 {
                let g = [0.01 * k as f32, -0.5, 3.0];
                adam_step(&mut p, &g, &mut s, 1e-4, &AdamConfig::default()).unwrap();
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_non_finite_and_leaves_state() {
        let mut p = vec![1.0f64, 2.0];
        let mut s = AdamState::new(2);
        let err = adam_step(&mut p, &[0.1, f64::NAN], &mut s, 1e-4, &AdamConfig::default());
        assert!(matches!(err, Err(NffbError::Numerics(_))));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(s, AdamState::new(2));
        assert!(adam_step(&mut p, &[0.1], &mut s, 1e-4, &AdamConfig::default()).is_err());
    }

    #[test]
    fn second_moment_stays_non_negative() {
        let mut p = vec![0.0f64; 4];
        let mut s = AdamState::new(4);
        for k in 0..50 {
            let g: Vec<f64> = (0..4).map(|i| ((k * 7 + i) as f64).sin()).collect();
            adam_step(&mut p, &g, &mut s, 1e-4, &AdamConfig::default()).unwrap();
            assert!(s.v.iter().all(|&v| v >= 0.0));
        }
    }
}
