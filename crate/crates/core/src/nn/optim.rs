use serde::{Deserialize, Serialize};

use super::NnError;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent in linear warmup before cosine decay.
    pub warmup_fraction: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update of `params` in place; `lr` overrides `hp.lr` so schedules
/// can drive it.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hp: &AdamW,
    lr: f64,
) -> Result<(), NnError> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(NnError::Shape {
            op: "adamw_step",
            expected: format!("{} params, grads and moments", params.len()),
            got: format!("{} grads, {} / {} moments", grads.len(), state.m.len(), state.v.len()),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        params[i] *= 1.0 - lr * hp.weight_decay;
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + hp.eps);
    }
    Ok(())
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        let warmup_steps = ((total_steps as f64) * warmup_fraction).ceil() as usize;
        Self {
            base_lr,
            total_steps: total_steps.max(1),
            warmup_steps: warmup_steps.min(total_steps),
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_null_update() {
        let hp = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut p = vec![0.3, -1.2];
        let mut st = AdamState::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut st, &hp, hp.lr).unwrap();
        assert_eq!(p, vec![0.3, -1.2]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_lr_is_a_null_step() {
        let hp = AdamW::default();
        let mut p = vec![0.3, -1.2];
        let mut st = AdamState::new(2);
        adamw_step(&mut p, &[0.5, -0.1], &mut st, &hp, 0.0).unwrap();
        assert_eq!(p, vec![0.3, -1.2]);
    }

    #[test]
    fn one_step_matches_hand_computed_update() {
        // m = 0.05, v = 2.5e-4; bias-corrected m̂ = 0.5, v̂ = 0.25.
        // w = 1·(1 − 1e-3·1e-4) − 1e-3 · 0.5 / (0.5 + 1e-8)
        let expected = (1.0 - 1e-7) - 1e-3 * 0.5 / (0.5 + 1e-8);
        let hp = AdamW::default();
        let mut p = vec![1.0];
        let mut st = AdamState::new(1);
        adamw_step(&mut p, &[0.5], &mut st, &hp, hp.lr).unwrap();
        assert!((p[0] - expected).abs() < 1e-15, "{} vs {expected}", p[0]);
        assert!((p[0] - 0.998_999_900_02).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut st = AdamState::new(1);
        assert!(adamw_step(&mut [1.0, 2.0], &[0.1, 0.1], &mut st, &AdamW::default(), 1e-3).is_err());
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = LrSchedule::new(1e-3, 100, 0.1);
        assert_eq!(s.warmup_steps, 10);
        assert!((s.lr_at(0) - 1e-4).abs() < 1e-15);
        assert!((s.lr_at(9) - 1e-3).abs() < 1e-15);
        assert!((s.lr_at(10) - 1e-3).abs() < 1e-15);
        assert!(s.lr_at(55) < s.lr_at(20));
        assert!(s.lr_at(100) < 1e-12);
    }
}
