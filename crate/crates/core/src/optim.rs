//! Bias-corrected adaptive-moment optimizer and the warmup/step-decay
//! learning-rate schedule.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Learning rate for a 1-based epoch: linear warmup from `start_lr` to
/// `base_lr` across the warmup epochs, then `base_lr` with the decay factor
/// applied at and after each decay epoch.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    debug_assert!(epoch >= 1, "epochs are 1-based");
    let mut lr = if config.warmup_epochs > 1 && epoch < config.warmup_epochs {
        let t = (epoch - 1) as f64 / (config.warmup_epochs - 1) as f64;
        config.start_lr + (config.base_lr - config.start_lr) * t
    } else {
        config.base_lr
    };
    for &decay in &config.decay_epochs {
        if epoch >= decay {
            lr *= config.decay_factor;
        }
    }
    lr
}

/// Adam state aligned with a parameter store.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    weight_decay: f32,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: &TrainConfig) -> Adam {
        Adam {
            beta1: config.beta1 as f32,
            beta2: config.beta2 as f32,
            eps: config.adam_eps as f32,
            weight_decay: config.weight_decay as f32,
            m: (0..store.len()).map(|i| vec![0.0; store.values(i).len()]).collect(),
            v: (0..store.len()).map(|i| vec![0.0; store.values(i).len()]).collect(),
            t: 0,
        }
    }

    /// One update over every parameter. Gradients must be aligned with the
    /// store; non-finite gradients abort, naming the parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f32>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} gradient buffers for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.t as i32);
        let inv_bc1 = (1.0 / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let lr = lr as f32;
        for i in 0..store.len() {
            if let Some(bad) = grads[i].iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in `{}` at element {bad}",
                    store.name(i)
                )));
            }
            let params = store.values_mut(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..params.len() {
                let g = grads[i][j] + self.weight_decay * params[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] * inv_bc1;
                let v_hat = v[j] * inv_bc2;
                params[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn schedule_config() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn schedule_hits_reference_values() {
        let cfg = schedule_config();
        assert_relative_eq!(lr_at(1, &cfg), 3.5e-5, max_relative = 1e-12);
        assert_relative_eq!(lr_at(10, &cfg), 3.5e-4, max_relative = 1e-12);
        assert_relative_eq!(lr_at(40, &cfg), 3.5e-5, max_relative = 1e-12);
        assert_relative_eq!(lr_at(70, &cfg), 3.5e-6, max_relative = 1e-12);
    }

    #[test]
    fn schedule_is_monotone_within_phases() {
        let cfg = schedule_config();
        for e in 1..10 {
            assert!(lr_at(e, &cfg) <= lr_at(e + 1, &cfg) + 1e-18, "warmup at {e}");
        }
        for e in 10..80 {
            assert!(lr_at(e, &cfg) >= lr_at(e + 1, &cfg) - 1e-18, "post-warmup at {e}");
        }
    }

    fn one_param_store(values: Vec<f32>) -> ParamStore {
        let mut store = ParamStore::new();
        let n = values.len();
        store.add("p", &[n], values);
        store
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut store = one_param_store(vec![1.0, -2.0, 3.0]);
        let mut adam = Adam::new(&store, &schedule_config());
        adam.step(&mut store, &[vec![0.0; 3]], 1e-3).unwrap();
        assert_eq!(store.values(0), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_from_zero_moments_matches_closed_form() {
        // with zero moments, m_hat = g and v_hat = g^2, so the update is
        // -lr * g / (|g| + eps)
        let mut store = one_param_store(vec![0.0, 0.0]);
        let mut adam = Adam::new(&store, &schedule_config());
        let g = vec![0.25f32, -3.0];
        adam.step(&mut store, &[g.clone()], 1e-2).unwrap();
        for (p, gi) in store.values(0).iter().zip(&g) {
            let expect = -1e-2 * gi / (gi.abs() + 1e-8);
            assert_relative_eq!(*p, expect, max_relative = 1e-5);
        }
    }

    #[test]
    fn identical_runs_stay_bit_identical() {
        let run = || {
            let mut store = one_param_store(vec![0.5, 0.5, 0.5, 0.5]);
            let mut adam = Adam::new(&store, &schedule_config());
            for t in 0..10 {
                let g: Vec<f32> = (0..4).map(|j| ((t * 4 + j) as f32).sin()).collect();
                adam.step(&mut store, &[g], 3e-3).unwrap();
            }
            store.values(0).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradients_name_the_parameter() {
        let mut store = one_param_store(vec![1.0]);
        let mut adam = Adam::new(&store, &schedule_config());
        let err = adam.step(&mut store, &[vec![f32::NAN]], 1e-3).unwrap_err();
        assert!(err.to_string().contains("`p`"), "{err}");
    }
}
