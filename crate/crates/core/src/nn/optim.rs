//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{check_grads, ParamStore};
use crate::nn::{Scalar, Tensor};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub cosine_min_lr: f64,
    pub total_steps: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            cosine_min_lr: 1e-6,
            total_steps: 1000,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cosine_min_lr > 0.0 && self.cosine_min_lr <= self.learning_rate) {
            return Err(Error::config(format!(
                "need 0 < cosine_min_lr <= learning_rate, got {} vs {}",
                self.cosine_min_lr, self.learning_rate
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps must be >= 1"));
        }
        Ok(())
    }

    /// Cosine decay from `learning_rate` down to `cosine_min_lr`; steps past
    /// `total_steps` stay clamped at the floor.
    pub fn lr_at(&self, step: u64) -> f64 {
        let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.cosine_min_lr
            + 0.5 * (self.learning_rate - self.cosine_min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn with_steps(mut self, total_steps: u64) -> Self {
        self.total_steps = total_steps;
        self
    }
}

/// One AdamW update. `step` is the 1-based index of this update; parameters
/// without a gradient entry are left untouched.
pub fn optimizer_step<S: Scalar>(
    store: &mut ParamStore<S>,
    grads: &BTreeMap<String, Tensor<S>>,
    config: &OptimConfig,
    step: u64,
) -> Result<()> {
    config.validate()?;
    check_grads(store, grads)?;
    let lr = S::from_f64(config.lr_at(step));
    let wd = S::from_f64(config.weight_decay);
    let b1 = S::from_f64(BETA1);
    let b2 = S::from_f64(BETA2);
    let eps = S::from_f64(ADAM_EPS);
    let bc1 = S::from_f64(1.0 - BETA1.powi(step as i32));
    let bc2 = S::from_f64(1.0 - BETA2.powi(step as i32));

    for (name, grad) in grads {
        let p = store.get_mut(name).expect("checked above");
        let g = grad.data();
        let mut value = p.value.data().to_vec();
        let mut m = p.m.data().to_vec();
        let mut v = p.v.data().to_vec();
        for i in 0..value.len() {
            m[i] = b1 * m[i] + (S::ONE - b1) * g[i];
            v[i] = b2 * v[i] + (S::ONE - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            value[i] = value[i] - lr * (mhat / (vhat.sqrt() + eps) + wd * value[i]);
        }
        let shape = p.value.shape().to_vec();
        p.value = Tensor::raw(&shape, value);
        p.m = Tensor::raw(&shape, m);
        p.v = Tensor::raw(&shape, v);
    }
    store.step = step;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = OptimConfig::default().with_steps(100);
        assert!((cfg.lr_at(0) - 1e-3).abs() < 1e-12);
        // step = total_steps hits the floor exactly
        assert!((cfg.lr_at(100) - 1e-6).abs() < 1e-15);
        // past the end stays clamped
        assert!((cfg.lr_at(250) - 1e-6).abs() < 1e-15);
    }

    #[test]
    fn zero_grads_no_decay_leaves_params() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::new(&[2], vec![1.5, -2.5]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[2]));
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        optimizer_step(&mut store, &grads, &cfg, 1).unwrap();
        assert_eq!(store.value("w").data(), &[1.5, -2.5]);
    }

    #[test]
    fn single_step_matches_hand_unrolled_adamw() {
        // Hand-unrolled oracle: one AdamW update on a scalar parameter.
        let p0 = 0.7f64;
        let g = 0.3f64;
        let cfg = OptimConfig::default().with_steps(1000);
        let lr = cfg.lr_at(1);
        let m = (1.0 - BETA1) * g;
        let v = (1.0 - BETA2) * g * g;
        let mhat = m / (1.0 - BETA1);
        let vhat = v / (1.0 - BETA2);
        let expect = p0 - lr * (mhat / (vhat.sqrt() + ADAM_EPS) + cfg.weight_decay * p0);

        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::scalar(p0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(g));
        optimizer_step(&mut store, &grads, &cfg, 1).unwrap();
        assert!((store.value("w").item() - expect).abs() < 1e-12);
    }
}
