//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Tensor,
    v: Tensor,
    // Bias correction counts updates of this tensor, so a parameter that
    // joins mid-run starts with a fully corrected first step.
    steps: u64,
}

/// Optimizer state: moments per trainable parameter plus a global step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let mut s = AdamWState {
            config,
            moments: BTreeMap::new(),
            step: 0,
        };
        s.realign(params);
        s
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Re-synchronizes moments with the current trainable set: new or
    /// reshaped parameters get fresh zero moments, frozen ones are dropped.
    pub fn realign(&mut self, params: &ParamStore) {
        self.moments
            .retain(|k, m| matches!(params.get(k), Some(p) if p.trainable && p.value.shape() == m.m.shape()));
        for (name, p) in params.iter() {
            if p.trainable && !self.moments.contains_key(name) {
                self.moments.insert(
                    name.clone(),
                    Moments {
                        m: Tensor::zeros(p.value.shape()),
                        v: Tensor::zeros(p.value.shape()),
                        steps: 0,
                    },
                );
            }
        }
    }

    /// Applies one update to every trainable parameter.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        // Validate everything before mutating anything.
        for (name, p) in params.iter() {
            if !p.trainable {
                continue;
            }
            let g = grads
                .get(name)
                .ok_or_else(|| Error::config(format!("missing gradient for `{name}`")))?;
            if g.shape() != p.value.shape() {
                return Err(Error::config(format!(
                    "gradient shape {:?} does not match parameter `{name}` {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
            match self.moments.get(name) {
                Some(m) if m.m.shape() == p.value.shape() => {}
                _ => return Err(Error::config(format!("optimizer state not initialized for `{name}`"))),
            }
        }
        self.step += 1;
        for (name, p) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let g = grads.get(name).expect("validated");
            let mo = self.moments.get_mut(name).expect("validated");
            mo.steps += 1;
            let bc1 = 1.0 - beta1.powi(mo.steps as i32);
            let bc2 = 1.0 - beta2.powi(mo.steps as i32);
            let w = p.value.data_mut();
            let m = mo.m.data_mut();
            let v = mo.v.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * w[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![2], vec![v, -v]).unwrap(), true);
        s.insert("frozen", Tensor::scalar(3.0), false);
        s
    }

    fn zero_grads(s: &ParamStore) -> Gradients {
        let mut g = Gradients::default();
        for (k, p) in s.iter() {
            g.insert(k.clone(), Tensor::zeros(p.value.shape()));
        }
        g
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut s = one(1.5);
        let before = s.clone();
        let mut st = AdamWState::new(AdamWConfig::default(), &s);
        st.step(&mut s, &zero_grads(&before)).unwrap();
        assert_eq!(s.value("w").unwrap(), before.value("w").unwrap());
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_gradient_with_decay_scales() {
        let mut s = one(2.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let g = zero_grads(&s);
        let mut st = AdamWState::new(cfg, &s);
        st.step(&mut s, &g).unwrap();
        let w = s.value("w").unwrap().data();
        assert!((w[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        assert!((w[1] + 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        assert_eq!(s.value("frozen").unwrap().item(), 3.0);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        // Scalar reference simulation of the update rule.
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let g = 0.3;
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=50 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t)) / ((v / (1.0 - b2.powi(t))).sqrt() + eps));
        }

        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(1.0), true);
        let mut grads = Gradients::default();
        grads.insert("w".into(), Tensor::scalar(g));
        let cfg = AdamWConfig {
            lr,
            ..AdamWConfig::default()
        };
        let mut st = AdamWState::new(cfg, &s);
        for _ in 0..50 {
            st.step(&mut s, &grads).unwrap();
        }
        let got = s.value("w").unwrap().item();
        assert!(got < 1.0);
        assert!((got - w).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let mut s = one(1.0);
        let mut g = zero_grads(&s);
        g.insert("w".into(), Tensor::zeros(&[3]));
        let mut st = AdamWState::new(AdamWConfig::default(), &s);
        assert!(matches!(st.step(&mut s, &g), Err(Error::Config(_))));
    }
}
