use serde::{Deserialize, Serialize};

use super::params::{GradMap, ParameterStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.001, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// One bias-corrected Adam update in place. Parameters absent from `grads` are untouched.
pub fn adam_step(store: &mut ParameterStore, grads: &GradMap, cfg: &AdamConfig) -> Result<()> {
    for (name, g) in grads {
        let e = store
            .entry_mut(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
        if e.value.shape() != g.shape() {
            return Err(Error::Shape { op: "adam_step", shapes: vec![e.value.shape().to_vec(), g.shape().to_vec()] });
        }
    }
    for (name, g) in grads {
        let e = store.entry_mut(name).expect("checked above");
        e.step += 1;
        let t = e.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let m = e.m.data_mut();
        let v = e.v.data_mut();
        let w = e.value.data_mut();
        for (k, &gk) in g.data().iter().enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            w[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Init, Tensor};

    fn store_with(value: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::vector(vec![value]), Init::Zeros);
        s
    }

    fn grads(v: f64) -> GradMap {
        GradMap::from([("w".to_string(), Tensor::vector(vec![v]))])
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = store_with(0.7);
        adam_step(&mut s, &grads(0.0), &AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 0.7);
        assert_eq!(s.entry("w").unwrap().step, 1);
    }

    #[test]
    fn zero_lr_leaves_parameter() {
        let mut s = store_with(0.7);
        let cfg = AdamConfig { lr: 0.0, ..AdamConfig::default() };
        adam_step(&mut s, &grads(3.0), &cfg).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // m = 0.1, v = 0.001; m_hat = 0.1/0.1 = 1, v_hat = 0.001/0.001 = 1.
        let cfg = AdamConfig::default();
        let m_hat = (1.0 - cfg.beta1) * 1.0 / (1.0 - cfg.beta1);
        let v_hat = (1.0 - cfg.beta2) * 1.0 / (1.0 - cfg.beta2);
        let expected = 1.0 - cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        let mut s = store_with(1.0);
        adam_step(&mut s, &grads(1.0), &cfg).unwrap();
        let got = s.get("w").unwrap().item();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - (1.0 - 0.001 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = store_with(1.0);
        let bad = GradMap::from([("w".to_string(), Tensor::vector(vec![1.0, 2.0]))]);
        assert!(adam_step(&mut s, &bad, &AdamConfig::default()).is_err());
    }
}
