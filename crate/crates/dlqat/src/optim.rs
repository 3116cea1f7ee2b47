//! AdamW with decoupled weight decay and bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, serde::Serialize)]
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
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// One optimizer instance per phase; moments are keyed by a caller-chosen
/// ordered key so update order (and therefore bytes) is deterministic.
#[derive(Debug)]
pub struct AdamW<K: Ord> {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<K, Moments>,
}

impl<K: Ord + std::fmt::Debug> AdamW<K> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Advance the shared step counter; call once per training iteration
    /// before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// In-place AdamW update of one parameter:
    /// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)` with
    /// `m_hat = m / (1 - beta1^t)`, `v_hat = v / (1 - beta2^t)`.
    pub fn update(&mut self, key: K, param: &mut [f64], grad: &[f64]) -> Result<()> {
        if self.step == 0 {
            return Err(Error::Invalid("AdamW::update before begin_step".into()));
        }
        if grad.len() != param.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("grad has {} elements, param has {}", grad.len(), param.len()),
            ));
        }
        let c = self.config;
        let state = self.moments.entry(key).or_insert_with(|| Moments {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
        });
        if state.m.len() != param.len() {
            return Err(Error::Invalid("optimizer state shape changed mid-run".into()));
        }
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..param.len() {
            state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * grad[i];
            state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let m_hat = state.m[i] / bc1;
            let v_hat = state.v[i] / bc2;
            param[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * param[i]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent scalar reference implementation.
    struct ScalarAdamW {
        m: f64,
        v: f64,
        t: i32,
    }

    impl ScalarAdamW {
        fn step(&mut self, p: f64, g: f64, c: &AdamWConfig) -> f64 {
            self.t += 1;
            self.m = c.beta1 * self.m + (1.0 - c.beta1) * g;
            self.v = c.beta2 * self.v + (1.0 - c.beta2) * g * g;
            let mh = self.m / (1.0 - c.beta1.powi(self.t));
            let vh = self.v / (1.0 - c.beta2.powi(self.t));
            p - c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * p)
        }
    }

    #[test]
    fn first_step_moves_by_almost_lr() {
        let cfg = AdamWConfig::default();
        let mut opt: AdamW<u32> = AdamW::new(cfg);
        let mut p = vec![1.0];
        opt.begin_step();
        opt.update(0, &mut p, &[1.0]).unwrap();
        let moved = 1.0 - p[0];
        assert!(moved > 0.0 && moved <= cfg.lr);
        assert!((moved - cfg.lr).abs() < 1e-10 * cfg.lr.max(1.0));

        let mut reference = ScalarAdamW { m: 0.0, v: 0.0, t: 0 };
        let mut q = 1.0;
        let mut opt2: AdamW<u32> = AdamW::new(cfg);
        let mut pv = vec![1.0];
        for _ in 0..25 {
            q = reference.step(q, 1.0, &cfg);
            opt2.begin_step();
            opt2.update(0, &mut pv, &[1.0]).unwrap();
            assert!((q - pv[0]).abs() <= 1e-12, "{q} vs {}", pv[0]);
        }
    }

    #[test]
    fn zero_grad_zero_decay_leaves_param_unchanged() {
        let mut opt: AdamW<u32> = AdamW::new(AdamWConfig::default());
        let mut p = vec![0.7, -1.3];
        let before = p.clone();
        for _ in 0..5 {
            opt.begin_step();
            opt.update(0, &mut p, &[0.0, 0.0]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn identical_params_follow_identical_trajectories() {
        let cfg = AdamWConfig {
            lr: 1e-2,
            ..AdamWConfig::default()
        };
        let mut opt: AdamW<u32> = AdamW::new(cfg);
        let mut p1 = vec![0.4];
        let mut p2 = vec![0.4];
        for i in 0..20 {
            let g = (i as f64 * 0.37).sin();
            opt.begin_step();
            opt.update(1, &mut p1, &[g]).unwrap();
            opt.update(2, &mut p2, &[g]).unwrap();
            assert_eq!(p1[0].to_bits(), p2[0].to_bits());
        }
    }

    #[test]
    fn grad_shape_mismatch_errors() {
        let mut opt: AdamW<u32> = AdamW::new(AdamWConfig::default());
        opt.begin_step();
        let mut p = vec![0.0; 3];
        assert!(opt.update(0, &mut p, &[0.0; 2]).is_err());
    }
}
