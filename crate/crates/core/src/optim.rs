//! Adam with bias correction and the two-drop step schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Restores optimizer state; moment shapes must match the store.
    pub fn from_parts(
        store: &ParamStore,
        config: AdamConfig,
        step: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let sizes: Vec<usize> = store.iter().map(|(_, t)| t.numel()).collect();
        let ok = |x: &[Vec<f64>]| x.len() == sizes.len() && x.iter().zip(&sizes).all(|(a, &n)| a.len() == n);
        if !ok(&m) || !ok(&v) {
            return Err(Error::Invalid("optimizer moments do not match the parameters".into()));
        }
        Ok(Adam { config, step, m, v })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Applies one update from the gradients stored on the parameters.
    /// A non-finite gradient aborts the step before anything changes.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for (name, t) in store.iter() {
            if let Some(g) = t.grad() {
                if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                    log::warn!("non-finite gradient in {name}[{i}]; step skipped");
                    return Err(Error::NonFinite(format!("gradient of {name}[{i}]")));
                }
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((t, m), v) in store.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (((p, g), m), v) in t.values_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Piecewise-constant schedule: `base` times `factor` once per boundary
/// `round(f * total)` (for each `f` in `decay_at`) that `step` has reached.
/// The first `warmup` steps ramp linearly up to that value.
pub fn learning_rate(base: f64, factor: f64, decay_at: [f64; 2], warmup: usize, total: usize, step: usize) -> f64 {
    let drops = decay_at
        .iter()
        .filter(|&&f| step >= (f * total as f64).round() as usize)
        .count();
    let ramp = if step < warmup { (step + 1) as f64 / warmup as f64 } else { 1.0 };
    base * factor.powi(drops as i32) * ramp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: Vec<f64>, grad: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::new(&[values.len()], values).unwrap());
        s.get_mut(id).accumulate_grad(&grad);
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(vec![1.0, -2.0], vec![0.0, 0.0]);
        let before = s.clone();
        let mut adam = Adam::new(&s, AdamConfig::default());
        adam.step(&mut s, 0.1).unwrap();
        assert_eq!(s.get(s.ids().next().unwrap()).values(), before.get(before.ids().next().unwrap()).values());
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let g = vec![3.0, -0.02, 1e-3];
        let mut s = store(vec![0.0; 3], g.clone());
        let mut adam = Adam::new(&s, AdamConfig::default());
        let lr = 0.01;
        adam.step(&mut s, lr).unwrap();
        let p = s.get(s.ids().next().unwrap()).values().to_vec();
        for (pi, gi) in p.iter().zip(&g) {
            // mh = g, vh = g^2, so the step is lr * g / (|g| + eps)
            let expect = -lr * gi / (gi.abs() + 1e-8);
            assert!((pi - expect).abs() < 1e-15, "{pi} vs {expect}");
            assert!((pi + lr * gi.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = store(vec![1.0, 2.0], vec![0.5, f64::NAN]);
        let before = s.clone();
        let mut adam = Adam::new(&s, AdamConfig::default());
        assert!(matches!(adam.step(&mut s, 0.1), Err(Error::NonFinite(_))));
        assert_eq!(adam.steps_taken(), 0);
        let id = s.ids().next().unwrap();
        assert_eq!(s.get(id).values(), before.get(id).values());
    }

    #[test]
    fn schedule_has_two_drops() {
        let lr = |s| learning_rate(5e-4, 0.1, [0.75, 0.875], 0, 2000, s);
        assert_eq!(lr(0), 5e-4);
        assert_eq!(lr(1499), 5e-4);
        assert_eq!(lr(1500), 5e-4 * 0.1);
        assert_eq!(lr(1749), 5e-4 * 0.1);
        assert_eq!(lr(1750), 5e-4 * 0.1f64.powi(2));
        assert_eq!(lr(1999), 5e-4 * 0.1f64.powi(2));
        let distinct: std::collections::BTreeSet<u64> = (0..2000).map(|s| lr(s).to_bits()).collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn warmup_ramps_linearly_then_holds() {
        let lr = |s| learning_rate(1e-3, 0.1, [0.75, 0.875], 4, 100, s);
        assert_eq!(lr(0), 1e-3 * 0.25);
        assert_eq!(lr(1), 1e-3 * 0.5);
        assert_eq!(lr(3), 1e-3);
        assert_eq!(lr(4), 1e-3);
        assert_eq!(lr(75), 1e-3 * 0.1);
        for s in 1..4 {
            assert!(lr(s) > lr(s - 1));
        }
    }
}
