use std::collections::BTreeMap;

use super::network::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are keyed by parameter name; only
/// names present in the gradient registry are touched, so frozen tensors and
/// batchnorm buffers never move.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        Some((self.m.get(name)?.as_slice(), self.v.get(name)?.as_slice()))
    }

    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &Gradients, lr: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` is {:?} but its gradient is {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> (BTreeMap<String, Tensor>, impl Fn(f64) -> Gradients) {
        let mut p = BTreeMap::new();
        p.insert("w".to_string(), Tensor::new(vec![1], vec![v]).unwrap());
        let g = |x: f64| {
            let mut g = Gradients::new();
            g.accumulate("w".into(), Tensor::new(vec![1], vec![x]).unwrap());
            g
        };
        (p, g)
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let (mut p, g) = scalar(0.5);
        let mut adam = Adam::default();
        adam.config = AdamConfig::default();
        adam.step(&mut p, &g(2.0), 0.1).unwrap();
        let before = p["w"].data()[0];
        let (m0, v0) = adam.moments("w").map(|(m, v)| (m[0], v[0])).unwrap();
        adam.step(&mut p, &g(0.0), 0.1).unwrap();
        let (m1, v1) = adam.moments("w").map(|(m, v)| (m[0], v[0])).unwrap();
        assert!((m1 - 0.9 * m0).abs() < 1e-15);
        assert!((v1 - 0.999 * v0).abs() < 1e-15);
        // the first-moment estimate still carries momentum from step one
        assert!(p["w"].data()[0] < before);

        let (mut q, g) = scalar(0.5);
        let mut fresh = Adam::new(AdamConfig::default());
        fresh.step(&mut q, &g(0.0), 0.1).unwrap();
        assert_eq!(q["w"].data()[0], 0.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut p, g) = scalar(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &g(1.0), 1e-3).unwrap();
        let moved = 1.0 - p["w"].data()[0];
        assert!((moved - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_reference_trace() {
        // independent scalar recurrence
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.01f64);
        let grads = [0.3, -1.7];
        let (mut w, mut m, mut v) = (0.25f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        let (mut p, g) = scalar(0.25);
        let mut adam = Adam::new(AdamConfig::default());
        for x in grads {
            adam.step(&mut p, &g(x), lr).unwrap();
        }
        assert!((p["w"].data()[0] - w).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut p, _) = scalar(0.0);
        let mut g = Gradients::new();
        g.accumulate("w".into(), Tensor::zeros(&[2]));
        assert!(matches!(Adam::default().step(&mut p, &g, 0.1), Err(Error::Shape(_))));
    }
}
