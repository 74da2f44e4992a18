use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Gradients, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear ramp length; the rate is constant afterwards. Zero disables it.
    pub warmup_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 100,
        }
    }
}

impl AdamWConfig {
    /// Learning rate used by the `step`-th update (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

#[derive(Debug, Clone)]
struct Moments<T: Real> {
    m: Vec<T>,
    v: Vec<T>,
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW<T: Real = f32> {
    config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient and
    /// `requires_grad` set. Returns the learning rate used.
    pub fn step<'a, I>(&mut self, params: I, grads: &Gradients<T>) -> Result<f64>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    {
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let lr = c.lr_at(self.step);
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(c.eps);
        let decay = T::of(1.0 - lr * c.weight_decay);

        for (name, param) in params {
            if !param.requires_grad() {
                continue;
            }
            let Some(grad) = grads.get(name) else { continue };
            if grad.shape() != param.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("{name}: param {:?} vs grad {:?}", param.shape(), grad.shape()),
                ));
            }
            let n = param.numel();
            let mom = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            if mom.m.len() != n {
                return Err(Error::shape("adamw", format!("{name}: moment size changed")));
            }
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(mom.m.iter_mut())
                .zip(mom.v.iter_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let denom = v.sqrt() / bc2_sqrt + eps;
                *p = *p * decay - step_size * *m / denom;
            }
            if !param.is_finite() {
                return Err(Error::NonFinite { op: "adamw" });
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64, grad: f64, config: AdamWConfig) -> f64 {
        let mut p = Tensor::<f64>::from_f64([1], &[value]).unwrap().with_requires_grad(true);
        let mut grads = Gradients::new();
        grads.insert("p".into(), Tensor::from_f64([1], &[grad]).unwrap());
        let mut opt = AdamW::new(config);
        opt.step([("p", &mut p)], &grads).unwrap();
        p.item()
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let c = AdamWConfig {
            lr: 0.1,
            warmup_steps: 0,
            ..Default::default()
        };
        assert_eq!(one_param(1.5, 0.0, c), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let lr = 1e-3;
        let c = AdamWConfig {
            lr,
            warmup_steps: 0,
            ..Default::default()
        };
        // m̂ = 1, v̂ = 1 → Δ = −lr / (1 + eps)
        let expected = -lr / (1.0 + 1e-8);
        let delta = one_param(0.0, 1.0, c);
        assert!((delta - expected).abs() < 1e-14, "{delta}");
    }

    #[test]
    fn warmup_is_linear() {
        let c = AdamWConfig {
            lr: 2e-5,
            warmup_steps: 100,
            ..Default::default()
        };
        assert_eq!(c.lr_at(50), 0.5 * 2e-5);
        assert_eq!(c.lr_at(100), 2e-5);
        assert_eq!(c.lr_at(1000), 2e-5);
    }

    #[test]
    fn frozen_params_untouched() {
        let mut p = Tensor::<f32>::ones([3]);
        let mut grads = Gradients::new();
        grads.insert("p".into(), Tensor::ones([3]));
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step([("p", &mut p)], &grads).unwrap();
        assert_eq!(p.data(), &[1.0; 3]);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::<f32>::ones([3]).with_requires_grad(true);
        let mut grads = Gradients::new();
        grads.insert("p".into(), Tensor::ones([2]));
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(opt.step([("p", &mut p)], &grads).is_err());
    }
}
