//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::params::{Group, VerLMParams};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter of an unfrozen group that holds
    /// a gradient, then clears all gradients.
    pub fn step(&mut self, params: &mut VerLMParams, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let frozen: Vec<Group> = Group::ALL.into_iter().filter(|g| params.is_frozen(*g)).collect();
        for (name, tensor) in params.iter_mut() {
            let Some(grad) = tensor.grad.take() else { continue };
            if Group::of(name).is_some_and(|g| frozen.contains(&g)) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (((w, g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_matches_closed_form() {
        let mut p = VerLMParams::new();
        p.insert("decoder.w", Tensor::new(vec![2], vec![0.5, -0.25]).unwrap()).unwrap();
        p.get_mut("decoder.w").unwrap().grad = Some(vec![1.0, 1.0]);
        let mut adam = Adam::new();
        adam.step(&mut p, 1e-4).unwrap();
        // m = 0.1, v = 0.001; mhat = 1, vhat = 1 -> delta = lr / (1 + eps)
        let g = 1.0f64;
        let m = (1.0 - BETA1) * g;
        let v = (1.0 - BETA2) * g * g;
        let delta = 1e-4 * (m / (1.0 - BETA1)) / ((v / (1.0 - BETA2)).sqrt() + ADAM_EPS);
        let w = p.get("decoder.w").unwrap().data();
        assert_eq!(w[0], 0.5 - delta);
        assert_eq!(w[1], -0.25 - delta);
        assert!(p.get("decoder.w").unwrap().grad.is_none());
    }

    #[test]
    fn frozen_groups_are_untouched() {
        let mut p = VerLMParams::new();
        p.insert("encoder.w", Tensor::full(&[3], 1.0)).unwrap();
        p.set_frozen(Group::Encoder, true);
        p.get_mut("encoder.w").unwrap().grad = Some(vec![1.0; 3]);
        let before = p.group_fingerprint(Group::Encoder);
        let mut adam = Adam::new();
        for _ in 0..5 {
            adam.step(&mut p, 0.1).unwrap();
        }
        assert_eq!(before, p.group_fingerprint(Group::Encoder));
        assert!(p.get("encoder.w").unwrap().grad.is_none());
    }
}
