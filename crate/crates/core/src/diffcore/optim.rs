use std::collections::BTreeMap;

use super::ParamStore;
use crate::scalar::Scalar;

/// Adaptive-moment optimizer with cosine learning-rate decay and optional
/// global gradient-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    pub weight_decay: S,
    pub clip_norm: Option<S>,
    pub total_steps: usize,
    step: usize,
    m: BTreeMap<String, Vec<S>>,
    v: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: S, total_steps: usize) -> Self {
        Self {
            lr,
            beta1: S::lit(0.9),
            beta2: S::lit(0.999),
            eps: S::lit(1e-8),
            weight_decay: S::zero(),
            clip_norm: None,
            total_steps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate at the current step under cosine decay to zero.
    pub fn current_lr(&self) -> S {
        if self.total_steps == 0 {
            return self.lr;
        }
        let progress = S::from_usize(self.step.min(self.total_steps)).unwrap()
            / S::from_usize(self.total_steps).unwrap();
        let pi = S::lit(std::f64::consts::PI);
        self.lr * S::lit(0.5) * (S::one() + (pi * progress).cos())
    }

    /// Applies one update. Keys absent from `grads` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &BTreeMap<String, Vec<S>>) {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = grads
                    .values()
                    .flat_map(|g| g.iter())
                    .map(|&x| x * x)
                    .sum::<S>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    S::one()
                }
            }
            None => S::one(),
        };
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        for (key, g) in grads {
            let Some(param) = store.get(key) else { continue };
            let n = param.len();
            let m = self.m.entry(key.clone()).or_insert_with(|| vec![S::zero(); n]);
            let v = self.v.entry(key.clone()).or_insert_with(|| vec![S::zero(); n]);
            let mut values = param.to_vec();
            for i in 0..n {
                let gi = g[i] * scale;
                m[i] = self.beta1 * m[i] + (S::one() - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (S::one() - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                let decay = self.weight_decay * values[i];
                values[i] -= lr * (mh / (vh.sqrt() + self.eps) + decay);
            }
            store.set_values(key, values).expect("known key");
        }
    }
}
