use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with per-parameter state keyed by name.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advances the bias-correction counter; call once per optimizer step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &Tensor<T>, grad: &[T]) -> Result<Tensor<T>> {
        if grad.len() != param.numel() {
            return Err(Error::dim(
                "adam",
                format!("{name}: {} gradients for {} values", grad.len(), param.numel()),
            ));
        }
        let c = &self.config;
        let (b1, b2): (T, T) = (lit(c.beta1), lit(c.beta2));
        let step = self.step.max(1) as i32;
        let bc1 = T::one() - b1.powi(step);
        let bc2 = T::one() - b2.powi(step);
        let (lr, eps): (T, T) = (lit(c.lr), lit(c.eps));
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![T::zero(); grad.len()], vec![T::zero(); grad.len()]));
        let mut out = param.to_vec();
        for i in 0..grad.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * grad[i];
            v[i] = b2 * v[i] + (T::one() - b2) * grad[i] * grad[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            out[i] -= lr * mh / (vh.sqrt() + eps);
        }
        Tensor::new(param.shape(), out)
    }

    /// Updates every listed parameter of `store`; moments are keyed by
    /// `prefix` + parameter name.
    pub fn apply(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(ParamId, Vec<T>)],
        prefix: &str,
    ) -> Result<()> {
        for (id, g) in grads {
            let key = format!("{prefix}{}", store.name(*id));
            let next = self.update(&key, store.get(*id), g)?;
            store.set(*id, next)?;
        }
        Ok(())
    }

    /// Moment buffers as named tensors, for checkpoints.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (name, (m, v)) in &self.moments {
            out.push((format!("adam.m.{name}"), Tensor::from_parts(vec![m.len()], m.clone())));
            out.push((format!("adam.v.{name}"), Tensor::from_parts(vec![v.len()], v.clone())));
        }
        out
    }

    pub fn restore(config: AdamConfig, step: u64, state: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut adam = Adam::new(config);
        adam.step = step;
        for (key, t) in state {
            if let Some(name) = key.strip_prefix("adam.m.") {
                adam.moments.entry(name.to_string()).or_default().0 = t.to_vec();
            } else if let Some(name) = key.strip_prefix("adam.v.") {
                adam.moments.entry(name.to_string()).or_default().1 = t.to_vec();
            }
        }
        if adam.moments.values().any(|(m, v)| m.len() != v.len()) {
            return Err(Error::Input("mismatched Adam moment buffers".into()));
        }
        Ok(adam)
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [&mut Vec<T>], max_norm: f64) -> f64 {
    let total: T = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| v * v)
        .sum::<T>()
        .sqrt();
    let norm = total.to_f64_lossy();
    if norm > max_norm && norm > 0.0 {
        let s: T = lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
