use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{AdeError, Result};
use crate::numerics::Tensor;

/// Adaptive moments with decoupled weight decay, plus global-norm clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    #[serde(default = "AdamWConfig::default_beta1")]
    pub beta1: f64,
    #[serde(default = "AdamWConfig::default_beta2")]
    pub beta2: f64,
    #[serde(default = "AdamWConfig::default_eps")]
    pub eps: f64,
    /// Applied to matrices only; norm weights are not decayed.
    #[serde(default = "AdamWConfig::default_weight_decay")]
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[serde(default = "AdamWConfig::default_clip")]
    pub clip_norm: f64,
}

impl AdamWConfig {
    fn default_beta1() -> f64 {
        0.9
    }
    fn default_beta2() -> f64 {
        0.95
    }
    fn default_eps() -> f64 {
        1e-8
    }
    fn default_weight_decay() -> f64 {
        0.1
    }
    fn default_clip() -> f64 {
        1.0
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: Self::default_beta1(),
            beta2: Self::default_beta2(),
            eps: Self::default_eps(),
            weight_decay: Self::default_weight_decay(),
            clip_norm: Self::default_clip(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor<f32>,
    pub v: Tensor<f32>,
}

/// One parameter update request: the tensor, its gradient, and whether it
/// is subject to weight decay.
pub struct Update<'a> {
    pub name: &'a str,
    pub value: &'a mut Tensor<f32>,
    pub grad: &'a Tensor<f32>,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    /// Updates applied since the moments were last reset.
    pub step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    pub fn restore(config: AdamWConfig, step: u64, moments: BTreeMap<String, Moments>) -> Self {
        OptimizerState { config, step, moments }
    }

    /// Drops all history when the trainable set (names and shapes) differs
    /// from the one the moments were built for. Returns whether it reset.
    pub fn sync(&mut self, trainable: &[(String, Vec<usize>)]) -> bool {
        let same = self.moments.len() == trainable.len()
            && trainable
                .iter()
                .all(|(n, s)| self.moments.get(n).is_some_and(|m| m.m.shape() == s.as_slice()));
        if same {
            return false;
        }
        self.step = 0;
        self.moments = trainable
            .iter()
            .map(|(n, s)| {
                (
                    n.clone(),
                    Moments {
                        m: Tensor::zeros(s),
                        v: Tensor::zeros(s),
                    },
                )
            })
            .collect();
        true
    }

    /// Global L2 norm of the gradients, accumulated in f64 in call order.
    pub fn global_norm(grads: &[&Tensor<f32>]) -> f64 {
        grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one step to every update. Returns the pre-clip gradient norm.
    pub fn apply(&mut self, updates: Vec<Update<'_>>, lr: f64) -> Result<f64> {
        let norm = Self::global_norm(&updates.iter().map(|u| u.grad).collect::<Vec<_>>());
        if !norm.is_finite() {
            return Err(AdeError::Degenerate(format!("gradient norm is {norm}")));
        }
        let c = self.config.clip_norm;
        let clip = if c > 0.0 && norm > c { c / norm } else { 1.0 };
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for u in updates {
            let state = self
                .moments
                .get_mut(u.name)
                .ok_or_else(|| AdeError::usage(format!("no optimizer state for {}", u.name)))?;
            if u.grad.shape() != u.value.shape() {
                return Err(AdeError::Shape {
                    op: "adamw",
                    lhs: u.value.shape().to_vec(),
                    rhs: u.grad.shape().to_vec(),
                });
            }
            let decay = if u.decay { c.weight_decay } else { 0.0 };
            let (m, v) = (state.m.data_mut(), state.v.data_mut());
            for (i, (p, &g)) in u.value.data_mut().iter_mut().zip(u.grad.data()).enumerate() {
                let g = g as f64 * clip;
                let mi = c.beta1 * m[i] as f64 + (1.0 - c.beta1) * g;
                let vi = c.beta2 * v[i] as f64 + (1.0 - c.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let step = (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                let pv = *p as f64;
                *p = (pv - lr * (step + decay * pv)) as f32;
            }
        }
        Ok(norm)
    }
}
