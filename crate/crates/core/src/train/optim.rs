//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::model::TensorKind;
use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Denominator guard in the update.
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl OptimizerConfig {
    /// Values used for full-size fine-tuning.
    pub fn full_scale() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.1,
            lr_max: 1e-5,
            lr_min: 1e-7,
            eps: 1e-8,
        }
    }

    /// Same moments and decay with a larger step size, for small decoders
    /// trained from scratch on a handful of tiles.
    pub fn desk() -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 1e-5,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::InvalidArgument(format!(
                "betas must lie in (0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::InvalidArgument(
                "weight_decay must be >= 0 and eps > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total_steps`;
/// later steps stay at `lr_min`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return lr_min;
    }
    let t = step as f64 / total_steps as f64;
    lr_min + (lr_max - lr_min) * (1.0 + (PI * t).cos()) / 2.0
}

const M_PREFIX: &str = "adamw.m.";
const V_PREFIX: &str = "adamw.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: OptimizerConfig,
    /// Number of updates applied so far.
    pub t: u64,
    moments: BTreeMap<String, (Array2<f64>, Array2<f64>)>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update. Parameters absent from `grads` are left alone,
    /// including their decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Array2<f64>)], lr: f64) -> Result<()> {
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter `{name}`")))?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Array2::zeros(g.dim()), Array2::zeros(g.dim())));
            Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    *p -= lr * c.weight_decay * *p;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                });
        }
        Ok(())
    }

    pub fn state_tensors(&self) -> Vec<(String, TensorKind, Array2<f64>)> {
        let mut out = Vec::with_capacity(2 * self.moments.len());
        for (name, (m, v)) in &self.moments {
            out.push((format!("{M_PREFIX}{name}"), TensorKind::Optimizer, m.clone()));
            out.push((format!("{V_PREFIX}{name}"), TensorKind::Optimizer, v.clone()));
        }
        out
    }

    pub fn from_state<'a>(
        config: OptimizerConfig,
        t: u64,
        tensors: impl Iterator<Item = (&'a str, &'a Array2<f64>)>,
    ) -> Result<Self> {
        let mut firsts = BTreeMap::new();
        let mut seconds = BTreeMap::new();
        for (name, value) in tensors {
            if let Some(p) = name.strip_prefix(M_PREFIX) {
                firsts.insert(p.to_string(), value.clone());
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                seconds.insert(p.to_string(), value.clone());
            } else {
                return Err(Error::Checkpoint(format!("unknown optimizer tensor `{name}`")));
            }
        }
        let mut moments = BTreeMap::new();
        for (name, m) in firsts {
            let v = seconds
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing second moment for `{name}`")))?;
            moments.insert(name, (m, v));
        }
        if let Some(name) = seconds.keys().next() {
            return Err(Error::Checkpoint(format!("missing first moment for `{name}`")));
        }
        Ok(Self { config, t, moments })
    }
}
