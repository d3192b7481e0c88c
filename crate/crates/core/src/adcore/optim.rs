//! SGD, Adadelta (Zeiler 2012) and Adam (Kingma & Ba 2014) as pure updates.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::params::{sgd_step, GradientMap, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adadelta,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adadelta" => Ok(Self::Adadelta),
            "adam" => Ok(Self::Adam),
            other => Err(Error::invalid(format!("unknown optimizer kind `{other}`"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adadelta => "adadelta",
            Self::Adam => "adam",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Adadelta decay.
    pub rho: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            rho: 0.0,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
        }
    }

    pub fn adadelta() -> Self {
        Self {
            kind: OptimizerKind::Adadelta,
            lr: 1.0,
            rho: 0.95,
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-6,
        }
    }

    pub fn adam() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            rho: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    /// Published defaults for `kind`; `lr` overrides the learning rate when given.
    pub fn defaults(kind: OptimizerKind, lr: Option<f64>) -> Self {
        let base = match kind {
            OptimizerKind::Sgd => Self::sgd(0.1),
            OptimizerKind::Adadelta => Self::adadelta(),
            OptimizerKind::Adam => Self::adam(),
        };
        match lr {
            Some(lr) => base.with_lr(lr),
            None => base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    /// Adam: first and second moments. Adadelta: E[g^2] and E[dx^2].
    slots: BTreeMap<String, [Tensor; 2]>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn accumulators(&self, name: &str) -> Option<&[Tensor; 2]> {
        self.slots.get(name)
    }

    /// Applies one update, returning the advanced state and new parameters.
    /// Neither `self` nor `params` is modified.
    pub fn step(&self, params: &ParamSet, grads: &GradientMap) -> Result<(OptimizerState, ParamSet)> {
        grads.check_matches(params)?;
        let cfg = &self.config;
        if !(cfg.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        let mut next = self.clone();
        next.step += 1;

        if cfg.kind == OptimizerKind::Sgd {
            return Ok((next, sgd_step(params, grads, cfg.lr)?));
        }

        let mut out = params.clone();
        for (name, g) in grads.iter() {
            let slots = next
                .slots
                .entry(name.clone())
                .or_insert_with(|| [Tensor::zeros(g.shape()), Tensor::zeros(g.shape())]);
            if slots[0].shape() != g.shape() {
                return Err(Error::ParamMismatch(format!("accumulator shape for `{name}`")));
            }
            let [first, second] = slots;
            let p = out.get_mut(name).expect("checked above");
            let (p, g) = (p.data_mut(), g.data());
            let (first, second) = (first.data_mut(), second.data_mut());
            match cfg.kind {
                OptimizerKind::Adam => {
                    let t = next.step as i32;
                    let bc1 = 1.0 - cfg.beta1.powi(t);
                    let bc2 = 1.0 - cfg.beta2.powi(t);
                    for i in 0..g.len() {
                        first[i] = cfg.beta1 * first[i] + (1.0 - cfg.beta1) * g[i];
                        second[i] = cfg.beta2 * second[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                        let m_hat = first[i] / bc1;
                        let v_hat = second[i] / bc2;
                        p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                    }
                }
                OptimizerKind::Adadelta => {
                    for i in 0..g.len() {
                        first[i] = cfg.rho * first[i] + (1.0 - cfg.rho) * g[i] * g[i];
                        let dx = -((second[i] + cfg.eps).sqrt() / (first[i] + cfg.eps).sqrt()) * g[i];
                        second[i] = cfg.rho * second[i] + (1.0 - cfg.rho) * dx * dx;
                        p[i] += cfg.lr * dx;
                    }
                }
                OptimizerKind::Sgd => unreachable!(),
            }
        }
        Ok((next, out))
    }
}
