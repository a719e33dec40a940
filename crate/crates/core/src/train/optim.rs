//! SGD with momentum, gradient clipping, and the step-decay schedule.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipMode {
    /// Rescale all gradients together when their joint L2 norm exceeds the threshold.
    GlobalNorm,
    /// Clamp each gradient element to `[-threshold, threshold]`.
    Value,
}

impl fmt::Display for ClipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClipMode::GlobalNorm => "norm",
            ClipMode::Value => "value",
        })
    }
}

impl FromStr for ClipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "norm" => Ok(ClipMode::GlobalNorm),
            "value" => Ok(ClipMode::Value),
            _ => Err(Error::config(format!("unknown clip mode `{s}` (expected norm or value)"))),
        }
    }
}

/// Step-decay schedule: `lr0 · factor^⌊epoch / every⌋`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecay {
    pub lr0: f64,
    pub factor: f64,
    pub every: usize,
}

impl StepDecay {
    pub fn lr(&self, epoch: usize) -> f64 {
        self.lr0 * self.factor.powi((epoch / self.every.max(1)) as i32)
    }
}

/// Fails on the first non-finite gradient, naming its slot.
pub fn check_finite(store: &ParamStore) -> Result<()> {
    for p in store.params() {
        if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient {} in `{}` at index {i}",
                p.grad[i], p.name
            )));
        }
    }
    Ok(())
}

/// Clips stored gradients in place and returns the pre-clip global norm.
pub fn clip_gradients(store: &mut ParamStore, threshold: f64, mode: ClipMode) -> Result<f64> {
    check_finite(store)?;
    let norm = store.grad_norm();
    match mode {
        ClipMode::GlobalNorm => {
            if norm > threshold {
                let scale = threshold / norm;
                for p in store.params_mut() {
                    p.grad.iter_mut().for_each(|g| *g *= scale);
                }
            }
        }
        ClipMode::Value => {
            for p in store.params_mut() {
                p.grad
                    .iter_mut()
                    .for_each(|g| *g = g.clamp(-threshold, threshold));
            }
        }
    }
    Ok(norm)
}

/// `v ← μ·v + g; θ ← θ − lr·v` for every parameter.
pub fn sgd_step(store: &mut ParamStore, lr: f64, momentum: f64) -> Result<()> {
    check_finite(store)?;
    for p in store.params_mut() {
        for ((w, v), &g) in p.data.iter_mut().zip(p.velocity.iter_mut()).zip(&p.grad) {
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
    }
    Ok(())
}
