//! Weighted BCE plus negative log soft-Dice.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the BCE term; the log soft-Dice term gets `1 − lambda`.
    pub lambda: f64,
    /// Additive smoothing in the soft-Dice ratio.
    pub sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.8,
            sigma: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("loss lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config(format!("loss sigma {} must be positive", self.sigma)));
        }
        Ok(())
    }
}

fn check(pred: &Tensor4, truth: &Tensor4, cfg: &LossConfig) -> Result<()> {
    cfg.validate()?;
    if pred.shape() != truth.shape() {
        return Err(Error::config(format!(
            "loss: prediction {:?} and truth {:?} differ in shape",
            pred.shape(),
            truth.shape()
        )));
    }
    for (i, (&p, &t)) in pred.data().iter().zip(truth.data()).enumerate() {
        if t != 0.0 && t != 1.0 {
            return Err(Error::Domain(format!("loss: truth {t} at flat index {i} is not binary")));
        }
        // An endpoint is only admissible where it equals the label (zero loss term).
        if !(p > 0.0 && p < 1.0) && p != t {
            return Err(Error::Domain(format!(
                "loss: prediction {p} at flat index {i} is outside (0, 1) for label {t}"
            )));
        }
    }
    Ok(())
}

struct Sums {
    bce: f64,
    inter: f64,
    total: f64,
}

fn sums(pred: &Tensor4, truth: &Tensor4) -> Sums {
    let mut s = Sums {
        bce: 0.0,
        inter: 0.0,
        total: 0.0,
    };
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        s.bce -= if t == 1.0 { p.ln() } else { (1.0 - p).ln() };
        s.inter += t * p;
        s.total += t + p;
    }
    s.bce /= pred.len() as f64;
    s
}

/// `λ·BCE − (1−λ)·ln((2·Σ t·p + σ) / (Σ t + Σ p + σ))`.
///
/// BCE is the mean over all pixels; the Dice sums run over the whole batch.
pub fn loss_value(pred: &Tensor4, truth: &Tensor4, cfg: &LossConfig) -> Result<f64> {
    check(pred, truth, cfg)?;
    let s = sums(pred, truth);
    Ok(cfg.lambda * s.bce
        - (1.0 - cfg.lambda) * ((2.0 * s.inter + cfg.sigma) / (s.total + cfg.sigma)).ln())
}

/// Differentiable form of [`loss_value`] w.r.t. `pred`.
pub fn segmentation_loss<'t>(pred: Var<'t>, truth: &Tensor4, cfg: LossConfig) -> Result<Var<'t>> {
    let p = pred.value();
    let value = loss_value(&p, truth, &cfg)?;
    let truth = truth.clone();
    Ok(pred.tape().op(
        Tensor4::scalar(value),
        &[pred],
        Box::new(move |ctx| {
            let p = ctx.inputs[0];
            let s = sums(p, &truth);
            let n = p.len() as f64;
            let num = 2.0 * s.inter + cfg.sigma;
            let den = s.total + cfg.sigma;
            let g = ctx.grad[0];
            let d = p
                .data()
                .iter()
                .zip(truth.data())
                .map(|(&p, &t)| {
                    let bce = if t == 1.0 { -1.0 / p } else { 1.0 / (1.0 - p) };
                    let dice = 2.0 * t / num - 1.0 / den;
                    g * (cfg.lambda * bce / n - (1.0 - cfg.lambda) * dice)
                })
                .collect();
            vec![Some(d)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor4 {
        Tensor4::from_vec([1, 1, 2, 2], v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let ones = t(&[1.0; 4]);
        assert_eq!(loss_value(&ones, &ones, &LossConfig::default()).unwrap(), 0.0);
        let mixed = t(&[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(loss_value(&mixed, &mixed, &LossConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn half_prediction_hand_value() {
        let l = loss_value(&t(&[0.5; 4]), &t(&[1.0; 4]), &LossConfig::default()).unwrap();
        let expect = 0.8 * 2f64.ln() - 0.2 * (5.0f64 / 7.0).ln();
        assert!((l - expect).abs() < 1e-12);
        assert!((expect - 0.6218).abs() < 1e-4);
    }

    #[test]
    fn lambda_one_is_mean_bce() {
        let p = t(&[0.2, 0.7, 0.9, 0.4]);
        let y = t(&[0.0, 1.0, 1.0, 0.0]);
        let cfg = LossConfig {
            lambda: 1.0,
            sigma: 1.0,
        };
        let bce = -(0.8f64.ln() + 0.7f64.ln() + 0.9f64.ln() + 0.6f64.ln()) / 4.0;
        assert!((loss_value(&p, &y, &cfg).unwrap() - bce).abs() < 1e-12);
    }

    #[test]
    fn domain_errors_are_not_clamped() {
        let cfg = LossConfig::default();
        assert!(matches!(
            loss_value(&t(&[0.5, 1.0, 0.5, 0.5]), &t(&[1.0, 0.0, 1.0, 1.0]), &cfg),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            loss_value(&t(&[0.5, 1.2, 0.5, 0.5]), &t(&[1.0; 4]), &cfg),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            loss_value(&t(&[0.5; 4]), &t(&[1.0, 0.5, 0.0, 0.0]), &cfg),
            Err(Error::Domain(_))
        ));
        assert!(LossConfig { lambda: 1.5, sigma: 1.0 }.validate().is_err());
        assert!(LossConfig { lambda: 0.5, sigma: 0.0 }.validate().is_err());
    }
}
