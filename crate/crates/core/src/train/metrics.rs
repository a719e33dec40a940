//! Overlap metrics on binary masks and their summary statistics.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Probability threshold used to binarize predictions.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overlap {
    pub pred: usize,
    pub truth: usize,
    pub inter: usize,
}

impl Overlap {
    pub fn from_masks(pred: &[bool], truth: &[bool]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Usage(format!(
                "mask sizes differ: {} vs {}",
                pred.len(),
                truth.len()
            )));
        }
        let mut o = Overlap::default();
        for (&p, &t) in pred.iter().zip(truth) {
            o.pred += p as usize;
            o.truth += t as usize;
            o.inter += (p && t) as usize;
        }
        Ok(o)
    }

    /// `|P∩T| / |P∪T|`; 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let union = self.pred + self.truth - self.inter;
        if union == 0 {
            1.0
        } else {
            self.inter as f64 / union as f64
        }
    }

    /// `2|P∩T| / (|P| + |T|)`; 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let total = self.pred + self.truth;
        if total == 0 {
            1.0
        } else {
            2.0 * self.inter as f64 / total as f64
        }
    }
}

/// Per-sample `(iou, dice)` for probability maps against binary truth.
pub fn score_batch(probs: &Tensor4, truth: &Tensor4) -> Result<Vec<(f64, f64)>> {
    if probs.shape() != truth.shape() {
        return Err(Error::Usage(format!(
            "prediction {:?} and truth {:?} differ in shape",
            probs.shape(),
            truth.shape()
        )));
    }
    let per = probs.len() / probs.n().max(1);
    probs
        .data()
        .chunks(per)
        .zip(truth.data().chunks(per))
        .map(|(p, t)| {
            let p: Vec<bool> = p.iter().map(|&v| v >= THRESHOLD).collect();
            let t: Vec<bool> = t.iter().map(|&v| v >= THRESHOLD).collect();
            let o = Overlap::from_masks(&p, &t)?;
            Ok((o.iou(), o.dice()))
        })
        .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: String,
    pub ious: Vec<f64>,
    pub dices: Vec<f64>,
}

impl ClassMetrics {
    pub fn iou(&self) -> (f64, f64) {
        mean_std(&self.ious)
    }

    pub fn dice(&self) -> (f64, f64) {
        mean_std(&self.dices)
    }
}

/// Per-class summaries plus an overall column equal to the average of the
/// class means (and of the class standard deviations).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
}

/// `"mean ± std"` in percent with two decimals.
pub fn pct(ms: (f64, f64)) -> String {
    format!("{:.2} ± {:.2}", 100.0 * ms.0, 100.0 * ms.1)
}

impl MetricsReport {
    pub fn overall(&self) -> ((f64, f64), (f64, f64)) {
        let k = self.classes.len() as f64;
        let avg = |f: &dyn Fn(&ClassMetrics) -> (f64, f64)| {
            let (m, s) = self
                .classes
                .iter()
                .map(f)
                .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
            (m / k, s / k)
        };
        (avg(&|c| c.iou()), avg(&|c| c.dice()))
    }

    /// One row per class plus `overall`, percentages with two decimals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,iou,dice,iou_mean,iou_std,dice_mean,dice_std\n");
        let mut row = |name: &str, iou: (f64, f64), dice: (f64, f64)| {
            s.push_str(&format!(
                "{name},{},{},{:.2},{:.2},{:.2},{:.2}\n",
                pct(iou),
                pct(dice),
                100.0 * iou.0,
                100.0 * iou.1,
                100.0 * dice.0,
                100.0 * dice.1
            ));
        };
        for c in &self.classes {
            row(&c.class, c.iou(), c.dice());
        }
        let (iou, dice) = self.overall();
        row("overall", iou, dice);
        s
    }

    /// Raw per-sample values: `class,sample,iou,dice`.
    pub fn samples_csv(&self) -> String {
        let mut s = String::from("class,sample,iou,dice\n");
        for c in &self.classes {
            for (i, (iou, dice)) in c.ious.iter().zip(&c.dices).enumerate() {
                s.push_str(&format!("{},{i},{iou},{dice}\n", c.class));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn identical_and_disjoint() {
        let a = mask(&[1, 1, 0, 0]);
        let o = Overlap::from_masks(&a, &a).unwrap();
        assert_eq!((o.iou(), o.dice()), (1.0, 1.0));
        let b = mask(&[0, 0, 1, 1]);
        let o = Overlap::from_masks(&a, &b).unwrap();
        assert_eq!((o.iou(), o.dice()), (0.0, 0.0));
    }

    #[test]
    fn set_counts() {
        // |P| = 6, |T| = 4, |P∩T| = 3
        let p = mask(&[1, 1, 1, 1, 1, 1, 0, 0, 0]);
        let t = mask(&[1, 1, 1, 0, 0, 0, 1, 0, 0]);
        let o = Overlap::from_masks(&p, &t).unwrap();
        assert_eq!(o.iou(), 3.0 / 7.0);
        assert_eq!(o.dice(), 6.0 / 10.0);
    }

    #[test]
    fn empty_conventions() {
        let e = mask(&[0, 0, 0]);
        let one = mask(&[0, 1, 0]);
        assert_eq!(Overlap::from_masks(&e, &e).unwrap().iou(), 1.0);
        assert_eq!(Overlap::from_masks(&e, &e).unwrap().dice(), 1.0);
        assert_eq!(Overlap::from_masks(&e, &one).unwrap().iou(), 0.0);
        assert_eq!(Overlap::from_masks(&one, &e).unwrap().dice(), 0.0);
        assert!(Overlap::from_masks(&e, &mask(&[0, 0])).is_err());
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn report_layout() {
        let r = MetricsReport {
            classes: vec![
                ClassMetrics { class: "pupil".into(), ious: vec![1.0, 0.5], dices: vec![1.0, 2.0 / 3.0] },
                ClassMetrics { class: "iris".into(), ious: vec![1.0], dices: vec![1.0] },
            ],
        };
        let csv = r.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 2 + 1);
        assert!(lines[1].starts_with("pupil,75.00 ± 25.00,"));
        assert!(lines[3].starts_with("overall,87.50 ± 12.50,"));
    }
}
