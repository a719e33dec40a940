//! Baseline-vs-calibrated comparison grid: one training run per
//! (learning rate, network, class) cell, reported as IoU mean ± std.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::synth::{generate_split, PhantomClass, PhantomSpec, Split};
use crate::train::loss::LossConfig;
use crate::train::metrics::{mean_std, pct};
use crate::train::{train, EpochRecord, Observer, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub learning_rates: Vec<f64>,
    pub variants: Vec<Variant>,
    pub classes: Vec<PhantomClass>,
    pub width_scale: usize,
    pub image_size: usize,
    pub train_count: usize,
    pub test_count: usize,
    /// Everything except `lr0` and `seed`, which the grid sets per cell.
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            learning_rates: vec![0.002, 0.005],
            variants: vec![Variant::Baseline, Variant::ReCal],
            classes: vec![PhantomClass::Lens, PhantomClass::Iris, PhantomClass::Instrument],
            width_scale: 8,
            image_size: 32,
            train_count: 64,
            test_count: 16,
            train: TrainConfig {
                batch_size: 8,
                ..TrainConfig::default()
            },
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub lr: f64,
    pub variant: Variant,
    pub class: PhantomClass,
    /// Epoch with the highest held-out IoU, and its statistics.
    pub best_epoch: usize,
    pub iou: (f64, f64),
    pub dice: (f64, f64),
    pub log: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub config: AblationConfig,
    /// Row-major: learning rate, then variant, then class.
    pub cells: Vec<Cell>,
}

impl AblationReport {
    pub fn rows(&self) -> usize {
        self.config.learning_rates.len() * self.config.variants.len()
    }

    pub fn cell(&self, lr: f64, variant: Variant, class: PhantomClass) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.lr == lr && c.variant == variant && c.class == class)
    }

    /// `learning_rate,network,<class>...` with `mean ± std` IoU percentages.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("learning_rate,network");
        for c in &self.config.classes {
            s.push(',');
            s.push_str(c.name());
        }
        s.push('\n');
        for chunk in self.cells.chunks(self.config.classes.len()) {
            s.push_str(&format!("{},{}", chunk[0].lr, chunk[0].variant.display_name()));
            for c in chunk {
                s.push(',');
                s.push_str(&pct(c.iou));
            }
            s.push('\n');
        }
        s
    }

    /// Aligned plain-text version of [`to_csv`](Self::to_csv).
    pub fn to_table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .to_csv()
            .lines()
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect();
        let cols = rows[0].len();
        let width: Vec<usize> = (0..cols)
            .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for (i, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .zip(&width)
                .map(|(v, &w)| format!("{v:<w$}"))
                .collect();
            s.push_str(line.join("  ").trim_end());
            s.push('\n');
            if i == 0 {
                s.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (cols - 1)));
                s.push('\n');
            }
        }
        s
    }
}

/// Runs every cell. Data depend on `(seed, class)` only and initial weights
/// on `(seed, layer name)` only, so cells sharing a class see identical data
/// and the two networks share every backbone weight at start.
pub fn run(config: &AblationConfig, progress: &mut dyn FnMut(&Cell)) -> Result<AblationReport> {
    if config.learning_rates.is_empty() || config.variants.is_empty() || config.classes.is_empty() {
        return Err(Error::config("ablation grid has an empty axis"));
    }
    let mut cells = Vec::new();
    for &lr in &config.learning_rates {
        for &variant in &config.variants {
            for &class in &config.classes {
                let spec = PhantomSpec::new(class, (config.image_size, config.image_size), config.seed);
                let train_set = generate_split(&spec, Split::Train, config.train_count)?;
                let test_set = generate_split(&spec, Split::Test, config.test_count)?;
                let mc = ModelConfig::new(variant, config.width_scale, (config.image_size, config.image_size));
                let mut model = Model::build(mc, config.seed)?;
                let tc = TrainConfig {
                    lr0: lr,
                    seed: config.seed,
                    ..config.train.clone()
                };
                let out = train(&mut model, &train_set, &test_set, &tc, config.loss, &mut () as &mut dyn Observer)?;
                let best = out.best_record();
                let cell = Cell {
                    lr,
                    variant,
                    class,
                    best_epoch: out.best_epoch,
                    iou: best.val_iou,
                    dice: best.val_dice,
                    log: out.records.clone(),
                };
                progress(&cell);
                cells.push(cell);
            }
        }
    }
    Ok(AblationReport {
        config: config.clone(),
        cells,
    })
}

/// Mean held-out IoU of each variant across the grid.
pub fn variant_means(report: &AblationReport) -> Vec<(Variant, f64)> {
    report
        .config
        .variants
        .iter()
        .map(|&v| {
            let xs: Vec<f64> = report.cells.iter().filter(|c| c.variant == v).map(|c| c.iou.0).collect();
            (v, mean_std(&xs).0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shape() {
        let cfg = AblationConfig {
            classes: vec![PhantomClass::Pupil, PhantomClass::Iris],
            width_scale: 16,
            image_size: 16,
            train_count: 4,
            test_count: 2,
            train: TrainConfig {
                epochs: 1,
                batch_size: 4,
                ..TrainConfig::default()
            },
            ..AblationConfig::default()
        };
        let mut seen = 0;
        let r = run(&cfg, &mut |_| seen += 1).unwrap();
        assert_eq!(seen, 8);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "learning_rate,network,pupil,iris");
        assert_eq!(lines.len(), 1 + r.rows());
        assert!(lines[1].starts_with("0.002,Baseline,"));
        assert!(lines[4].starts_with("0.005,ReCal-Net,"));
        assert!(lines.iter().all(|l| l.split(',').count() == 4));
        assert!(r.cell(0.005, Variant::ReCal, PhantomClass::Iris).is_some());
        assert_eq!(r.to_table().lines().count(), 2 + r.rows());
    }
}
