//! Loss, optimizer, metrics, and the epoch loop.

pub mod loss;
pub mod metrics;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::synth::SampleBatch;
use crate::tensor::Tensor4;

use loss::{segmentation_loss, LossConfig};
use metrics::{mean_std, score_batch};
use optim::{clip_gradients, sgd_step, ClipMode, StepDecay};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub clip_threshold: f64,
    pub clip_mode: ClipMode,
    pub decay_factor: f64,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Passes over the training set per epoch. Tiny datasets use this to keep
    /// the per-epoch step count (and so the decay schedule) meaningful.
    pub epoch_repeats: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.005,
            momentum: 0.9,
            clip_threshold: 0.1,
            clip_mode: ClipMode::GlobalNorm,
            decay_factor: 0.8,
            decay_every: 2,
            epochs: 30,
            batch_size: 4,
            epoch_repeats: 1,
            max_steps: None,
            shuffle: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> StepDecay {
        StepDecay {
            lr0: self.lr0,
            factor: self.decay_factor,
            every: self.decay_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr0", self.lr0),
            ("clip_threshold", self.clip_threshold),
            ("decay_factor", self.decay_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("train.{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("train.momentum {} outside [0, 1)", self.momentum)));
        }
        if self.decay_factor > 1.0 {
            return Err(Error::config(format!(
                "train.decay_factor {} would grow the learning rate",
                self.decay_factor
            )));
        }
        for (name, v) in [
            ("decay_every", self.decay_every),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("epoch_repeats", self.epoch_repeats),
        ] {
            if v == 0 {
                return Err(Error::config(format!("train.{name} must be at least 1")));
            }
        }
        if self.max_steps == Some(0) {
            return Err(Error::config("train.max_steps must be at least 1"));
        }
        Ok(())
    }
}

pub const EPOCH_CSV_HEADER: &str =
    "epoch,lr,train_loss,val_iou_mean,val_iou_std,val_dice_mean,val_dice_std";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the per-step losses of this epoch.
    pub train_loss: f64,
    pub val_iou: (f64, f64),
    pub val_dice: (f64, f64),
    pub steps: usize,
}

impl EpochRecord {
    /// Shortest round-trip formatting, so equal runs give equal bytes.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.val_iou.0,
            self.val_iou.1,
            self.val_dice.0,
            self.val_dice.1
        )
    }
}

pub fn epoch_csv(records: &[EpochRecord]) -> String {
    let mut s = format!("{EPOCH_CSV_HEADER}\n");
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Called after every epoch; checkpointing and logging live here.
pub trait Observer {
    fn epoch_end(&mut self, record: &EpochRecord, model: &Model, is_best: bool) -> Result<()>;
}

impl Observer for () {
    fn epoch_end(&mut self, _: &EpochRecord, _: &Model, _: bool) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Weights at the end of the epoch with the highest validation IoU
    /// (the earliest one on ties).
    pub best: Model,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn best_record(&self) -> &EpochRecord {
        &self.records[self.best_epoch]
    }
}

/// One forward/backward/clip/update on a batch; returns the pre-update loss.
pub fn train_step(
    model: &mut Model,
    images: &Tensor4,
    masks: &Tensor4,
    lr: f64,
    cfg: &TrainConfig,
    loss_cfg: LossConfig,
) -> Result<f64> {
    let tape = Tape::new();
    let pass = model.forward(&tape, images, true, &[])?;
    let loss = segmentation_loss(pass.probs, masks, loss_cfg)?;
    let value = loss.value().data()[0];
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss is {value}")));
    }
    let grads = tape.backward(loss)?;
    let bn = pass.bn_updates;
    drop(pass.stages);
    let store = model.store_mut();
    store.set_grads(&grads);
    clip_gradients(store, cfg.clip_threshold, cfg.clip_mode)?;
    sgd_step(store, lr, cfg.momentum)?;
    model.commit_bn(&bn);
    Ok(value)
}

/// Eval-mode per-sample `(iou, dice)`, in sample order.
pub fn evaluate(model: &Model, data: &SampleBatch, batch_size: usize) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size).min(data.len())).collect();
        let (images, masks) = data.gather(&idx);
        out.extend(score_batch(&model.predict(&images)?, &masks)?);
    }
    Ok(out)
}

/// Mean loss of `model` on `data` in training mode (batch statistics) without
/// updating anything.
pub fn batch_loss(model: &Model, data: &SampleBatch, loss_cfg: LossConfig) -> Result<f64> {
    let tape = Tape::new();
    let pass = model.forward(&tape, &data.images, true, &[])?;
    let l = segmentation_loss(pass.probs, &data.masks, loss_cfg)?;
    let v = l.value().data()[0];
    Ok(v)
}

fn with_context(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numerical(m) | Error::Domain(m) => {
            Error::Numerical(format!("epoch {epoch}, step {step}: {m}"))
        }
        other => other,
    }
}

/// Runs the epoch loop. The schedule is indexed by zero-based epoch; each
/// epoch visits every training sample `epoch_repeats` times in an order drawn
/// from `(seed, epoch)`.
pub fn train(
    model: &mut Model,
    train_set: &SampleBatch,
    val_set: &SampleBatch,
    cfg: &TrainConfig,
    loss_cfg: LossConfig,
    observer: &mut dyn Observer,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if val_set.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    model.check_input(&train_set.images)?;

    let schedule = cfg.schedule();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Model)> = None;
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order = Vec::with_capacity(train_set.len() * cfg.epoch_repeats);
        for _ in 0..cfg.epoch_repeats {
            let mut pass: Vec<usize> = (0..train_set.len()).collect();
            if cfg.shuffle {
                pass.shuffle(&mut rng);
            }
            order.extend(pass);
        }
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let (images, masks) = train_set.gather(chunk);
            let l = train_step(model, &images, &masks, lr, cfg, loss_cfg)
                .map_err(|e| with_context(e, epoch, step))?;
            losses.push(l);
            step += 1;
        }
        if losses.is_empty() {
            break 'epochs;
        }
        let scores = evaluate(model, val_set, cfg.batch_size)?;
        let ious: Vec<f64> = scores.iter().map(|s| s.0).collect();
        let dices: Vec<f64> = scores.iter().map(|s| s.1).collect();
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_iou: mean_std(&ious),
            val_dice: mean_std(&dices),
            steps: losses.len(),
        };
        let is_best = best.as_ref().map_or(true, |(_, iou, _)| record.val_iou.0 > *iou);
        if is_best {
            best = Some((epoch, record.val_iou.0, model.clone()));
        }
        observer.epoch_end(&record, model, is_best)?;
        records.push(record);
    }

    let (best_epoch, _, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        records,
        best_epoch,
        best,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};
    use crate::synth::{generate, PhantomClass, PhantomSpec};

    fn data(n: usize, seed: u64) -> SampleBatch {
        generate(&PhantomSpec::new(PhantomClass::Pupil, (16, 16), seed), n).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 2,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn log_lr_follows_schedule_and_runs_repeat_exactly() {
        let run = || {
            let mut m = Model::build(ModelConfig::new(Variant::ReCal, 16, (16, 16)), 1).unwrap();
            train(&mut m, &data(4, 1), &data(2, 2), &cfg(), LossConfig::default(), &mut ()).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(epoch_csv(&a.records), epoch_csv(&b.records));
        let sched = cfg().schedule();
        for r in &a.records {
            assert_eq!(r.lr, sched.lr(r.epoch));
            assert_eq!(r.steps, 2);
        }
        assert_eq!(a.steps, 6);
        let best = a.records.iter().map(|r| r.val_iou.0).fold(f64::MIN, f64::max);
        assert_eq!(a.best_record().val_iou.0, best);
    }

    #[test]
    fn max_steps_stops_mid_epoch() {
        let mut m = Model::build(ModelConfig::new(Variant::Baseline, 16, (16, 16)), 1).unwrap();
        let c = TrainConfig {
            max_steps: Some(3),
            ..cfg()
        };
        let out = train(&mut m, &data(4, 1), &data(2, 2), &c, LossConfig::default(), &mut ()).unwrap();
        assert_eq!(out.steps, 3);
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.records[1].steps, 1);
    }

    #[test]
    fn nan_weights_abort_with_context() {
        let mut m = Model::build(ModelConfig::new(Variant::ReCal, 16, (16, 16)), 1).unwrap();
        let id = m.store().find("head.bias").unwrap();
        m.store_mut().param_mut(id).data[0] = f64::NAN;
        let err = train(&mut m, &data(4, 1), &data(2, 2), &cfg(), LossConfig::default(), &mut ())
            .unwrap_err();
        match err {
            Error::Numerical(msg) => assert!(msg.starts_with("epoch 0, step 0:"), "{msg}"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn invalid_config_rejected() {
        for bad in [
            TrainConfig { lr0: 0.0, ..cfg() },
            TrainConfig { momentum: 1.0, ..cfg() },
            TrainConfig { batch_size: 0, ..cfg() },
            TrainConfig { decay_factor: 1.5, ..cfg() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
