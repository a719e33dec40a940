//! Flat `key = value` run configuration with `model.`, `train.` and `data.`
//! sections. Resolution order: defaults, then the config file, then flags.
//! The seed additionally falls back to `RECAL_SEED` when neither the file nor
//! a flag sets it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use recal_core::model::{ModelConfig, Variant};
use recal_core::synth::augment::AugmentKind;
use recal_core::synth::{PhantomClass, PhantomSpec};
use recal_core::train::loss::LossConfig;
use recal_core::train::optim::ClipMode;
use recal_core::train::TrainConfig;
use recal_core::{Error, Result};

pub const SEED_ENV: &str = "RECAL_SEED";

/// Every accepted key with its default value.
const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("model.variant", "recal"),
    ("model.width_scale", "8"),
    ("model.input_size", "64"),
    ("model.placements", "11111"),
    ("train.lr", "0.005"),
    ("train.momentum", "0.9"),
    ("train.clip_threshold", "0.1"),
    ("train.clip_mode", "norm"),
    ("train.decay_factor", "0.8"),
    ("train.decay_every", "2"),
    ("train.epochs", "30"),
    ("train.batch_size", "4"),
    ("train.epoch_repeats", "1"),
    ("train.max_steps", "none"),
    ("train.loss_lambda", "0.8"),
    ("train.loss_sigma", "1"),
    ("data.root", ""),
    ("data.class", "pupil"),
    ("data.train_count", "64"),
    ("data.test_count", "16"),
    ("data.augment", ""),
];

/// Fully resolved key/value set; serializes to the exact text echoed into run
/// directories.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

/// Where the seed came from, for the run log.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedSource {
    Default,
    File,
    Env,
    Flag,
}

impl RunConfig {
    pub fn defaults() -> Self {
        RunConfig {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown or repeated
    /// keys are errors reported with their line.
    pub fn parse_into(&mut self, text: &str, origin: &Path) -> Result<Vec<String>> {
        let mut set = Vec::new();
        let mut offset = 0u64;
        for (n, raw) in text.split_inclusive('\n').enumerate() {
            let at = offset;
            offset += raw.len() as u64;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                offset: at,
                msg: format!("line {}: {msg}", n + 1),
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !self.values.contains_key(k) {
                return Err(err(format!("unknown key `{k}`")));
            }
            if set.iter().any(|s| s == k) {
                return Err(err(format!("key `{k}` given twice")));
            }
            self.values.insert(k.to_string(), v.to_string());
            set.push(k.to_string());
        }
        Ok(set)
    }

    pub fn load_file(&mut self, path: &Path) -> Result<Vec<String>> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        self.parse_into(&text, path)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(Error::Usage(format!("unknown key `{key}`"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let variant: Variant = self.get("model.variant").parse()?;
        let size: usize = self.parse("model.input_size")?;
        let mut m = ModelConfig::new(variant, self.parse("model.width_scale")?, (size, size));
        let p = self.get("model.placements");
        if p.len() != 5 || !p.chars().all(|c| c == '0' || c == '1') {
            return Err(Error::Config(format!("`model.placements` must be 5 binary digits, got `{p}`")));
        }
        if variant != Variant::Baseline {
            for (slot, c) in m.placements.iter_mut().zip(p.chars()) {
                *slot = c == '1';
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let max_steps = match self.get("train.max_steps") {
            "none" | "" => None,
            _ => Some(self.parse("train.max_steps")?),
        };
        let t = TrainConfig {
            lr0: self.parse("train.lr")?,
            momentum: self.parse("train.momentum")?,
            clip_threshold: self.parse("train.clip_threshold")?,
            clip_mode: self.get("train.clip_mode").parse::<ClipMode>()?,
            decay_factor: self.parse("train.decay_factor")?,
            decay_every: self.parse("train.decay_every")?,
            epochs: self.parse("train.epochs")?,
            batch_size: self.parse("train.batch_size")?,
            epoch_repeats: self.parse("train.epoch_repeats")?,
            max_steps,
            shuffle: true,
            seed: self.seed()?,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn loss(&self) -> Result<LossConfig> {
        let l = LossConfig {
            lambda: self.parse("train.loss_lambda")?,
            sigma: self.parse("train.loss_sigma")?,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn class(&self) -> Result<PhantomClass> {
        self.get("data.class").parse()
    }

    pub fn phantom(&self) -> Result<PhantomSpec> {
        let size: usize = self.parse("model.input_size")?;
        let spec = PhantomSpec::new(self.class()?, (size, size), self.seed()?);
        spec.validate()?;
        Ok(spec)
    }

    pub fn counts(&self) -> Result<(usize, usize)> {
        Ok((self.parse("data.train_count")?, self.parse("data.test_count")?))
    }

    pub fn augment(&self) -> Result<Vec<AugmentKind>> {
        self.get("data.augment")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect()
    }

    pub fn data_root(&self) -> Option<&Path> {
        let r = self.get("data.root");
        (!r.is_empty()).then(|| Path::new(r))
    }
}

/// Command-line overrides shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<String>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub width_scale: Option<usize>,
}

pub fn resolve(
    file: Option<&Path>,
    flags: &Overrides,
    env_seed: Option<String>,
) -> Result<(RunConfig, SeedSource)> {
    let mut cfg = RunConfig::defaults();
    let from_file = match file {
        Some(p) => cfg.load_file(p)?,
        None => Vec::new(),
    };
    let mut source = if from_file.iter().any(|k| k == "seed") {
        SeedSource::File
    } else {
        SeedSource::Default
    };
    if source == SeedSource::Default {
        if let Some(s) = env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
            cfg.set("seed", seed)?;
            source = SeedSource::Env;
        }
    }
    if let Some(s) = flags.seed {
        cfg.set("seed", s)?;
        source = SeedSource::Flag;
    }
    if let Some(v) = &flags.variant {
        v.parse::<Variant>()?;
        cfg.set("model.variant", v)?;
    }
    if let Some(lr) = flags.lr {
        cfg.set("train.lr", lr)?;
    }
    if let Some(e) = flags.epochs {
        cfg.set("train.epochs", e)?;
    }
    if let Some(w) = flags.width_scale {
        cfg.set("model.width_scale", w)?;
    }
    Ok((cfg, source))
}
