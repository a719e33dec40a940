use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use recal_core::ablation::{self, AblationConfig};
use recal_core::blocks::ReCal;
use recal_core::checkpoint;
use recal_core::gradcheck;
use recal_core::model::{activation_maps, census, Census, Model, ModelConfig, Stage, Variant};
use recal_core::synth::augment::augment;
use recal_core::synth::io as sio;
use recal_core::synth::{generate_split, PhantomClass, PhantomSpec, SampleBatch, Split};
use recal_core::train::metrics::{ClassMetrics, MetricsReport};
use recal_core::train::{self, epoch_csv, EpochRecord, Observer, EPOCH_CSV_HEADER};
use recal_core::Error;

use crate::config::{resolve, RunConfig, SeedSource, SEED_ENV};
use crate::Common;

/// Library failures plus failed self-checks, each with its exit code.
#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::Numerical(_) | Error::Domain(_)) => 2,
            CliError::Core(_) => 1,
            CliError::Verification(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Core(Error::Usage(msg.into()))
}

/// Output directory that never overwrites: every file is created fresh and
/// `config.txt` marks the directory as taken.
struct RunDir {
    path: PathBuf,
}

impl RunDir {
    fn create(common: &Common, cfg: &RunConfig) -> Result<Self> {
        let path = common
            .out
            .clone()
            .ok_or_else(|| usage("this command writes files; pass --out DIR"))?;
        fs::create_dir_all(&path).map_err(|e| io_err(&path, e))?;
        let dir = RunDir { path };
        if dir.file("config.txt").exists() {
            return Err(usage(format!(
                "{} already holds a run; choose a fresh --out",
                dir.path.display()
            )));
        }
        dir.write("config.txt", cfg.to_text().as_bytes())?;
        Ok(dir)
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.file(name);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&p)
            .map_err(|e| io_err(&p, e))?;
        f.write_all(bytes).map_err(|e| io_err(&p, e))
    }

    fn append(&self, name: &str, text: &str) -> Result<()> {
        let p = self.file(name);
        let mut f = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&p)
            .map_err(|e| io_err(&p, e))?;
        f.write_all(text.as_bytes()).map_err(|e| io_err(&p, e))
    }
}

fn resolve_common(common: &Common) -> Result<RunConfig> {
    let (cfg, source) = resolve(common.config.as_deref(), &common.overrides(), std::env::var(SEED_ENV).ok())?;
    let from = match source {
        SeedSource::Default => "default",
        SeedSource::File => "config file",
        SeedSource::Env => SEED_ENV,
        SeedSource::Flag => "--seed",
    };
    eprintln!("seed {} (from {from})", cfg.seed()?);
    Ok(cfg)
}

fn parse_classes(names: &[String], fallback: &[PhantomClass]) -> Result<Vec<PhantomClass>> {
    if names.is_empty() {
        return Ok(fallback.to_vec());
    }
    Ok(names.iter().map(|n| n.trim().parse()).collect::<recal_core::Result<_>>()?)
}

/// Samples of one class and split: from `data.root` when set, else rendered.
fn load_split(cfg: &RunConfig, class: PhantomClass, split: Split) -> Result<SampleBatch> {
    if let Some(root) = cfg.data_root() {
        return Ok(sio::read_split(root, class, split)?);
    }
    let spec = PhantomSpec {
        class,
        ..cfg.phantom()?
    };
    let (train_n, test_n) = cfg.counts()?;
    let n = match split {
        Split::Train => train_n,
        Split::Test => test_n,
    };
    Ok(generate_split(&spec, split, n)?)
}

struct RunLogger<'a> {
    dir: &'a RunDir,
}

impl Observer for RunLogger<'_> {
    fn epoch_end(&mut self, r: &EpochRecord, model: &Model, is_best: bool) -> recal_core::Result<()> {
        let to_core = |e: CliError| match e {
            CliError::Core(e) => e,
            CliError::Verification(m) => Error::Usage(m),
        };
        self.dir.append("epochs.csv", &format!("{}\n", r.csv_row())).map_err(to_core)?;
        if is_best {
            checkpoint::save(model, &self.dir.file("best.ckpt"))?;
        }
        eprintln!(
            "epoch {:>3}  lr {:.6}  loss {:.5}  val IoU {:.2}%{}",
            r.epoch,
            r.lr,
            r.train_loss,
            100.0 * r.val_iou.0,
            if is_best { "  *" } else { "" }
        );
        Ok(())
    }
}

pub fn train(common: &Common) -> Result<()> {
    let cfg = resolve_common(common)?;
    let mc = cfg.model()?;
    let tc = cfg.train()?;
    let lc = cfg.loss()?;
    let class = cfg.class()?;
    let mut train_set = load_split(&cfg, class, Split::Train)?;
    let kinds = cfg.augment()?;
    if !kinds.is_empty() {
        train_set = augment(&train_set, &kinds, tc.seed)?;
    }
    let val_set = load_split(&cfg, class, Split::Test)?;
    let dir = RunDir::create(common, &cfg)?;
    dir.write("epochs.csv", format!("{EPOCH_CSV_HEADER}\n").as_bytes())?;
    let mut model = Model::build(mc, tc.seed)?;
    let out = train::train(&mut model, &train_set, &val_set, &tc, lc, &mut RunLogger { dir: &dir })?;
    checkpoint::save(&model, &dir.file("last.ckpt"))?;
    let best = out.best_record();
    println!(
        "best epoch {}: IoU {:.2}%  Dice {:.2}%  ({} steps) -> {}",
        best.epoch,
        100.0 * best.val_iou.0,
        100.0 * best.val_dice.0,
        out.steps,
        dir.path.display()
    );
    Ok(())
}

/// Loads a checkpoint, holding it to the resolved model config when the
/// caller pinned one.
fn load_checkpoint(common: &Common, cfg: &RunConfig, path: &Path) -> Result<Model> {
    let pinned = common.config.is_some() || common.variant.is_some() || common.width_scale.is_some();
    Ok(if pinned {
        checkpoint::load_matching(path, &cfg.model()?)?
    } else {
        checkpoint::load(path)?
    })
}

fn check_fits(model: &Model, data: &SampleBatch, what: &str) -> Result<()> {
    model.check_input(&data.images).map_err(|e| {
        CliError::Core(Error::Config(format!("{what} does not fit the checkpoint: {e}")))
    })
}

pub fn eval(common: &Common, ckpt: &Path, classes: &[String]) -> Result<()> {
    let cfg = resolve_common(common)?;
    let classes = parse_classes(classes, &[cfg.class()?])?;
    let model = load_checkpoint(common, &cfg, ckpt)?;
    let mc = model.config().clone();
    // Rendered data follow the checkpoint's input size.
    let mut data_cfg = cfg.clone();
    data_cfg.set("model.input_size", mc.input_size.0)?;
    if mc.input_size.0 != mc.input_size.1 && cfg.data_root().is_none() {
        return Err(usage("rendered evaluation data are square; the checkpoint expects a non-square input"));
    }
    let batch = cfg.train()?.batch_size;
    let mut report = MetricsReport { classes: Vec::new() };
    for class in classes {
        let data = load_split(&data_cfg, class, Split::Test)?;
        check_fits(&model, &data, &format!("{} test data", class.name()))?;
        let scores = train::evaluate(&model, &data, batch)?;
        report.classes.push(ClassMetrics {
            class: class.name().to_string(),
            ious: scores.iter().map(|s| s.0).collect(),
            dices: scores.iter().map(|s| s.1).collect(),
        });
    }
    let dir = RunDir::create(common, &cfg)?;
    dir.write(
        "checkpoint.txt",
        format!(
            "path = {}\ndigest = {}\n{}",
            ckpt.display(),
            checkpoint::hex(&checkpoint::config_digest(&mc)),
            mc.to_text()
        )
        .as_bytes(),
    )?;
    let csv = report.to_csv();
    dir.write("metrics.csv", csv.as_bytes())?;
    dir.write("samples.csv", report.samples_csv().as_bytes())?;
    print!("{csv}");
    Ok(())
}

const CENSUS_HEADER: &str = "variant,placement,channels,store_weights,walk_weights,formula,store_total\n";

fn census_rows(c: &Census) -> String {
    let mut s = String::new();
    for p in &c.placements {
        let formula = if c.variant == Variant::ReCal {
            ReCal::formula_weight_count(p.channels).to_string()
        } else {
            "-".into()
        };
        s.push_str(&format!(
            "{},{},{},{},{},{formula},{}\n",
            c.variant.name(),
            p.placement,
            p.channels,
            p.store_weights,
            p.walk_weights,
            p.store_total
        ));
    }
    s
}

pub fn audit(common: &Common) -> Result<()> {
    let cfg = resolve_common(common)?;
    // Paper-scale widths unless a width scale was asked for.
    let model_cfg = |v: Variant| -> Result<ModelConfig> {
        Ok(match common.width_scale {
            Some(_) => ModelConfig { variant: v, ..cfg.model()? },
            None => ModelConfig::paper_scale(v),
        })
    };
    let mut table = String::from(CENSUS_HEADER);
    let mut summary = String::new();
    let mut failures = Vec::new();
    let mut calib = std::collections::HashMap::new();
    for v in Variant::ALL {
        let c = census(&Model::build(model_cfg(v)?, 0)?);
        table.push_str(&census_rows(&c));
        if c.total != c.walk_total {
            failures.push(format!("{}: store total {} != walk total {}", v.name(), c.total, c.walk_total));
        }
        for p in &c.placements {
            if p.store_weights != p.walk_weights {
                failures.push(format!("{} {}: store {} != walk {}", v.name(), p.placement, p.store_weights, p.walk_weights));
            }
            if v == Variant::ReCal && p.store_weights != ReCal::formula_weight_count(p.channels) {
                failures.push(format!(
                    "recal {}: {} weights, formula gives {}",
                    p.placement,
                    p.store_weights,
                    ReCal::formula_weight_count(p.channels)
                ));
            }
        }
        summary.push_str(&format!(
            "{:<9} calibration weights {:>9}  all calibration params {:>9}  network total {:>11}\n",
            v.name(),
            c.calibration_weights(),
            c.calibration_total(),
            c.total
        ));
        calib.insert(v, c.calibration_weights());
    }
    let delta = calib[&Variant::ReCal] as i64 - calib[&Variant::ScSe] as i64;
    summary.push_str(&format!("recal - scse calibration weights: {delta}\n"));
    if common.width_scale.is_none() {
        if calib[&Variant::ReCal] != 371_028 {
            failures.push(format!("recal calibration total {} != 371028", calib[&Variant::ReCal]));
        }
        if !(20_000..=22_000).contains(&delta) {
            failures.push(format!("recal - scse delta {delta} outside [20000, 22000]"));
        }
    }
    print!("{table}\n{summary}");
    if common.out.is_some() {
        let dir = RunDir::create(common, &cfg)?;
        dir.write("census.csv", table.as_bytes())?;
        dir.write("summary.txt", summary.as_bytes())?;
    }
    if failures.is_empty() {
        println!("audit: all checks passed");
        Ok(())
    } else {
        Err(CliError::Verification(failures.join("; ")))
    }
}

pub fn gradcheck(common: &Common, scope: &str) -> Result<()> {
    let cfg = resolve_common(common)?;
    let reports = gradcheck::run_scope(scope, cfg.seed()?)?;
    let text: String = reports.iter().map(|r| format!("{r}\n")).collect();
    print!("{text}");
    if common.out.is_some() {
        RunDir::create(common, &cfg)?.write("gradcheck.txt", text.as_bytes())?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn dump_activations(common: &Common, ckpts: &[PathBuf], sample: usize, stages: &[String]) -> Result<()> {
    let cfg = resolve_common(common)?;
    let stages: Vec<Stage> = stages.iter().map(|s| s.trim().parse()).collect::<recal_core::Result<_>>()?;
    let models = ckpts
        .iter()
        .map(|p| load_checkpoint(common, &cfg, p))
        .collect::<Result<Vec<_>>>()?;
    let mut data_cfg = cfg.clone();
    data_cfg.set("model.input_size", models[0].config().input_size.0)?;
    let data = load_split(&data_cfg, cfg.class()?, Split::Test)?;
    if sample >= data.len() {
        return Err(usage(format!("--sample {sample} out of range ({} test samples)", data.len())));
    }
    let dir = RunDir::create(common, &cfg)?;
    let image = data.image(sample);
    sio::write_image(&dir.file("input.png"), &image)?;
    sio::write_mask(&dir.file("mask.png"), &data.mask(sample))?;
    for model in &models {
        check_fits(model, &data, "sample")?;
        for (stage, h, w, px) in activation_maps(model, &image, &stages)? {
            let name = format!("{}_{}.png", model.config().variant.name(), stage.name());
            if dir.file(&name).exists() {
                return Err(usage(format!("two checkpoints would both write {name}")));
            }
            sio::write_gray(&dir.file(&name), h, w, &px)?;
            println!("{name} {h}x{w}");
        }
    }
    Ok(())
}

pub fn generate_data(common: &Common, classes: &[String]) -> Result<()> {
    let cfg = resolve_common(common)?;
    let classes = parse_classes(classes, &[cfg.class()?])?;
    let seed = cfg.seed()?;
    let kinds = cfg.augment()?;
    let mut batches = Vec::new();
    for &class in &classes {
        for split in [Split::Train, Split::Test] {
            let mut b = load_split(&cfg, class, split)?;
            if split == Split::Train && !kinds.is_empty() {
                b = augment(&b, &kinds, seed)?;
            }
            batches.push((class, split, b));
        }
    }
    let dir = RunDir::create(common, &cfg)?;
    for (class, split, b) in &batches {
        sio::write_split(&dir.path, *class, *split, seed, b)?;
        println!("{} {}: {} samples", class.name(), split.name(), b.len());
    }
    Ok(())
}

pub fn ablation(common: &Common, classes: &[String]) -> Result<()> {
    let cfg = resolve_common(common)?;
    let defaults = AblationConfig::default();
    let (train_count, test_count) = cfg.counts()?;
    let mc = cfg.model()?;
    let ac = AblationConfig {
        learning_rates: common.lr.map_or(defaults.learning_rates.clone(), |lr| vec![lr]),
        classes: parse_classes(classes, &defaults.classes)?,
        width_scale: mc.width_scale,
        image_size: mc.input_size.0,
        train_count,
        test_count,
        train: cfg.train()?,
        loss: cfg.loss()?,
        seed: cfg.seed()?,
        ..defaults
    };
    let dir = RunDir::create(common, &cfg)?;
    let mut logs = Vec::new();
    let report = ablation::run(&ac, &mut |c| {
        eprintln!(
            "lr {} {:<9} {:<10} best epoch {:>2}  IoU {:.2}%",
            c.lr,
            c.variant.display_name(),
            c.class.name(),
            c.best_epoch,
            100.0 * c.iou.0
        );
        logs.push((format!("{}_{}_{}_epochs.csv", c.lr, c.variant.name(), c.class.name()), epoch_csv(&c.log)));
    })?;
    for (name, text) in logs {
        dir.write(&name, text.as_bytes())?;
    }
    dir.write("ablation.csv", report.to_csv().as_bytes())?;
    let table = report.to_table();
    dir.write("ablation.txt", table.as_bytes())?;
    print!("{table}");
    Ok(())
}
