mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Overrides;

#[derive(Parser, Debug)]
#[command(name = "recal", version, about = "Train, evaluate, and audit region-channel calibrated segmentation networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat `key = value` config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; falls back to the config file, then RECAL_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// recal, baseline, scse, or se.
    #[arg(long, global = true)]
    variant: Option<String>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    width_scale: Option<usize>,
    /// Output directory; must not already hold a run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            variant: self.variant.clone(),
            lr: self.lr,
            epochs: self.epochs,
            width_scale: self.width_scale,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one network; writes config.txt, epochs.csv, best.ckpt, last.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on held-out data; writes metrics.csv and samples.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated classes; defaults to `data.class`.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
    },
    /// Parameter census per calibration placement, checked three ways.
    Audit {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient checks: op:<name>, block:<name>, ops, blocks, model, all.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        scope: String,
    },
    /// Channel-mean maps of chosen stages as grayscale PNGs.
    DumpActivations {
        #[command(flatten)]
        common: Common,
        /// One or more checkpoints; files are named `<variant>_<stage>.png`.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Index into the held-out split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, value_delimiter = ',', default_value = "E5,D1")]
        stages: Vec<String>,
    },
    /// Render the synthetic phantom dataset to PNG files plus a manifest.
    GenerateData {
        #[command(flatten)]
        common: Common,
        /// Comma-separated classes; defaults to `data.class`.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
    },
    /// Baseline-vs-calibrated grid over learning rates and classes.
    Ablation {
        #[command(flatten)]
        common: Common,
        /// Comma-separated classes; defaults to lens,iris,instrument.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train { common } => commands::train(&common),
        Command::Eval {
            common,
            checkpoint,
            classes,
        } => commands::eval(&common, &checkpoint, &classes),
        Command::Audit { common } => commands::audit(&common),
        Command::Gradcheck { common, scope } => commands::gradcheck(&common, &scope),
        Command::DumpActivations {
            common,
            checkpoint,
            sample,
            stages,
        } => commands::dump_activations(&common, &checkpoint, sample, &stages),
        Command::GenerateData { common, classes } => commands::generate_data(&common, &classes),
        Command::Ablation { common, classes } => commands::ablation(&common, &classes),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
