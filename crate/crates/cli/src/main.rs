use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mipose::Execution;

mod commands;
mod config;

use config::{RunConfig, Unit};

/// Bad user input. Maps to exit code 1.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

#[derive(Parser, Debug)]
#[command(
    name = "mipose",
    version,
    about = "Multi-instance 6D pose pipeline tools"
)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Directory for output files.
    #[arg(short, long, global = true)]
    out_dir: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-model diameter, cuboid and symmetries; writes models_info.json.
    ModelInfo {
        models_dir: Option<PathBuf>,
        /// Length unit of the PLY files.
        #[arg(long, value_enum)]
        unit: Option<Unit>,
    },
    /// Training targets for BOP ground truth, as JSON lines.
    Encode {
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Score a BOP results CSV against ground truth.
    Eval {
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Postprocessing runtime against instance count.
    Bench {
        /// Comma-separated instance counts.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
        #[command(flatten)]
        noise: NoiseArgs,
    },
    /// ADD recall of RANSAC-EPnP against direct pose voting.
    PnpCompare {
        #[arg(long)]
        scenes: Option<usize>,
        #[command(flatten)]
        noise: NoiseArgs,
    },
}

#[derive(Args, Debug, Default)]
struct NoiseArgs {
    /// Corner noise, pixels.
    #[arg(long)]
    corner_sigma: Option<f64>,
    /// Rotation noise, radians.
    #[arg(long)]
    rotation_sigma: Option<f64>,
    /// Translation noise, meters.
    #[arg(long)]
    translation_sigma: Option<f64>,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out_dir {
        cfg.paths.output_dir = Some(o);
    }
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let set = |slot: &mut Option<PathBuf>, v: Option<PathBuf>| {
        if v.is_some() {
            *slot = v;
        }
    };
    match cli.command {
        Command::ModelInfo { models_dir, unit } => {
            set(&mut cfg.paths.models_dir, models_dir);
            if let Some(u) = unit {
                cfg.model_unit = u;
            }
            cfg.validate()?;
            commands::model_info(&cfg)
        }
        Command::Encode { gt, models } => {
            set(&mut cfg.paths.gt_dir, gt);
            set(&mut cfg.paths.models_dir, models);
            cfg.validate()?;
            commands::encode(&cfg, exec)
        }
        Command::Eval {
            results,
            gt,
            models,
        } => {
            set(&mut cfg.paths.results, results);
            set(&mut cfg.paths.gt_dir, gt);
            set(&mut cfg.paths.models_dir, models);
            cfg.validate()?;
            commands::eval(&cfg, exec)
        }
        Command::Bench {
            counts,
            repeats,
            noise,
        } => {
            if counts.is_some() {
                cfg.bench.counts = counts;
            }
            if repeats.is_some() {
                cfg.bench.repeats = repeats;
            }
            let base = cfg.noise.clone().unwrap_or_default();
            cfg.noise = Some(noise.apply(base));
            cfg.validate()?;
            commands::bench(&cfg)
        }
        Command::PnpCompare { scenes, noise } => {
            if scenes.is_some() {
                cfg.experiment.scenes = scenes;
            }
            let base = cfg
                .noise
                .clone()
                .unwrap_or_else(|| mipose::harness::ExperimentConfig::default().noise);
            cfg.noise = Some(noise.apply(base));
            cfg.validate()?;
            commands::pnp_compare(&cfg, exec)
        }
    }
}

impl NoiseArgs {
    fn apply(&self, mut n: mipose::harness::NoiseSpec) -> mipose::harness::NoiseSpec {
        if let Some(v) = self.corner_sigma {
            n.corner_sigma_px = v;
        }
        if let Some(v) = self.rotation_sigma {
            n.rotation_sigma_rad = v;
        }
        if let Some(v) = self.translation_sigma {
            n.translation_sigma_m = v;
        }
        n
    }
}

/// 1 for bad input, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<InputError>() || cause.is::<std::io::Error>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<mipose::Error>() {
            let input = e.is_input_error() || matches!(e, mipose::Error::File { .. });
            return if input { 1 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(2),
    }
}
