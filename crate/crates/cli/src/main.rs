use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ura::config::RunConfig;
use ura::pipeline::{self, DERAIN_PARAMS, FLOW_FILE, GENERATOR_PARAMS};
use ura::Error;

/// Universal rain-removal attack toolkit.
#[derive(Parser)]
#[command(name = "ura", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Use the reference hyperparameter table.
    #[arg(long)]
    paper_defaults: bool,
    /// Override one key, e.g. `--set attack.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> ura::Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), self.paper_defaults, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize paired train/test splits into run.data_dir.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the rain-removal network on run.data_dir/train.
    TrainDerain {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the flow generator against trained rain-removal weights.
    TrainAttack {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Rain-removal weights [default: <out_dir>/derain.urap].
        #[arg(long)]
        theta: Option<PathBuf>,
    },
    /// Evaluate a trained generator on its canonical noise and save the flow.
    ExportFlow {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Generator weights [default: <out_dir>/generator.urap].
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Output flow file [default: <out_dir>/flow.uraf].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Warp PNG images by a flow field.
    Apply {
        /// Flow file (.uraf)
        #[arg(long)]
        flow: PathBuf,
        /// Output directory; files keep their names
        #[arg(long)]
        out: PathBuf,
        /// Input PNGs, all matching the flow geometry
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Write the metrics report for the test split.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Rain-removal weights [default: <out_dir>/derain.urap].
        #[arg(long)]
        theta: Option<PathBuf>,
        /// Flow file [default: <out_dir>/flow.uraf].
        #[arg(long)]
        flow: Option<PathBuf>,
        /// Report directory [default: <out_dir>].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also dump qualitative panels and histograms.
        #[arg(long)]
        qualitative: bool,
    },
    /// Per-channel pixel histogram of a PNG as CSV.
    Histogram {
        image: PathBuf,
        #[arg(long, default_value_t = 32)]
        bins: usize,
        /// Output CSV
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn run(command: Command) -> ura::Result<()> {
    let mut log = |line: &str| eprintln!("{line}");
    match command {
        Command::Synth { cfg } => {
            let cfg = cfg.load()?;
            pipeline::with_threads(&cfg, || pipeline::synth(&cfg, &mut log))?;
        }
        Command::TrainDerain { cfg } => {
            let cfg = cfg.load()?;
            pipeline::with_threads(&cfg, || pipeline::train_derain(&cfg, &mut log))?;
        }
        Command::TrainAttack { cfg, theta } => {
            let cfg = cfg.load()?;
            let theta = theta.unwrap_or_else(|| cfg.run.out_dir.join(DERAIN_PARAMS));
            pipeline::with_threads(&cfg, || pipeline::train_attack(&cfg, &theta, &mut log))?;
        }
        Command::ExportFlow { cfg, generator, out } => {
            let cfg = cfg.load()?;
            let generator = generator.unwrap_or_else(|| cfg.run.out_dir.join(GENERATOR_PARAMS));
            let out = out.unwrap_or_else(|| cfg.run.out_dir.join(FLOW_FILE));
            pipeline::export_flow(&cfg, &generator, &out)?;
            log(&format!("wrote {}", out.display()));
        }
        Command::Apply { flow, out, images } => {
            for p in pipeline::apply(&flow, &images, &out)? {
                log(&format!("wrote {}", p.display()));
            }
        }
        Command::Evaluate {
            cfg,
            theta,
            flow,
            out,
            qualitative,
        } => {
            let cfg = cfg.load()?;
            let theta = theta.unwrap_or_else(|| cfg.run.out_dir.join(DERAIN_PARAMS));
            let flow = flow.unwrap_or_else(|| cfg.run.out_dir.join(FLOW_FILE));
            let out = out.unwrap_or_else(|| cfg.run.out_dir.clone());
            pipeline::with_threads(&cfg, || {
                pipeline::evaluate(&cfg, &theta, &flow, &out, qualitative, &mut log)
            })?;
        }
        Command::Histogram { image, bins, out } => pipeline::histogram(&image, bins, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
