// `!(x > 0.0)` style checks also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod errors;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use zmitosis::evalstats::LayerMode;
use zmitosis::tilestore::TileFormat;

use commands::{EvaluateArgs, FusePredictArgs, FuseTrainArgs, IngestArgs, RegisterArgs, SourceArgs};
use config::{Overrides, RunConfig, CONFIG_ENV};
use errors::CliError;

#[derive(Parser, Debug)]
#[command(name = "zmitosis", version, about = "Z-stack aware mitosis detection pipeline")]
struct Cli {
    /// TOML config, or a run manifest whose config is reused.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Worker threads (0 uses all cores). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Check the effective config and exit.
    #[arg(long, global = true)]
    validate_only: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    n_runs: Option<usize>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    n_boot: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Png8,
    Raw16,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Single,
    Zstack,
}

#[derive(Args, Debug)]
struct SourceOpts {
    /// Plane store directory.
    #[arg(long, conflicts_with = "scores")]
    store: Option<PathBuf>,
    /// External score file (JSON lines).
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Comma-separated plane offsets in µm (default: all planes).
    #[arg(long)]
    planes: Option<String>,
}

impl SourceOpts {
    fn into_args(self) -> SourceArgs {
        SourceArgs {
            store: self.store,
            scores: self.scores,
            planes: self.planes,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Build a plane store from per-plane images named z<offset>.png.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        slide_id: String,
        #[arg(long)]
        scanner: String,
        #[arg(long)]
        native_mpp: f64,
        #[arg(long, default_value = "40x")]
        objective: String,
        #[arg(long, default_value_t = 512)]
        tile_size: usize,
        #[arg(long, value_enum, default_value = "png8")]
        format: FormatArg,
    },
    /// Run the synthetic experiment and write samples and ground truth.
    Simulate {
        /// Defaults to the configured output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Per-plane candidates as JSON lines.
    Detect {
        #[command(flatten)]
        source: SourceOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collapse cross-plane duplicates.
    Merge {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        radius: Option<f64>,
    },
    /// Train the fusion forest on one calibration slide.
    FuseTrain {
        #[command(flatten)]
        source: SourceOpts,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Restrict annotations to this slide.
        #[arg(long)]
        slide_id: Option<String>,
        #[arg(long, default_value_t = 1)]
        run_index: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score merged candidates with a trained forest.
    FusePredict {
        #[command(flatten)]
        source: SourceOpts,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transfer annotations from a reference scan to a target scan.
    Register {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match predictions against annotations.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        slide_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Append sensitivity and precision samples to this CSV.
        #[arg(long, requires_all = ["scanner", "pipeline", "layer_mode"])]
        samples_out: Option<PathBuf>,
        #[arg(long)]
        scanner: Option<String>,
        #[arg(long)]
        pipeline: Option<String>,
        #[arg(long, value_enum)]
        layer_mode: Option<ModeArg>,
        #[arg(long, default_value_t = 1)]
        run_index: u32,
    },
    /// Bootstrap, ANOVA and Tukey tables from metric samples.
    Report {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// The whole pipeline: simulated when no stores are configured.
    RunAll,
}

fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        master_seed: cli.seed,
        n_runs: cli.n_runs,
        output_dir: cli.output_dir.clone(),
        n_boot: cli.n_boot,
    });
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut cfg = effective_config(&cli)?;
    if cli.validate_only {
        println!("{}", commands::validation_summary(&cfg));
        return Ok(());
    }
    let out_dir = cfg.output_dir.clone();
    match cli.cmd {
        Cmd::Ingest {
            input,
            out,
            slide_id,
            scanner,
            native_mpp,
            objective,
            tile_size,
            format,
        } => commands::ingest(
            &cfg,
            &IngestArgs {
                input,
                out,
                slide_id,
                scanner,
                native_mpp,
                objective,
                tile_size,
                format: match format {
                    FormatArg::Png8 => TileFormat::Png8,
                    FormatArg::Raw16 => TileFormat::Raw16,
                },
            },
        ),
        Cmd::Simulate { out_dir: d } => commands::simulate(&cfg, &d.unwrap_or(out_dir)),
        Cmd::Detect { source, out } => commands::detect(&cfg, &source.into_args(), &out),
        Cmd::Merge { input, out, radius } => {
            if let Some(r) = radius {
                cfg.merge_radius_um = r;
                cfg.validate()?;
            }
            commands::merge(&cfg, &input, &out)
        }
        Cmd::FuseTrain {
            source,
            candidates,
            annotations,
            slide_id,
            run_index,
            out,
        } => commands::fuse_train(
            &cfg,
            &FuseTrainArgs {
                source: source.into_args(),
                candidates,
                annotations,
                slide_id,
                run_index,
                out,
            },
        ),
        Cmd::FusePredict {
            source,
            candidates,
            model,
            out,
        } => commands::fuse_predict(
            &cfg,
            &FusePredictArgs {
                source: source.into_args(),
                candidates,
                model,
                out,
            },
        ),
        Cmd::Register {
            reference,
            target,
            annotations,
            out,
        } => commands::register(
            &cfg,
            &RegisterArgs {
                reference,
                target,
                annotations,
                out,
            },
        ),
        Cmd::Evaluate {
            predictions,
            annotations,
            slide_id,
            out,
            samples_out,
            scanner,
            pipeline,
            layer_mode,
            run_index,
        } => commands::evaluate(
            &cfg,
            &EvaluateArgs {
                predictions,
                annotations,
                slide_id,
                out,
                samples_out,
                scanner: scanner.unwrap_or_default(),
                pipeline: pipeline.unwrap_or_default(),
                layer_mode: match layer_mode {
                    Some(ModeArg::Single) => LayerMode::Single,
                    _ => LayerMode::Zstack,
                },
                run_index,
            },
        ),
        Cmd::Report { samples, out_dir: d } => commands::report(&cfg, &samples, &d.unwrap_or(out_dir)),
        Cmd::RunAll => commands::run_all(&cfg, &out_dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let workers = cli.workers;
    match zmitosis::par::with_workers(workers, || dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
