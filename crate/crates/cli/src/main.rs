//! `gtrans`: ingest or synthesize data, train forecasters, detect extreme
//! frames and merge comparison tables.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gtrans_core::{Error, ThresholdMethod};

use config::ConfigArgs;

#[derive(Parser, Debug)]
#[command(name = "gtrans", version, about = "Graph-embedding transformer nowcasting pipeline")]
struct Cli {
    /// Directory for relative and default output paths.
    #[arg(long, global = true, env = "GTRANS_OUT_DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Bin an event CSV into a normalized dataset container.
    Ingest {
        #[arg(long)]
        events: PathBuf,
        /// Edge list (`a,b` per line) for area-located events.
        #[arg(long, conflicts_with = "grid")]
        graph: Option<PathBuf>,
        /// Grid size `ROWSxCOLS`, overriding the spec's grid location.
        #[arg(long)]
        grid: Option<String>,
        /// TOML ingest spec.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a seeded synthetic series.
    Synth {
        #[arg(long, default_value = "grid16")]
        preset: String,
        #[arg(long, default_value_t = 2000)]
        frames: usize,
        /// Spike rate; the preset's rate when omitted.
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on the training split of a dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model_out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Fit the detector on the training split and score the test split.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        threshold_method: Option<ThresholdMethod>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Dataset column of the report; the data file stem by default.
        #[arg(long)]
        dataset: Option<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Merge report tables in the order given.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-window latent vectors of the training split as CSV.
    ExportLatent {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 2,
        Error::Divergence { .. } | Error::NonFinite(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = output::OutDir::new(cli.out_dir);
    let result = match cli.command {
        Command::Ingest {
            events,
            graph,
            grid,
            spec,
            out: path,
        } => commands::ingest(&out, &events, graph.as_deref(), grid.as_deref(), &spec, path),
        Command::Synth {
            preset,
            frames,
            rate,
            seed,
            out: path,
        } => commands::synth(&out, &preset, frames, rate, seed, path),
        Command::Train {
            data,
            model_out,
            config,
        } => commands::train(&out, data, model_out, &config),
        Command::Detect {
            model,
            data,
            threshold_method,
            report,
            dataset,
            config,
        } => commands::detect(&out, &model, data, threshold_method, report, dataset, &config),
        Command::Eval { reports, out: path } => commands::eval(&out, &reports, path),
        Command::ExportLatent {
            model,
            data,
            out: path,
            config,
        } => commands::export_latent(&out, &model, data, path, &config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
