mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use conclu::evaluate::PROBE_REG;
use conclu::geometry::ShapeKind;
use conclu::trainer::LossMode;

/// Self-supervised point cloud features from balanced clustering and
/// instance contrasting.
///
/// Every command writes into the directory given by --out and refuses to
/// overwrite files that are already there.
#[derive(Debug, Parser)]
#[command(name = "conclu", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate labelled synthetic clouds as XYZ files plus manifest.json.
    GenData {
        /// Comma-separated shape kinds; class ids follow this order.
        #[arg(long, value_delimiter = ',', default_value = "sphere,box,cylinder", value_parser = parse_kind)]
        kinds: Vec<ShapeKind>,
        #[arg(long, default_value_t = 10)]
        n_per_class: usize,
        #[arg(long, default_value_t = 2048)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain a model; writes config.json, train_log.csv and checkpoints/.
    Pretrain {
        /// JSON run config with `network`, `train` and `data` sections.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        loss_mode: Option<LossMode>,
        /// Overrides data.train_manifest.
        #[arg(long)]
        train_manifest: Option<PathBuf>,
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<u64>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a linear probe on frozen features; writes probe.json.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        test_manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Regularization strength of the probe.
        #[arg(long, default_value_t = PROBE_REG)]
        reg: f64,
    },
    /// Label every point of a cloud; writes segment.xyz and segment.json.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        /// An XYZ file (optionally with part labels) or an OFF mesh.
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump features and their 2-D PCA; writes features.csv, pca.csv and
    /// export.json.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_kind(s: &str) -> Result<ShapeKind, String> {
    s.parse().map_err(|_| {
        let names: Vec<_> = ShapeKind::ALL.iter().map(|k| k.name()).collect();
        format!(
            "unknown shape kind `{s}` (expected one of {})",
            names.join(", ")
        )
    })
}

fn parse_mode(s: &str) -> Result<LossMode, String> {
    s.parse().map_err(|e: conclu::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData {
            kinds,
            n_per_class,
            points,
            out,
            seed,
        } => commands::gen_data(&kinds, n_per_class, points, &out, seed),
        Command::Pretrain {
            config,
            out,
            loss_mode,
            train_manifest,
            epochs,
            seed,
        } => commands::pretrain(
            &config,
            &out,
            commands::Overrides {
                loss_mode,
                train_manifest,
                epochs,
                seed,
            },
        ),
        Command::Probe {
            checkpoint,
            train_manifest,
            test_manifest,
            out,
            reg,
        } => commands::probe(&checkpoint, &train_manifest, &test_manifest, &out, reg),
        Command::Segment {
            checkpoint,
            cloud,
            out,
        } => commands::segment(&checkpoint, &cloud, &out),
        Command::Export {
            checkpoint,
            manifest,
            out,
        } => commands::export(&checkpoint, &manifest, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}
