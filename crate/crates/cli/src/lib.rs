//! Command implementations behind the `geotok` binary. Each command is a
//! plain function so integration tests can drive it in-process.

pub mod commands;
pub mod config;
pub mod manifest;

pub use config::{DatasetConfig, RunConfig};

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Rns,
    Baseline,
    Import,
}

#[derive(Debug, Parser)]
#[command(name = "geotok", version, about = "Spectral mesh tokenization and patch-transformer training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML run configuration; flags override file values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory (default: geotok-out).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[arg(long, global = true)]
    pub partitions: Option<usize>,

    #[arg(long, global = true, value_enum)]
    pub method: Option<MethodArg>,

    /// Geodesic mask radius; `inf` disables masking.
    #[arg(long, global = true)]
    pub mask_radius: Option<String>,

    #[arg(long, global = true)]
    pub k_eig: Option<usize>,

    /// Worker threads for precompute (across meshes only).
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    /// Print the resolved configuration and exit without doing work.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Populate the precompute cache (eigenbasis, HKS, partitions,
    /// geodesics) for meshes or for the configured synthetic dataset.
    Precompute {
        /// Mesh files; with none given, the configured dataset is
        /// materialized and precomputed.
        #[arg(long = "mesh")]
        meshes: Vec<PathBuf>,
    },
    /// Compare spectral preservation of the root-node partitioner against
    /// the baseline on one mesh.
    SpectrumCheck {
        #[arg(long)]
        mesh: PathBuf,
        /// Number of nonzero eigenfunctions to audit.
        #[arg(long, default_value_t = 8)]
        report_k: usize,
    },
    /// Partition a mesh and emit the assignment JSON plus a colored PLY.
    Partition {
        #[arg(long)]
        mesh: PathBuf,
        /// Externally computed assignment file (with --method import).
        #[arg(long)]
        assignment: Option<PathBuf>,
    },
    /// Train on the configured synthetic dataset (caches must exist; run
    /// precompute first).
    Train,
    /// Evaluate a checkpoint on the configured dataset's test split.
    Eval {
        /// Checkpoint directory (default: <out-dir>/checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Color a mesh by per-vertex or per-patch labels and write a PLY.
    Export {
        #[arg(long)]
        mesh: PathBuf,
        /// JSON array of labels (length N for vertices or P for patches).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Assignment file; required for patch-level labels or when
        /// coloring the partition itself.
        #[arg(long)]
        assignment: Option<PathBuf>,
        /// Output PLY path (default: <out-dir>/export.ply).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> geotok_core::Result<()> {
    let ctx = commands::Context::from_cli(&cli)?;
    match &cli.command {
        Command::Precompute { meshes } => commands::cmd_precompute(&ctx, meshes, cli.jobs),
        Command::SpectrumCheck { mesh, report_k } => {
            commands::cmd_spectrum_check(&ctx, mesh, *report_k)
        }
        Command::Partition { mesh, assignment } => {
            commands::cmd_partition(&ctx, mesh, assignment.as_deref())
        }
        Command::Train => commands::cmd_train(&ctx),
        Command::Eval { checkpoint } => commands::cmd_eval(&ctx, checkpoint.as_deref()),
        Command::Export {
            mesh,
            labels,
            assignment,
            out,
        } => commands::cmd_export(&ctx, mesh, labels.as_deref(), assignment.as_deref(), out.as_deref()),
    }
}
