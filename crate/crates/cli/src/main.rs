//! `patchfuse`: desk-scale RGB-D pipeline driver.
//!
//! Subcommands cover the full loop: render synthetic tabletop frames,
//! lift and voxel-compress depth, align compressed points to the patch
//! grid and fuse them with 2D tokens, gradient-check the hand-written
//! backward passes, build depth-source manifests, score loss records, and
//! recompute key stages with brute-force oracles for byte-level
//! comparison.
//!
//! Exit codes are a stable contract: 0 success, 1 validation failure
//! (including failed checks and manifests with issues), 2 I/O or format
//! failure. Stats land on stdout as JSON; logs land on stderr.

mod commands;
mod config;
mod pngio;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{AlignFuseArgs, Ctx};
use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "patchfuse", version, about = "Desk-scale RGB-D lift, compress, align and fuse pipeline")]
struct Cli {
    /// JSON pipeline config; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the seed from the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Directory for generated files.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,

    /// Print the effective config as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic tabletop RGB + depth frames and a manifest.
    Synth {
        #[arg(long, default_value_t = 1)]
        trajectories: usize,
        /// Frames per trajectory.
        #[arg(long, default_value_t = 1)]
        frames: usize,
    },
    /// Lift a depth frame to a point cloud, crop, estimate normals, and
    /// voxel-compress it.
    LiftCompress {
        /// Raw float32 depth file with its JSON sidecar next to it.
        #[arg(long, value_name = "PATH")]
        depth: PathBuf,
        /// Companion PNG; inferred from the depth file name when omitted.
        #[arg(long, value_name = "PATH")]
        rgb: Option<PathBuf>,
    },
    /// Align a compressed cloud to the patch grid and fuse with 2D tokens.
    AlignFuse {
        /// Compressed cloud PLY.
        #[arg(long, value_name = "PATH")]
        cloud: PathBuf,
        /// Inverse-index sidecar; defaults to the PLY path with .voxidx.
        #[arg(long, value_name = "PATH")]
        sidecar: Option<PathBuf>,
        /// Frame PNG for the stub 2D encoder.
        #[arg(long, value_name = "PATH")]
        rgb: Option<PathBuf>,
        /// Imported 2D token dump, replacing the stub encoder.
        #[arg(long, value_name = "PATH")]
        tokens_2d: Option<PathBuf>,
        /// Imported per-point 3D feature dump, replacing the stub encoder.
        #[arg(long, value_name = "PATH")]
        features_3d: Option<PathBuf>,
        /// Fusion checkpoint (.bin with .json manifest beside it).
        #[arg(long, value_name = "PATH")]
        params: Option<PathBuf>,
        /// Save the effective fusion parameters to this .bin path.
        #[arg(long, value_name = "PATH")]
        save_params: Option<PathBuf>,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        /// Scale one analytic block to prove the check can fail.
        #[arg(long)]
        corrupt: bool,
        /// Coordinates sampled per parameter block.
        #[arg(long, default_value_t = 10)]
        per_block: usize,
        /// Random draws for the flow-loss gradient check.
        #[arg(long, default_value_t = 25)]
        draws: usize,
    },
    /// Build a depth-source manifest for a trajectory or frame list.
    Mix {
        /// Text file with one trajectory id per line.
        #[arg(long, value_name = "PATH")]
        trajectories: Option<PathBuf>,
        /// JSONL file of frame records.
        #[arg(long, value_name = "PATH")]
        frames: Option<PathBuf>,
        /// Verify that referenced depth files exist with plausible sizes.
        #[arg(long)]
        check_files: bool,
    },
    /// Score flow-matching and sequence losses for JSONL records.
    LossEval {
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Write scored records here instead of stdout.
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
        /// Vocabulary size for uniform-logit baselines.
        #[arg(long, default_value_t = 256)]
        vocab: usize,
    },
    /// Brute-force reference routes for byte-level cross-checks.
    Oracle {
        #[command(subcommand)]
        kind: OracleKind,
    },
}

#[derive(Subcommand)]
enum OracleKind {
    /// Recompute patch features with a quadratic per-patch mean.
    ScatterMean {
        #[arg(long, value_name = "PATH")]
        cloud: PathBuf,
        #[arg(long, value_name = "PATH")]
        sidecar: Option<PathBuf>,
    },
    /// Recompute voxel compression with an ordered-map group-by.
    VoxelGroupby {
        #[arg(long, value_name = "PATH")]
        depth: PathBuf,
        #[arg(long, value_name = "PATH")]
        rgb: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err) as u8)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    if cli.print_config {
        println!("{}", serde_json::to_string_pretty(&config)?);
        return Ok(0);
    }
    let Some(command) = cli.command else {
        anyhow::bail!("no subcommand given (see --help, or --print-config for the defaults)");
    };
    // Absolutize --out so the data-root prefix for relative dataset paths
    // can never relocate the CLI's own outputs.
    let out = std::path::absolute(&cli.out)?;
    std::fs::create_dir_all(&out)?;
    let ctx = Ctx { config, out };
    match command {
        Command::Synth {
            trajectories,
            frames,
        } => commands::synth(&ctx, trajectories, frames),
        Command::LiftCompress { depth, rgb } => commands::lift_compress(&ctx, &depth, rgb),
        Command::AlignFuse {
            cloud,
            sidecar,
            rgb,
            tokens_2d,
            features_3d,
            params,
            save_params,
        } => commands::align_fuse(
            &ctx,
            &AlignFuseArgs {
                cloud,
                sidecar,
                rgb,
                tokens_2d,
                features_3d,
                params,
                save_params,
            },
        ),
        Command::Gradcheck {
            corrupt,
            per_block,
            draws,
        } => commands::gradcheck(&ctx, corrupt, per_block, draws),
        Command::Mix {
            trajectories,
            frames,
            check_files,
        } => commands::mix(&ctx, trajectories.as_deref(), frames.as_deref(), check_files),
        Command::LossEval {
            input,
            output,
            vocab,
        } => commands::loss_eval(&input, output.as_deref(), vocab),
        Command::Oracle { kind } => match kind {
            OracleKind::ScatterMean { cloud, sidecar } => {
                commands::oracle_scatter_mean(&ctx, &cloud, sidecar)
            }
            OracleKind::VoxelGroupby { depth, rgb } => {
                commands::oracle_voxel_groupby(&ctx, &depth, rgb)
            }
        },
    }
}

/// Map an error chain onto the exit-code contract: parse and I/O problems
/// are 2, semantic validation is 1. The first recognizable cause decides,
/// so wrapped sources keep their classification.
fn classify(err: &anyhow::Error) -> i32 {
    use patchfuse_core::alignment::AlignmentError;
    use patchfuse_core::compression::CompressionError;
    use patchfuse_core::datapipe::DatapipeError;
    use patchfuse_core::fusion::FusionError;
    use patchfuse_core::geometry::GeometryError;
    use patchfuse_core::objectives::ObjectiveError;
    use patchfuse_core::ply::PlyError;

    for cause in err.chain() {
        if cause.downcast_ref::<std::io::Error>().is_some()
            || cause.downcast_ref::<serde_json::Error>().is_some()
            || cause.downcast_ref::<image::ImageError>().is_some()
            || cause.downcast_ref::<PlyError>().is_some()
        {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<CompressionError>() {
            return match e {
                CompressionError::Io(_) | CompressionError::Ply(_) | CompressionError::Format(_) => 2,
                _ => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<AlignmentError>() {
            return match e {
                AlignmentError::Io(_) | AlignmentError::Format(_) => 2,
                _ => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<FusionError>() {
            return match e {
                FusionError::Io(_) | FusionError::Format(_) => 2,
                _ => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<DatapipeError>() {
            return match e {
                DatapipeError::Io(_) | DatapipeError::Json(_) | DatapipeError::Format(_) => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<GeometryError>().is_some()
            || cause.downcast_ref::<ObjectiveError>().is_some()
        {
            return 1;
        }
    }
    1
}
