//! `pgav`: build, rank, render and stream progressive Gaussian assets.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "pgav", version, about = "Progressive mesh-anchored Gaussian assets")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for the demo texture and random orders [config: fit.seed, default 0].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Cap on worker threads [config: threads, default all cores].
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

/// Where the template mesh, animation frames and cameras come from.
#[derive(Debug, Clone, Args)]
pub struct SceneArgs {
    /// Directory written by `demo`; supplies any path not given explicitly.
    #[arg(long, value_name = "DIR")]
    pub scene: Option<PathBuf>,
    /// Template mesh (OBJ) [config: paths.mesh].
    #[arg(long, value_name = "FILE")]
    pub mesh: Option<PathBuf>,
    /// Animation frames (JSON) [config: paths.frames].
    #[arg(long, value_name = "FILE")]
    pub frames: Option<PathBuf>,
    /// Cameras (JSON) [config: paths.cameras].
    #[arg(long, value_name = "FILE")]
    pub cameras: Option<PathBuf>,
    /// Animation frame index [config: stream.frame, default 0].
    #[arg(long)]
    pub frame: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrderKind {
    Importance,
    Random,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic demo scene: mesh, frames, cameras and reference images.
    Demo {
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Fit a forest to reference images, rank it and write the asset.
    Build {
        #[command(flatten)]
        scene: SceneArgs,
        /// Directory of `ref_NNN.ppm` images [config: paths.references].
        #[arg(long, value_name = "DIR")]
        references: Option<PathBuf>,
        /// Output asset [config: paths.asset, default asset.pgav].
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Ranking CSV [config: paths.ranking, default <out>.ranking.csv].
        #[arg(long, value_name = "FILE")]
        ranking_out: Option<PathBuf>,
        /// Training log CSV [config: paths.log, default <out>.log.csv].
        #[arg(long, value_name = "FILE")]
        log_out: Option<PathBuf>,
        /// Optimizer steps [config: fit.iterations, default 600].
        #[arg(long)]
        iterations: Option<u32>,
        /// Growth threshold [config: fit.growth.epsilon, default 2e-4].
        #[arg(long)]
        epsilon: Option<f64>,
        /// Deepest subdivision level [config: fit.growth.max_level, default 4].
        #[arg(long)]
        max_level: Option<u8>,
    },
    /// Re-encode an asset in importance or random order, optionally masked.
    Encode {
        #[command(flatten)]
        scene: SceneArgs,
        /// Input asset [config: paths.asset].
        #[arg(long, value_name = "FILE")]
        asset: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = OrderKind::Importance)]
        order: OrderKind,
        /// Keep only records under these root faces, e.g. `0-19,40` [config: stream.mask].
        #[arg(long)]
        mask: Option<String>,
        /// Output asset.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Score an asset's nodes and print or write the ranking CSV.
    Rank {
        #[command(flatten)]
        scene: SceneArgs,
        /// Input asset [config: paths.asset].
        #[arg(long, value_name = "FILE")]
        asset: Option<PathBuf>,
        /// Ranking CSV; stdout when absent [config: paths.ranking].
        #[arg(long, value_name = "FILE")]
        ranking_out: Option<PathBuf>,
    },
    /// Decode a prefix of an asset and render one camera to PPM.
    Render {
        #[command(flatten)]
        scene: SceneArgs,
        /// Input asset [config: paths.asset].
        #[arg(long, value_name = "FILE")]
        asset: Option<PathBuf>,
        /// Fraction of the file to decode, snapped down to a record boundary.
        #[arg(long, default_value_t = 1.0)]
        prefix: f64,
        /// Camera index.
        #[arg(long, default_value_t = 0)]
        camera: usize,
        /// Output image.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Simulate streaming over a bandwidth-limited link.
    StreamSim {
        #[command(flatten)]
        scene: SceneArgs,
        /// Input asset [config: paths.asset].
        #[arg(long, value_name = "FILE")]
        asset: Option<PathBuf>,
        /// Bytes per second, or `ms:rate,...` segments where the last rate
        /// persists [config: stream.bandwidth, default 50000].
        #[arg(long)]
        bandwidth: Option<String>,
        /// Tick length in milliseconds [config: stream.tick_ms, default 100].
        #[arg(long)]
        tick_ms: Option<f64>,
        /// Root faces allowed to refine, e.g. `0-19,40` [config: stream.mask].
        #[arg(long)]
        mask: Option<String>,
        /// Send masked-out records after the masked-in ones [config: stream.defer_masked].
        #[arg(long)]
        defer_masked: bool,
        /// Tick limit [config: stream.max_ticks, default 10000].
        #[arg(long)]
        max_ticks: Option<usize>,
        /// Metrics CSV; stdout when absent [config: paths.metrics].
        #[arg(long, value_name = "FILE")]
        metrics_out: Option<PathBuf>,
        /// Write every checkpoint image here.
        #[arg(long, value_name = "DIR")]
        dump_dir: Option<PathBuf>,
    },
    /// Print face count, record count, level histogram and size.
    Stats {
        /// Input asset [config: paths.asset].
        #[arg(long, value_name = "FILE")]
        asset: Option<PathBuf>,
    },
}

fn parse_cli() -> Cli {
    let help = format!(
        "Configuration file defaults (every key optional, unknown keys rejected):\n{}",
        RunConfig::defaults_json()
    );
    let matches = Cli::command().after_long_help(help).get_matches();
    Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit())
}

fn main() -> ExitCode {
    let cli = parse_cli();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
