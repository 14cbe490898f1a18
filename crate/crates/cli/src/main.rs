mod commands;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use splatlight::mesh::SampleStrategy;

use error::CliError;

/// Insert 3D Gaussian objects into Gaussian scenes and relight them with
/// two-step DDS.
///
/// Exit codes: 0 success, 1 usage, 2 bad or missing data, 3 model bridge
/// failure, 130 interrupted (a checkpoint was written).
#[derive(Debug, Parser)]
#[command(name = "splatlight", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct Global {
    /// Seed for every random choice; identical seeds give identical outputs.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Model backend: `toy` for the offline models, or the base URL of a
    /// bridge server. Defaults to the job file's bridge, else `toy`.
    #[arg(long, global = true)]
    pub bridge: Option<String>,
    /// Request timeout in seconds for the bridge.
    #[arg(long, global = true, default_value_t = 30.0)]
    pub bridge_timeout: f64,
    /// Retries after a timeout or 5xx reply.
    #[arg(long, global = true, default_value_t = 2)]
    pub bridge_retries: u32,
    /// Root directory for run artifacts; each run writes to `<out>/<run-id>/`.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Name of the run directory. Defaults to the command plus a hash of the
    /// config snapshot.
    #[arg(long, global = true)]
    pub run_id: Option<String>,
    /// Log verbosity on stderr.
    #[arg(long, global = true, default_value = "info", value_parser = ["error", "warn", "info", "debug", "trace"])]
    pub log_level: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Copy an object cloud into a scene cloud under a similarity transform.
    Insert(InsertArgs),
    /// Relight the inserted object with two-step DDS.
    Relight(RelightArgs),
    /// Score relit renders against a benchmark dataset.
    Eval(EvalArgs),
    /// Sample a point cloud from an OBJ mesh.
    SamplePoints(SampleArgs),
    /// Build the personalization dataset for an object and submit fine-tuning.
    Personalize(PersonalizeArgs),
    /// Generate an image from a prompt with two-step SDS.
    #[command(name = "generate-2d")]
    Generate2d(Generate2dArgs),
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct InsertArgs {
    /// Scene cloud (PLY).
    pub scene: PathBuf,
    /// Object cloud (PLY).
    pub object: PathBuf,
    /// Insertion spec JSON: `{"translation":[x,y,z],"rotation_wxyz":[w,x,y,z],"scale":s}`.
    pub spec: PathBuf,
    /// Reset the object's colours to their mean and zero its higher SH bands.
    #[arg(long)]
    pub init_mean: bool,
    /// Preview cameras (JSON object of id → camera). Defaults to an orbit
    /// around the inserted object.
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    /// Number of orbit cameras when `--cameras` is not given.
    #[arg(long, default_value_t = 4)]
    pub preview_views: usize,
    /// Side length in pixels of the orbit cameras.
    #[arg(long, default_value_t = 64)]
    pub preview_size: usize,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct RelightArgs {
    /// Job file naming the merged cloud, insertion record, cameras, prompts
    /// and config overrides. Relative paths resolve against its directory.
    pub job: PathBuf,
    /// Continue from the checkpoint in the run directory.
    #[arg(long)]
    #[serde(skip)]
    pub resume: bool,
    /// Stop (with a checkpoint) once this many outer iterations are done.
    #[arg(long)]
    #[serde(skip)]
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Dataset root with one directory per scene.
    pub dataset: PathBuf,
    /// Outputs root with `<scene>/images/<id>.png`.
    pub outputs: PathBuf,
    /// Skip the embedding metrics (CTIS, DTIS).
    #[arg(long)]
    pub no_embedder: bool,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct SampleArgs {
    /// Mesh in OBJ format.
    pub mesh: PathBuf,
    /// `surface_area`, `uniform_triangle` or `bbox`.
    #[arg(long, default_value = "surface_area")]
    pub strategy: SampleStrategy,
    /// Number of points.
    #[arg(long, default_value_t = 10_000)]
    pub count: usize,
    /// Also write the points as ASCII `x y z` lines.
    #[arg(long)]
    pub xyz: bool,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct PersonalizeArgs {
    /// Object cloud (PLY).
    pub object: PathBuf,
    /// Personalization plan JSON; omitted fields take their defaults.
    pub plan: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct Generate2dArgs {
    /// Text prompt.
    #[arg(long)]
    pub prompt: String,
    /// Classifier-free guidance scale.
    #[arg(long, default_value_t = 15.0)]
    pub omega: f64,
    /// Total latent update steps.
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.global.log_level)
        .format_timestamp(None)
        .init();
    match commands::dispatch(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
