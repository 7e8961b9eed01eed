//! `avsplat`: fit, render, animate and edit layered avatar splats.

mod commands;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use avatar_splat::io::RunConfig;
use avatar_splat::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "avsplat", version, about = "Layered mesh-anchored Gaussian splatting for avatars")]
pub struct Cli {
    /// TOML run configuration. Falls back to $AVSPLAT_CONFIG, then to
    /// built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Reconstruct a layered scene from posed views and masks.
    Fit(FitArgs),
    /// Render a scene from one camera.
    Render(RenderArgs),
    /// Render a pose sequence, optionally through a trained deformation field.
    Animate(AnimateArgs),
    /// Group-level asset edits.
    #[command(subcommand)]
    Edit(EditCommand),
    /// Compare analytic and finite-difference gradients on a random problem.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic fixture to disk.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    /// Directory of NNN.cam, NNN.png and NNN.mask.png triples.
    #[arg(long)]
    pub views: Option<PathBuf>,
    /// Take the asset layer from this scene instead of seeding it from the
    /// masks.
    #[arg(long)]
    pub init_splats: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the iteration count; densification and the front-view
    /// phase are clipped to it.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Write a checkpoint scene every N iterations (0 disables).
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: usize,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long)]
    pub camera: PathBuf,
    /// Pose sequence; frame `--frame` of it is rendered.
    #[arg(long)]
    pub pose: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    /// RGBA PNG output.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one image per category and an identity label map.
    #[arg(long)]
    pub layers: bool,
}

#[derive(Args, Debug)]
pub struct AnimateArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long)]
    pub poses: PathBuf,
    /// Camera files; repeat for several.
    #[arg(long = "camera", required = true)]
    pub cameras: Vec<PathBuf>,
    /// Trained deformation field to apply.
    #[arg(long, conflicts_with = "train_deform")]
    pub deform: Option<PathBuf>,
    /// Train a field against `--frames` first and save it as deform.bin.
    #[arg(long, requires = "frames")]
    pub train_deform: bool,
    /// Reference frames NNN.cam/NNN.png, one per pose, plus optional extra
    /// views NNN.K.cam/NNN.K.png.
    #[arg(long)]
    pub frames: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SceneArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum EditCommand {
    /// Delete every asset Gaussian of a category.
    Remove {
        #[command(flatten)]
        io: SceneArgs,
        /// Index or name.
        #[arg(long)]
        category: String,
    },
    /// Re-fit a category's colors, keeping all geometry.
    Recolor {
        #[command(flatten)]
        io: SceneArgs,
        #[arg(long)]
        category: String,
        /// Flat target as r,g,b in [0, 1].
        #[arg(long, conflicts_with = "target_views", required_unless_present = "target_views")]
        color: Option<String>,
        /// Directory of NNN.cam/NNN.png target views.
        #[arg(long)]
        target_views: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Write one category as its own scene.
    Extract {
        #[command(flatten)]
        io: SceneArgs,
        #[arg(long)]
        category: String,
        /// Also write the remaining scene here.
        #[arg(long)]
        rest: Option<PathBuf>,
    },
    /// Move a scene's assets onto another mesh with the same faces.
    Transfer {
        #[command(flatten)]
        io: SceneArgs,
        #[arg(long)]
        target_mesh: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// ori, id2d, id3d, ani, sdf or ref.
    #[arg(long)]
    pub loss: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub coords: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// `avatar` (layered body with views and masks) or `band` (oscillating
    /// band with reference frames).
    #[arg(long, default_value = "avatar")]
    pub kind: String,
    #[arg(long, default_value_t = 16)]
    pub views: usize,
    #[arg(long, default_value_t = 128)]
    pub size: u32,
    #[arg(long, default_value_t = 3)]
    pub sh_degree: usize,
}

/// Errors that end the process, with their exit code.
#[derive(Debug)]
pub enum Failure {
    Core(Error),
    /// A check ran and found a violated invariant.
    Invariant(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn report(kind: &str, msg: &str, code: u8) -> ExitCode {
    eprintln!("error kind={kind} msg={}", one_line(msg));
    ExitCode::from(code)
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os("AVSPLAT_CONFIG").map(PathBuf::from));
    match path {
        Some(p) => RunConfig::load(&p),
        None => Ok(RunConfig::default()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            return report("Usage", first, 1);
        }
    };
    let result = load_config(&cli).map_err(Failure::from).and_then(|cfg| commands::run(&cli, cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => report(e.kind(), &e.to_string(), if e.is_internal() { 2 } else { 1 }),
        Err(Failure::Invariant(msg)) => report("InvariantViolation", &msg, 2),
    }
}
