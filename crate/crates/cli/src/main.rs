mod artifacts;
mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit status plus message for a failed run.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub const USAGE: u8 = 2;
    pub const DATA: u8 = 3;
    pub const NUMERIC: u8 = 4;

    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: Self::USAGE,
            msg: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self {
            code: Self::DATA,
            msg: msg.into(),
        }
    }
}

impl From<meshdiff::Error> for CliError {
    fn from(e: meshdiff::Error) -> Self {
        let code = match e {
            meshdiff::Error::NonFinite(_) => Self::NUMERIC,
            _ => Self::DATA,
        };
        Self { code, msg: e.to_string() }
    }
}

#[derive(Parser, Debug)]
#[command(name = "meshdiff", version, about = "Diffusion models for articulated meshes")]
struct Cli {
    /// TOML file with a table per subcommand; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic articulated-body dataset.
    GenData(GenDataArgs),
    /// Train the diffusion model (and the upsampler) on a dataset.
    Train(TrainArgs),
    /// Generate meshes, optionally conditioned on joints.
    Sample(SampleArgs),
    /// Interpolate between two noise endpoints.
    Morph(MorphArgs),
    /// Move control joints to targets while keeping the body plausible.
    Deform(DeformArgs),
    /// Fit a body to 2D keypoints under a weak-perspective camera.
    Fit2d(Fit2dArgs),
    /// Compare a generated set of meshes with a reference set.
    Eval(EvalArgs),
    /// List the tensors and metadata of a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training bodies.
    #[arg(long)]
    samples: Option<usize>,
    /// Validation bodies.
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for checkpoints and the loss CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_drop_epoch: Option<usize>,
    #[arg(long)]
    ema_decay: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    vertex_weight: Option<f64>,
    #[arg(long)]
    joint_weight: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    mlp_ratio: Option<usize>,
    #[arg(long)]
    time_features: Option<usize>,
    #[arg(long)]
    long_skip: Option<bool>,
    /// learned | sinusoidal | template
    #[arg(long)]
    pos_embed: Option<String>,
    /// token | add
    #[arg(long)]
    time_embed: Option<String>,
    /// Model per-vertex normals as extra channels.
    #[arg(long)]
    normals: Option<bool>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    upsampler_iters: Option<usize>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Condition on these joints (`name x y z` rows, any rigid frame).
    #[arg(long)]
    joints: Option<PathBuf>,
    /// Classifier-free guidance scale; 0 is plain conditioning.
    #[arg(long)]
    cfg: Option<f64>,
}

#[derive(Args, Debug)]
struct MorphArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Endpoint: a `.noise` file written by `sample`, or an OBJ to invert.
    #[arg(long)]
    a: Option<PathBuf>,
    #[arg(long)]
    b: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated SLERP weights; values outside [0, 1] extrapolate.
    #[arg(long, allow_hyphen_values = true)]
    weights: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct OptimizeArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Starting body: OBJ with a `.joints` file beside it.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-iteration loss history (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_final: Option<f64>,
    #[arg(long)]
    t_start: Option<usize>,
    #[arg(long)]
    t_end: Option<usize>,
    /// Fraction of the way to the denoised estimate each SDS target sits.
    #[arg(long)]
    sds_scale: Option<f64>,
    #[arg(long)]
    w_sds: Option<f64>,
    #[arg(long)]
    w_edge: Option<f64>,
    #[arg(long)]
    w_lap: Option<f64>,
    #[arg(long)]
    w_consist: Option<f64>,
    /// Weight of the control-point or keypoint term.
    #[arg(long)]
    w_target: Option<f64>,
}

#[derive(Args, Debug)]
struct DeformArgs {
    #[command(flatten)]
    common: OptimizeArgs,
    /// Control targets: `name x y z` rows.
    #[arg(long)]
    targets: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Fit2dArgs {
    #[command(flatten)]
    common: OptimizeArgs,
    /// Image keypoints: `name u v` rows; unlisted joints are invisible.
    #[arg(long)]
    kp2d: Option<PathBuf>,
    /// Camera: `scale s`, `tu x`, `tv y` rows.
    #[arg(long)]
    camera: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    gen: Option<PathBuf>,
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Report CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Defaults to topology.txt in the reference or generated directory
    /// or their parents.
    #[arg(long)]
    topology: Option<PathBuf>,
    /// Any of ra1nna, 1nna, mmd, cov, chamfer, mpjpe, pa_mpjpe, mpve.
    #[arg(long)]
    metrics: Option<String>,
    /// chamfer | l2
    #[arg(long)]
    distance: Option<String>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    use settings::{load, overlay, overlay_opt};
    let cfg = cli.config.as_deref();
    match cli.command {
        Command::GenData(a) => {
            let mut s: settings::GenData = load(cfg, "gen-data")?;
            overlay!(s, a; samples, val);
            overlay_opt!(s, a; out, seed);
            commands::gen_data(&s)
        }
        Command::Train(a) => {
            let mut s: settings::Train = load(cfg, "train")?;
            overlay!(s, a; epochs, batch_size, lr, checkpoint_every, vertex_weight, joint_weight, layers,
                hidden, heads, mlp_ratio, time_features, long_skip, pos_embed, time_embed, normals, t_max,
                upsampler_iters);
            overlay_opt!(s, a; data, out, seed, resume, lr_drop_epoch, ema_decay);
            commands::train(&s)
        }
        Command::Sample(a) => {
            let mut s: settings::Sample = load(cfg, "sample")?;
            overlay!(s, a; n, steps);
            overlay_opt!(s, a; ckpt, out, seed, joints, cfg);
            commands::sample(&s)
        }
        Command::Morph(a) => {
            let mut s: settings::Morph = load(cfg, "morph")?;
            overlay!(s, a; weights, steps);
            overlay_opt!(s, a; ckpt, a, b, out);
            commands::morph(&s)
        }
        Command::Deform(a) => {
            let mut s: settings::Optimize = load(cfg, "deform")?;
            overlay_common(&mut s, &a.common);
            overlay_opt!(s, a; targets);
            commands::deform(&s)
        }
        Command::Fit2d(a) => {
            let mut s: settings::Optimize = load(cfg, "fit2d")?;
            overlay_common(&mut s, &a.common);
            overlay_opt!(s, a; kp2d, camera);
            commands::fit2d(&s)
        }
        Command::Eval(a) => {
            let mut s: settings::Eval = load(cfg, "eval")?;
            overlay!(s, a; metrics, distance);
            overlay_opt!(s, a; gen, reference, out, topology);
            commands::eval(&s)
        }
        Command::Inspect(a) => {
            let mut s: settings::Inspect = load(cfg, "inspect")?;
            overlay_opt!(s, a; ckpt);
            commands::inspect(&s)
        }
    }
}

fn overlay_common(s: &mut settings::Optimize, a: &OptimizeArgs) {
    use settings::{overlay, overlay_opt};
    overlay!(s, a; iters, lr, lr_final, sds_scale, w_sds, w_edge, w_lap, w_consist, w_target);
    overlay_opt!(s, a; ckpt, init, out, report, seed, t_start, t_end);
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(CliError::USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
