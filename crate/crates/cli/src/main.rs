//! `vda`: toy data generation, training, evaluation and baselines.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data errors.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::{ContextKind, ContextValue, ErrorKind};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vda_core::evaluation::FrameCount;

#[derive(Parser, Debug)]
#[command(
    name = "vda",
    version,
    about = "Image-to-video feature adaptation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the procedural toy corpus.
    GenToy(GenToyArgs),
    /// Train the reference embedder on labeled stills.
    Pretrain(PretrainArgs),
    /// Adapt an embedder to unlabeled video.
    Train(TrainArgs),
    /// Score video pairs under a protocol.
    Eval(EvalArgs),
    /// Order a video's frames by discriminator weight.
    RankFrames(RankFramesArgs),
    /// Apply one synthetic degradation to an image.
    Degrade(DegradeArgs),
    /// Fit a PCA or CORAL feature transform.
    Baseline(BaselineArgs),
    /// Write per-image or per-frame descriptors to a feature file.
    Embed(EmbedArgs),
    /// Train every ablation model on a toy corpus and print the table.
    Ablation(AblationArgs),
}

/// `toy`, `full`, or a path to a network config JSON.
#[derive(Args, Debug, Clone)]
struct NetworkArg {
    #[arg(long, value_name = "toy|full|PATH", default_value = "toy")]
    network: String,
}

#[derive(Args, Debug)]
struct GenToyArgs {
    /// Generator config (JSON file or inline object); defaults apply otherwise.
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Image manifest (JSON Lines).
    #[arg(long)]
    images: PathBuf,
    /// Pretraining config (JSON file or inline object).
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training config. `{"preset": "F", ...}` starts from a preset and
    /// overrides the given fields.
    #[arg(long)]
    config: String,
    /// Reference network checkpoint.
    #[arg(long)]
    rfnet: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    videos: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    network: NetworkArg,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ProtocolArg {
    Verification,
    Set,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum FusionArg {
    Uniform,
    Weighted,
}

fn parse_frames(s: &str) -> Result<FrameCount, String> {
    s.parse().map_err(|e: vda_core::Error| e.to_string())
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_enum, default_value = "verification")]
    protocol: ProtocolArg,
    /// Embedder checkpoint, optionally followed by a discriminator checkpoint.
    #[arg(long, num_args = 1..=2, value_names = ["VDNET", "DISC"], required = true)]
    ckpt: Vec<PathBuf>,
    /// Evaluation video manifest.
    #[arg(long)]
    videos: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    /// Identity sidecar, needed by the set protocol.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, value_parser = parse_frames, default_value = "all")]
    frames: FrameCount,
    #[arg(long, value_enum, default_value = "uniform")]
    fusion: FusionArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    network: NetworkArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RankFramesArgs {
    /// Video manifest.
    #[arg(long)]
    video: PathBuf,
    /// Which row of the manifest; the first one by default.
    #[arg(long)]
    video_id: Option<String>,
    #[arg(long, num_args = 2, value_names = ["VDNET", "DISC"], required = true)]
    ckpt: Vec<PathBuf>,
    #[command(flatten)]
    network: NetworkArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DegradeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Degradation to apply (JSON file or inline object); sampled from the
    /// seed when absent.
    #[arg(long)]
    spec: Option<String>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum MethodArg {
    Pca,
    Coral,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Feature file of labeled stills.
    #[arg(long)]
    train_images: PathBuf,
    /// Feature file of unlabeled video frames.
    #[arg(long)]
    train_videos: PathBuf,
    /// PCA variance to retain.
    #[arg(long, default_value_t = 0.9)]
    retain: f64,
    /// CORAL ridge; scaled to the feature traces when absent.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Image manifest.
    #[arg(long, conflicts_with = "videos", required_unless_present = "videos")]
    images: Option<PathBuf>,
    /// Video manifest; every frame becomes a row.
    #[arg(long)]
    videos: Option<PathBuf>,
    #[command(flatten)]
    network: NetworkArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum AblationPreset {
    Table1,
}

#[derive(Args, Debug)]
struct AblationArgs {
    #[arg(long, value_enum)]
    preset: AblationPreset,
    /// Toy corpus directory written by `gen-toy`.
    #[arg(long)]
    toy: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training iterations per model; the preset's when absent.
    #[arg(long)]
    iterations: Option<usize>,
    /// Reference checkpoint; pretrained on the toy stills when absent.
    #[arg(long)]
    rfnet: Option<PathBuf>,
    /// Iterations of the implicit pretraining.
    #[arg(long)]
    pretrain_iterations: Option<usize>,
    /// Frame counts, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_frames)]
    frames: Option<Vec<FrameCount>>,
    /// Write the table here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Bad invocation that clap itself cannot detect.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn clap_failure(e: clap::Error, argv: &[String]) -> ExitCode {
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
            let _ = e.print();
            ExitCode::SUCCESS
        }
        ErrorKind::MissingRequiredArgument => {
            let missing = match e.get(ContextKind::InvalidArg) {
                Some(ContextValue::Strings(v)) => v.join(", "),
                Some(ContextValue::String(s)) => s.clone(),
                _ => "arguments".into(),
            };
            let sub = argv.get(1).map(|s| format!(" {s}")).unwrap_or_default();
            eprintln!("vda{sub}: missing required {missing} (see --help)");
            ExitCode::from(1)
        }
        _ => {
            let _ = e.print();
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => return clap_failure(e, &argv),
    };
    if let Err(e) = vda_core::parallel::worker_count() {
        eprintln!("vda: {e}");
        return ExitCode::from(1);
    }
    match commands::run(cli.command, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("vda: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("vda: {e:#}");
            ExitCode::from(2)
        }
    }
}
