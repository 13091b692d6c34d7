//! `monet`: dataset generation, training, evaluation, latent traversals and
//! the provided-mask ablation report.

mod commands;
mod manifest;
mod source;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "monet", version, about = "Unsupervised multi-object scene decomposition")]
struct Cli {
    /// Worker threads; results are identical for any count
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Multi-dSprites dataset file
    GenData(GenDataArgs),
    /// Train a model and write a run directory
    Train(TrainArgs),
    /// Segment held-out scenes with a checkpoint and score them
    Eval(EvalArgs),
    /// Sweep one latent dimension of one slot and render the decoded components
    Traverse(TraverseArgs),
    /// Compare all_in_one / element_masks / wrong_element_masks runs
    Ablate(AblateArgs),
    /// Crop and resize 320x240 CLEVR renders to 128x128
    PreprocessClevr(PreprocessArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of scenes
    #[arg(long)]
    pub count: u64,
    /// Image side length in pixels
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Upper bound on sprites per scene
    #[arg(long, default_value_t = 4)]
    pub max_sprites: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite an existing output file
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchChoice {
    /// Full-size attention U-Net and component VAE
    Paper,
    /// Narrow networks for smoke tests
    Tiny,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset file, or procedural:seed=S,count=N,size=P[,start=I][,max_sprites=M]
    #[arg(long)]
    pub data: String,
    /// JSON config file; keys as in the run manifest's `config`
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory
    #[arg(long)]
    pub out: PathBuf,
    /// Total optimisation steps [default: 1000000]
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Batch size [default: 64]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Attention steps K [default: 5]
    #[arg(long)]
    pub slots: Option<usize>,
    /// Seed for parameters, batch order and noise [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// learned, all_in_one, element_masks or wrong_element_masks [default: learned]
    #[arg(long)]
    pub mask_mode: Option<String>,
    /// RMSProp learning rate [default: 0.0001]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Steps between numbered checkpoints, 0 for none [default: 0]
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    #[arg(long, value_enum, default_value_t = ArchChoice::Paper)]
    pub arch: ArchChoice,
    /// Continue from this checkpoint; --iterations is then the new total
    #[arg(long)]
    pub from_checkpoint: Option<PathBuf>,
    /// Replace an existing run directory's manifest and logs
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file or procedural:... spec (see `train --help`)
    #[arg(long)]
    pub data: String,
    /// Attention steps at test time [default: the checkpoint's K]
    #[arg(long)]
    pub slots: Option<usize>,
    /// Output directory for metrics.json and panels.png
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate only the first N scenes [default: all]
    #[arg(long)]
    pub limit: Option<usize>,
    /// Scenes per forward pass
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Images shown in panels.png
    #[arg(long, default_value_t = 8)]
    pub panels: usize,
}

#[derive(Args)]
pub struct TraverseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// PNG input matching the model's resolution
    #[arg(long)]
    pub image: PathBuf,
    /// Slot whose latent is swept
    #[arg(long)]
    pub slot: usize,
    /// Latent dimension to sweep
    #[arg(long)]
    pub dim: usize,
    /// Values spaced evenly over [-1, 1]
    #[arg(long, default_value_t = 11)]
    pub steps: usize,
    /// Attention steps [default: the checkpoint's K]
    #[arg(long)]
    pub slots: Option<usize>,
    /// Output strip
    #[arg(long, default_value = "traversal.png")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Three run directories, one per provided-mask condition
    #[arg(num_args = 3, required = true)]
    pub runs: Vec<PathBuf>,
    /// Output directory for ablation.csv and the curve plots
    #[arg(long, default_value = "ablation")]
    pub out: PathBuf,
    /// Exit nonzero unless the expected ordering holds
    #[arg(long)]
    pub require_ordering: bool,
}

#[derive(Args)]
pub struct PreprocessArgs {
    /// Directory of 320x240 PNG renders
    #[arg(long)]
    pub in_dir: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = commands::init_threads(cli.threads).and_then(|()| match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a, cli.threads),
        Command::Eval(a) => commands::eval(&a),
        Command::Traverse(a) => commands::traverse(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::PreprocessClevr(a) => commands::preprocess_clevr(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
