//! `onconet`: report labeling, phantom generation, training, evaluation and
//! saliency rendering from the command line.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use onconet::OncoError;

#[derive(Parser, Debug)]
#[command(name = "onconet", version, about = "Treatment response from paired PET/CT exams")]
struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Label consecutive exam pairs from report text.
    Label(LabelArgs),
    /// Generate a synthetic phantom dataset.
    Phantom(PhantomArgs),
    /// Train a model on a labeled manifest.
    Train(TrainArgs),
    /// Score a manifest and report metrics with bootstrap intervals.
    Eval(EvalArgs),
    /// Evaluate with and without reversing the exam order.
    FlipEval(EvalArgs),
    /// Kappa between model predictions and Deauville scores.
    Agreement(AgreementArgs),
    /// Guided-backpropagation saliency overlays.
    Saliency(SaliencyArgs),
    /// ROC figures from evaluation results.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct LabelArgs {
    /// Directory of `<patient_id>/<date>_<exam_id>.txt` reports.
    #[arg(long)]
    pub reports: PathBuf,
    #[arg(long, default_value = "thorax")]
    pub region: String,
    /// Manifest CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 30)]
    pub n_patients: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value_t = 12)]
    pub slices: usize,
    #[arg(long, default_value_t = onconet::exam::CT_SIZE)]
    pub ct_size: usize,
    #[arg(long, default_value_t = onconet::exam::PET_SIZE)]
    pub pet_size: usize,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Pair manifest CSV.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding one sub-directory per exam.
    #[arg(long)]
    pub exams: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Small backbone for quick experiments.
    #[arg(long)]
    pub tiny: bool,
    #[arg(long, default_value = "siamese")]
    pub variant: String,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 2)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    /// Fraction of patients held out for validation.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// In-plane size of the network input.
    #[arg(long, default_value_t = 224)]
    pub grid: usize,
    #[arg(long)]
    pub no_augment: bool,
    /// Encoder width override.
    #[arg(long)]
    pub channels: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub n_bootstrap: usize,
    /// Second checkpoint for a paired bootstrap comparison.
    #[arg(long)]
    pub compare: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AgreementArgs {
    /// `predictions.csv` written by `eval`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// CSV with `pair_id,deauville`.
    #[arg(long)]
    pub deauville: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `predicted`, `label`, or a class name.
    #[arg(long, default_value = "predicted")]
    pub target: String,
    /// `loss` or `logit`.
    #[arg(long, default_value = "loss")]
    pub objective: String,
    /// Only these pair ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub pairs: Vec<String>,
    /// Also render PET-on-CT overlays.
    #[arg(long)]
    pub pet: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// `name=eval.json`, one per region.
    #[arg(long = "eval", required = true)]
    pub evals: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "config",
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            kind: "data",
            message: message.into(),
        }
    }
}

impl From<OncoError> for CliError {
    fn from(e: OncoError) -> Self {
        match e {
            OncoError::Config(_) | OncoError::Spec(_) => Self::config(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers.max(1))
        .build_global()
        .map_err(|e| CliError::config(e.to_string()))
        .and_then(|_| run(cli.command));
    match result {
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("JSON values serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind, "message": e.message, "exit_code": e.code });
            eprintln!("{body}");
            ExitCode::from(e.code)
        }
    }
}

fn run(command: Command) -> Result<serde_json::Value, CliError> {
    match command {
        Command::Label(a) => commands::label(&a),
        Command::Phantom(a) => commands::phantom(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::FlipEval(a) => commands::flip_eval(&a),
        Command::Agreement(a) => commands::agreement(&a),
        Command::Saliency(a) => commands::saliency(&a),
        Command::Report(a) => commands::report(&a),
    }
}
