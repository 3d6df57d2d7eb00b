//! Command-line driver: corpus generation, pre-training, fine-tuning,
//! evaluation, gradient checking and masking-plan inspection.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use layoutmask::heads::TaskKind;
use layoutmask::model::Precision;
use layoutmask::{Error, ErrorClass};

#[derive(Parser)]
#[command(name = "layoutmask", version, about = "Layout-aware multimodal pre-training with unified text and image masking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labelled corpus (JSON lines plus images).
    GenCorpus(GenArgs),
    /// Pre-train with any combination of MLM, MIM and WPA.
    Pretrain(TrainArgs),
    /// Train a task head, then score it on the evaluation split.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a corpus, or a prediction dump against gold.
    Evaluate(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the masking plan drawn for one document as JSON.
    InspectPlan(InspectArgs),
}

#[derive(Args, Clone)]
pub struct GenArgs {
    /// Output JSON-lines file; images go to `<stem>_images/` beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub count: u64,
    /// Seed of the first document; document i uses seed + i.
    #[arg(long)]
    pub seed: u64,
    /// Number of document classes.
    #[arg(long, default_value_t = 4)]
    pub classes: u32,
    /// Assign classes round-robin instead of by seed.
    #[arg(long)]
    pub balanced: bool,
}

#[derive(Args, Clone, Default)]
pub struct TrainArgs {
    /// TOML file supplying any of these options; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Required for training, here or in the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Held-out corpus scored after fine-tuning.
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Vocabulary file; defaults to the one beside `--init`, else built
    /// from the corpus.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Model preset: desk, base, large or gradcheck.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub accumulation: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Fraction of steps spent warming up the learning rate.
    #[arg(long)]
    pub warmup: Option<f64>,
    /// Enabled objectives, e.g. `mlm,mim,wpa` or `none`.
    #[arg(long)]
    pub objectives: Option<String>,
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args, Clone)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_parser = parse_task)]
    pub task: Option<TaskKind>,
    /// Output classes of the head; defaults to the task's natural count.
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Args, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// With a checkpoint: where to write predictions. Otherwise: the dump
    /// to score.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    pub task: Option<TaskKind>,
    /// Also write the report line here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Clone)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Model preset to check; the gradcheck preset is the reference.
    #[arg(long, default_value = "gradcheck")]
    pub preset: String,
    /// Largest relative error accepted before exiting with status 3.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Args, Clone)]
pub struct InspectArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Zero-based document index in the corpus.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("expected f32 or f64, got {s:?}")),
    }
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("expected token-label, doc-class or extractive-qa, got {s:?}"))
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Finetune(a) => commands::finetune(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::InspectPlan(a) => commands::inspect_plan(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
