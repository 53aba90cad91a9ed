//! `pfoa`: command-line workflow for patellofemoral OA progression models.
//!
//! All commands share one run directory (`--out`):
//!
//! ```text
//! cohort/       clinical.csv, images/, landmarks/, lesions/   (synth)
//! rois/         <knee>.f32 + .json, previews/, failures.csv    (preprocess)
//! folds.json                                                   (train)
//! models/<m>/   fold models and parameter manifest             (train)
//! predictions/  <m>.csv out-of-fold probabilities              (train, stack)
//! eval/         report.json, roc_<m>.csv, pr_<m>.csv           (eval)
//! manifests/    one JSON per command                           (all)
//! ```

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod error;
mod manifest;

use error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Gbm1,
    Gbm2,
    Gbm3,
    Cnn,
    #[value(name = "cnn-attn")]
    CnnAttn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gbm1 => "gbm1",
            ModelKind::Gbm2 => "gbm2",
            ModelKind::Gbm3 => "gbm3",
            ModelKind::Cnn => "cnn",
            ModelKind::CnnAttn => "cnn-attn",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "pfoa", version, about = "Patellofemoral OA progression: data, models, evaluation")]
pub struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory shared by all commands.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Worker threads for fold-level parallelism (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Summary format on stdout; `json` also makes errors JSON on stderr.
    #[arg(long, global = true, value_enum, default_value = "json")]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort under `<out>/cohort`.
    Synth {
        /// Overrides `synth.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Extract normalized ROIs for every knee of the cohort.
    Preprocess,
    /// Cross-validate one model and write its out-of-fold predictions.
    Train {
        #[arg(long, value_enum)]
        model: ModelKind,
        /// Overrides `cv.folds`.
        #[arg(long)]
        folds: Option<usize>,
        /// Overrides `cv.seed`, `gbm.seed` and `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Metrics and curves for prediction files (default: all in the run).
    Eval { predictions: Vec<PathBuf> },
    /// DeLong test between two prediction files on the same knees.
    Compare { a: PathBuf, b: PathBuf },
    /// Second-layer fusion of a clinical and an image prediction file.
    Stack {
        #[arg(long)]
        clinical: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Name of the stacked model column.
        #[arg(long, default_value = "stack")]
        name: String,
    },
    /// Exact SHAP values of a trained clinical model for every knee.
    Explain {
        #[arg(long, value_enum)]
        model: ModelKind,
    },
    /// Attention overlays for selected knees.
    Attn {
        #[arg(long, value_enum, default_value = "cnn-attn")]
        model: ModelKind,
        /// Comma-separated knee ids.
        #[arg(long, value_delimiter = ',', required = true)]
        knees: Vec<String>,
        /// Attention tap index (default: the deepest).
        #[arg(long)]
        tap: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let format = cli.format;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if format == Format::Json {
                let msg = serde_json::json!({ "error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code() });
                eprintln!("{msg}");
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let mut cfg = config::RunConfig::load(cli.config.as_deref())?;
    let ctx = commands::Context {
        run: cli.out.clone(),
        format: cli.format,
    };
    match cli.command {
        Command::Synth { seed } => {
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            commands::synth(&ctx, &cfg)
        }
        Command::Preprocess => commands::preprocess(&ctx, &cfg),
        Command::Train { model, folds, seed } => {
            if let Some(k) = folds {
                cfg.cv.folds = k;
            }
            if let Some(s) = seed {
                cfg.cv.seed = s;
                cfg.gbm.seed = s;
                cfg.train.seed = s;
            }
            commands::train(&ctx, &cfg, model)
        }
        Command::Eval { predictions } => commands::eval(&ctx, &cfg, &predictions),
        Command::Compare { a, b } => commands::compare(&ctx, &cfg, &a, &b),
        Command::Stack { clinical, image, name } => commands::stack(&ctx, &cfg, &clinical, &image, &name),
        Command::Explain { model } => commands::explain(&ctx, &cfg, model),
        Command::Attn { model, knees, tap } => commands::attn(&ctx, &cfg, model, &knees, tap),
    }
}
