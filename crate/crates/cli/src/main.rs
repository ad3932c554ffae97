use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::RangedU64ValueParser;
use clap::{ArgGroup, Args, Parser, Subcommand};

use dit_compress::attention::AttentionConfig;
use dit_compress::model::ModelConfig;

mod artifacts;
mod commands;

#[derive(Parser)]
#[command(name = "dit-compress", version)]
#[command(about = "Attention compression for a toy diffusion transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search a compression plan and write plan, cost and heatmap files.
    Search {
        #[command(flatten)]
        model: ModelArgs,

        /// Loss budget; must be >= 0.
        #[arg(long, default_value_t = 0.05, allow_negative_numbers = true, value_parser = non_negative)]
        delta: f64,

        #[arg(long, default_value = ".")]
        out: PathBuf,
    },

    /// Sample under a plan (or uncompressed) and dump the final latent.
    #[command(group(ArgGroup::new("source").required(true).args(["plan", "full"])))]
    Generate {
        #[command(flatten)]
        model: ModelArgs,

        #[arg(long)]
        plan: Option<PathBuf>,

        /// Run every layer with full attention.
        #[arg(long)]
        full: bool,

        #[arg(long, default_value = ".")]
        out: PathBuf,
    },

    /// Attention-output similarity across steps and across CFG branches.
    Analyze {
        #[command(flatten)]
        model: ModelArgs,

        #[arg(long, default_value = ".")]
        out: PathBuf,
    },

    /// Attention FLOPs of a plan. Steps and layers default to the plan's own.
    Cost {
        #[command(flatten)]
        model: ModelArgs,

        #[arg(long)]
        plan: PathBuf,

        /// Also write cost.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Debug)]
pub(crate) struct ModelArgs {
    /// Transformer blocks [default: the plan's, else 8]
    #[arg(long, value_parser = extent())]
    pub(crate) layers: Option<usize>,

    /// Denoising steps [default: the plan's, else 16]
    #[arg(long, value_parser = extent())]
    pub(crate) steps: Option<usize>,

    #[arg(long, default_value_t = 256, value_parser = extent())]
    pub(crate) seqlen: usize,

    #[arg(long, default_value_t = 4, value_parser = extent())]
    pub(crate) heads: usize,

    #[arg(long, default_value_t = 16, value_parser = extent())]
    pub(crate) head_dim: usize,

    #[arg(long, default_value_t = 4, value_parser = extent())]
    pub(crate) mlp_ratio: usize,

    /// Window width as a fraction of the sequence length.
    #[arg(long, default_value_t = 0.125, value_parser = positive)]
    pub(crate) window_frac: f64,

    #[arg(long, default_value_t = 4.0, allow_negative_numbers = true, value_parser = non_negative)]
    pub(crate) guidance: f64,

    #[arg(long, default_value_t = 0)]
    pub(crate) seed: u64,

    /// Class label for the conditional branch (0-9).
    #[arg(long = "class", default_value_t = 0, value_parser = RangedU64ValueParser::<usize>::new().range(..10))]
    pub(crate) class_id: usize,
}

impl ModelArgs {
    pub(crate) fn config(&self) -> ModelConfig {
        self.config_with(self.layers.unwrap_or(8), self.steps.unwrap_or(16))
    }

    pub(crate) fn config_with(&self, layers: usize, steps: usize) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            num_steps: steps,
            seq_len: self.seqlen,
            num_heads: self.heads,
            head_dim: self.head_dim,
            mlp_ratio: self.mlp_ratio,
            window: AttentionConfig::window_from_frac(self.seqlen, self.window_frac),
            guidance_scale: self.guidance as f32,
            seed: self.seed,
        }
    }
}

fn extent() -> RangedU64ValueParser<usize> {
    RangedU64ValueParser::new().range(1..)
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("must be a finite number >= 0, got {s}"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("must be a finite number > 0, got {s}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Search { model, delta, out } => commands::search(&model, delta, &out),
        Command::Generate {
            model,
            plan,
            full: _,
            out,
        } => commands::generate(&model, plan.as_deref(), &out),
        Command::Analyze { model, out } => commands::analyze(&model, &out),
        Command::Cost { model, plan, out } => commands::cost(&model, &plan, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
