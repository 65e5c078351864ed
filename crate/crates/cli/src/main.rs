//! `diffeeg` command-line driver.
//!
//! Every subcommand reads one TOML config (optional), applies `--set
//! key=value` overrides in order, then its own flags, which win. The fully
//! resolved config is logged to stderr before any work starts.
//!
//! Exit status: 0 success, 1 I/O failure, 2 configuration error, 3 data
//! format error, 4 protocol violation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use diffeeg::Error;
use toml::Value;

#[derive(Parser)]
#[command(name = "diffeeg", version, about = "Diffusion-based EEG augmentation for seizure prediction")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.iters=300`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Run with this many rayon worker threads (0: one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic recording and write its labelled segments and annotations.
    Synth {
        /// Segment store to write (paths.data).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Annotation CSV to write (paths.annotations).
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Synthetic profile seed (synth.profile.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the diffusion model on the real preictal segments of a store.
    TrainDiffusion {
        /// Segment store to read (paths.data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to write (paths.checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Loss trace CSV (paths.trace).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Total iterations to reach (train.iters).
        #[arg(long)]
        iters: Option<usize>,
        /// Continue from this checkpoint instead of initialising afresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample synthetic preictal segments from a trained diffusion model.
    Generate {
        /// Diffusion checkpoint (paths.checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Store whose real preictal segments supply conditioners (paths.data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Annotation CSV for the store (paths.annotations).
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Number of segments (generate.count).
        #[arg(long)]
        count: Option<usize>,
        /// Sampling seed (seeds.generate).
        #[arg(long)]
        seed: Option<u64>,
        /// Store to write (paths.samples).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Balance all real data, train one classifier and save it.
    TrainClassifier {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// balance.method: downsample, sliding, recombine or diffusion.
        #[arg(long)]
        balance: Option<String>,
        /// clf.arch: mlp, cnn or transformer.
        #[arg(long)]
        arch: Option<String>,
        /// Classifier checkpoint to write (paths.classifier).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Leave-one-seizure-out cross-validation; writes a Patient,Sens,FPR,AUC report.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// balance.method: downsample, sliding, recombine or diffusion.
        #[arg(long)]
        balance: Option<String>,
        /// Comma-separated classifier families, or `all` (eval.archs).
        #[arg(long, value_delimiter = ',')]
        arch: Vec<String>,
        /// Folds run concurrently (eval.jobs).
        #[arg(long)]
        jobs: Option<usize>,
        /// Report CSV (paths.report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn path(p: PathBuf) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

fn int(v: impl TryInto<i64>) -> Value {
    Value::Integer(v.try_into().unwrap_or(i64::MAX))
}

impl Command {
    /// Flag values as config overrides.
    fn overrides(&self) -> Vec<(String, Value)> {
        let mut out: Vec<(&str, Option<Value>)> = Vec::new();
        match self {
            Command::Synth { out: o, annotations, seed } => {
                out.push(("paths.data", o.clone().map(path)));
                out.push(("paths.annotations", annotations.clone().map(path)));
                out.push(("synth.profile.seed", seed.map(int)));
            }
            Command::TrainDiffusion { data, out: o, trace, iters, .. } => {
                out.push(("paths.data", data.clone().map(path)));
                out.push(("paths.checkpoint", o.clone().map(path)));
                out.push(("paths.trace", trace.clone().map(path)));
                out.push(("train.iters", iters.map(int)));
            }
            Command::Generate { checkpoint, data, annotations, count, seed, out: o } => {
                out.push(("paths.checkpoint", checkpoint.clone().map(path)));
                out.push(("paths.data", data.clone().map(path)));
                out.push(("paths.annotations", annotations.clone().map(path)));
                out.push(("generate.count", count.map(int)));
                out.push(("seeds.generate", seed.map(int)));
                out.push(("paths.samples", o.clone().map(path)));
            }
            Command::TrainClassifier { data, annotations, balance, arch, out: o } => {
                out.push(("paths.data", data.clone().map(path)));
                out.push(("paths.annotations", annotations.clone().map(path)));
                out.push(("balance.method", balance.clone().map(Value::String)));
                out.push(("clf.arch", arch.clone().map(Value::String)));
                out.push(("paths.classifier", o.clone().map(path)));
            }
            Command::Evaluate { data, annotations, balance, arch, jobs, out: o } => {
                out.push(("paths.data", data.clone().map(path)));
                out.push(("paths.annotations", annotations.clone().map(path)));
                out.push(("balance.method", balance.clone().map(Value::String)));
                let archs = (!arch.is_empty()).then(|| Value::Array(arch.iter().cloned().map(Value::String).collect()));
                out.push(("eval.archs", archs));
                out.push(("eval.jobs", jobs.map(int)));
                out.push(("paths.report", o.clone().map(path)));
            }
        }
        out.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))).collect()
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut overrides = cli.common.set.iter().map(|s| config::parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    overrides.extend(cli.command.overrides());
    let cfg = config::resolve(cli.common.config.as_deref(), &overrides)?;
    eprintln!("# resolved config\n{}", cfg.to_toml());
    if cli.common.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cli.common.threads).build_global()?;
    }
    match &cli.command {
        Command::Synth { .. } => commands::synth(&cfg),
        Command::TrainDiffusion { resume, .. } => commands::train_diffusion(&cfg, resume.as_deref()),
        Command::Generate { .. } => commands::generate(&cfg),
        Command::TrainClassifier { .. } => commands::train_classifier(&cfg),
        Command::Evaluate { .. } => commands::evaluate(&cfg),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidArgument(_) => 2,
                Error::Format(_) | Error::Shape(_) => 3,
                Error::Protocol(_) => 4,
                Error::Io(_) => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let help = format!("Config keys and defaults:\n{}", config::key_listing());
    let matches = Cli::command().after_long_help(help).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
