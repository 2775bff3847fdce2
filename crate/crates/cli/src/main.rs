//! Operator entry point: dataset generation, training, inference,
//! evaluation, gradient checking and benchmarking, driven by one JSON
//! config with dotted-path overrides.
//!
//! Exit codes: 0 success, 1 validation error, 2 numerical failure,
//! 3 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use raseformer::config::RunConfig;
use raseformer::error::{Error, Result};
use raseformer::runner;

#[derive(Parser)]
#[command(name = "raseformer", version, about = "Temporal action localization with saliency-pruned local attention")]
struct Cli {
    /// Worker threads for per-clip parallel stages; 1 guarantees bit-exact
    /// determinism.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; defaults apply for anything omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config leaf by dotted path, e.g. --set nms.sigma=0.3.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.sets)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (manifest + feature files).
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Override data.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override data.num_classes.
        #[arg(long)]
        classes: Option<usize>,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on a dataset and write checkpoint + metric log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory (or RASEFORMER_DATA_ROOT).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Accept a checkpoint whose config hash differs.
        #[arg(long)]
        allow_mismatch: bool,
    },
    /// Run inference with a checkpoint, writing preds.jsonl.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Clip split to run on.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        allow_mismatch: bool,
    },
    /// Score predictions against ground truth (full / non-aug / aug).
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Predictions file (JSON lines).
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference gradient verification (64-bit mode).
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Include a deliberately broken backward rule; the command must
        /// then fail (negative control).
        #[arg(long, hide = true)]
        self_test_corrupt: bool,
    },
    /// Time pruned attention against the quadratic reference.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        /// Ascending sequence lengths, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
        lengths: Vec<usize>,
        /// Optional output directory for bench.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    if cli.threads > 1 {
        // ignore failure when a global pool already exists (tests)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    let threads = cli.threads;
    match cli.command {
        Command::GenData {
            config,
            out,
            seed,
            classes,
            force,
        } => {
            let mut cfg = config.load()?;
            if let Some(seed) = seed {
                cfg.data.seed = seed;
            }
            if let Some(classes) = classes {
                cfg.data.num_classes = classes;
                cfg.data.validate()?;
            }
            runner::cmd_gen_data(&cfg, &out, force)
        }
        Command::Train {
            config,
            data,
            out,
            resume,
            allow_mismatch,
        } => {
            let cfg = config.load()?;
            let data = runner::resolve_data_dir(data)?;
            runner::cmd_train(&cfg, &data, &out, resume.as_deref(), allow_mismatch, threads)
                .map(|_| ())
        }
        Command::Infer {
            config,
            data,
            ckpt,
            out,
            split,
            allow_mismatch,
        } => {
            let cfg = config.load()?;
            let data = runner::resolve_data_dir(data)?;
            let split = runner::parse_split(&split)?;
            runner::cmd_infer(&cfg, &data, &ckpt, &out, split, allow_mismatch, threads)
                .map(|_| ())
        }
        Command::Eval {
            config,
            data,
            preds,
            out,
            split,
        } => {
            let cfg = config.load()?;
            let data = runner::resolve_data_dir(data)?;
            let split = runner::parse_split(&split)?;
            runner::cmd_eval(&cfg, &data, &preds, &out, split).map(|_| ())
        }
        Command::Gradcheck {
            config,
            seed,
            self_test_corrupt,
        } => {
            let cfg = config.load()?;
            runner::cmd_gradcheck(&cfg, seed, self_test_corrupt).map(|_| ())
        }
        Command::Bench {
            config,
            lengths,
            out,
        } => {
            let cfg = config.load()?;
            runner::cmd_bench(&cfg, &lengths, out.as_deref()).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
