use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use ggp_cli::config::{load_run, load_suite, load_synth, SynthFile};
use ggp_cli::{cmd_benchmark, cmd_evaluate, cmd_synth, cmd_train, CliError};
use ggp_core::model::Family;

/// Grouped Gaussian process forecasting.
#[derive(Parser)]
#[command(name = "ggp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, training log and summary.
    Train {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Forecast the test split with a trained checkpoint.
    Evaluate {
        #[command(flatten)]
        run: RunFlags,
        /// Defaults to `checkpoint.txt` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Replacement observations file (requires --sites).
        #[arg(long, requires = "sites")]
        observations: Option<PathBuf>,
        #[arg(long, requires = "observations")]
        sites: Option<PathBuf>,
    },
    /// Run a budget-matched comparison suite.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Run models concurrently (disables timed curves).
        #[arg(long)]
        parallel: bool,
    },
    /// Generate a synthetic multi-site data set.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        noise: Option<f64>,
    },
}

#[derive(Args)]
struct RunFlags {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    family: Option<Family>,
    #[arg(long)]
    inducing: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
}

impl RunFlags {
    fn load(&self) -> Result<ggp_cli::config::RunConfig, CliError> {
        let mut cfg = load_run(&self.config)?;
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.family {
            cfg.model.family = v;
        }
        if let Some(v) = self.inducing {
            cfg.model.inducing = v;
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.train.max_epochs = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = self.samples {
            cfg.train.samples = v;
        }
        Ok(cfg)
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).unwrap_or_default()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { run } => {
            let s = cmd_train(&run.load()?)?;
            println!("{}", json(&s));
        }
        Command::Evaluate {
            run,
            checkpoint,
            observations,
            sites,
        } => {
            let cfg = run.load()?;
            let checkpoint = checkpoint.unwrap_or_else(|| cfg.output_dir.join("checkpoint.txt"));
            let s = cmd_evaluate(&cfg, &checkpoint, observations.zip(sites))?;
            println!("{}", json(&s.report));
        }
        Command::Benchmark {
            config,
            output_dir,
            budget,
            max_epochs,
            parallel,
        } => {
            let mut cfg = load_suite(&config)?;
            if let Some(v) = output_dir {
                cfg.output_dir = v;
            }
            if let Some(v) = budget {
                cfg.benchmark.budget = v;
            }
            if let Some(v) = max_epochs {
                cfg.benchmark.train.max_epochs = v;
            }
            cfg.benchmark.parallel |= parallel;
            let res = cmd_benchmark(&cfg)?;
            let mut out = Vec::new();
            res.write_table(&mut out)?;
            print!("{}", String::from_utf8_lossy(&out));
        }
        Command::Synth {
            config,
            output_dir,
            tasks,
            nodes,
            n,
            seed,
            noise,
        } => {
            let mut cfg = match config {
                Some(p) => load_synth(&p)?,
                None => SynthFile {
                    output_dir: PathBuf::from("synth"),
                    synth: Default::default(),
                },
            };
            if let Some(v) = output_dir {
                cfg.output_dir = v;
            }
            let s = &mut cfg.synth;
            if let Some(v) = tasks {
                s.tasks = v;
                s.nodes = nodes.unwrap_or(v);
            }
            if let Some(v) = nodes {
                s.nodes = v;
            }
            if let Some(v) = n {
                s.n = v;
            }
            if let Some(v) = seed {
                s.seed = v;
            }
            if let Some(v) = noise {
                s.noise_std = v;
            }
            let pairs = cmd_synth(&cfg)?;
            println!("{}", json(&pairs));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
