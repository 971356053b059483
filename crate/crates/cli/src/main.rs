use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sustain::data::spec::Preset;
use sustain_cli::commands;
use sustain_cli::{Context, ExperimentConfig, Outcome};

#[derive(Debug, Parser)]
#[command(name = "sustain", version, about = "Sequential self-teaching experiments on weakly labeled data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (JSON); defaults are listed by `config-schema`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate {
        #[arg(long)]
        preset: Option<String>,
    },
    /// Train a cascade of students.
    Train {
        /// Dataset directory; generated in memory from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Halt once validation mAP saturates.
        #[arg(long)]
        stop_rule: bool,
    },
    /// Compare the label-noise identities with Monte-Carlo simulation.
    Verify,
    /// Train single-teacher students over a grid of α₀.
    AlphaSweep {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient.
    Gradcheck {
        /// Perturb the analytic gradients (negative control; must fail).
        #[arg(long)]
        corrupt: bool,
    },
    /// Linear probes on embeddings of cascade stages.
    Transfer {
        #[arg(long)]
        cascade: Option<PathBuf>,
        #[arg(long)]
        probe: Option<PathBuf>,
    },
    /// Segment scores and attention weights of one bag.
    DumpAttention {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        bag: Option<String>,
    },
    /// Print the default configuration and field descriptions.
    ConfigSchema,
}

fn run(cli: Cli) -> sustain::Result<Outcome> {
    if let Command::ConfigSchema = cli.command {
        return commands::config_schema();
    }
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(o) = cli.out {
        config.output = o;
    }
    config.validate()?;
    let threads = match cli.threads {
        Some(0) => return Err(sustain::Error::Invalid("--threads must be positive".into())),
        Some(t) => t,
        None => 1,
    };
    let ctx = Context { config, threads };
    match cli.command {
        Command::Generate { preset } => {
            let preset = match preset {
                Some(name) => Some(
                    Preset::parse(&name)
                        .ok_or_else(|| sustain::Error::Invalid(format!("unknown preset {name:?}")))?,
                ),
                None => None,
            };
            commands::generate(&ctx, preset)
        }
        Command::Train { data, stop_rule } => commands::train(&ctx, data.as_deref(), stop_rule),
        Command::Verify => commands::verify(&ctx),
        Command::AlphaSweep { data } => commands::alpha_sweep(&ctx, data.as_deref()),
        Command::Gradcheck { corrupt } => commands::gradcheck_cmd(&ctx, corrupt),
        Command::Transfer { cascade, probe } => commands::transfer(&ctx, cascade.as_deref(), probe.as_deref()),
        Command::DumpAttention { model, data, bag } => {
            commands::dump_attention(&ctx, model.as_deref(), data.as_deref(), bag.as_deref())
        }
        Command::ConfigSchema => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(Outcome::Passed) => ExitCode::SUCCESS,
        Ok(Outcome::Failed(why)) => {
            eprintln!("check failed: {why}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
