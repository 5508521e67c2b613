//! `banforge`: train teachers, run born-again chains, evaluate generation
//! ensembles, dump gradient diagnostics and run the numeric self-checks.
//!
//! Exit codes: 0 success, 1 a self-check failed, 2 configuration error,
//! 3 numeric divergence, 4 I/O error.

mod commands;
mod manifest;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use banforge::data::SplitTag;
use banforge::pipeline::EnsembleMode;
use clap::{Parser, Subcommand, ValueEnum};

use manifest::ObjectiveName;

pub const THREADS_ENV: &str = "BAN_FORGE_THREADS";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Divergence(String),
    Io(String),
    CheckFailed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Divergence(m) | CliError::Io(m) | CliError::CheckFailed(m) => m,
        }
    }
}

impl From<banforge::Error> for CliError {
    fn from(e: banforge::Error) -> Self {
        use banforge::Error as E;
        let msg = e.to_string();
        match e {
            E::Divergence { .. } | E::NumericDomain { .. } => CliError::Divergence(msg),
            E::Io { .. } | E::Format { .. } | E::Json(_) | E::Csv(_) => CliError::Io(msg),
            E::Argument(_) | E::Shape { .. } | E::Spec { .. } | E::Target(_) | E::Config(_) => CliError::Config(msg),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "banforge", version, about = "Born-again self-distillation")]
struct Cli {
    /// Run manifest (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Student generations after the teacher.
    #[arg(long, global = true)]
    generations: Option<usize>,
    /// Student objective.
    #[arg(long, global = true, value_enum)]
    objective: Option<ObjectiveName>,
    /// Overrides the manifest seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing generation directories.
    #[arg(long, global = true)]
    force: bool,
    /// Validate and print the plan without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Add the teacher (generation 0) to the ensemble.
    #[arg(long, global = true)]
    include_teacher: bool,
    /// Ensemble members, e.g. `gen1,gen2,gen3` (default: every student).
    #[arg(long, global = true)]
    members: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Probabilities,
    Logits,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the teacher (generation 0) with label cross-entropy.
    Train,
    /// Train the teacher if needed, then `--generations` distilled students.
    Ban,
    /// Evaluate members and their averaged prediction.
    Ensemble {
        /// Run directory (default: the manifest's output directory).
        run_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "probabilities")]
        mode: ModeArg,
    },
    /// Per-sample gradient decomposition of a student against its teacher.
    Diagnose {
        run_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        teacher: usize,
        #[arg(long, default_value_t = 1)]
        student: usize,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Numeric self-checks of the objectives and their gradients.
    Verify {
        /// Random batches per check.
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV}: expected a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("{THREADS_ENV}: {e}")))
}

fn require_config(cli: &Cli) -> Result<manifest::Loaded, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <manifest.json> is required".into()))?;
    manifest::load(path)
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let opts = commands::Options {
        force: cli.force,
        dry_run: cli.dry_run,
        seed: cli.seed,
    };
    match &cli.command {
        Command::Train => commands::train(require_config(&cli)?, &opts),
        Command::Ban => commands::ban(require_config(&cli)?, &opts, cli.generations, cli.objective),
        Command::Ensemble { run_dir, mode } => {
            let dir = commands::run_dir(run_dir.clone(), cli.config.as_deref())?;
            let mode = match mode {
                ModeArg::Probabilities => EnsembleMode::Probabilities,
                ModeArg::Logits => EnsembleMode::Logits,
            };
            commands::ensemble(&dir, cli.members.as_deref(), cli.include_teacher, mode, cli.dry_run)
        }
        Command::Diagnose {
            run_dir,
            teacher,
            student,
            split,
        } => {
            let dir = commands::run_dir(run_dir.clone(), cli.config.as_deref())?;
            let split = match split {
                SplitArg::Train => SplitTag::Train,
                SplitArg::Val => SplitTag::Val,
                SplitArg::Test => SplitTag::Test,
            };
            commands::diagnose(&dir, *teacher, *student, split, cli.dry_run)
        }
        Command::Verify { instances } => {
            let seed = cli.seed.unwrap_or(0);
            if cli.dry_run {
                println!(
                    "would run {} checks on {instances} random batches each (seed {seed})",
                    9
                );
                return Ok(());
            }
            let checks = verify::run(seed, *instances)?;
            let mut failed = 0;
            for c in &checks {
                println!(
                    "{:<4} {:<44} worst {:.2e} (tol {:.0e})",
                    if c.passed() { "ok" } else { "FAIL" },
                    c.name,
                    c.worst,
                    c.tolerance
                );
                failed += usize::from(!c.passed());
            }
            if failed > 0 {
                return Err(CliError::CheckFailed(format!(
                    "{failed} of {} checks failed",
                    checks.len()
                )));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("banforge: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
