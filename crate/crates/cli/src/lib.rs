//! Command-line front end: configuration, orchestration and report output.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod settings;

pub use commands::Outcome;
pub use settings::Settings;

#[derive(Debug, Parser)]
#[command(name = "survey-audit", version, about = "Survey language models with multiple-choice questionnaires and audit the answers")]
pub struct Cli {
    /// JSON config file; command-line flags take precedence over it, and it
    /// takes precedence over SURVEY_AUDIT_* environment variables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Raw answer distributions and their normalized entropy.
    Survey(Settings),
    /// Choice-order adjusted answers with A-bias, first-choice bias and chi-square tests.
    Adjust(Settings),
    /// KL alignment of model answers with a reference population and its subgroups.
    Align(Settings),
    /// Fill the questionnaire repeatedly to produce a synthetic table.
    Generate(Settings),
    /// Classifier two-sample test between a synthetic and a reference table.
    Discriminate(Settings),
    /// Each reference subgroup against the rest of the reference population.
    Baseline(Settings),
    /// Write the prompts a run would send.
    DumpPrompts(Settings),
}

pub const EXIT_OK: u8 = 0;
pub const EXIT_FATAL: u8 = 1;
pub const EXIT_PARTIAL: u8 = 2;

impl Cli {
    /// Merges flags, config file and environment into the final settings.
    pub fn resolve(&self) -> anyhow::Result<(&'static str, Settings)> {
        let (name, flags) = match &self.command {
            Command::Survey(s) => ("survey", s),
            Command::Adjust(s) => ("adjust", s),
            Command::Align(s) => ("align", s),
            Command::Generate(s) => ("generate", s),
            Command::Discriminate(s) => ("discriminate", s),
            Command::Baseline(s) => ("baseline", s),
            Command::DumpPrompts(s) => ("dump-prompts", s),
        };
        let file = match &self.config {
            Some(p) => Settings::from_file(p)?,
            None => Settings::default(),
        };
        Ok((name, flags.clone().over(file).over(Settings::from_env()?)))
    }
}

pub fn run_command(name: &str, settings: Settings) -> anyhow::Result<Outcome> {
    if let Some(w) = settings.workers {
        if w == 0 {
            anyhow::bail!("--workers must be at least 1");
        }
        // Fails harmlessly if the pool already exists (e.g. in tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    match name {
        "survey" => commands::survey(settings),
        "adjust" => commands::adjust(settings),
        "align" => commands::align(settings),
        "generate" => commands::generate(settings),
        "discriminate" => commands::discriminate(settings),
        "baseline" => commands::baseline(settings),
        "dump-prompts" => commands::dump_prompts(settings),
        other => anyhow::bail!("unknown command {other}"),
    }
}

/// Runs the parsed command line and maps the result to an exit code.
pub fn main_with(cli: Cli) -> ExitCode {
    let result = cli.resolve().and_then(|(name, settings)| run_command(name, settings));
    match result {
        Ok(outcome) if outcome.failed.is_empty() => ExitCode::from(EXIT_OK),
        Ok(outcome) => {
            eprintln!("partial: failed questions: {}", outcome.failed.join(", "));
            ExitCode::from(EXIT_PARTIAL)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}
