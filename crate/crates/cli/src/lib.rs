//! `deft` command-line front end.
//!
//! Every subcommand takes an optional `--config <file>` plus any number of
//! `--key value` overrides; see [`config`] for the file format.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{parse_overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "deft", version, about = "Staged disentanglement training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, PartialEq, Eq)]
pub struct CommonArgs {
    /// Configuration file (`key = value` lines, optional `[command]` sections).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `--key value` overrides applied on top of the file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a labeled sprite dataset.
    Generate(CommonArgs),
    /// Train staged models or a baseline over one or more seeds.
    Train(CommonArgs),
    /// Run the annealing test on fixed-factor slices or a whole dataset.
    Anneal(CommonArgs),
    /// Score checkpoints against the dataset labels.
    Evaluate(CommonArgs),
    /// Decode one-latent-at-a-time sweeps into a PGM grid.
    Traverse(CommonArgs),
    /// Summarize seeds of several approaches.
    Report(CommonArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Train(_) => "train",
            Command::Anneal(_) => "anneal",
            Command::Evaluate(_) => "evaluate",
            Command::Traverse(_) => "traverse",
            Command::Report(_) => "report",
        }
    }

    fn common(&self) -> &CommonArgs {
        match self {
            Command::Generate(a)
            | Command::Train(a)
            | Command::Anneal(a)
            | Command::Evaluate(a)
            | Command::Traverse(a)
            | Command::Report(a) => a,
        }
    }
}

pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    let name = cli.command.name();
    let common = cli.command.common();
    let mut cfg = RunConfig::load(common.config.as_deref(), name, parse_overrides(&common.overrides)?)?;
    match cli.command {
        Command::Generate(_) => commands::generate::run(&mut cfg),
        Command::Train(_) => commands::train::run(&mut cfg),
        Command::Anneal(_) => commands::anneal::run(&mut cfg),
        Command::Evaluate(_) => commands::evaluate::run(&mut cfg),
        Command::Traverse(_) => commands::traverse::run(&mut cfg),
        Command::Report(_) => commands::report::run(&mut cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flags_become_overrides() {
        let cli = Cli::try_parse_from(["deft", "train", "--config", "a.cfg", "--steps-per-stage", "5", "--gamma=0.2"]).unwrap();
        let c = cli.command.common();
        assert_eq!(c.config.as_deref(), Some(std::path::Path::new("a.cfg")));
        assert_eq!(c.overrides, ["--steps-per-stage", "5", "--gamma=0.2"]);
        let ov = parse_overrides(&c.overrides).unwrap();
        assert_eq!(ov["steps_per_stage"], "5");
        assert_eq!(ov["gamma"], "0.2");
    }

    #[test]
    fn overrides_without_config() {
        let cli = Cli::try_parse_from(["deft", "generate", "--out", "x.bin"]).unwrap();
        assert_eq!(cli.command.name(), "generate");
        assert_eq!(cli.command.common().overrides, ["--out", "x.bin"]);
    }
}
