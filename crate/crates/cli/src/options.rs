use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "fedeini", version, about = "Vertical federated tree-ensemble inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a boosted ensemble and write the model document.
    Train(RunConfig),
    /// Write each party's columns to its own CSV file.
    Split(RunConfig),
    /// Run inference with one strategy and write predictions and a report.
    Infer(RunConfig),
    /// Compare strategies and write JSON, CSV and trace reports.
    Bench(RunConfig),
    /// Generate a Paillier key pair.
    Keygen(RunConfig),
}

impl Command {
    pub fn config(&self) -> &RunConfig {
        match self {
            Command::Train(c) | Command::Split(c) | Command::Infer(c) | Command::Bench(c) | Command::Keygen(c) => c,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Guest,
    Host,
}

/// Flags shared by every subcommand. A `--config` TOML file with the same
/// keys (snake_case) overrides them.
#[derive(Args, Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Read settings from a TOML file; its values win over flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// CSV file with a header row.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Generate a synthetic credit-like dataset from this seed instead.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Rows of synthetic data (default 5000).
    #[arg(long)]
    pub rows: Option<usize>,
    /// Columns of synthetic data, 10 to 25 (default 10).
    #[arg(long)]
    pub features: Option<usize>,
    /// Label column name (default "label").
    #[arg(long)]
    pub label: Option<String>,

    /// `guest_first:N` or one owning party per column, comma-separated.
    #[arg(long)]
    pub partition: Option<String>,
    /// Number of parties including the guest (default 2).
    #[arg(long)]
    pub parties: Option<usize>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// fedeini, chain, multi or plaintext; bench takes a comma-separated list.
    #[arg(long)]
    pub strategy: Option<String>,

    #[arg(long)]
    pub key_bits: Option<u32>,
    /// Private key file from `keygen` (a fresh key is generated otherwise).
    #[arg(long)]
    pub key: Option<PathBuf>,
    /// Fixed-point fraction bits (default 32).
    #[arg(long)]
    pub scale: Option<u32>,
    /// One-way delay injected per message.
    #[arg(long)]
    pub latency_ms: Option<f64>,
    /// Hold messages in real time instead of on virtual clocks.
    #[arg(long)]
    pub sleep: bool,
    /// Samples per guest message (default 1000).
    #[arg(long)]
    pub batch: Option<usize>,
    /// One guest message per tree (two parties only).
    #[arg(long)]
    pub per_tree: bool,
    /// Host order for chain mode, comma-separated party ids.
    #[arg(long)]
    pub route: Option<String>,
    /// Also write the per-message trace log.
    #[arg(long)]
    pub trace: bool,

    #[arg(long)]
    pub out: Option<PathBuf>,

    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub shrinkage: Option<f64>,
    #[arg(long)]
    pub min_child: Option<usize>,

    /// Use the first P percent of rows; bench sweeps when given several.
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub subset_pct: Vec<f64>,
    /// Bench: sweep 10, 20, 40, 80 and 100 percent of rows.
    #[arg(long)]
    pub sweep: bool,

    /// Run one party over TCP instead of all parties in this process.
    #[arg(long, value_enum)]
    pub role: Option<Role>,
    /// This process's party id (hosts only; the guest is 0).
    #[arg(long)]
    pub party: Option<usize>,
    /// Address to accept peers on.
    #[arg(long)]
    pub listen: Option<SocketAddr>,
    /// Every party's address, in party order, comma-separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub peers: Vec<SocketAddr>,
}

macro_rules! prefer {
    ($file:ident, $flags:ident; $($opt:ident),*; $($flag:ident),*; $($list:ident),*) => {
        RunConfig {
            config: $flags.config.clone(),
            $($opt: $file.$opt.or($flags.$opt.clone()),)*
            $($flag: $file.$flag || $flags.$flag,)*
            $($list: if $file.$list.is_empty() { $flags.$list.clone() } else { $file.$list },)*
        }
    };
}

impl RunConfig {
    /// Flags merged with the `--config` file, if any.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let Some(path) = &self.config else {
            return Ok(self.clone());
        };
        let file = load_toml(path)?;
        let flags = self;
        Ok(prefer!(file, flags;
            dataset, seed, rows, features, label, partition, parties, model, strategy, key_bits, key, scale,
            latency_ms, batch, route, out, trees, depth, lambda, gamma, shrinkage, min_child, role, party, listen;
            sleep, per_tree, trace, sweep;
            subset_pct, peers))
    }
}

fn load_toml(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_override_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "trees = 7\nsubset_pct = [10.0, 20.0]\nsweep = true\n").unwrap();
        let flags = RunConfig {
            config: Some(path),
            trees: Some(3),
            depth: Some(2),
            ..Default::default()
        };
        let merged = flags.resolve().unwrap();
        assert_eq!(merged.trees, Some(7));
        assert_eq!(merged.depth, Some(2));
        assert_eq!(merged.subset_pct, vec![10.0, 20.0]);
        assert!(merged.sweep);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "tres = 7\n").unwrap();
        let flags = RunConfig {
            config: Some(path),
            ..Default::default()
        };
        assert!(matches!(flags.resolve(), Err(CliError::Config(_))));
    }
}
