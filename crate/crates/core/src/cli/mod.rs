//! Command-line experiments.
//!
//! Every command is a deterministic function of its arguments, the optional
//! `--config` file and `--seed`, and returns the files it produces. The binary
//! writes them under `--out` or prints the primary table to stdout.

mod bench;
mod csv;
mod runs;

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::collectives::Topology;
use crate::simnet::{Preset, SimNetConfig};

pub use bench::{AllreduceConfig, BenchConfig, SweepConfig};
pub use csv::{parse_csv, CsvTable, SCHEMA_VERSION};
pub use runs::{AdaptConfig, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "cgx", version, about = "Compressed gradient communication experiments on a simulated cluster")]
pub struct Cli {
    /// Seed for data, initialization and compression randomness.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON config for the command; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory. Without it the primary table goes to stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Step time against compression ratio (synthetic truncation and quantization).
    Sweep(SweepArgs),
    /// Simulated all-reduce time per topology and payload size.
    ReduceBench(BenchArgs),
    /// Lossless baseline against compressed data-parallel training.
    Train(TrainArgs),
    /// Adaptive bit-width plan from gradient statistics.
    Adapt(AdaptArgs),
    /// All-reduce correctness and error on random vectors.
    AllreduceTest(AllreduceArgs),
}

#[derive(Debug, Args, Default)]
pub struct NetArgs {
    /// Network preset: commodity, overprovisioned or cloud.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Simulator config JSON (overrides the preset).
    #[arg(long)]
    pub net: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long)]
    pub topology: Option<Topology>,
    /// Model spec JSON: array of {name, elements, kind}.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub bits: Option<Vec<u8>>,
    /// Compute-only time per step in seconds.
    #[arg(long)]
    pub compute_floor: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub net: NetArgs,
    /// Payload sizes in MiB of f32 gradients.
    #[arg(long, value_delimiter = ',')]
    pub sizes_mib: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub topologies: Option<Vec<Topology>>,
    #[arg(long)]
    pub bits: Option<u8>,
    /// Reduce uncompressed f32 instead of quantized payloads.
    #[arg(long)]
    pub lossless: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub net: NetArgs,
    /// Task preset: logistic, mlp, embedding_bag or regression.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub topology: Option<Topology>,
    /// Bit widths of the compressed runs.
    #[arg(long, value_delimiter = ',')]
    pub bits: Option<Vec<u8>>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Also run the adaptive planner.
    #[arg(long)]
    pub adaptive: bool,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    /// Stats JSON; the raw snapshots are read from the same path with a .bin extension.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Collect stats from a live run of this task preset.
    #[arg(long, conflicts_with = "stats")]
    pub task: Option<String>,
    #[arg(long)]
    pub algo: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub palette: Option<Vec<u8>>,
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Also write the statistics used (JSON plus .bin) into the output directory.
    #[arg(long)]
    pub save_stats: bool,
}

#[derive(Debug, Args)]
pub struct AllreduceArgs {
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long)]
    pub elements: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub topologies: Option<Vec<Topology>>,
    #[arg(long)]
    pub bits: Option<u8>,
    #[arg(long)]
    pub lossless: bool,
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    Usage(String),
    Config(String),
    Run(String),
    /// A property the command asserts did not hold.
    Check(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Run(_) => "run",
            CliError::Check(_) => "check",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Config(m) | CliError::Run(m) | CliError::Check(m) => m,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({"error": {"kind": self.kind(), "message": self.message()}}).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind(), self.message())
    }
}

impl std::error::Error for CliError {}

fn run_err(e: impl fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

/// Files produced by a command; the first is the primary table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Output {
    pub files: Vec<(String, String)>,
}

impl Output {
    pub fn primary(&self) -> &str {
        self.files.first().map_or("", |f| f.1.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|f| f.0 == name).map(|f| f.1.as_str())
    }

    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, body) in &self.files {
            std::fs::write(dir.join(name), body)?;
        }
        Ok(())
    }
}

/// Parses arguments (including the program name) and runs the command.
pub fn run_args<I, T>(args: I) -> Result<Output, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    run(&cli)
}

pub fn run(cli: &Cli) -> Result<Output, CliError> {
    let file = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => Value::Object(Default::default()),
    };
    match &cli.command {
        Command::Sweep(a) => bench::sweep(&load(file)?, a, cli.seed),
        Command::ReduceBench(a) => bench::reduce_bench(&load(file)?, a),
        Command::AllreduceTest(a) => bench::allreduce_test(&load(file)?, a, cli.seed),
        Command::Train(a) => runs::train(&load(file)?, a, cli.seed),
        Command::Adapt(a) => runs::adapt(&load(file)?, a, cli.seed, cli.out.as_deref()),
    }
}

fn load<T: DeserializeOwned>(v: Value) -> Result<T, CliError> {
    serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))
}

/// Network selection shared by the commands: an explicit simulator config
/// wins over the named preset; `nodes` overrides either.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NetSelect {
    pub preset: String,
    pub nodes: usize,
    pub net: Option<SimNetConfig>,
}

impl Default for NetSelect {
    fn default() -> Self {
        Self { preset: "commodity".into(), nodes: 8, net: None }
    }
}

impl NetSelect {
    fn apply(&mut self, args: &NetArgs) -> Result<(), CliError> {
        if let Some(p) = &args.preset {
            self.preset = p.clone();
        }
        if let Some(path) = &args.net {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let net = SimNetConfig::from_json(&text).map_err(|e| CliError::Config(e.to_string()))?;
            self.nodes = net.nodes;
            self.net = Some(net);
        }
        if let Some(n) = args.nodes {
            self.nodes = n;
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<SimNetConfig, CliError> {
        let cfg = match &self.net {
            Some(net) => net.with_nodes(self.nodes),
            None => {
                let preset: Preset = self.preset.parse().map_err(CliError::Usage)?;
                SimNetConfig::preset(preset, self.nodes)
            }
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// True for the stock commodity preset (no explicit network).
    pub fn is_commodity(&self) -> bool {
        self.net.is_none() && self.preset == "commodity"
    }
}
