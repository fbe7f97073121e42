use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::CliError;

/// PHI detection pipeline benchmark.
#[derive(Debug, Parser, Serialize)]
#[command(name = "deid-bench", version, about)]
pub struct Cli {
    /// Seed for dataset generation and pipeline runs.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Debug-level logs on stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    /// TOML file with default flag values; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic imprint dataset.
    Generate(GenerateArgs),
    /// Run the pipeline over a manifest.
    Run(RunArgs),
    /// Score extractors by WER/CER on ground-truth crops.
    BenchOcr(BenchOcrArgs),
    /// Score the runs in a run directory.
    Evaluate(EvaluateArgs),
    /// Cross-setup comparison table from evaluated run directories.
    Report(ReportArgs),
    /// Serve the HTTP proxy in front of a job store.
    ServeProxy(ServeProxyArgs),
    /// Run an inference worker pulling jobs from a proxy.
    ServeWorker(ServeWorkerArgs),
    /// Drive concurrent requests through the serving stack.
    LoadTest(LoadTestArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Run(_) => "run",
            Command::BenchOcr(_) => "bench-ocr",
            Command::Evaluate(_) => "evaluate",
            Command::Report(_) => "report",
            Command::ServeProxy(_) => "serve-proxy",
            Command::ServeWorker(_) => "serve-worker",
            Command::LoadTest(_) => "load-test",
        }
    }
}

const COMMANDS: [&str; 8] =
    ["generate", "run", "bench-ocr", "evaluate", "report", "serve-proxy", "serve-worker", "load-test"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleArg {
    Radphi,
    Midi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum SetupArg {
    #[value(name = "A", alias = "a")]
    A,
    #[value(name = "B", alias = "b")]
    B,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub style: StyleArg,
    /// Number of images.
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write pixel files.
    #[arg(long)]
    pub render: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct RegistryArgs {
    /// Backend registry JSON; its entries are added to the built-in ones.
    #[arg(long, value_name = "FILE")]
    pub backends: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct RunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum)]
    pub setup: SetupArg,
    #[arg(long, default_value = "ground-truth")]
    pub localizer: String,
    #[arg(long)]
    pub extractor: String,
    #[arg(long, default_value = "rule-based")]
    pub analyzer: String,
    #[arg(long, default_value_t = 5)]
    pub repeats: u32,
    /// Crops per chat-completion call, capped by the backend.
    #[arg(long)]
    pub chunk_size: Option<usize>,
    /// Transport retries after the first attempt.
    #[arg(long)]
    pub retry_limit: Option<u32>,
    /// Hybrid mode: re-extract crops below this OCR confidence.
    #[arg(long, requires = "verifier")]
    pub hybrid_threshold: Option<f64>,
    /// Chat-completion extractor for hybrid re-checks.
    #[arg(long)]
    pub verifier: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub registry: RegistryArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchOcrArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Extractor ids, comma separated or repeated.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub extractors: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub registry: RegistryArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// `id`, `iou` or `iou:<threshold>`.
    #[arg(long, default_value = "id")]
    pub criterion: String,
    /// Where report.json and report.md go; defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Evaluated run directories.
    #[arg(long = "run-dir", required = true, num_args = 1..)]
    pub run_dirs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeProxyArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Append-log job store; in-memory when absent.
    #[arg(long, env = "DEID_STORE_PATH")]
    pub store: Option<PathBuf>,
    /// Register the load-test extractor with this per-image latency.
    #[arg(long)]
    pub image_latency_ms: Option<u64>,
    #[command(flatten)]
    pub registry: RegistryArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeWorkerArgs {
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    #[arg(long, env = "DEID_PROXY_URL", default_value = "http://127.0.0.1:8080")]
    pub proxy: String,
    /// Lease length; a job whose worker stops renewing is reclaimed after it.
    #[arg(long, default_value_t = 60)]
    pub lease_s: u64,
    /// Let the concurrency follow queue depth up to this bound.
    #[arg(long)]
    pub autoscale_max: Option<usize>,
    /// Directory relative manifest and pixel paths resolve against.
    #[arg(long)]
    pub base_dir: Option<PathBuf>,
    #[arg(long)]
    pub image_latency_ms: Option<u64>,
    #[command(flatten)]
    pub registry: RegistryArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct LoadTestArgs {
    #[arg(long, default_value_t = 100)]
    pub requests: usize,
    /// Images per request.
    #[arg(long, default_value_t = 10)]
    pub images: usize,
    #[arg(long, default_value_t = 8)]
    pub concurrency: usize,
    /// Simulated extractor time per image.
    #[arg(long, default_value_t = 100)]
    pub image_latency_ms: u64,
    /// Client poll interval.
    #[arg(long, default_value_t = 20)]
    pub poll_ms: u64,
    /// Autoscale the in-process worker between 1 and this bound.
    #[arg(long)]
    pub autoscale_max: Option<usize>,
    /// Drive a running proxy instead of an in-process stack.
    #[arg(long)]
    pub proxy: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn toml_scalar(value: &toml::Value) -> Result<String, CliError> {
    match value {
        toml::Value::String(s) => Ok(s.clone()),
        toml::Value::Integer(i) => Ok(i.to_string()),
        toml::Value::Float(f) => Ok(f.to_string()),
        other => Err(CliError::Usage(format!("config value {other} is not a scalar"))),
    }
}

fn flag_present(argv: &[OsString], flag: &str) -> bool {
    argv.iter().any(|a| {
        let a = a.to_string_lossy();
        a == flag || a.starts_with(&format!("{flag}="))
    })
}

fn push_entry(key: &str, value: &toml::Value, argv: &[OsString], extra: &mut Vec<OsString>) -> Result<(), CliError> {
    let flag = format!("--{}", key.replace('_', "-"));
    if flag_present(argv, &flag) {
        return Ok(());
    }
    match value {
        toml::Value::Boolean(true) => extra.push(flag.into()),
        toml::Value::Boolean(false) => {}
        toml::Value::Array(items) => {
            for item in items {
                extra.push(flag.clone().into());
                extra.push(toml_scalar(item)?.into());
            }
        }
        v => {
            extra.push(flag.into());
            extra.push(toml_scalar(v)?.into());
        }
    }
    Ok(())
}

/// Flags taken from a TOML config: top-level keys apply to every command,
/// a `[<command>]` table to that command only. Flags already on the command
/// line are left alone.
pub fn config_args(argv: &[OsString], path: &Path) -> Result<Vec<OsString>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let table: toml::Table = text.parse().map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let command = argv.iter().skip(1).map(|a| a.to_string_lossy()).find(|a| COMMANDS.contains(&a.as_ref()));
    let mut extra = Vec::new();
    for (key, value) in &table {
        match value {
            toml::Value::Table(section) => {
                if command.as_deref() == Some(key.as_str()) {
                    for (k, v) in section {
                        push_entry(k, v, argv, &mut extra)?;
                    }
                } else if !COMMANDS.contains(&key.as_str()) {
                    return Err(CliError::Usage(format!("config section [{key}] is not a command")));
                }
            }
            v => push_entry(key, v, argv, &mut extra)?,
        }
    }
    Ok(extra)
}

/// Location of `--config` in a raw argument list.
pub fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    args.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            args.get(i + 1).map(PathBuf::from)
        } else {
            a.strip_prefix("--config=").map(PathBuf::from)
        }
    })
}

/// Parses the command line with config-file defaults merged in. Returns
/// the effective argument list too.
pub fn parse(argv: Vec<OsString>) -> Result<(Cli, Vec<OsString>), clap::Error> {
    let mut effective = argv.clone();
    if let Some(path) = config_path(&argv) {
        match config_args(&argv, &path) {
            Ok(extra) => effective.extend(extra),
            Err(e) => {
                return Err(clap::Error::raw(clap::error::ErrorKind::InvalidValue, format!("{e}\n")));
            }
        }
    }
    Cli::try_parse_from(&effective).map(|cli| (cli, effective))
}
