use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

use commands::CliError;

/// Asymmetrical-bottleneck network toolkit: cost analysis, gradient checks,
/// toy training and weight-file I/O.
#[derive(Debug, Parser)]
#[command(name = "asymmkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-layer MAdds and parameter report for one network.
    Analyze(AnalyzeArgs),
    /// MAdds/params grid over architectures, multipliers and asymmetry rates.
    Compare(CompareArgs),
    /// Finite-difference gradient check of an op, block or network.
    Gradcheck(GradcheckArgs),
    /// Toy SGD training; writes a JSON-lines metrics log and optionally weights.
    Train(TrainArgs),
    /// Writes freshly initialized weights to a weight file.
    Export(ExportArgs),
    /// Loads a weight file into a network, optionally re-saving it.
    Import(ImportArgs),
    /// Prints a built-in architecture in the spec text format.
    DumpSpec(DumpSpecArgs),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Table,
    Struct,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct NetSource {
    /// Built-in architecture name.
    #[arg(long)]
    pub arch: Option<String>,
    /// Architecture spec file.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NetArgs {
    #[command(flatten)]
    pub source: NetSource,
    /// Width multiplier applied on top of the spec's own.
    #[arg(long)]
    pub multiplier: Option<f64>,
    /// Input resolution.
    #[arg(long)]
    pub input: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Comma-separated architecture names.
    #[arg(long, value_delimiter = ',', required = true)]
    pub archs: Vec<String>,
    /// Comma-separated width multipliers (default 1.0).
    #[arg(long, value_delimiter = ',')]
    pub multipliers: Vec<f64>,
    /// Comma-separated asymmetry rates to sweep.
    #[arg(long, value_delimiter = ',')]
    pub rate: Vec<usize>,
    #[arg(long)]
    pub input: Option<usize>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Target name, or `all`.
    #[arg(long, default_value = "all")]
    pub target: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub net: NetArgs,
    /// `synthetic:N[:SEED]` or `cifar10:PATH[:LIMIT]`.
    #[arg(long)]
    pub data: String,
    /// TOML training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Classifier width.
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Overrides the configured epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Metrics log path; stdout when absent.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Weight file written after training.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub dtype: Precision,
}

#[derive(Debug, Args)]
pub struct WeightNetArgs {
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long, default_value_t = 1000)]
    pub classes: usize,
    #[arg(long, value_enum, default_value_t)]
    pub dtype: Precision,
    /// Print inference logits for a seeded probe input.
    #[arg(long)]
    pub probe: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub target: WeightNetArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    #[command(flatten)]
    pub target: WeightNetArgs,
    /// Weight file to load.
    #[arg(long = "in")]
    pub input_file: PathBuf,
    /// Re-save the loaded weights here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DumpSpecArgs {
    #[arg(long)]
    pub arch: String,
    #[arg(long)]
    pub multiplier: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("ASYMMKIT_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::usage(format!(
            "ASYMMKIT_THREADS must be a positive integer, got `{raw}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::usage(format!("cannot configure thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Analyze(a) => commands::analyze(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Train(a) => commands::train(&a),
        Command::Export(a) => commands::export(&a),
        Command::Import(a) => commands::import(&a),
        Command::DumpSpec(a) => commands::dump_spec(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
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
            ExitCode::from(e.exit_code())
        }
    }
}
