//! `adcost`: simulate, analyze, train, evaluate, select, plan, report,
//! publish and serve.
//!
//! Exit codes: 0 success, 1 data error, 2 configuration or usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Data(_) => 1,
            CliError::Config(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "adcost", version, about = "Estimate what RTB advertisers pay to reach each user")]
pub struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic weblog with sealed ground truth.
    Simulate(SimulateArgs),
    /// Per-user cost reports from weblogs.
    Analyze(AnalyzeArgs),
    /// Train a price model on ground-truth rows.
    Train(TrainArgs),
    /// Cross-validate or hold-out evaluate a model configuration.
    Evaluate(EvaluateArgs),
    /// Search for the smallest feature-group subset that keeps accuracy.
    Select(SelectArgs),
    /// Enumerate probing-campaign setups and sample sizes.
    Plan(PlanArgs),
    /// Cohort statistics and ARPU extrapolation from user reports.
    Report(ReportArgs),
    /// Add a model file to a model directory under the next version.
    Publish(PublishArgs),
    /// Serve models and accept contributions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of simulated users.
    #[arg(long)]
    pub users: Option<usize>,
    /// Simulated days.
    #[arg(long)]
    pub days: Option<u32>,
    /// Price noise (lognormal sigma).
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    Jsonl,
    Csv,
}

#[derive(Debug, Args)]
pub struct ReferenceArgs {
    /// Extra `domain,category` rows merged into the builtin blacklist.
    #[arg(long)]
    pub blacklist: Option<PathBuf>,
    /// `cidr,city` table.
    #[arg(long)]
    pub geo: Option<PathBuf>,
    /// `domain,iab_code` table.
    #[arg(long)]
    pub iab_map: Option<PathBuf>,
    /// Notification rules replacing the builtin set.
    #[arg(long)]
    pub macro_rules: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Weblog files (.jsonl, .csv, optionally .gz).
    #[arg(long, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Read records from stdin and print a running tally per notification.
    #[arg(long)]
    pub stdin: bool,
    /// Format of stdin records.
    #[arg(long, value_enum, default_value = "jsonl")]
    pub format: InputFormat,
    /// Price model for encrypted notifications.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output directory; required unless `--stdin`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub refs: ReferenceArgs,
    /// Window start (RFC 3339 or epoch ms).
    #[arg(long)]
    pub start: Option<String>,
    /// Window end, inclusive.
    #[arg(long)]
    pub end: Option<String>,
    /// Time-shift coefficient applied to cleartext prices.
    #[arg(long)]
    pub time_shift: Option<f64>,
    /// Apply the time-shift coefficient to encrypted estimates too.
    #[arg(long)]
    pub shift_encrypted: bool,
}

#[derive(Debug, Args)]
pub struct ForestArgs {
    /// Number of price classes.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub min_leaf: Option<usize>,
    #[arg(long)]
    pub features_per_split: Option<usize>,
    /// Feature group letters to train on, e.g. "ABE".
    #[arg(long)]
    pub groups: Option<String>,
    /// Regress log prices instead of classifying.
    #[arg(long)]
    pub regression: bool,
    /// Keep near-constant columns.
    #[arg(long)]
    pub no_variance_filter: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RowsArgs {
    /// Ground-truth rows (JSON Lines of features and cpm).
    #[arg(long, required_unless_present = "contributions")]
    pub input: Option<PathBuf>,
    /// Contribution store (JSON Lines); only cleartext prices are used.
    #[arg(long, conflicts_with = "input")]
    pub contributions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub rows: RowsArgs,
    #[command(flatten)]
    pub forest: ForestArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub rows: RowsArgs,
    #[command(flatten)]
    pub forest: ForestArgs,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    /// Score a single held-out share instead of cross-validating.
    #[arg(long)]
    pub holdout: Option<f64>,
    /// Shuffle prices across rows first (chance baseline).
    #[arg(long)]
    pub permute_prices: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub rows: RowsArgs,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub trees: Option<usize>,
    /// Subsample to at most this many rows.
    #[arg(long)]
    pub max_rows: Option<usize>,
    /// Score every subset instead of stopping at the first size that fits.
    #[arg(long)]
    pub exhaustive: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    FullCross,
    #[value(name = "paper-144")]
    Paper144,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// City × interaction × time of day × day of week × ad format (144 setups).
    #[arg(long, conflicts_with = "strategy")]
    pub paper_144: bool,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Price std across campaigns (CPM).
    #[arg(long)]
    pub campaign_std: Option<f64>,
    /// Price std within a campaign (CPM).
    #[arg(long)]
    pub impression_std: Option<f64>,
    /// Target margin of error per campaign (CPM).
    #[arg(long)]
    pub impression_margin: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Maximum bid (CPM) used for the budget.
    #[arg(long)]
    pub max_bid: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `user_reports.jsonl` written by `analyze`.
    #[arg(long)]
    pub reports: PathBuf,
    /// Observed days, for annualizing; defaults to the reports' window.
    #[arg(long)]
    pub days: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PublishArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Model directory.
    #[arg(long)]
    pub models: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen address.
    #[arg(long)]
    pub listen: Option<String>,
    /// Model directory.
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Contribution store (JSON Lines).
    #[arg(long)]
    pub contributions: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("adcost: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
