use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use rankmm::model::{Link, Method};
use rankmm::report::{Format, PlotKind, TeamFilter};
use rankmm::schedule::FcsMode;

mod commands;
mod error;
mod result_file;

#[derive(Debug, Parser)]
#[command(name = "rankcli", version, about = "Paired-comparison ratings from win/loss records")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Record wall-clock time in manifests (makes them non-reproducible).
    #[arg(long, global = true)]
    timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Clean raw game files into one canonical game file.
    Ingest(IngestArgs),
    /// Fit one model and print its ranking table.
    Fit(FitArgs),
    /// Compare the rankings stored in two result files.
    Compare(CompareArgs),
    /// Check the approximations against tensor quadrature.
    Verify(VerifyArgs),
    /// Simulate a season from the model.
    Simulate(SimulateArgs),
    /// Replicated simulate-and-fit study of estimator bias.
    BiasStudy(BiasStudyArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Raw game file; repeat for one file per team list.
    #[arg(long = "games", required = true)]
    pub games: Vec<PathBuf>,
    #[arg(long)]
    pub roster: PathBuf,
    /// `key = value` column mapping; detected from the header when absent.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    /// Drop games after this date (YYYY-MM-DD).
    #[arg(long)]
    pub cutoff: Option<NaiveDate>,
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest path (default: `<out>.manifest.toml`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub games: PathBuf,
    #[arg(long)]
    pub roster: PathBuf,
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    #[arg(long)]
    pub cutoff: Option<NaiveDate>,
    #[arg(long, value_parser = parse_link, default_value = "probit")]
    pub link: Link,
    #[arg(long = "fcs-mode", value_parser = parse_fcs_mode, default_value = "0")]
    pub fcs_mode: FcsMode,
    /// pql-ml | pql-reml | la | fe | mease | fixed:<variance>
    #[arg(long, value_parser = parse_method, default_value = "fe")]
    pub method: Method,
    /// Result file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "markdown")]
    pub format: Format,
    #[arg(long)]
    pub top: Option<usize>,
    #[arg(long, default_value = "fbs")]
    pub teams: TeamFilter,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(long)]
    pub top: Option<usize>,
    #[arg(long, default_value = "fbs")]
    pub teams: TeamFilter,
    #[arg(long, default_value = "markdown")]
    pub format: Format,
    /// caterpillar | scatter | density
    #[arg(long)]
    pub plot: Option<PlotKind>,
    /// Where to write plot data (default: stdout after the table).
    #[arg(long = "plot-out")]
    pub plot_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 3)]
    pub dims: usize,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long = "max-games", default_value_t = 4)]
    pub max_games: usize,
    #[arg(long, env = "RANKCLI_SEED", default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = rankmm::oracle::DEFAULT_NODES)]
    pub nodes: usize,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TruthArgs {
    /// `league` (120 FBS + 118 FCS teams) or `circulant:<teams>:<k>`.
    #[arg(long, default_value = "league")]
    pub template: String,
    #[arg(long, default_value_t = 0.8)]
    pub sigma2: f64,
    /// FCS variance when fitting or simulating with separate variances.
    #[arg(long = "sigma2-fcs")]
    pub sigma2_fcs: Option<f64>,
    /// FCS-visit effect (league template only).
    #[arg(long, default_value_t = 2.03)]
    pub beta: f64,
    #[arg(long, value_parser = parse_link, default_value = "probit")]
    pub link: Link,
    #[arg(long, env = "RANKCLI_SEED", default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub truth: TruthArgs,
    /// Directory for games.csv, roster.csv, truth.csv and manifest.toml.
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct BiasStudyArgs {
    #[command(flatten)]
    pub truth: TruthArgs,
    #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "pql-ml,la,fe")]
    pub methods: Vec<Method>,
    /// Fitted FCS mode; circulant templates support only 0.
    #[arg(long = "fcs-mode", value_parser = parse_fcs_mode)]
    pub fcs_mode: Option<FcsMode>,
    #[arg(long, default_value_t = 50)]
    pub reps: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

fn parse_link(s: &str) -> Result<Link, String> {
    match s {
        "probit" | "P" => Ok(Link::Probit),
        "logit" | "L" => Ok(Link::Logit),
        other => Err(format!("unknown link `{other}` (probit | logit)")),
    }
}

fn parse_fcs_mode(s: &str) -> Result<FcsMode, String> {
    s.parse::<u8>()
        .ok()
        .and_then(FcsMode::from_digit)
        .ok_or_else(|| format!("fcs mode must be 0, 1 or 2, got `{s}`"))
}

pub fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "pql-ml" | "pql" => Ok(Method::PqlMl),
        "pql-reml" => Ok(Method::PqlReml),
        "la" | "laplace" => Ok(Method::Laplace),
        "fe" => Ok(Method::FullyExponential),
        "mease" => Ok(Method::Mease),
        other => match other.strip_prefix("fixed:") {
            Some(v) => {
                let v: f64 = v.parse().map_err(|_| format!("bad fixed variance `{v}`"))?;
                if v > 0.0 && v.is_finite() {
                    Ok(Method::FixedVariance(v))
                } else {
                    Err(format!("fixed variance must be positive, got {v}"))
                }
            }
            None => Err(format!(
                "unknown method `{other}` (pql-ml | pql-reml | la | fe | mease | fixed:<variance>)"
            )),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            log::warn!("cannot size the thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(&a, cli.timing),
        Command::Fit(a) => commands::fit(&a, cli.timing),
        Command::Compare(a) => commands::compare(&a),
        Command::Verify(a) => commands::verify(&a),
        Command::Simulate(a) => commands::simulate(&a, cli.timing),
        Command::BiasStudy(a) => commands::bias_study(&a, cli.timing),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
