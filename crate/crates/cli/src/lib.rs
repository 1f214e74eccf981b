//! Command-line front end for `xtrial`.
//!
//! * `estimate` runs TMLE and unadjusted estimates on a stacked trial CSV
//!   and writes estimates, contrasts and a comparison table.
//! * `simulate` runs a simulation scenario and writes its metrics table and
//!   a run manifest.
//! * `report` re-renders the tables stored in a results directory.
//!
//! Exit codes: 0 success, 2 unreadable or missing input, 3 validation
//! failure, 4 estimation failure.

pub mod estimate;
pub mod report;
pub mod simulate;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xtrial::{GDeltaMode, OutcomeScale, TrialId, Truncation, VaccineId};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_ESTIMATION: i32 = 4;

/// Environment variable capping the simulation worker count.
pub const THREADS_ENV: &str = "XTRIAL_THREADS";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    pub fn estimation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_ESTIMATION,
            message: message.into(),
        }
    }
}

impl From<xtrial::Error> for CliError {
    fn from(e: xtrial::Error) -> Self {
        use xtrial::Error as E;
        let code = match &e {
            E::Io { .. } | E::Csv(_) | E::Json(_) | E::Schema(_) | E::Parse { .. } => EXIT_INPUT,
            E::Validation(_) | E::Domain(_) => EXIT_VALIDATION,
            E::Contract(_) | E::Estimation(_) | E::Resource(_) => EXIT_ESTIMATION,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Estimate,
    Simulate,
    Report,
}

/// One immune-response column to analyse. Rows sharing a label are shown
/// together, as response-rate and geometric-mean readouts of one antigen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseSpec {
    pub label: String,
    pub column: String,
    pub scale: OutcomeScale,
}

impl FromStr for ResponseSpec {
    type Err = String;

    /// `COLUMN:SCALE` or `LABEL:COLUMN:SCALE`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let (label, column, scale) = match parts.as_slice() {
            [c, sc] => (*c, *c, *sc),
            [l, c, sc] => (*l, *c, *sc),
            _ => return Err(format!("expected COLUMN:SCALE or LABEL:COLUMN:SCALE, got `{s}`")),
        };
        if label.is_empty() || column.is_empty() {
            return Err(format!("empty label or column in `{s}`"));
        }
        Ok(Self {
            label: label.to_string(),
            column: column.to_string(),
            scale: scale.parse()?,
        })
    }
}

/// Ordered vaccine pair; the contrast is the second minus the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastPair {
    pub a: VaccineId,
    pub b: VaccineId,
}

impl FromStr for ContrastPair {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| format!("expected A:B, got `{s}`"))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<i64>()
                .map(VaccineId)
                .map_err(|_| format!("vaccine label `{v}` is not an integer"))
        };
        Ok(Self {
            a: parse(a)?,
            b: parse(b)?,
        })
    }
}

fn parse_truncation(s: &str) -> Result<Truncation, String> {
    let (lo, hi) = s
        .split_once(',')
        .ok_or_else(|| format!("expected LO,HI, got `{s}`"))?;
    let lo: f64 = lo.trim().parse().map_err(|_| format!("bad lower bound `{lo}`"))?;
    let hi: f64 = hi.trim().parse().map_err(|_| format!("bad upper bound `{hi}`"))?;
    Truncation::new(lo, hi).map_err(|e| e.to_string())
}

/// Everything that determines a run's numerical output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub input: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    pub preset: Option<String>,
    pub scenario: Option<PathBuf>,
    pub responses: Vec<ResponseSpec>,
    pub vaccines: Vec<VaccineId>,
    pub reference_trials: Vec<TrialId>,
    pub ws: Vec<String>,
    pub wdelta: Vec<String>,
    pub contrasts: Vec<ContrastPair>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub replicates: Option<usize>,
    pub truncation: Truncation,
    pub gdelta: GDeltaMode,
}

impl RunConfig {
    fn empty(command: Command) -> Self {
        Self {
            command,
            input: None,
            registry: None,
            preset: None,
            scenario: None,
            responses: Vec::new(),
            vaccines: Vec::new(),
            reference_trials: Vec::new(),
            ws: Vec::new(),
            wdelta: Vec::new(),
            contrasts: Vec::new(),
            out: None,
            seed: None,
            replicates: None,
            truncation: Truncation::default(),
            gdelta: GDeltaMode::default(),
        }
    }

    /// Configuration of a `report` run over a results directory.
    pub fn report(results: impl Into<PathBuf>) -> Self {
        Self {
            input: Some(results.into()),
            ..Self::empty(Command::Report)
        }
    }

    /// SHA-256 over the configuration with file locations replaced by the
    /// digests of the files' contents. The output directory is excluded.
    pub fn hash(&self) -> CliResult<String> {
        #[derive(Serialize)]
        struct Hashed<'a> {
            config: &'a RunConfig,
            inputs: Vec<String>,
        }
        let mut config = self.clone();
        let mut inputs = Vec::new();
        for path in [&mut config.input, &mut config.registry, &mut config.scenario] {
            if let Some(p) = path.take() {
                inputs.push(file_digest(&p)?);
            }
        }
        config.out = None;
        let bytes = serde_json::to_vec(&Hashed {
            config: &config,
            inputs,
        })
        .map_err(|e| CliError::input(e.to_string()))?;
        Ok(hex(&Sha256::digest(bytes)))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex(&Sha256::digest(bytes)))
}

pub(crate) fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

pub(crate) fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::input(format!("cannot create {}: {e}", path.display())))
}

#[derive(Parser)]
#[command(name = "xtrial", version, about = "Covariate-standardized cross-trial vaccine comparisons")]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Estimate standardized vaccine means and contrasts from a stacked CSV.
    Estimate(EstimateArgs),
    /// Run a simulation scenario and summarize estimator performance.
    Simulate(SimulateArgs),
    /// Render the tables stored in a results directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct EstimateArgs {
    /// Stacked trial CSV.
    #[arg(long)]
    input: PathBuf,
    /// JSON registry corrections (designs, collected covariates).
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Vaccine labels to estimate; repeat or separate with commas.
    #[arg(long = "vaccine", value_delimiter = ',', required = true)]
    vaccines: Vec<i64>,
    /// Referent trial labels.
    #[arg(long = "ref-trials", value_delimiter = ',', required = true)]
    ref_trials: Vec<i64>,
    /// Covariates standardized over (W_S).
    #[arg(long, value_delimiter = ',')]
    ws: Vec<String>,
    /// Additional covariates of the sampling mechanism (W_Δ).
    #[arg(long, value_delimiter = ',')]
    wdelta: Vec<String>,
    /// Scale of the `s` column when no --response is given.
    #[arg(long, default_value = "identity", conflicts_with = "responses")]
    scale: OutcomeScale,
    /// Response column as COLUMN:SCALE or LABEL:COLUMN:SCALE; repeatable.
    #[arg(long = "response")]
    responses: Vec<ResponseSpec>,
    /// Contrast A:B (B minus A); defaults to the first vaccine against each other.
    #[arg(long = "contrast")]
    contrasts: Vec<ContrastPair>,
    /// Probability truncation bounds LO,HI.
    #[arg(long, value_parser = parse_truncation)]
    truncation: Option<Truncation>,
    /// Sampling probabilities: known (from the design) or estimate.
    #[arg(long, default_value = "known")]
    gdelta: GDeltaMode,
    /// Recorded with the outputs; estimation itself draws no random numbers.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in scenario name (scenario1, scenario2, scenario3).
    #[arg(long, required_unless_present = "scenario", conflicts_with = "scenario")]
    preset: Option<String>,
    /// Scenario JSON file.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Replicate count; defaults to the scenario's own.
    #[arg(long)]
    reps: Option<usize>,
    /// Seed for every random draw of the run.
    #[arg(long)]
    seed: u64,
    /// Probability truncation bounds LO,HI.
    #[arg(long, value_parser = parse_truncation)]
    truncation: Option<Truncation>,
    /// Sampling probabilities: known (from the design) or estimate.
    #[arg(long, default_value = "known")]
    gdelta: GDeltaMode,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Results directory written by `estimate` or `simulate`.
    #[arg(long)]
    input: PathBuf,
}

impl From<EstimateArgs> for RunConfig {
    fn from(a: EstimateArgs) -> Self {
        let responses = if a.responses.is_empty() {
            vec![ResponseSpec {
                label: "s".into(),
                column: "s".into(),
                scale: a.scale,
            }]
        } else {
            a.responses
        };
        Self {
            input: Some(a.input),
            registry: a.registry,
            responses,
            vaccines: a.vaccines.into_iter().map(VaccineId).collect(),
            reference_trials: a.ref_trials.into_iter().map(TrialId).collect(),
            ws: a.ws,
            wdelta: a.wdelta,
            contrasts: a.contrasts,
            out: Some(a.out),
            seed: a.seed,
            truncation: a.truncation.unwrap_or_default(),
            gdelta: a.gdelta,
            ..Self::empty(Command::Estimate)
        }
    }
}

impl From<SimulateArgs> for RunConfig {
    fn from(a: SimulateArgs) -> Self {
        Self {
            preset: a.preset,
            scenario: a.scenario,
            replicates: a.reps,
            seed: Some(a.seed),
            truncation: a.truncation.unwrap_or_default(),
            gdelta: a.gdelta,
            out: Some(a.out),
            ..Self::empty(Command::Simulate)
        }
    }
}

impl From<ReportArgs> for RunConfig {
    fn from(a: ReportArgs) -> Self {
        Self::report(a.input)
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Rendered tables go to stdout, errors to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.command {
        Commands::Estimate(a) => estimate::cmd_estimate(&a.into()),
        Commands::Simulate(a) => {
            configure_threads();
            simulate::cmd_simulate(&a.into())
        }
        Commands::Report(a) => report::cmd_report(&a.into()),
    };
    match outcome {
        Ok(text) => {
            print!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

/// Sizes the global worker pool from `XTRIAL_THREADS` when set.
fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        // The pool can only be sized once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Worker count used by simulations.
pub fn worker_threads() -> usize {
    rayon::current_num_threads()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_specs_parse() {
        let r: ResponseSpec = "zm96_pos:binary".parse().unwrap();
        assert_eq!(r.label, "zm96_pos");
        assert_eq!(r.scale, OutcomeScale::Binary);
        let r: ResponseSpec = "ZM96:zm96_mag:log10".parse().unwrap();
        assert_eq!((r.label.as_str(), r.column.as_str()), ("ZM96", "zm96_mag"));
        assert!("a:b:c:d".parse::<ResponseSpec>().is_err());
        assert!("col:cubic".parse::<ResponseSpec>().is_err());
    }

    #[test]
    fn contrast_pairs_parse() {
        let c: ContrastPair = "1:2".parse().unwrap();
        assert_eq!((c.a, c.b), (VaccineId(1), VaccineId(2)));
        assert!("1-2".parse::<ContrastPair>().is_err());
        assert!("x:2".parse::<ContrastPair>().is_err());
    }

    #[test]
    fn truncation_parses_and_checks_order() {
        let t = parse_truncation("0.01,0.99").unwrap();
        assert_eq!((t.lo, t.hi), (0.01, 0.99));
        assert!(parse_truncation("0.9,0.1").is_err());
        assert!(parse_truncation("0.1").is_err());
    }

    #[test]
    fn hash_ignores_output_location() {
        let mut a = RunConfig::empty(Command::Simulate);
        a.preset = Some("scenario1".into());
        a.seed = Some(1);
        let mut b = a.clone();
        b.out = Some("elsewhere".into());
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = Some(2);
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        let io = xtrial::Error::Io {
            path: "x".into(),
            source: std::io::Error::from(std::io::ErrorKind::NotFound),
        };
        assert_eq!(CliError::from(io).code, EXIT_INPUT);
        assert_eq!(CliError::from(xtrial::Error::Validation("v".into())).code, EXIT_VALIDATION);
        assert_eq!(CliError::from(xtrial::Error::Estimation("e".into())).code, EXIT_ESTIMATION);
    }
}
