//! `alqr`: analyze CSV data, reproduce the simulation experiments, and run
//! seed/fold sensitivity sweeps.

mod commands;
mod error;
mod report;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;
use crate::table::ExposureChoice;

#[derive(Debug, Parser)]
#[command(name = "alqr", version, about = "Assumption-lean inference for exposure effects on conditional quantiles")]
struct Cli {
    /// Worker threads (the ALQR_THREADS environment variable takes precedence).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the exposure coefficient on a CSV file.
    Analyze {
        #[command(flatten)]
        args: AnalyzeArgs,
        /// Cross-fitting folds (1 fits every nuisance on the full sample).
        #[arg(long, default_value_t = 5)]
        folds: usize,
    },
    /// Run a Monte Carlo reproduction of one simulation experiment.
    Simulate(SimulateArgs),
    /// Repeat an analysis across derived seeds and fold counts.
    Sensitivity {
        #[command(flatten)]
        args: AnalyzeArgs,
        /// Analyses per fold count.
        #[arg(long)]
        repeat: usize,
        /// Fold counts to sweep.
        #[arg(long, value_delimiter = ',', default_value = "5")]
        folds: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MeanLearners {
    /// Linear/logistic regression and a regression forest.
    All,
    /// Linear/logistic regression only.
    Parametric,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    outcome: String,
    #[arg(long)]
    exposure: String,
    /// Covariate columns; defaults to every column without another role.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Sampling-weight column.
    #[arg(long)]
    weights: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    tau: Vec<f64>,
    /// plugin, dml, tmle, dml-vs, tmle-vs, qr or qr-vs.
    #[arg(long, default_value = "tmle")]
    estimator: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// identity or log.
    #[arg(long, default_value = "identity")]
    link: String,
    /// iterate or onestep.
    #[arg(long, default_value = "iterate")]
    tmle_mode: String,
    #[arg(long, value_enum, default_value_t = ExposureChoice::Auto)]
    exposure_kind: ExposureChoice,
    /// Trees in each quantile forest.
    #[arg(long)]
    num_trees: Option<usize>,
    /// Candidate conditional-mean learners.
    #[arg(long, value_enum, default_value_t = MeanLearners::All)]
    mean_learners: MeanLearners,
    /// Output format; inferred from the --out extension when omitted.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// exp1a, exp1b, exp1c, exp2, exp3 or exp4.
    #[arg(long)]
    experiment: String,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 200)]
    reps: usize,
    #[arg(long, value_delimiter = ',', default_value = "oracle,plugin,dml,tmle")]
    estimators: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    tau: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Trees in each quantile forest.
    #[arg(long)]
    num_trees: Option<usize>,
    /// Folds used by the cross-fitted estimators.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Table path; a CSV and a JSON file are written side by side. The CSV
    /// table goes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn threads(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    let t = match std::env::var("ALQR_THREADS") {
        Ok(v) if !v.trim().is_empty() => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("ALQR_THREADS must be a positive integer, got `{v}`")))?,
        ),
        _ => flag,
    };
    if t == Some(0) {
        return Err(CliError::Usage("thread count must be positive".into()));
    }
    Ok(t)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = threads(cli.threads)?;
    if let Some(t) = threads {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match cli.command {
        Command::Analyze { args, folds } => commands::analyze(&args.request()?, folds),
        Command::Simulate(s) => commands::simulate(&commands::SimulationRequest {
            experiment: s.experiment,
            n: s.n,
            reps: s.reps,
            estimators: s.estimators,
            taus: s.tau,
            seed: s.seed,
            num_trees: s.num_trees,
            folds: s.folds,
            threads,
            out: s.out,
        }),
        Command::Sensitivity { args, repeat, folds } => commands::sensitivity(&args.request()?, repeat, &folds),
    }
}

impl AnalyzeArgs {
    fn request(self) -> Result<commands::AnalysisRequest, CliError> {
        let format = self.format.map(|f| match f {
            FormatArg::Json => report::Format::Json,
            FormatArg::Csv => report::Format::Csv,
        });
        Ok(commands::AnalysisRequest {
            roles: table::ColumnRoles {
                outcome: self.outcome,
                exposure: self.exposure,
                covariates: self.covariates,
                weights: self.weights,
            },
            estimator: self.estimator.parse()?,
            link: self.link.parse()?,
            tmle_mode: match self.tmle_mode.as_str() {
                "iterate" => alqr_core::TmleMode::IterateToConvergence,
                "onestep" => alqr_core::TmleMode::OneStep,
                other => return Err(CliError::Usage(format!("unknown TMLE mode `{other}` (iterate or onestep)"))),
            },
            format: report::Format::resolve(format, self.out.as_deref()),
            input: self.input,
            taus: self.tau,
            seed: self.seed,
            exposure_kind: self.exposure_kind,
            num_trees: self.num_trees,
            mean_candidates: match self.mean_learners {
                MeanLearners::All => alqr_core::MeanCandidates::All,
                MeanLearners::Parametric => alqr_core::MeanCandidates::Parametric,
            },
            out: self.out,
        })
    }
}

fn fail(e: &CliError) -> ExitCode {
    let record = serde_json::to_string(&e.record()).unwrap_or_else(|_| format!("{{\"message\":{:?}}}", e.to_string()));
    eprintln!("{record}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return fail(&CliError::Usage(e.kind().to_string()));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
