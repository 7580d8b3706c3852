mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "ivcace", version, about = "Complier average causal effects with nonignorably missing covariates")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Input dataset (CSV with z, d, y and one column per covariate).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "IVCACE_WORKERS")]
    pub workers: Option<usize>,
    /// Target cells as covariate codes, e.g. "1,2;3,1".
    #[arg(long, global = true)]
    pub cells: Option<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    Mcar,
    Mar,
    #[value(alias = "ni")]
    Nonignorable,
    NicuLike,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic data, or run the replication study with --study.
    Simulate {
        #[arg(long, value_enum)]
        scenario: Option<ScenarioArg>,
        /// Records per dataset.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        study: bool,
        /// Replications for --study.
        #[arg(long)]
        reps: Option<usize>,
        /// Study methods, comma-separated (em_ni, complete_case, mar_impute).
        #[arg(long)]
        methods: Option<String>,
        /// Also write the latent class, confounder and unmasked covariates.
        #[arg(long)]
        debug: bool,
    },
    /// Fit the model and write parameter, CACE and compliance tables.
    Fit,
    /// Compare the model against baseline estimators.
    Baselines {
        /// Comma-separated subset of em_ni, complete_case, mar_impute,
        /// unadjusted, regression, propensity. An empty string runs none.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        resamples: Option<usize>,
    },
    /// Refit under a latent binary confounder over a grid of sensitivity parameters.
    Sensitivity {
        /// Stored bootstrap report of the base fit.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Resamples for a fresh base report (or per-point bootstraps).
        #[arg(long)]
        resamples: Option<usize>,
        /// Bootstrap every grid point instead of shifting the base interval.
        #[arg(long)]
        bootstrap_each_point: bool,
    },
    /// Bootstrap standard errors and percentile intervals.
    Bootstrap {
        #[arg(long)]
        resamples: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
