use std::path::PathBuf;

use bscm_core::bayes_scm::OmegaUpdate;
use bscm_core::estimators::Method;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

pub const BUILD_ID: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "bscm", version = BUILD_ID, about = "Synthetic control estimation with Bayesian posterior inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", content = "parameters", rename_all = "lowercase")]
pub enum Command {
    /// Fit one point estimator and write weights and effects.
    Estimate(EstimateArgs),
    /// MAP donor selection followed by Gibbs sampling of the weights.
    Posterior(PosteriorArgs),
    /// Monte Carlo comparison of estimators on the factor-model design.
    Simulate(SimulateArgs),
    /// Plot-ready series from an estimate or posterior output directory.
    Report(ReportArgs),
    /// Repeat a run recorded in a manifest.
    #[serde(skip)]
    Rerun(RerunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Estimate(_) => "estimate",
            Command::Posterior(_) => "posterior",
            Command::Simulate(_) => "simulate",
            Command::Report(_) => "report",
            Command::Rerun(_) => "rerun",
        }
    }
}

/// Output location; not recorded in manifests since it does not change results.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct OutArgs {
    /// Output directory [default: $BSCM_OUT_DIR, else ./bscm-out]
    #[arg(long, value_name = "DIR")]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DataArgs {
    /// Outcomes in long format: unit,time,outcome
    #[arg(long, value_name = "CSV")]
    pub data: PathBuf,
    /// Covariates in long format: unit,covariate,component_index,value
    #[arg(long, value_name = "CSV")]
    pub covariates: Option<PathBuf>,
    /// Identifier of the treated unit
    #[arg(long)]
    pub treated: String,
    /// Last pre-treatment time label
    #[arg(long = "pre-end", value_name = "TIME")]
    pub pre_end: String,
    /// Center and scale each covariate over the donors
    #[arg(long)]
    pub standardize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimateMethod {
    Adh,
    Lscm,
    Dinet,
    Psconv,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub method: EstimateMethod,
    /// Also write the optimality certificate and tuning details
    #[arg(long)]
    pub diagnostics: bool,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateArg {
    /// Donor conditional as stated for the model
    Verbatim,
    /// Exact conditional along the simplex direction against the slack donor
    Collapsed,
}

impl From<UpdateArg> for OmegaUpdate {
    fn from(u: UpdateArg) -> Self {
        match u {
            UpdateArg::Verbatim => OmegaUpdate::Verbatim,
            UpdateArg::Collapsed => OmegaUpdate::Collapsed,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PosteriorArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Retained draws after burn-in and thinning
    #[arg(long, default_value_t = 10_000)]
    pub draws: usize,
    #[arg(long, default_value_t = 2_000)]
    pub burnin: usize,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "hpd-level", default_value_t = 0.95)]
    pub hpd_level: f64,
    #[arg(long = "omega-update", value_enum, default_value_t = UpdateArg::Verbatim)]
    pub omega_update: UpdateArg,
    /// Iteration cap of the Monte Carlo EM fit
    #[arg(long = "em-max-iter", default_value_t = 200)]
    pub em_max_iter: usize,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// Treatment effect scale; repeat for several table columns
    #[arg(long = "theta0", default_values_t = [1.0], allow_negative_numbers = true)]
    pub theta0: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    /// Comma-separated subset of adh,dinet,lscm,psconv,bayes
    #[arg(long, value_delimiter = ',', default_values_t = Method::ALL.to_vec(), value_parser = parse_method)]
    pub methods: Vec<Method>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for the replications [default: all cores]
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Iteration cap of the Monte Carlo EM fit inside each replication
    #[arg(long = "em-max-iter", default_value_t = 200)]
    pub em_max_iter: usize,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: bscm_core::Error| e.to_string())
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    /// Directory written by `estimate` or `posterior`
    #[arg(long, value_name = "DIR")]
    pub from: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct RerunArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}
