//! Argument parsing, config-file merging, and the flag-to-core mappings.
//!
//! Every subcommand accepts `--config file.json` holding the same fields
//! as its flags (a previous run's `manifest.json` also works: its nested
//! `config` object is used). Explicit flags always win over the file.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sgrpf_core::{ParamTransform, Proposal, Scheme, Variant};

use crate::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "sgrpf",
    version,
    about = "Particle filtering with stop-gradient resampling: simulate, filter, cross-check gradients, train, benchmark"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset (CSV plus JSON sidecar).
    Simulate(SimulateArgs),
    /// Run one filter (or a replicate sweep) and write a summary JSON.
    Filter(FilterArgs),
    /// Compare gradient estimators pairwise over a seed sweep.
    Gradcheck(GradcheckArgs),
    /// Learn model parameters by gradient ascent.
    Train(TrainArgs),
    /// Time forward+backward passes per variant.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Lgssm,
    Sv,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Lgssm => "lgssm",
            ModelKind::Sv => "sv",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "lgssm" => Some(ModelKind::Lgssm),
            "sv" => Some(ModelKind::Sv),
            _ => None,
        }
    }

    pub fn dim_theta(&self) -> usize {
        match self {
            ModelKind::Lgssm => 2,
            ModelKind::Sv => 3,
        }
    }

    /// Natural transform used when training this model.
    pub fn train_transform(&self) -> ParamTransform {
        match self {
            ModelKind::Lgssm => ParamTransform::Identity,
            ModelKind::Sv => ParamTransform::SvUnconstrained,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantArg {
    Sis,
    Pf,
    PfSf,
    DpfSgr,
    Mpf,
    Dpf2,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Sis => Variant::Sis,
            VariantArg::Pf => Variant::Pf,
            VariantArg::PfSf => Variant::PfSf,
            VariantArg::DpfSgr => Variant::DpfSgr,
            VariantArg::Mpf => Variant::Mpf,
            VariantArg::Dpf2 => Variant::Dpf2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeArg {
    Multinomial,
    Stratified,
    Systematic,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Scheme {
        match s {
            SchemeArg::Multinomial => Scheme::Multinomial,
            SchemeArg::Stratified => Scheme::Stratified,
            SchemeArg::Systematic => Scheme::Systematic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalArg {
    Bootstrap,
    Learned,
}

impl From<ProposalArg> for Proposal {
    fn from(p: ProposalArg) -> Proposal {
        match p {
            ProposalArg::Bootstrap => Proposal::Bootstrap,
            ProposalArg::Learned => Proposal::Learned,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

/// Comma-separated floats as a single flag value, e.g. `--theta 2,0.9,1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct F64List(pub Vec<f64>);

impl std::str::FromStr for F64List {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad number {p:?}: {e}")))
            .collect::<Result<Vec<f64>, _>>()
            .map(F64List)
    }
}

/// Comma-separated counts as a single flag value, e.g. `--mpf-scaling 16,64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UsizeList(pub Vec<usize>);

impl std::str::FromStr for UsizeList {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad count {p:?}: {e}")))
            .collect::<Result<Vec<usize>, _>>()
            .map(UsizeList)
    }
}

/// Load a config file; a run manifest is accepted by unwrapping its
/// nested `config` object.
pub fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config is not valid JSON: {e}")))?;
    let inner = match (value.get("command"), value.get("config")) {
        (Some(_), Some(cfg)) => cfg.clone(),
        _ => value,
    };
    serde_json::from_value(inner).map_err(|e| CliError::Usage(format!("bad config fields: {e}")))
}

macro_rules! fill_from_file {
    ($args:ident, $file:ident, $($field:ident),+ $(,)?) => {
        $( if $args.$field.is_none() { $args.$field = $file.$field; } )+
    };
}

#[derive(Args, Debug, Clone, Serialize, Deserialize, Default)]
pub struct SimulateArgs {
    /// Model to simulate from.
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Comma-separated parameters, e.g. 2,0.9,1 for sv.
    #[arg(long)]
    pub theta: Option<F64List>,
    /// Number of observations.
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long, env = "SGRPF_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out: PathBuf,
    /// JSON file with the same fields; flags override.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl SimulateArgs {
    pub fn merged(mut self) -> Result<Self, CliError> {
        if let Some(path) = &self.config {
            let file: SimulateArgs = load_config(path)?;
            fill_from_file!(self, file, model, theta, t, seed);
        }
        Ok(self)
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize, Default)]
pub struct FilterArgs {
    /// Dataset CSV (header `t,y`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Model; defaults to the dataset's JSON sidecar.
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Evaluation parameters; defaults to the sidecar's generating theta.
    #[arg(long)]
    pub theta: Option<F64List>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Particle count.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Resample when ESS < threshold * N (1.0 = always, 0.0 = never).
    #[arg(long)]
    pub ess_threshold: Option<f64>,
    #[arg(long, env = "SGRPF_SEED")]
    pub seed: Option<u64>,
    /// Replicate count for a mean/SE sweep.
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Worker threads for sweeps.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Also report the exact reference (`kalman`, linear-Gaussian only).
    #[arg(long)]
    pub oracle: Option<String>,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl FilterArgs {
    pub fn merged(mut self) -> Result<Self, CliError> {
        if let Some(path) = &self.config {
            let file: FilterArgs = load_config(path)?;
            fill_from_file!(
                self, file, data, model, theta, variant, n, scheme, ess_threshold, seed,
                replicates, jobs, oracle
            );
        }
        Ok(self)
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize, Default)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub theta: Option<F64List>,
    /// Estimator pair, e.g. ad-dpf:fisher (see README for the list).
    #[arg(long)]
    pub pair: Option<String>,
    /// Number of seeds to sweep.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Maximum relative difference accepted per seed.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, env = "SGRPF_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl GradcheckArgs {
    pub fn merged(mut self) -> Result<Self, CliError> {
        if let Some(path) = &self.config {
            let file: GradcheckArgs = load_config(path)?;
            fill_from_file!(self, file, data, model, theta, pair, seeds, n, tol, seed, jobs);
        }
        Ok(self)
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize, Default)]
pub struct TrainArgs {
    /// Training dataset CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out dataset for the test column.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    #[arg(long)]
    pub ess_threshold: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    /// Initial parameters (natural space).
    #[arg(long)]
    pub theta0: Option<F64List>,
    #[arg(long, env = "SGRPF_SEED")]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl TrainArgs {
    pub fn merged(mut self) -> Result<Self, CliError> {
        if let Some(path) = &self.config {
            let file: TrainArgs = load_config(path)?;
            fill_from_file!(
                self, file, data, test_data, model, variant, n, scheme, ess_threshold, epochs,
                lr, optimizer, theta0, seed
            );
        }
        Ok(self)
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize, Default)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub theta: Option<F64List>,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Variants to time (comma-separated).
    #[arg(long, value_delimiter = ',', value_enum)]
    pub variants: Option<Vec<VariantArg>>,
    /// Timed repetitions after warmup.
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Particle counts for the marginal-filter scaling row, e.g. 16,64.
    #[arg(long)]
    pub mpf_scaling: Option<UsizeList>,
    #[arg(long, env = "SGRPF_SEED")]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl BenchArgs {
    pub fn merged(mut self) -> Result<Self, CliError> {
        if let Some(path) = &self.config {
            let file: BenchArgs = load_config(path)?;
            fill_from_file!(
                self, file, model, theta, t, n, variants, reps, warmup, mpf_scaling, seed
            );
        }
        Ok(self)
    }
}
