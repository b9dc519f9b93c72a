//! Run configuration: a TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use beacon_core::evalbench::{EvalOptions, PolicySpec, Standardization, StreamSpec};
use beacon_core::posterior::{NigPrior, DEFAULT_FILTER_QUANTILE};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

fn default_quantile() -> f64 {
    DEFAULT_FILTER_QUANTILE
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub episodes: usize,
    pub horizon: usize,
    /// Single cost; ignored when `costs` is non-empty.
    #[serde(default)]
    pub cost: Option<f64>,
    #[serde(default)]
    pub costs: Vec<f64>,
    #[serde(default)]
    pub prior: NigPrior,
    #[serde(default)]
    pub common_random_numbers: bool,
    #[serde(default = "default_quantile")]
    pub quantile: f64,
    #[serde(default)]
    pub standardization: Standardization,
    #[serde(default)]
    pub workers: Option<usize>,
    pub stream: StreamSpec,
    pub policies: Vec<PolicySpec>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

/// Values given on the command line; each one replaces the file's value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub episodes: Option<usize>,
    pub horizon: Option<usize>,
    pub costs: Option<Vec<f64>>,
    pub robust: Option<bool>,
    pub batch_size: Option<usize>,
    pub crn: Option<bool>,
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn apply(mut self, o: &Overrides) -> Result<Self, CliError> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(episodes) = o.episodes {
            self.episodes = episodes;
        }
        if let Some(horizon) = o.horizon {
            self.horizon = horizon;
        }
        if let Some(costs) = &o.costs {
            self.cost = None;
            self.costs = costs.clone();
        }
        if let Some(crn) = o.crn {
            self.common_random_numbers = crn;
        }
        if o.workers.is_some() {
            self.workers = o.workers;
        }
        if let Some(dir) = &o.out_dir {
            self.out_dir = dir.clone();
        }
        for p in &mut self.policies {
            if let PolicySpec::Beacon { robust, batch_size, .. } = p {
                if let Some(r) = o.robust {
                    *robust = r;
                }
                if let Some(b) = o.batch_size {
                    *batch_size = b;
                }
            }
        }
        self.stream.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn cost_grid(&self) -> Vec<f64> {
        if self.costs.is_empty() {
            self.cost.into_iter().collect()
        } else {
            self.costs.clone()
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.cost_grid().is_empty() {
            return Err(CliError::Config("set `cost` or `costs`".into()));
        }
        if self.policies.is_empty() {
            return Err(CliError::Config("no policies configured".into()));
        }
        Ok(())
    }

    /// Evaluation options at the first cost of the grid.
    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            episodes: self.episodes,
            cost: self.cost_grid()[0],
            horizon: self.horizon,
            prior: self.prior,
            common_random_numbers: self.common_random_numbers,
            quantile: self.quantile,
            standardization: self.standardization,
            workers: self.workers,
        }
    }
}
