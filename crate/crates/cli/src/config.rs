//! Experiment configuration: one TOML file describing the station, its charging
//! sessions, the synthetic customer population and the training runs.
//!
//! Relative paths inside the file are resolved against the directory holding it.

use std::path::{Path, PathBuf};

use optcharge_core::gradcheck::GradcheckConfig;
use optcharge_core::learner::{CompareConfig, TrainConfig, TrainMode};
use optcharge_core::model::{Scenario, Session, StationConfig};
use optcharge_core::pbdr::PopulationConfig;
use optcharge_core::qpsolver::SolverSettings;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Experiment seed. Data, weight initialization and mini-batch order all
    /// derive from it.
    #[serde(default)]
    pub seed: u64,
    pub station: StationBlock,
    pub sessions: Vec<SessionBlock>,
    #[serde(default)]
    pub pbdr: PbdrBlock,
    #[serde(default)]
    pub train: TrainBlock,
    #[serde(default)]
    pub compare: CompareBlock,
    /// The `seed` key here is ignored; the experiment seed is used instead.
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
    #[serde(default)]
    pub paths: PathsBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationBlock {
    pub horizon: usize,
    pub n_customers: usize,
    /// kW
    pub station_cap: f64,
    pub beta: f64,
    pub alpha: f64,
}

/// One EV session. Selling prices are drawn per sample from the price range of
/// the `pbdr` block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionBlock {
    pub arrival: usize,
    pub departure: usize,
    /// kW
    pub max_power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PbdrBlock {
    pub n_utility: usize,
    pub n_quadratic: usize,
    pub price_low: f64,
    pub price_high: f64,
    pub demand_low: f64,
    pub demand_high: f64,
    pub noise_std: f64,
    pub max_attempts: usize,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for PbdrBlock {
    fn default() -> Self {
        let p = PopulationConfig::default();
        PbdrBlock {
            n_utility: p.n_utility,
            n_quadratic: p.n_quadratic,
            price_low: p.price_low,
            price_high: p.price_high,
            demand_low: p.demand_low,
            demand_high: p.demand_high,
            noise_std: p.noise_std,
            max_attempts: p.max_attempts,
            n_train: 1000,
            n_test: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBlock {
    pub mode: TrainMode,
    /// Rows of the training file used by `train`; all of them when absent.
    pub samples: Option<usize>,
    pub iterations: usize,
    pub batch_size: usize,
    pub hidden_width: usize,
    pub lr_two_step: f64,
    pub lr_e2e: f64,
    pub softplus_sharpness: f64,
    pub max_skip_fraction: f64,
    pub solver: SolverSettings,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let t = TrainConfig::for_mode(TrainMode::E2e);
        TrainBlock {
            mode: TrainMode::E2e,
            samples: None,
            iterations: t.iterations,
            batch_size: t.batch_size,
            hidden_width: t.hidden_width,
            lr_two_step: 1e-2,
            lr_e2e: 1e-2,
            softplus_sharpness: t.softplus_sharpness,
            max_skip_fraction: t.max_skip_fraction,
            solver: t.solver,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareBlock {
    pub sizes: Vec<usize>,
    pub n_seeds: usize,
    pub jobs: usize,
}

impl Default for CompareBlock {
    fn default() -> Self {
        CompareBlock {
            sizes: vec![200, 400, 600, 800],
            n_seeds: 5,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsBlock {
    /// CSV with header `hour,price`, one row per hour.
    pub price_profile: PathBuf,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsBlock {
    fn default() -> Self {
        PathsBlock {
            price_profile: "price_profile.csv".into(),
            data_dir: "data".into(),
            out_dir: "out".into(),
        }
    }
}

/// A loaded and validated configuration.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub scenario: Scenario,
    pub population: PopulationConfig,
}

/// Independent seeds for the separate random streams of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedPurpose {
    Population,
    TrainPool,
    TestSet,
}

pub fn derive_seed(seed: u64, purpose: SeedPurpose) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64 + 1);
    rng.next_u64()
}

pub fn read_price_profile(path: &Path, horizon: usize) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    let headers = reader.headers().map_err(|e| CliError::io(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["hour", "price"] {
        return Err(CliError::Validation(format!(
            "{}: expected header `hour,price`",
            path.display()
        )));
    }
    let mut prices = Vec::new();
    for (k, row) in reader.records().enumerate() {
        let row = row.map_err(|e| CliError::io(path, e))?;
        let bad = || CliError::Validation(format!("{}: malformed row {}", path.display(), k + 1));
        let hour: usize = row.get(0).and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
        let price: f64 = row.get(1).and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
        if hour != k {
            return Err(CliError::Validation(format!(
                "{}: row {} has hour {hour}; hours must run 0, 1, 2, ...",
                path.display(),
                k + 1
            )));
        }
        prices.push(price);
    }
    if prices.len() != horizon {
        return Err(CliError::Validation(format!(
            "{}: {} hourly prices for a horizon of {horizon}",
            path.display(),
            prices.len()
        )));
    }
    Ok(prices)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.paths.price_profile,
            &mut self.paths.data_dir,
            &mut self.paths.out_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn population(&self) -> PopulationConfig {
        let b = &self.pbdr;
        PopulationConfig {
            n_utility: b.n_utility,
            n_quadratic: b.n_quadratic,
            price_low: b.price_low,
            price_high: b.price_high,
            demand_low: b.demand_low,
            demand_high: b.demand_high,
            noise_std: b.noise_std,
            max_attempts: b.max_attempts,
        }
    }

    pub fn train_config(&self, mode: TrainMode, seed: u64) -> TrainConfig {
        let b = &self.train;
        TrainConfig {
            mode,
            iterations: b.iterations,
            learning_rate: match mode {
                TrainMode::TwoStep => b.lr_two_step,
                TrainMode::E2e => b.lr_e2e,
            },
            batch_size: b.batch_size,
            seed,
            hidden_width: b.hidden_width,
            softplus_sharpness: b.softplus_sharpness,
            track_cost: true,
            max_skip_fraction: b.max_skip_fraction,
            solver: b.solver,
        }
    }

    pub fn compare_config(&self, seed: u64, jobs: Option<usize>) -> CompareConfig {
        CompareConfig {
            sizes: self.compare.sizes.clone(),
            n_seeds: self.compare.n_seeds,
            base_seed: seed,
            two_step: self.train_config(TrainMode::TwoStep, seed),
            e2e: self.train_config(TrainMode::E2e, seed),
            jobs: jobs.unwrap_or(self.compare.jobs),
        }
    }

    pub fn gradcheck_config(&self, seed: u64) -> GradcheckConfig {
        GradcheckConfig {
            seed,
            ..self.gradcheck.clone()
        }
    }

    fn scenario(&self, prices: Vec<f64>) -> Result<Scenario> {
        let s = &self.station;
        let station = StationConfig {
            horizon: s.horizon,
            n_customers: s.n_customers,
            purchase_price: prices,
            station_cap: s.station_cap,
            beta: s.beta,
            alpha: s.alpha,
        };
        let sessions = self
            .sessions
            .iter()
            .enumerate()
            .map(|(i, b)| {
                // The selling price is replaced per sample; this value only has to be valid.
                Session::new(i, b.arrival, b.departure, b.max_power, self.pbdr.price_low)
            })
            .collect::<optcharge_core::Result<Vec<_>>>()?;
        Ok(Scenario::new(station, sessions)?)
    }

    fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(CliError::Validation(m));
        if self.sessions.len() != self.station.n_customers {
            return invalid(format!(
                "station.n_customers is {} but {} sessions are listed",
                self.station.n_customers,
                self.sessions.len()
            ));
        }
        if self.pbdr.n_utility + self.pbdr.n_quadratic != self.station.n_customers {
            return invalid("pbdr.n_utility + pbdr.n_quadratic must equal station.n_customers".into());
        }
        if self.pbdr.n_train == 0 || self.pbdr.n_test == 0 {
            return invalid("pbdr.n_train and pbdr.n_test must be at least 1".into());
        }
        if let Some(k) = self.train.samples {
            if k == 0 || k > self.pbdr.n_train {
                return invalid(format!("train.samples must lie in 1..={}", self.pbdr.n_train));
            }
        }
        if self.compare.sizes.is_empty() || self.compare.n_seeds == 0 || self.compare.jobs == 0 {
            return invalid("compare needs sizes, n_seeds >= 1 and jobs >= 1".into());
        }
        if let Some(&s) = self.compare.sizes.iter().find(|&&s| s == 0 || s > self.pbdr.n_train) {
            return invalid(format!("compare size {s} must lie in 1..={}", self.pbdr.n_train));
        }
        self.population().validate()?;
        for mode in [TrainMode::TwoStep, TrainMode::E2e] {
            self.train_config(mode, self.seed).validate()?;
        }
        self.gradcheck.validate()?;
        Ok(())
    }
}

impl Experiment {
    /// Reads, resolves and validates a configuration file and its price profile.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut config = ExperimentConfig::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve(base);
        Self::from_config(config)
    }

    /// Validates an already resolved configuration.
    pub fn from_config(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let prices = read_price_profile(&config.paths.price_profile, config.station.horizon)?;
        let scenario = config.scenario(prices)?;
        let population = config.population();
        Ok(Experiment {
            config,
            scenario,
            population,
        })
    }
}
