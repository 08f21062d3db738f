//! The two training regimes: demand-RMSE fitting (two-step) and operation-cost
//! fitting through the QP layer (decision-focused).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffopt::{GradientStatus, ReducedSensitivity};
use crate::error::{Error, Result};
use crate::learner::forecaster::{ForecasterParams, OutputClamp};
use crate::learner::optim::Adam;
use crate::model::Scenario;
use crate::pbdr::{Dataset, Sample};
use crate::qpsolver::{solve_qp, SolverSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    TwoStep,
    E2e,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::TwoStep => "two-step",
            TrainMode::E2e => "e2e",
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-step" | "two_step" => Ok(TrainMode::TwoStep),
            "e2e" => Ok(TrainMode::E2e),
            other => Err(Error::Config(format!("unknown training mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Number of optimizer steps; one mini-batch per step.
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden_width: usize,
    /// Sharpness of the soft output clamp used while training.
    pub softplus_sharpness: f64,
    /// Evaluate the batch operation cost in two-step mode as well (extra QP solves).
    pub track_cost: bool,
    /// Largest tolerated fraction of skipped samples in decision-focused training.
    pub max_skip_fraction: f64,
    pub solver: SolverSettings,
}

impl TrainConfig {
    pub fn for_mode(mode: TrainMode) -> Self {
        TrainConfig {
            mode,
            iterations: 250,
            learning_rate: 1e-2,
            batch_size: 32,
            seed: 0,
            hidden_width: 32,
            softplus_sharpness: 100.0,
            track_cost: true,
            max_skip_fraction: 0.05,
            solver: SolverSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.hidden_width == 0 {
            return Err(Error::Config("hidden_width must be at least 1".into()));
        }
        if !(self.softplus_sharpness > 0.0) {
            return Err(Error::Config("softplus_sharpness must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.max_skip_fraction) {
            return Err(Error::Config("max_skip_fraction must lie in [0, 1]".into()));
        }
        self.solver.validate()
    }

    fn clamp(&self) -> OutputClamp {
        OutputClamp::Soft {
            sharpness: self.softplus_sharpness,
        }
    }
}

/// One row of the training trace: the training objective of the step's batch
/// (RMSE for two-step, mean operation cost for decision-focused) and the batch's
/// mean operation cost, `NaN` when not tracked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub loss: f64,
    pub cost_mean: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ForecasterParams,
    pub trace: Vec<TraceRow>,
    /// Samples whose QP could not be solved or differentiated.
    pub skipped: usize,
}

const DIVERGENCE_LOSS: f64 = 1e12;

/// Cycles through shuffled epochs of the dataset.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Separate from the stream used for weight initialization.
        rng.set_stream(1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchSampler { order, pos: 0, rng }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn initial_params(dataset: &Dataset, config: &TrainConfig) -> Result<ForecasterParams> {
    let mut params = ForecasterParams::init(dataset.n_customers(), config.hidden_width, config.seed);
    let c: Vec<&[f64]> = dataset.samples.iter().map(|s| s.c.as_slice()).collect();
    let e: Vec<&[f64]> = dataset.samples.iter().map(|s| s.e.as_slice()).collect();
    params.fit_standardization(&c, &e)?;
    Ok(params)
}

fn check_dataset(dataset: &Dataset, n: Option<usize>) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if let Some(n) = n {
        if dataset.n_customers() != n {
            return Err(Error::Dimension {
                what: "dataset customers",
                expected: n,
                got: dataset.n_customers(),
            });
        }
    }
    Ok(())
}

/// Per-sample result of the decision-focused forward/backward pass.
pub struct E2eSampleGrad {
    pub cost: f64,
    pub grad_theta: Vec<f64>,
    pub e_hat: Vec<f64>,
    pub status: GradientStatus,
}

/// Forecast, solve the scheduling QP on the forecast, score the schedule against
/// the true demand and backpropagate the operation cost to the network weights.
pub fn e2e_sample_grad(
    params: &ForecasterParams,
    sample: &Sample,
    scenario: &Scenario,
    solver: &SolverSettings,
    clamp: OutputClamp,
) -> Result<E2eSampleGrad> {
    let cache = params.forward(&sample.c, clamp);
    let qp = scenario.qp(&sample.c, &cache.output)?;
    let sol = solve_qp(&qp, solver)?;
    if !sol.is_converged() {
        return Err(Error::Numerical(format!("QP solve ended with {:?}", sol.status)));
    }
    let tl = scenario.task_loss(&sample.c, &sol.x_star, &sample.e)?;
    let sens = ReducedSensitivity::new(&qp, &sol)?;
    let g_e = sens.grad_wrt_e_hat(&tl.grad_x)?;
    let grad_theta = params.backward(&cache, g_e.grad.as_slice());
    Ok(E2eSampleGrad {
        cost: tl.loss,
        grad_theta,
        e_hat: cache.output,
        status: g_e.status,
    })
}

fn batch_cost(
    params: &ForecasterParams,
    batch: &[&Sample],
    scenario: &Scenario,
    config: &TrainConfig,
) -> f64 {
    let costs: Vec<Option<f64>> = batch
        .par_iter()
        .map(|s| {
            let e_hat = params.forward(&s.c, config.clamp()).output;
            let qp = scenario.qp(&s.c, &e_hat).ok()?;
            let sol = solve_qp(&qp, &config.solver).ok().filter(|s| s.is_converged())?;
            scenario.task_loss(&s.c, &sol.x_star, &s.e).ok().map(|t| t.loss)
        })
        .collect();
    let ok: Vec<f64> = costs.into_iter().flatten().collect();
    if ok.is_empty() {
        f64::NAN
    } else {
        ok.iter().sum::<f64>() / ok.len() as f64
    }
}

/// Fits the forecaster by mean squared demand error. The trace records batch RMSE.
/// Passing a scenario with `track_cost` records the batch operation cost too.
pub fn train_two_step(
    dataset: &Dataset,
    config: &TrainConfig,
    cost_probe: Option<&Scenario>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(dataset, None)?;
    let n = dataset.n_customers();
    let mut params = initial_params(dataset, config)?;
    let mut theta = params.flatten();
    let mut opt = Adam::new(theta.len(), config.learning_rate);
    let mut sampler = BatchSampler::new(dataset.len(), config.seed);
    let mut trace = Vec::with_capacity(config.iterations);

    for iter in 1..=config.iterations {
        let batch: Vec<&Sample> = sampler.next(config.batch_size).into_iter().map(|k| &dataset.samples[k]).collect();
        let scale = 1.0 / (batch.len() * n) as f64;
        let mut grad = vec![0.0; theta.len()];
        let mut sq = 0.0;
        for s in &batch {
            let cache = params.forward(&s.c, config.clamp());
            let upstream: Vec<f64> = cache
                .output
                .iter()
                .zip(&s.e)
                .map(|(p, t)| {
                    sq += (p - t) * (p - t);
                    2.0 * (p - t) * scale
                })
                .collect();
            for (g, d) in grad.iter_mut().zip(params.backward(&cache, &upstream)) {
                *g += d;
            }
        }
        let rmse = (sq * scale).sqrt();
        if !rmse.is_finite() || rmse > DIVERGENCE_LOSS {
            return Err(Error::Diverged { iteration: iter, loss: rmse });
        }
        let cost_mean = match cost_probe {
            Some(sc) if config.track_cost => batch_cost(&params, &batch, sc, config),
            _ => f64::NAN,
        };
        trace.push(TraceRow {
            iter,
            loss: rmse,
            cost_mean,
        });
        opt.step(&mut theta, &grad);
        params.set_flat(&theta)?;
    }
    Ok(TrainOutcome {
        params,
        trace,
        skipped: 0,
    })
}

/// Fits the forecaster by the operation cost of the schedules it induces: each
/// step forecasts the batch, solves the scheduling QP per sample, differentiates
/// the optimum through its KKT system and updates the weights with the batch
/// mean gradient.
pub fn train_e2e(dataset: &Dataset, scenario: &Scenario, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    scenario.validate()?;
    check_dataset(dataset, Some(scenario.station.n_customers))?;
    let mut params = initial_params(dataset, config)?;
    let mut theta = params.flatten();
    let mut opt = Adam::new(theta.len(), config.learning_rate);
    let mut sampler = BatchSampler::new(dataset.len(), config.seed);
    let mut trace = Vec::with_capacity(config.iterations);
    let (mut seen, mut skipped) = (0usize, 0usize);

    for iter in 1..=config.iterations {
        let batch = sampler.next(config.batch_size);
        let results: Vec<Result<E2eSampleGrad>> = batch
            .par_iter()
            .map(|&k| e2e_sample_grad(&params, &dataset.samples[k], scenario, &config.solver, config.clamp()))
            .collect();

        let mut grad = vec![0.0; theta.len()];
        let mut cost_sum = 0.0;
        let mut used = 0usize;
        for (k, r) in batch.iter().zip(results) {
            seen += 1;
            match r {
                Ok(sg) => {
                    used += 1;
                    cost_sum += sg.cost;
                    for (g, d) in grad.iter_mut().zip(&sg.grad_theta) {
                        *g += d;
                    }
                }
                Err(e) => {
                    skipped += 1;
                    log::warn!("iteration {iter}: skipping sample {k}: {e}");
                }
            }
        }
        if skipped as f64 > config.max_skip_fraction * seen as f64 && seen >= 20 {
            return Err(Error::Numerical(format!(
                "skipped {skipped} of {seen} samples, above the {:.0}% limit",
                100.0 * config.max_skip_fraction
            )));
        }
        if used == 0 {
            trace.push(TraceRow {
                iter,
                loss: f64::NAN,
                cost_mean: f64::NAN,
            });
            continue;
        }
        let cost_mean = cost_sum / used as f64;
        if !cost_mean.is_finite() || cost_mean.abs() > DIVERGENCE_LOSS {
            return Err(Error::Diverged { iteration: iter, loss: cost_mean });
        }
        for g in &mut grad {
            *g /= used as f64;
        }
        trace.push(TraceRow {
            iter,
            loss: cost_mean,
            cost_mean,
        });
        opt.step(&mut theta, &grad);
        params.set_flat(&theta)?;
    }
    Ok(TrainOutcome {
        params,
        trace,
        skipped,
    })
}

pub fn train(dataset: &Dataset, scenario: &Scenario, config: &TrainConfig) -> Result<TrainOutcome> {
    match config.mode {
        TrainMode::TwoStep => train_two_step(dataset, config, Some(scenario)),
        TrainMode::E2e => train_e2e(dataset, scenario, config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_epoch() {
        let mut s = BatchSampler::new(10, 3);
        let mut seen: Vec<usize> = s.next(4).into_iter().chain(s.next(6)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(s.next(50).len(), 10);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("e2e".parse::<TrainMode>().unwrap(), TrainMode::E2e);
        assert_eq!("two-step".parse::<TrainMode>().unwrap(), TrainMode::TwoStep);
        assert!("rmse".parse::<TrainMode>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::for_mode(TrainMode::E2e);
        assert!(c.validate().is_ok());
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::for_mode(TrainMode::TwoStep);
        c.iterations = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_dataset_rejected() {
        let ds = Dataset {
            samples: vec![],
            patterns_id: "p".into(),
            seed: 0,
        };
        assert!(train_two_step(&ds, &TrainConfig::for_mode(TrainMode::TwoStep), None).is_err());
    }
}
