use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::forecaster::DemandModel;
use crate::model::Scenario;
use crate::pbdr::{Dataset, Sample};
use crate::qpsolver::{solve_qp, SolverSettings};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for fewer than two values.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub index: usize,
    pub cost: f64,
    pub profit: f64,
    pub completion: f64,
    pub smooth: f64,
    pub ground_truth_cost: f64,
    pub e_hat: Vec<f64>,
    /// Total station power per hour under the forecast-driven schedule.
    #[serde(skip)]
    pub station_power: Vec<f64>,
    /// Total station power per hour when the true demands are known.
    #[serde(skip)]
    pub ground_truth_power: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_evaluated: usize,
    pub n_excluded: usize,
    pub cost: Stat,
    pub profit: Stat,
    pub completion: Stat,
    pub smooth: Stat,
    pub ground_truth_cost: Stat,
    /// Root mean squared demand error over all customers and samples, kWh.
    pub rmse: f64,
    pub per_sample: Vec<SampleEval>,
}

fn hourly_power(x: &nalgebra::DVector<f64>, horizon: usize) -> Vec<f64> {
    (0..horizon)
        .map(|t| x.iter().skip(t).step_by(horizon).sum())
        .collect()
}

fn evaluate_sample(
    model: &(dyn DemandModel + Sync),
    index: usize,
    sample: &Sample,
    scenario: &Scenario,
    solver: &SolverSettings,
) -> Result<SampleEval> {
    let horizon = scenario.station.horizon;
    let solve = |e: &[f64]| -> Result<nalgebra::DVector<f64>> {
        let sol = solve_qp(&scenario.qp(&sample.c, e)?, solver)?;
        if !sol.is_converged() {
            return Err(Error::Numerical(format!("QP solve ended with {:?}", sol.status)));
        }
        Ok(sol.x_star)
    };
    let e_hat = model.predict(&sample.c)?;
    let x = solve(&e_hat)?;
    let tl = scenario.task_loss(&sample.c, &x, &sample.e)?;
    let x_gt = solve(&sample.e)?;
    let gt = scenario.task_loss(&sample.c, &x_gt, &sample.e)?;
    Ok(SampleEval {
        index,
        cost: tl.loss,
        profit: tl.profit,
        completion: tl.completion,
        smooth: tl.smooth,
        ground_truth_cost: gt.loss,
        e_hat,
        station_power: hourly_power(&x, horizon),
        ground_truth_power: hourly_power(&x_gt, horizon),
    })
}

/// Optimal operation cost of each sample when the true demands are known.
pub fn ground_truth_costs(
    test_set: &Dataset,
    scenario: &Scenario,
    solver: &SolverSettings,
) -> Result<Vec<f64>> {
    test_set
        .samples
        .par_iter()
        .map(|s| {
            let sol = solve_qp(&scenario.qp(&s.c, &s.e)?, solver)?;
            if !sol.is_converged() {
                return Err(Error::Numerical(format!("QP solve ended with {:?}", sol.status)));
            }
            Ok(scenario.task_loss(&s.c, &sol.x_star, &s.e)?.loss)
        })
        .collect()
}

/// Scores a demand model on a test set: for every sample, schedule on the forecast,
/// charge the schedule against the true demand and split the cost into profit,
/// completion penalty and smoothness penalty. Samples whose QP fails are excluded
/// and counted.
pub fn evaluate(
    model: &(dyn DemandModel + Sync),
    test_set: &Dataset,
    scenario: &Scenario,
    solver: &SolverSettings,
) -> Result<EvalReport> {
    scenario.validate()?;
    let results: Vec<Result<SampleEval>> = test_set
        .samples
        .par_iter()
        .enumerate()
        .map(|(k, s)| evaluate_sample(model, k, s, scenario, solver))
        .collect();

    let mut per_sample = Vec::with_capacity(results.len());
    let mut n_excluded = 0;
    for r in results {
        match r {
            Ok(s) => per_sample.push(s),
            Err(e @ Error::Dimension { .. }) => return Err(e),
            Err(e) => {
                n_excluded += 1;
                log::warn!("excluding test sample: {e}");
            }
        }
    }

    let col = |f: fn(&SampleEval) -> f64| -> Vec<f64> { per_sample.iter().map(f).collect() };
    let (mut sq, mut count) = (0.0, 0usize);
    for s in &per_sample {
        for (p, t) in s.e_hat.iter().zip(&test_set.samples[s.index].e) {
            sq += (p - t).powi(2);
            count += 1;
        }
    }
    Ok(EvalReport {
        n_evaluated: per_sample.len(),
        n_excluded,
        cost: Stat::of(&col(|s| s.cost)),
        profit: Stat::of(&col(|s| s.profit)),
        completion: Stat::of(&col(|s| s.completion)),
        smooth: Stat::of(&col(|s| s.smooth)),
        ground_truth_cost: Stat::of(&col(|s| s.ground_truth_cost)),
        rmse: if count == 0 { f64::NAN } else { (sq / count as f64).sqrt() },
        per_sample,
    })
}
