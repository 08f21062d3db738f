//! Training-size sweep comparing the two training regimes.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::eval::{evaluate, ground_truth_costs, Stat};
use crate::learner::train::{train, TrainConfig, TrainMode};
use crate::model::Scenario;
use crate::pbdr::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub sizes: Vec<usize>,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub two_step: TrainConfig,
    pub e2e: TrainConfig,
    /// Grid cells trained concurrently.
    pub jobs: usize,
}

impl CompareConfig {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|k| self.base_seed + k).collect()
    }
}

/// Test-set means for one (size, mode, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub size: usize,
    pub mode: TrainMode,
    pub seed: u64,
    pub cost: f64,
    pub profit: f64,
    pub completion: f64,
    pub smooth: f64,
    pub rmse: f64,
    pub n_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub size: usize,
    pub mode: TrainMode,
    pub seed: u64,
    pub error: String,
}

/// Seed-aggregated results for one (size, mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub size: usize,
    pub mode: TrainMode,
    /// Mean and standard deviation across seeds of the test-set mean cost.
    pub cost: Stat,
    pub profit: f64,
    pub completion: f64,
    pub smooth: f64,
    pub rmse: f64,
    /// Two-step mean cost minus decision-focused mean cost at this size.
    pub improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub cells: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
    pub rows: Vec<TableRow>,
    pub ground_truth_cost: f64,
}

impl Comparison {
    pub fn row(&self, size: usize, mode: TrainMode) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.size == size && r.mode == mode)
    }
}

fn run_cell(
    train_pool: &Dataset,
    test_set: &Dataset,
    scenario: &Scenario,
    cfg: &CompareConfig,
    size: usize,
    mode: TrainMode,
    seed: u64,
) -> Result<CellResult> {
    let mut tc = match mode {
        TrainMode::TwoStep => cfg.two_step.clone(),
        TrainMode::E2e => cfg.e2e.clone(),
    };
    tc.mode = mode;
    tc.seed = seed;
    tc.track_cost = false;
    let outcome = train(&train_pool.head(size), scenario, &tc)?;
    let report = evaluate(&outcome.params, test_set, scenario, &tc.solver)?;
    log::info!(
        "size {size} {mode} seed {seed}: cost {:.4} rmse {:.4}",
        report.cost.mean,
        report.rmse
    );
    Ok(CellResult {
        size,
        mode,
        seed,
        cost: report.cost.mean,
        profit: report.profit.mean,
        completion: report.completion.mean,
        smooth: report.smooth.mean,
        rmse: report.rmse,
        n_excluded: report.n_excluded,
    })
}

pub fn compare_runs(
    train_pool: &Dataset,
    test_set: &Dataset,
    scenario: &Scenario,
    cfg: &CompareConfig,
) -> Result<Comparison> {
    let largest = cfg.sizes.iter().copied().max().unwrap_or(0);
    if largest > train_pool.len() {
        return Err(Error::Config(format!(
            "training pool has {} samples; the sweep needs {largest}",
            train_pool.len()
        )));
    }
    if cfg.sizes.is_empty() || cfg.n_seeds == 0 {
        return Err(Error::Config("the sweep needs at least one size and one seed".into()));
    }
    let grid: Vec<(usize, TrainMode, u64)> = cfg
        .sizes
        .iter()
        .flat_map(|&size| {
            [TrainMode::TwoStep, TrainMode::E2e]
                .into_iter()
                .flat_map(move |mode| cfg.seeds().into_iter().map(move |seed| (size, mode, seed)))
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    let results: Vec<Result<CellResult>> = pool.install(|| {
        grid.par_iter()
            .map(|&(size, mode, seed)| run_cell(train_pool, test_set, scenario, cfg, size, mode, seed))
            .collect()
    });

    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for (&(size, mode, seed), r) in grid.iter().zip(results) {
        match r {
            Ok(c) => cells.push(c),
            Err(e) => failures.push(CellFailure {
                size,
                mode,
                seed,
                error: e.to_string(),
            }),
        }
    }

    let mut rows = Vec::new();
    for &size in &cfg.sizes {
        for mode in [TrainMode::TwoStep, TrainMode::E2e] {
            let sel: Vec<&CellResult> = cells.iter().filter(|c| c.size == size && c.mode == mode).collect();
            if sel.is_empty() {
                continue;
            }
            let mean = |f: fn(&CellResult) -> f64| sel.iter().map(|c| f(c)).sum::<f64>() / sel.len() as f64;
            rows.push(TableRow {
                size,
                mode,
                cost: Stat::of(&sel.iter().map(|c| c.cost).collect::<Vec<_>>()),
                profit: mean(|c| c.profit),
                completion: mean(|c| c.completion),
                smooth: mean(|c| c.smooth),
                rmse: mean(|c| c.rmse),
                improvement: f64::NAN,
            });
        }
    }
    for &size in &cfg.sizes {
        let two = rows.iter().find(|r| r.size == size && r.mode == TrainMode::TwoStep).map(|r| r.cost.mean);
        let e2e = rows.iter().find(|r| r.size == size && r.mode == TrainMode::E2e).map(|r| r.cost.mean);
        if let (Some(a), Some(b)) = (two, e2e) {
            for r in rows.iter_mut().filter(|r| r.size == size) {
                r.improvement = a - b;
            }
        }
    }

    let ground_truth_cost = ground_truth_costs(test_set, scenario, &cfg.e2e.solver)?
        .iter()
        .sum::<f64>()
        / test_set.len().max(1) as f64;

    Ok(Comparison {
        cells,
        failures,
        rows,
        ground_truth_cost,
    })
}

/// `samples,method,cost_mean,cost_std,improvement`
pub fn write_table1<W: Write>(rows: &[TableRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["samples", "method", "cost_mean", "cost_std", "improvement"])?;
    for r in rows {
        w.write_record([
            r.size.to_string(),
            r.mode.to_string(),
            format!("{:.6}", r.cost.mean),
            format!("{:.6}", r.cost.std),
            format!("{:.6}", r.improvement),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `samples,method,profit_mean,completion_mean,smooth_mean,rmse_mean`
pub fn write_table2<W: Write>(rows: &[TableRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "samples",
        "method",
        "profit_mean",
        "completion_mean",
        "smooth_mean",
        "rmse_mean",
    ])?;
    for r in rows {
        w.write_record([
            r.size.to_string(),
            r.mode.to_string(),
            format!("{:.6}", r.profit),
            format!("{:.6}", r.completion),
            format!("{:.6}", r.smooth),
            format!("{:.6}", r.rmse),
        ])?;
    }
    w.flush()?;
    Ok(())
}
