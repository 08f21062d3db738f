use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use optcharge_core::gradcheck::{run_gradcheck, GradcheckReport};
use optcharge_core::learner::compare::{write_table1, write_table2};
use optcharge_core::learner::{
    compare_runs, evaluate, train, Comparison, EvalReport, ForecasterParams, OracleForecaster,
    TraceRow, TrainConfig, TrainMode,
};
use optcharge_core::pbdr::{generate_dataset, generate_population, Dataset, PbdrPattern};
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, Experiment, SeedPurpose};
use crate::error::{CliError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MIN_GRADCHECK_PASS_RATE: f64 = 0.95;

/// Command-line overrides shared by all commands.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<TrainMode>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub mode: TrainMode,
    pub samples: usize,
    pub seed: u64,
    pub train_config: TrainConfig,
    pub params: ForecasterParams,
}

/// Which model `eval` scores.
#[derive(Debug, Clone)]
pub enum EvalTarget {
    Checkpoint(PathBuf),
    /// The checkpoint `train` writes for this mode in the output directory.
    Trained(TrainMode),
    Oracle,
}

impl Experiment {
    fn seed(&self, o: &Overrides) -> u64 {
        o.seed.unwrap_or(self.config.seed)
    }

    fn data_dir(&self) -> &Path {
        &self.config.paths.data_dir
    }

    fn out_dir(&self, o: &Overrides) -> PathBuf {
        o.out.clone().unwrap_or_else(|| self.config.paths.out_dir.clone())
    }

    fn mode(&self, o: &Overrides) -> TrainMode {
        o.mode.unwrap_or(self.config.train.mode)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    fill(&mut w)?;
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(|e| CliError::io(path, e))?;
        writeln!(w).map_err(|e| CliError::io(path, e))
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn population_id(seed: u64) -> String {
    format!("population-{seed}")
}

fn read_dataset(path: &Path, seed: u64) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    Dataset::read_csv(file, &population_id(seed), seed).map_err(|e| match e {
        optcharge_core::Error::Io(_) => CliError::io(path, e),
        other => CliError::Validation(format!("{}: {other}", path.display())),
    })
}

fn load_data(exp: &Experiment, seed: u64, file: &str) -> Result<Dataset> {
    let ds = read_dataset(&exp.data_dir().join(file), seed)?;
    if ds.n_customers() != exp.scenario.station.n_customers {
        return Err(CliError::Validation(format!(
            "{file} has {} customers; the station has {}",
            ds.n_customers(),
            exp.scenario.station.n_customers
        )));
    }
    Ok(ds)
}

/// Writes `population.json`, `train.csv` and `test.csv` into the data directory
/// (or `--out`).
pub fn gen_data(exp: &Experiment, o: &Overrides) -> Result<PathBuf> {
    let seed = exp.seed(o);
    let dir = o.out.clone().unwrap_or_else(|| exp.data_dir().to_path_buf());
    create_dir(&dir)?;
    let pop = &exp.population;
    let patterns = generate_population(pop, &exp.scenario.sessions, derive_seed(seed, SeedPurpose::Population))?;
    let id = population_id(seed);
    let pool = generate_dataset(
        &patterns,
        pop,
        exp.config.pbdr.n_train,
        derive_seed(seed, SeedPurpose::TrainPool),
        &id,
    )?;
    let test = generate_dataset(
        &patterns,
        pop,
        exp.config.pbdr.n_test,
        derive_seed(seed, SeedPurpose::TestSet),
        &id,
    )?;

    write_json(&dir.join("population.json"), &patterns)?;
    for (name, ds) in [("train.csv", &pool), ("test.csv", &test)] {
        let path = dir.join(name);
        write_file(&path, |w| Ok(ds.write_csv(w)?))?;
    }

    println!("population seed {seed}: {} train rows, {} test rows", pool.len(), test.len());
    println!("customer  family               demand_min  demand_mean  demand_max");
    for (i, p) in patterns.iter().enumerate() {
        let e: Vec<f64> = pool.samples.iter().map(|s| s.e[i]).collect();
        let family = match p {
            PbdrPattern::UtilityMax(_) => "utility-max",
            PbdrPattern::PiecewiseQuadratic(_) => "piecewise-quadratic",
        };
        println!(
            "{:>8}  {family:<19}  {:>10.3}  {:>11.3}  {:>10.3}",
            i + 1,
            e.iter().cloned().fold(f64::INFINITY, f64::min),
            e.iter().sum::<f64>() / e.len() as f64,
            e.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
    }
    Ok(dir)
}

fn checkpoint_path(dir: &Path, mode: TrainMode) -> PathBuf {
    dir.join(format!("{mode}_checkpoint.json"))
}

fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    write_file(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        let err = |e: csv::Error| CliError::io(path, e);
        csv.write_record(["iter", "loss", "cost_mean"]).map_err(err)?;
        for r in trace {
            csv.write_record([r.iter.to_string(), r.loss.to_string(), r.cost_mean.to_string()])
                .map_err(err)?;
        }
        csv.flush().map_err(|e| CliError::io(path, e))
    })
}

/// Trains one forecaster on the first `samples` training rows and writes
/// `<mode>_checkpoint.json` and `<mode>_trace.csv`.
pub fn train_cmd(exp: &Experiment, o: &Overrides) -> Result<Checkpoint> {
    let seed = exp.seed(o);
    let mode = exp.mode(o);
    let pool = load_data(exp, seed, "train.csv")?;
    let samples = o.samples.or(exp.config.train.samples).unwrap_or(pool.len());
    if samples == 0 || samples > pool.len() {
        return Err(CliError::Validation(format!(
            "--samples {samples} is outside 1..={}",
            pool.len()
        )));
    }
    let cfg = exp.config.train_config(mode, seed);
    let outcome = train(&pool.head(samples), &exp.scenario, &cfg)?;
    if outcome.skipped > 0 {
        log::warn!("{} samples skipped during training", outcome.skipped);
    }

    let dir = exp.out_dir(o);
    create_dir(&dir)?;
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        mode,
        samples,
        seed,
        train_config: cfg,
        params: outcome.params,
    };
    write_json(&checkpoint_path(&dir, mode), &ckpt)?;
    write_trace(&dir.join(format!("{mode}_trace.csv")), &outcome.trace)?;
    let last = outcome.trace.last().expect("at least one iteration");
    println!(
        "{mode} on {samples} samples, seed {seed}: final loss {:.6}, batch cost {:.6}",
        last.loss, last.cost_mean
    );
    Ok(ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ckpt: Checkpoint = read_json(path)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(CliError::Validation(format!(
            "{}: checkpoint version {} is not supported",
            path.display(),
            ckpt.version
        )));
    }
    ckpt.params
        .validate()
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok(ckpt)
}

fn write_station_power(path: &Path, report: &EvalReport, horizon: usize) -> Result<()> {
    let n = report.per_sample.len().max(1) as f64;
    let mean = |f: fn(&optcharge_core::learner::SampleEval) -> &Vec<f64>, t: usize| {
        report.per_sample.iter().map(|s| f(s)[t]).sum::<f64>() / n
    };
    write_file(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        let err = |e: csv::Error| CliError::io(path, e);
        csv.write_record(["hour", "forecast_power", "ground_truth_power"]).map_err(err)?;
        for t in 0..horizon {
            csv.write_record([
                t.to_string(),
                format!("{:.9}", mean(|s| &s.station_power, t)),
                format!("{:.9}", mean(|s| &s.ground_truth_power, t)),
            ])
            .map_err(err)?;
        }
        csv.flush().map_err(|e| CliError::io(path, e))
    })
}

/// Scores a model on the test set and writes `eval_<label>.json` and
/// `station_power_<label>.csv` (mean hourly station power over the test set).
pub fn eval_cmd(exp: &Experiment, o: &Overrides, target: &EvalTarget) -> Result<EvalReport> {
    let seed = exp.seed(o);
    let dir = exp.out_dir(o);
    let test = load_data(exp, seed, "test.csv")?;
    let solver = exp.config.train.solver;
    let (label, report) = match target {
        EvalTarget::Oracle => {
            let path = exp.data_dir().join("population.json");
            let patterns: Vec<PbdrPattern> = read_json(&path)?;
            let model = OracleForecaster(&patterns);
            ("oracle".to_string(), evaluate(&model, &test, &exp.scenario, &solver)?)
        }
        EvalTarget::Checkpoint(path) => {
            let ckpt = load_checkpoint(path)?;
            (ckpt.mode.to_string(), evaluate(&ckpt.params, &test, &exp.scenario, &solver)?)
        }
        EvalTarget::Trained(mode) => {
            let ckpt = load_checkpoint(&checkpoint_path(&dir, *mode))?;
            (mode.to_string(), evaluate(&ckpt.params, &test, &exp.scenario, &solver)?)
        }
    };
    create_dir(&dir)?;
    write_json(&dir.join(format!("eval_{label}.json")), &report)?;
    write_station_power(
        &dir.join(format!("station_power_{label}.csv")),
        &report,
        exp.scenario.station.horizon,
    )?;
    println!(
        "{label}: cost {:.6} ± {:.6} (ground truth {:.6}), profit {:.6}, completion {:.6}, smooth {:.6}, rmse {:.6}, excluded {}",
        report.cost.mean,
        report.cost.std,
        report.ground_truth_cost.mean,
        report.profit.mean,
        report.completion.mean,
        report.smooth.mean,
        report.rmse,
        report.n_excluded
    );
    Ok(report)
}

/// Runs the training-size sweep and writes `table1.csv`, `table2.csv` and
/// `comparison.json`. If any cell fails, what finished is dumped to
/// `compare_partial.json` and the command fails.
pub fn compare_cmd(exp: &Experiment, o: &Overrides) -> Result<Comparison> {
    let seed = exp.seed(o);
    let pool = load_data(exp, seed, "train.csv")?;
    let test = load_data(exp, seed, "test.csv")?;
    let cfg = exp.config.compare_config(seed, o.jobs);
    let dir = exp.out_dir(o);
    create_dir(&dir)?;
    let cmp = compare_runs(&pool, &test, &exp.scenario, &cfg)?;
    if !cmp.failures.is_empty() {
        write_json(&dir.join("compare_partial.json"), &cmp)?;
        let first = &cmp.failures[0];
        return Err(CliError::Numerical(format!(
            "{} of {} runs failed (first: {} samples, {}, seed {}: {}); partial results in compare_partial.json",
            cmp.failures.len(),
            cmp.failures.len() + cmp.cells.len(),
            first.size,
            first.mode,
            first.seed,
            first.error
        )));
    }
    write_file(&dir.join("table1.csv"), |w| Ok(write_table1(&cmp.rows, w)?))?;
    write_file(&dir.join("table2.csv"), |w| Ok(write_table2(&cmp.rows, w)?))?;
    write_json(&dir.join("comparison.json"), &cmp)?;

    println!("ground truth cost {:.4}", cmp.ground_truth_cost);
    println!("samples  method    cost mean ± std        completion  improvement");
    for r in &cmp.rows {
        println!(
            "{:>7}  {:<8}  {:>9.4} ± {:<9.4}  {:>10.4}  {:>11.4}",
            r.size,
            r.mode.to_string(),
            r.cost.mean,
            r.cost.std,
            r.completion,
            r.improvement
        );
    }
    Ok(cmp)
}

/// Finite-difference audit of the implicit gradients. Writes `gradcheck.json` and
/// fails when fewer than 95% of instances pass.
pub fn gradcheck_cmd(exp: &Experiment, o: &Overrides) -> Result<GradcheckReport> {
    let cfg = exp.config.gradcheck_config(exp.seed(o));
    let report = run_gradcheck(&cfg)?;
    let dir = exp.out_dir(o);
    create_dir(&dir)?;
    write_json(&dir.join("gradcheck.json"), &report)?;
    let n = report.instances.len();
    println!(
        "dL/de_hat: {}/{n} within {:e} (worst {:.3e})",
        report.e_hat_passed, report.rel_tol, report.worst_e_hat_rel_err
    );
    println!(
        "dL/dtheta: {}/{n} within {:e} (worst {:.3e})",
        report.theta_passed, report.rel_tol, report.worst_theta_rel_err
    );
    println!("beta = 0: largest |dL/de_hat| {:e}", report.beta_zero_max_abs);
    if !report.passed(MIN_GRADCHECK_PASS_RATE) {
        return Err(CliError::Numerical(format!(
            "gradient check below the {:.0}% pass rate",
            100.0 * MIN_GRADCHECK_PASS_RATE
        )));
    }
    Ok(report)
}
