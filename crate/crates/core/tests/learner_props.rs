mod common;

use optcharge_core::learner::compare::{write_table1, write_table2};
use optcharge_core::learner::{
    compare_runs, evaluate, train, train_e2e, train_two_step, CompareConfig, DemandModel, ForecasterParams,
    OracleForecaster, OutputClamp, TraceRow, TrainConfig, TrainMode,
};
use optcharge_core::model::{Scenario, Session, StationConfig};
use optcharge_core::pbdr::{
    generate_dataset, generate_population, Dataset, PbdrPattern, PopulationConfig, Sample, UtilityMaxPattern,
};
use optcharge_core::qpsolver::SolverSettings;
use optcharge_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn standard_data(pool: usize, test: usize) -> (Scenario, Vec<PbdrPattern>, Dataset, Dataset) {
    let scenario = common::standard_scenario();
    let cfg = PopulationConfig::default();
    let patterns = generate_population(&cfg, &scenario.sessions, 7).unwrap();
    let train = generate_dataset(&patterns, &cfg, pool, 11, "pop-7").unwrap();
    let test = generate_dataset(&patterns, &cfg, test, 12, "pop-7").unwrap();
    (scenario, patterns, train, test)
}

fn config(mode: TrainMode, iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        ..TrainConfig::for_mode(mode)
    }
}

fn dataset_rmse(params: &ForecasterParams, ds: &Dataset) -> f64 {
    let mut sq = 0.0;
    let mut count = 0;
    for s in &ds.samples {
        for (p, t) in params.forecast(&s.c).iter().zip(&s.e) {
            sq += (p - t).powi(2);
            count += 1;
        }
    }
    (sq / count as f64).sqrt()
}

fn random_params(seed: u64) -> ForecasterParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ForecasterParams::init(3, 6, seed);
    for b in p.b1.iter_mut().chain(p.b2.iter_mut()).chain(p.b3.iter_mut()) {
        *b = rng.gen_range(-0.5..0.5);
    }
    p.residual_gain = rng.gen_range(-2.0..2.0);
    p.input_mean = vec![0.4; 3];
    p.input_std = vec![0.12; 3];
    p.output_mean = (0..3).map(|_| rng.gen_range(8.0..14.0)).collect();
    p.output_std = (0..3).map(|_| rng.gen_range(0.5..3.0)).collect();
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn network_gradient_matches_finite_differences(seed in any::<u64>()) {
        let p = random_params(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let c: Vec<f64> = (0..3).map(|_| rng.gen_range(0.2..0.6)).collect();
        let upstream: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cache = p.forward(&c, OutputClamp::Hard);
        prop_assume!(cache.kink_margin > 1e-3);
        prop_assume!(cache.output.iter().all(|v| *v > 1e-2));

        let analytic = p.backward(&cache, &upstream);
        let theta = p.flatten();
        let h = 1e-6;
        let value = |t: &[f64]| -> f64 {
            let mut q = p.clone();
            q.set_flat(t).unwrap();
            q.forecast(&c).iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let fd: Vec<f64> = (0..theta.len())
            .map(|k| {
                let mut up = theta.clone();
                up[k] += h;
                let mut down = theta.clone();
                down[k] -= h;
                (value(&up) - value(&down)) / (2.0 * h)
            })
            .collect();
        let diff: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(diff <= 1e-5 * scale, "relative error {}", diff / scale);
    }
}

#[test]
fn constant_demand_is_learned() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples = (0..300)
        .map(|_| Sample {
            c: (0..5).map(|_| rng.gen_range(0.2..0.6)).collect(),
            e: vec![12.0, 9.0, 15.0, 7.5, 11.0],
        })
        .collect();
    let ds = Dataset {
        samples,
        patterns_id: "flat".into(),
        seed: 1,
    };
    let out = train_two_step(&ds, &config(TrainMode::TwoStep, 250), None).unwrap();
    let rmse = dataset_rmse(&out.params, &ds);
    assert!(rmse <= 0.1, "{rmse}");
}

#[test]
fn two_step_training_reduces_rmse() {
    let (_, _, train, _) = standard_data(400, 10);
    let out = train_two_step(&train, &config(TrainMode::TwoStep, 250), None).unwrap();
    assert_eq!(out.trace.len(), 250);
    let (first, last) = (out.trace[0].loss, out.trace[249].loss);
    assert!(last < first, "{last} vs {first}");
}

#[test]
fn more_samples_lower_test_rmse() {
    let (_, _, pool, test) = standard_data(800, 100);
    let cfg = config(TrainMode::TwoStep, 250);
    let small = train_two_step(&pool.head(200), &cfg, None).unwrap();
    let large = train_two_step(&pool, &cfg, None).unwrap();
    let (a, b) = (dataset_rmse(&small.params, &test), dataset_rmse(&large.params, &test));
    assert!(b < a, "800 samples {b} vs 200 samples {a}");
}

#[test]
fn single_customer_toy_reaches_ground_truth() {
    let station = StationConfig {
        horizon: 4,
        n_customers: 1,
        purchase_price: vec![0.10, 0.15, 0.20, 0.12],
        station_cap: 10.0,
        beta: 5.0,
        alpha: 0.001,
    };
    let session = Session::new(0, 0, 4, 7.0, 0.4).unwrap();
    let scenario = Scenario::new(station, vec![session]).unwrap();
    // Unclipped over the whole price range, so demand is linear in price.
    let pattern = PbdrPattern::UtilityMax(UtilityMaxPattern {
        gamma1: 20.0,
        gamma2: 1.0,
        eta: 0.9,
        e_init: 20.0,
        e_trip: 33.5,
        soc_min: 5.0,
        soc_max: 60.0,
        p_max: 7.0,
        t_arrival: 0,
        t_depart: 4,
    });
    let cfg = PopulationConfig {
        n_utility: 1,
        n_quadratic: 0,
        ..PopulationConfig::default()
    };
    let patterns = vec![pattern];
    let train = generate_dataset(&patterns, &cfg, 200, 3, "toy").unwrap();
    let test = generate_dataset(&patterns, &cfg, 50, 4, "toy").unwrap();

    let out = train_e2e(&train, &scenario, &config(TrainMode::E2e, 250)).unwrap();
    let report = evaluate(&out.params, &test, &scenario, &SolverSettings::default()).unwrap();
    let (cost, gt) = (report.cost.mean, report.ground_truth_cost.mean);
    assert!((cost - gt).abs() <= 0.01 * gt.abs(), "cost {cost} vs ground truth {gt}");
}

#[test]
fn oracle_forecaster_attains_ground_truth() {
    let (scenario, patterns, _, test) = standard_data(10, 100);
    let report = evaluate(&OracleForecaster(&patterns), &test, &scenario, &SolverSettings::default()).unwrap();
    assert_eq!(report.n_evaluated, 100);
    for s in &report.per_sample {
        assert!((s.cost - s.ground_truth_cost).abs() <= 1e-8, "{} vs {}", s.cost, s.ground_truth_cost);
    }
    assert!(report.rmse == 0.0);
}

#[test]
fn trained_costs_bounded_by_ground_truth_and_decompose() {
    let (scenario, _, train_set, test) = standard_data(200, 100);
    let solver = SolverSettings::default();
    for mode in [TrainMode::TwoStep, TrainMode::E2e] {
        let out = train(&train_set, &scenario, &config(mode, 40)).unwrap().params;
        let report = evaluate(&out, &test, &scenario, &solver).unwrap();
        assert_eq!(report.n_evaluated, 100);
        for s in &report.per_sample {
            assert!(s.cost >= s.ground_truth_cost - 1e-6, "{mode}: {} < {}", s.cost, s.ground_truth_cost);
            let parts = -s.profit + s.completion + s.smooth;
            assert!((s.cost - parts).abs() <= 1e-8, "{mode}: {} vs {parts}", s.cost);
        }
        let means = -report.profit.mean + report.completion.mean + report.smooth.mean;
        assert!((report.cost.mean - means).abs() <= 1e-8);
    }
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let (scenario, _, train_set, _) = standard_data(100, 10);
    for mode in [TrainMode::TwoStep, TrainMode::E2e] {
        let cfg = config(mode, 15);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| train(&train_set, &scenario, &cfg).unwrap())
        };
        let (a, b) = (run(1), run(4));
        let bits = |t: &[TraceRow]| -> Vec<(u64, u64)> {
            t.iter().map(|r| (r.loss.to_bits(), r.cost_mean.to_bits())).collect()
        };
        assert_eq!(bits(&a.trace), bits(&b.trace), "{mode}");
        assert_eq!(a.params, b.params, "{mode}");
    }
}

#[test]
fn unsolvable_samples_abort_training() {
    let (scenario, _, train, _) = standard_data(64, 10);
    let mut cfg = config(TrainMode::E2e, 5);
    cfg.solver.max_iter = 1;
    match train_e2e(&train, &scenario, &cfg) {
        Err(Error::Numerical(msg)) => assert!(msg.contains("skipped"), "{msg}"),
        other => panic!("expected a skip-limit failure, got {:?}", other.map(|o| o.trace.len())),
    }
}

#[test]
fn huge_learning_rate_diverges() {
    let (_, _, train, _) = standard_data(64, 10);
    let mut cfg = config(TrainMode::TwoStep, 250);
    cfg.learning_rate = 1e9;
    assert!(matches!(train_two_step(&train, &cfg, None), Err(Error::Diverged { .. })));
}

#[test]
fn oracle_model_reports_dimension_errors() {
    let (_, patterns, _, _) = standard_data(1, 1);
    assert!(OracleForecaster(&patterns).predict(&[0.3; 4]).is_err());
}

#[test]
fn small_comparison_produces_both_tables() {
    let (scenario, _, pool, test) = standard_data(60, 20);
    let cfg = CompareConfig {
        sizes: vec![30, 60],
        n_seeds: 2,
        base_seed: 0,
        two_step: config(TrainMode::TwoStep, 5),
        e2e: config(TrainMode::E2e, 5),
        jobs: 2,
    };
    let cmp = compare_runs(&pool, &test, &scenario, &cfg).unwrap();
    assert!(cmp.failures.is_empty());
    assert_eq!(cmp.cells.len(), 8);
    assert_eq!(cmp.rows.len(), 4);
    for size in [30, 60] {
        let two = cmp.row(size, TrainMode::TwoStep).unwrap();
        let e2e = cmp.row(size, TrainMode::E2e).unwrap();
        assert_eq!(two.improvement, two.cost.mean - e2e.cost.mean);
        assert_eq!(two.improvement, e2e.improvement);
    }

    let mut t1 = Vec::new();
    write_table1(&cmp.rows, &mut t1).unwrap();
    let t1 = String::from_utf8(t1).unwrap();
    let lines: Vec<&str> = t1.lines().collect();
    assert_eq!(lines[0], "samples,method,cost_mean,cost_std,improvement");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("30,two-step,"));
    assert!(lines[2].starts_with("30,e2e,"));

    let mut t2 = Vec::new();
    write_table2(&cmp.rows, &mut t2).unwrap();
    let t2 = String::from_utf8(t2).unwrap();
    assert_eq!(
        t2.lines().next().unwrap(),
        "samples,method,profit_mean,completion_mean,smooth_mean,rmse_mean"
    );
    assert_eq!(t2.lines().count(), 5);

    let again = compare_runs(&pool, &test, &scenario, &CompareConfig { jobs: 1, ..cfg }).unwrap();
    assert_eq!(again, cmp);
}

#[test]
fn sweep_rejects_oversized_requests() {
    let (scenario, _, pool, test) = standard_data(20, 5);
    let cfg = CompareConfig {
        sizes: vec![10, 40],
        n_seeds: 1,
        base_seed: 0,
        two_step: config(TrainMode::TwoStep, 1),
        e2e: config(TrainMode::E2e, 1),
        jobs: 1,
    };
    assert!(matches!(compare_runs(&pool, &test, &scenario, &cfg), Err(Error::Config(_))));
}
