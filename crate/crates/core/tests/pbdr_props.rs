mod common;

use optcharge_core::model::Session;
use optcharge_core::pbdr::{
    generate_dataset, generate_population, piecewise_quadratic_demand, true_demands, utility_max_demand,
    Dataset, PbdrPattern, PiecewiseQuadraticPattern, PopulationConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sessions() -> Vec<Session> {
    vec![
        Session::new(0, 7, 12, 6.6, 0.4).unwrap(),
        Session::new(1, 9, 15, 6.6, 0.4).unwrap(),
        Session::new(2, 16, 21, 6.6, 0.4).unwrap(),
        Session::new(3, 8, 14, 3.6, 0.4).unwrap(),
        Session::new(4, 17, 23, 3.6, 0.4).unwrap(),
    ]
}

fn random_quadratic(rng: &mut ChaCha8Rng) -> PiecewiseQuadraticPattern {
    PiecewiseQuadraticPattern {
        e_base: rng.gen_range(0.0..25.0),
        mu: rng.gen_range(0.0..300.0),
        c_s: rng.gen_range(0.0..0.8),
    }
}

#[test]
fn utility_max_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let p = common::random_utility_pattern(&mut rng);
        for _ in 0..10 {
            let c = rng.gen_range(0.0..1.0);
            let closed = utility_max_demand(&p, c).unwrap();
            let grid = common::utility_grid_search(&p, c, 1e-4);
            assert!((closed - grid).abs() <= 2e-4, "{p:?} at c={c}: {closed} vs {grid}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn both_families_non_increasing_in_price(seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let u = common::random_utility_pattern(&mut rng);
        prop_assert!(utility_max_demand(&u, lo).unwrap() >= utility_max_demand(&u, hi).unwrap());
        let q = random_quadratic(&mut rng);
        prop_assert!(piecewise_quadratic_demand(&q, lo) >= piecewise_quadratic_demand(&q, hi));
    }

    #[test]
    fn both_families_continuous(seed in any::<u64>(), c in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = common::random_utility_pattern(&mut rng);
        let q = random_quadratic(&mut rng);
        let delta = 1e-9;
        prop_assert!((utility_max_demand(&u, c + delta).unwrap() - utility_max_demand(&u, c).unwrap()).abs() < 1e-6);
        prop_assert!((piecewise_quadratic_demand(&q, c + delta) - piecewise_quadratic_demand(&q, c)).abs() < 1e-6);
        // At the threshold itself.
        prop_assert!((piecewise_quadratic_demand(&q, q.c_s + delta) - q.e_base).abs() < 1e-6);
    }

    #[test]
    fn utility_max_piecewise_linear_in_price(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = common::random_utility_pattern(&mut rng);
        let grid: Vec<f64> = (0..=400).map(|k| k as f64 * 0.0025).collect();
        let d: Vec<f64> = grid.iter().map(|&c| utility_max_demand(&u, c).unwrap()).collect();
        let kinks = d.windows(3).filter(|w| (w[0] - 2.0 * w[1] + w[2]).abs() > 1e-9).count();
        // A breakpoint falling inside a grid cell bends two consecutive windows.
        prop_assert!(kinks <= 4, "{kinks} non-zero second differences");
    }
}

#[test]
fn piecewise_quadratic_worked_example() {
    let q = PiecewiseQuadraticPattern { e_base: 10.0, mu: 100.0, c_s: 0.3 };
    assert!((piecewise_quadratic_demand(&q, 0.5) - 6.0).abs() < 1e-12);
    assert_eq!(piecewise_quadratic_demand(&q, 0.1), 10.0);
    assert_eq!(piecewise_quadratic_demand(&q, 1e6), 0.0);
}

#[test]
fn populations_respect_range_and_sensitivity() {
    let cfg = PopulationConfig::default();
    for seed in 0..20 {
        let pats = generate_population(&cfg, &sessions(), seed).unwrap();
        assert_eq!(pats.len(), 5);
        for p in &pats {
            let hi = p.demand(0.2).unwrap();
            let lo = p.demand(0.6).unwrap();
            assert!(hi <= 20.0 && lo >= 5.0, "{p:?}");
            if let PbdrPattern::UtilityMax(_) = p {
                assert!(hi - lo > 0.1);
            }
        }
        assert_eq!(pats, generate_population(&cfg, &sessions(), seed).unwrap());
    }
}

#[test]
fn dataset_labels_regenerate_and_csv_is_byte_stable() {
    let cfg = PopulationConfig::default();
    let pats = generate_population(&cfg, &sessions(), 3).unwrap();
    let ds = generate_dataset(&pats, &cfg, 1000, 9, "pop-3").unwrap();
    assert_eq!(ds.len(), 1000);
    for s in &ds.samples {
        assert!(s.c.iter().all(|c| (0.2..=0.6).contains(c)));
        assert_eq!(s.e, true_demands(&pats, &s.c).unwrap());
        assert!(s.e.iter().all(|e| (0.0..=20.0).contains(e)));
    }

    let mut first = Vec::new();
    ds.write_csv(&mut first).unwrap();
    let back = Dataset::read_csv(first.as_slice(), "pop-3", 9).unwrap();
    let mut second = Vec::new();
    back.write_csv(&mut second).unwrap();
    assert_eq!(first, second);

    let mut regen = Vec::new();
    generate_dataset(&pats, &cfg, 1000, 9, "pop-3").unwrap().write_csv(&mut regen).unwrap();
    assert_eq!(first, regen);

    let header = String::from_utf8(first).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "c_1,c_2,c_3,c_4,c_5,e_1,e_2,e_3,e_4,e_5");
}
