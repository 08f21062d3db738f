mod common;

use nalgebra::DVector;
use optcharge_core::model::{build_matrices, build_qp, task_loss, with_prices, Session, StationConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn station_strategy() -> impl Strategy<Value = (StationConfig, Vec<Session>, Vec<f64>, Vec<f64>)> {
    (1usize..=4, 1usize..=8, any::<u64>()).prop_map(|(n, t, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let station = StationConfig {
            horizon: t,
            n_customers: n,
            purchase_price: (0..t).map(|_| rng.gen_range(0.0..0.6)).collect(),
            station_cap: rng.gen_range(1.0..20.0),
            beta: rng.gen_range(0.1..10.0),
            alpha: rng.gen_range(0.0..1.0),
        };
        let sessions: Vec<Session> = (0..n)
            .map(|i| {
                let ta = rng.gen_range(0..t);
                let td = rng.gen_range(ta + 1..=t);
                Session::new(i, ta, td, rng.gen_range(0.5..7.0), rng.gen_range(0.0..0.8)).unwrap()
            })
            .collect();
        let e_hat: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..25.0)).collect();
        let x: Vec<f64> = (0..n * t)
            .map(|k| {
                let s = &sessions[k / t];
                if s.is_active(k % t) {
                    rng.gen_range(0.0..s.max_power)
                } else {
                    0.0
                }
            })
            .collect();
        (station, sessions, e_hat, x)
    })
}

proptest! {
    #[test]
    fn quadratic_form_equals_sum_form((station, sessions, e_hat, x) in station_strategy()) {
        let qp = build_qp(&station, &sessions, &e_hat).unwrap();
        let quad = qp.objective(&DVector::from_vec(x.clone()));
        let sum = common::sum_objective(&station, &sessions, &x, &e_hat);
        prop_assert!((quad - sum).abs() <= 1e-10 * (1.0 + sum.abs()), "{quad} vs {sum}");
    }

    #[test]
    fn q_eigenvalues_bounded_below_by_two_alpha((station, sessions, e_hat, _x) in station_strategy()) {
        let qp = build_qp(&station, &sessions, &e_hat).unwrap();
        let min_eig = qp.q_mat.clone().symmetric_eigen().eigenvalues.min();
        prop_assert!(min_eig >= 2.0 * station.alpha - 1e-10, "{min_eig} < 2α = {}", 2.0 * station.alpha);
        prop_assert_eq!(qp.q_mat.transpose(), qp.q_mat.clone());
    }

    #[test]
    fn forced_zeros_cover_exactly_the_inactive_slots((station, sessions, _e, _x) in station_strategy()) {
        let (_, _, f) = build_matrices(&station, &sessions).unwrap();
        let t_len = station.horizon;
        let mut pinned: Vec<usize> = (0..f.nrows())
            .map(|r| {
                let nz: Vec<usize> = (0..f.ncols()).filter(|&k| f[(r, k)] != 0.0).collect();
                assert_eq!(nz.len(), 1);
                assert_eq!(f[(r, nz[0])], 1.0);
                nz[0]
            })
            .collect();
        pinned.sort();
        let before = pinned.len();
        pinned.dedup();
        prop_assert_eq!(before, pinned.len());
        let expected: Vec<usize> = (0..station.n_vars())
            .filter(|&k| !sessions[k / t_len].is_active(k % t_len))
            .collect();
        prop_assert_eq!(pinned, expected);
    }

    #[test]
    fn inequality_rhs_holds_caps((station, sessions, e_hat, _x) in station_strategy()) {
        let qp = build_qp(&station, &sessions, &e_hat).unwrap();
        let (t, nt) = (station.horizon, station.n_vars());
        prop_assert_eq!(qp.g_ineq.nrows(), 2 * t + 2 * nt);
        for r in 0..t {
            prop_assert_eq!(qp.h[r], 0.0);
            prop_assert_eq!(qp.h[t + r], station.station_cap);
        }
        for k in 0..nt {
            prop_assert_eq!(qp.h[2 * t + k], 0.0);
            prop_assert_eq!(qp.h[2 * t + nt + k], sessions[k / t].max_power);
        }
    }
}

#[test]
fn two_customer_forced_zero_example() {
    // EV0 active in hour 1 only, EV1 in hours 0 and 1, horizon 3.
    let station = StationConfig {
        horizon: 3,
        n_customers: 2,
        purchase_price: vec![0.1; 3],
        station_cap: 10.0,
        beta: 1.0,
        alpha: 0.1,
    };
    let sessions = vec![
        Session::new(0, 1, 2, 5.0, 0.3).unwrap(),
        Session::new(1, 0, 2, 5.0, 0.3).unwrap(),
    ];
    let (_, _, f) = build_matrices(&station, &sessions).unwrap();
    // Pinned: EV0 hours 0 and 2, EV1 hour 2.
    assert_eq!(f.nrows(), 3);

    // Brute-force scan: a unit move along coordinate k is allowed by F x = 0
    // exactly when k is free.
    let free: Vec<usize> = (0..6)
        .filter(|&k| {
            let mut x = DVector::zeros(6);
            x[k] = 1.0;
            (&f * x).iter().all(|v| *v == 0.0)
        })
        .collect();
    // Flat index i·T + t: EV0 keeps hour 1 (index 1), EV1 keeps hours 0 and 1 (3, 4).
    assert_eq!(free, vec![1, 3, 4]);
}

#[test]
fn task_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let (scenario, c, e) = common::random_small_problem(&mut rng);
        let sessions = with_prices(&scenario.sessions, &c).unwrap();
        let nt = scenario.station.n_vars();
        let x = DVector::from_fn(nt, |_, _| rng.gen_range(0.0..5.0));
        let tl = task_loss(&x, &e, &scenario.station, &sessions).unwrap();
        let h = 1e-5;
        for k in 0..nt {
            let mut up = x.clone();
            up[k] += h;
            let mut down = x.clone();
            down[k] -= h;
            let fd = (task_loss(&up, &e, &scenario.station, &sessions).unwrap().loss
                - task_loss(&down, &e, &scenario.station, &sessions).unwrap().loss)
                / (2.0 * h);
            let an = tl.grad_x[k];
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "coordinate {k}: {an} vs {fd}");
        }
        assert!((tl.loss - (-tl.profit + tl.completion + tl.smooth)).abs() < 1e-12);
    }
}
