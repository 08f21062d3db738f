//! Independent reference computations used as test oracles. Nothing here calls
//! the solver, the KKT machinery or the closed-form demand laws under test.

#![allow(dead_code)]

use optcharge_core::model::{Scenario, Session, StationConfig};
use optcharge_core::pbdr::UtilityMaxPattern;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Station objective in its original per-hour, per-customer sum form.
pub fn sum_objective(station: &StationConfig, sessions: &[Session], x: &[f64], e_hat: &[f64]) -> f64 {
    let t_len = station.horizon;
    let mut total = 0.0;
    for (i, s) in sessions.iter().enumerate() {
        let mut delivered = 0.0;
        for t in 0..t_len {
            let v = x[i * t_len + t];
            total += station.purchase_price[t] * v - s.selling_price * v + station.alpha * v * v;
            delivered += v;
        }
        total += station.beta * (delivered - e_hat[i]).powi(2);
    }
    total
}

fn sum_objective_grad(station: &StationConfig, sessions: &[Session], x: &[f64], e_hat: &[f64]) -> Vec<f64> {
    let t_len = station.horizon;
    let mut g = vec![0.0; x.len()];
    for (i, s) in sessions.iter().enumerate() {
        let delivered: f64 = x[i * t_len..(i + 1) * t_len].iter().sum();
        for t in 0..t_len {
            let k = i * t_len + t;
            g[k] = station.purchase_price[t] - s.selling_price
                + 2.0 * station.alpha * x[k]
                + 2.0 * station.beta * (delivered - e_hat[i]);
        }
    }
    g
}

/// Euclidean projection of `v` onto `{0 ≤ z ≤ ub, Σz ≤ cap}` by bisection on the
/// multiplier of the sum constraint.
pub fn project_box_halfspace(v: &[f64], ub: &[f64], cap: f64) -> Vec<f64> {
    let clip = |tau: f64| -> Vec<f64> {
        v.iter().zip(ub).map(|(x, u)| (x - tau).clamp(0.0, *u)).collect()
    };
    let z = clip(0.0);
    if z.iter().sum::<f64>() <= cap {
        return z;
    }
    let (mut lo, mut hi) = (0.0, v.iter().cloned().fold(0.0, f64::max));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if clip(mid).iter().sum::<f64>() > cap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    clip(hi)
}

fn project_schedule(station: &StationConfig, sessions: &[Session], x: &[f64]) -> Vec<f64> {
    let (t_len, n) = (station.horizon, station.n_customers);
    let mut out = vec![0.0; x.len()];
    for t in 0..t_len {
        let v: Vec<f64> = (0..n).map(|i| x[i * t_len + t]).collect();
        let ub: Vec<f64> = sessions
            .iter()
            .map(|s| if s.is_active(t) { s.max_power } else { 0.0 })
            .collect();
        for (i, z) in project_box_halfspace(&v, &ub, station.station_cap).into_iter().enumerate() {
            out[i * t_len + t] = z;
        }
    }
    out
}

/// Accelerated projected gradient with adaptive restart on the sum-form
/// objective. Stops once an iteration moves no coordinate by more than 1e-14 or
/// after `max_iter` iterations.
pub fn projected_gradient_oracle(
    station: &StationConfig,
    sessions: &[Session],
    e_hat: &[f64],
    max_iter: usize,
) -> Vec<f64> {
    let nt = station.n_vars();
    // Lipschitz bound of the gradient: ‖2βBᵀB + 2αI‖ ≤ 2βT + 2α.
    let step = 1.0 / (2.0 * station.beta * station.horizon as f64 + 2.0 * station.alpha);
    let mut x = vec![0.0; nt];
    let mut y = x.clone();
    let mut momentum = 1.0_f64;
    for _ in 0..max_iter {
        let g = sum_objective_grad(station, sessions, &y, e_hat);
        let trial: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        let next = project_schedule(station, sessions, &trial);
        let moved = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let restart = g.iter().zip(next.iter().zip(&x)).map(|(gi, (n, o))| gi * (n - o)).sum::<f64>() > 0.0;
        let m_next = if restart { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) };
        let beta = if restart { 0.0 } else { (momentum - 1.0) / m_next };
        y = next.iter().zip(&x).map(|(n, o)| n + beta * (n - o)).collect();
        x = next;
        momentum = m_next;
        if moved < 1e-14 {
            break;
        }
    }
    x
}

/// Utility-max demand by exhaustive search over a uniform grid of demands
/// satisfying the battery, non-negativity and average-power constraints.
pub fn utility_grid_search(p: &UtilityMaxPattern, c: f64, step: f64) -> f64 {
    let hours = (p.t_depart - p.t_arrival) as f64;
    let feasible = |e: f64| {
        let level = p.e_init + e * p.eta;
        e >= 0.0 && level >= p.soc_min && level <= p.soc_max && e <= p.p_max * hours
    };
    let objective = |e: f64| p.gamma1 * c * e + p.gamma2 * (p.e_init + e * p.eta - p.e_trip).powi(2);
    let top = p.p_max * hours;
    let n = (top / step).ceil() as usize;
    let mut best = (f64::INFINITY, f64::NAN);
    for k in 0..=n {
        let e = (k as f64 * step).min(top);
        if feasible(e) {
            let v = objective(e);
            if v < best.0 {
                best = (v, e);
            }
        }
    }
    best.1
}

/// A random utility-max customer with a nonempty feasible interval.
pub fn random_utility_pattern(rng: &mut ChaCha8Rng) -> UtilityMaxPattern {
    loop {
        let soc_max = rng.gen_range(30.0..90.0);
        let soc_min = soc_max * rng.gen_range(0.0..0.3);
        let t_arrival = rng.gen_range(0..20);
        let p = UtilityMaxPattern {
            gamma1: rng.gen_range(1.0..80.0),
            gamma2: rng.gen_range(0.2..2.0),
            eta: rng.gen_range(0.8..0.99),
            e_init: rng.gen_range(soc_min..soc_max),
            e_trip: rng.gen_range(soc_min..soc_max),
            soc_min,
            soc_max,
            p_max: rng.gen_range(1.0..8.0),
            t_arrival,
            t_depart: rng.gen_range(t_arrival + 1..=24),
        };
        let (lo, hi) = p.demand_bounds();
        if lo <= hi {
            return p;
        }
    }
}

/// A small random station (N ≤ 3, T ≤ 6) with random selling prices, and a demand
/// estimate.
pub fn random_small_problem(rng: &mut ChaCha8Rng) -> (Scenario, Vec<f64>, Vec<f64>) {
    let scenario = optcharge_core::gradcheck::random_station(rng).expect("valid random station");
    let c: Vec<f64> = (0..scenario.station.n_customers).map(|_| rng.gen_range(0.0..0.8)).collect();
    let e_hat: Vec<f64> = scenario
        .sessions
        .iter()
        .map(|s| rng.gen_range(0.0..s.max_power * s.n_active() as f64 * 1.3))
        .collect();
    (scenario, c, e_hat)
}

/// The five-customer, 24-hour station used by the experiments: three 6.6 kW and
/// two 3.6 kW ports under a peak-valley purchase price.
pub fn standard_scenario() -> Scenario {
    let price: Vec<f64> = (0..24)
        .map(|h| match h {
            0..=7 => 0.12,
            8..=11 => 0.18,
            12..=15 => 0.22,
            16..=20 => 0.38,
            _ => 0.18,
        })
        .collect();
    let station = StationConfig {
        horizon: 24,
        n_customers: 5,
        purchase_price: price,
        station_cap: 12.0,
        beta: 5.0,
        alpha: 0.001,
    };
    let windows = [(7, 12, 6.6), (9, 15, 6.6), (16, 21, 6.6), (8, 14, 3.6), (17, 23, 3.6)];
    let sessions = windows
        .iter()
        .enumerate()
        .map(|(i, &(a, d, p))| Session::new(i, a, d, p, 0.4).expect("valid session"))
        .collect();
    Scenario::new(station, sessions).expect("valid scenario")
}
