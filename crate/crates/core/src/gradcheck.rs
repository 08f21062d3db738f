//! Finite-difference audit of the decision-focused gradients on random small
//! stations.
//!
//! Each instance draws a station (N ≤ 3, T ≤ 6), a sample and a small forecaster,
//! then compares
//! - `dL/dê` from the full adjoint KKT solve against central differences that
//!   re-solve the QP, and
//! - `dL/dθ` from the training path against central differences through
//!   forecast, solve and score.
//!
//! Instances are redrawn when some inequality has both its multiplier and its
//! slack below `min_margin` (the optimum is not differentiable there and finite
//! differences straddle an active-set change), when a hidden unit sits within
//! `min_margin` of its rectifier kink, when a forecast lies within a few
//! steps of zero, or when `‖dL/dê‖ < min_grad_norm` (every customer pinned at a
//! bound, so the comparison is pure solver noise).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffopt::{assemble_kkt_system, grad_wrt_e_hat};
use crate::error::{Error, Result};
use crate::learner::forecaster::{ForecasterParams, OutputClamp};
use crate::learner::train::e2e_sample_grad;
use crate::model::{QPProblem, Scenario, Session, StationConfig};
use crate::pbdr::Sample;
use crate::qpsolver::{solve_qp, QPSolution, SolverSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub n_instances: usize,
    pub seed: u64,
    pub fd_step: f64,
    pub rel_tol: f64,
    /// Smallest allowed `max(λᵢ, sᵢ)` over inequality rows.
    pub min_margin: f64,
    pub min_grad_norm: f64,
    pub max_draws: usize,
    pub hidden_width: usize,
    /// Instances with `β = 0` whose gradient must vanish exactly.
    pub n_beta_zero: usize,
    pub solver: SolverSettings,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            n_instances: 100,
            seed: 0,
            fd_step: 1e-4,
            rel_tol: 1e-3,
            min_margin: 1e-3,
            min_grad_norm: 1e-2,
            max_draws: 1000,
            hidden_width: 8,
            n_beta_zero: 10,
            solver: SolverSettings::default(),
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_instances == 0 {
            return Err(Error::Config("n_instances must be at least 1".into()));
        }
        if !(self.fd_step > 0.0 && self.rel_tol > 0.0 && self.min_margin >= 0.0) {
            return Err(Error::Config(
                "fd_step and rel_tol must be positive, min_margin nonnegative".into(),
            ));
        }
        if self.max_draws == 0 || self.hidden_width == 0 {
            return Err(Error::Config("max_draws and hidden_width must be at least 1".into()));
        }
        self.solver.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceCheck {
    pub index: usize,
    pub n_customers: usize,
    pub horizon: usize,
    /// Draws rejected by the degeneracy screen before this instance.
    pub redraws: usize,
    pub e_hat_rel_err: f64,
    pub theta_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub rel_tol: f64,
    pub e_hat_passed: usize,
    pub theta_passed: usize,
    pub worst_e_hat_rel_err: f64,
    pub worst_theta_rel_err: f64,
    /// Largest `|dL/dê|` entry over the `β = 0` instances.
    pub beta_zero_max_abs: f64,
    pub instances: Vec<InstanceCheck>,
}

impl GradcheckReport {
    pub fn e_hat_pass_rate(&self) -> f64 {
        self.e_hat_passed as f64 / self.instances.len().max(1) as f64
    }

    pub fn theta_pass_rate(&self) -> f64 {
        self.theta_passed as f64 / self.instances.len().max(1) as f64
    }

    pub fn passed(&self, min_rate: f64) -> bool {
        self.e_hat_pass_rate() >= min_rate
            && self.theta_pass_rate() >= min_rate
            && self.beta_zero_max_abs == 0.0
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// A random station, sample and forecaster.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub scenario: Scenario,
    pub sample: Sample,
    pub params: ForecasterParams,
}

pub fn random_station(rng: &mut ChaCha8Rng) -> Result<Scenario> {
    let n = rng.gen_range(1..=3);
    let t = rng.gen_range(2..=6);
    let station = StationConfig {
        horizon: t,
        n_customers: n,
        purchase_price: (0..t).map(|_| rng.gen_range(0.05..0.5)).collect(),
        station_cap: rng.gen_range(2.0..10.0),
        beta: rng.gen_range(0.5..5.0),
        alpha: rng.gen_range(0.01..0.5),
    };
    let sessions = (0..n)
        .map(|i| {
            let ta = rng.gen_range(0..t);
            let td = rng.gen_range(ta + 1..=t);
            Session::new(i, ta, td, rng.gen_range(1.0..7.0), 0.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Scenario::new(station, sessions)
}

pub fn random_instance(rng: &mut ChaCha8Rng, hidden_width: usize) -> Result<RandomInstance> {
    let scenario = random_station(rng)?;
    let n = scenario.station.n_customers;
    let c: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..0.6)).collect();
    let e: Vec<f64> = scenario
        .sessions
        .iter()
        .map(|s| rng.gen_range(0.0..s.max_power * s.n_active() as f64 * 1.2))
        .collect();
    let mut params = ForecasterParams::init(n, hidden_width, rng.gen());
    for (o, ei) in e.iter().enumerate() {
        params.output_mean[o] = ei + rng.gen_range(-2.0..2.0);
        params.input_mean[o] = 0.4;
        params.input_std[o] = 0.1;
    }
    for b in params.b1.iter_mut().chain(params.b2.iter_mut()) {
        *b = rng.gen_range(-0.5..0.5);
    }
    params.residual_gain = rng.gen_range(-1.0..1.0);
    Ok(RandomInstance {
        scenario,
        sample: Sample { c, e },
        params,
    })
}

/// Smallest `max(λᵢ, sᵢ)` over inequality rows that touch a free coordinate.
pub fn complementarity_margin(problem: &QPProblem, sol: &QPSolution) -> f64 {
    let pinned = problem.pinned_coordinates();
    let slack = sol.slack(problem);
    (0..problem.n_ineq())
        .filter(|&r| {
            problem
                .g_ineq
                .row(r)
                .iter()
                .enumerate()
                .any(|(k, v)| *v != 0.0 && !pinned.contains(&k))
        })
        .map(|r| sol.lambda_star[r].max(slack[r]))
        .fold(f64::INFINITY, f64::min)
}

fn solve_converged(problem: &QPProblem, solver: &SolverSettings) -> Result<QPSolution> {
    let sol = solve_qp(problem, solver)?;
    if !sol.is_converged() {
        return Err(Error::Numerical(format!("QP solve ended with {:?}", sol.status)));
    }
    Ok(sol)
}

fn loss_at(inst: &RandomInstance, e_hat: &[f64], solver: &SolverSettings) -> Result<f64> {
    let qp = inst.scenario.qp(&inst.sample.c, e_hat)?;
    let sol = solve_converged(&qp, solver)?;
    Ok(inst.scenario.task_loss(&inst.sample.c, &sol.x_star, &inst.sample.e)?.loss)
}

const TRAIN_CLAMP: OutputClamp = OutputClamp::Soft { sharpness: 100.0 };

/// Relative errors of the analytic `dL/dê` and `dL/dθ` on one instance.
pub fn check_instance(inst: &RandomInstance, cfg: &GradcheckConfig) -> Result<(f64, f64)> {
    let h = cfg.fd_step;
    let c = &inst.sample.c;
    let e_hat = inst.params.forward(c, TRAIN_CLAMP).output;

    let qp = inst.scenario.qp(c, &e_hat)?;
    let sol = solve_converged(&qp, &cfg.solver)?;
    let tl = inst.scenario.task_loss(c, &sol.x_star, &inst.sample.e)?;
    let sys = assemble_kkt_system(&qp, &sol)?;
    let analytic = grad_wrt_e_hat(&sys, &tl.grad_x)?.grad;
    let mut fd = vec![0.0; e_hat.len()];
    for (i, g) in fd.iter_mut().enumerate() {
        let mut up = e_hat.clone();
        up[i] += h;
        let mut down = e_hat.clone();
        down[i] -= h;
        *g = (loss_at(inst, &up, &cfg.solver)? - loss_at(inst, &down, &cfg.solver)?) / (2.0 * h);
    }
    let e_err = relative_error(analytic.as_slice(), &fd);

    let analytic = e2e_sample_grad(&inst.params, &inst.sample, &inst.scenario, &cfg.solver, TRAIN_CLAMP)?.grad_theta;
    let theta = inst.params.flatten();
    let mut probe = inst.params.clone();
    let mut fd = vec![0.0; theta.len()];
    for (k, g) in fd.iter_mut().enumerate() {
        let mut shifted = theta.clone();
        shifted[k] = theta[k] + h;
        probe.set_flat(&shifted)?;
        let up = loss_at(inst, &probe.forward(c, TRAIN_CLAMP).output, &cfg.solver)?;
        shifted[k] = theta[k] - h;
        probe.set_flat(&shifted)?;
        let down = loss_at(inst, &probe.forward(c, TRAIN_CLAMP).output, &cfg.solver)?;
        *g = (up - down) / (2.0 * h);
    }
    Ok((e_err, relative_error(&analytic, &fd)))
}

/// Draws instances from `rng` until one passes the degeneracy screen.
pub fn screened_instance(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Result<(RandomInstance, usize)> {
    for redraws in 0..cfg.max_draws {
        let inst = random_instance(rng, cfg.hidden_width)?;
        let cache = inst.params.forward(&inst.sample.c, TRAIN_CLAMP);
        if cache.kink_margin <= cfg.min_margin {
            continue;
        }
        let e_hat = cache.output;
        // Finite differences step ê by ±h; keep them inside the nonnegative orthant.
        if e_hat.iter().any(|v| *v < 10.0 * cfg.fd_step) {
            continue;
        }
        let qp = inst.scenario.qp(&inst.sample.c, &e_hat)?;
        let Ok(sol) = solve_converged(&qp, &cfg.solver) else {
            continue;
        };
        if complementarity_margin(&qp, &sol) <= cfg.min_margin {
            continue;
        }
        let tl = inst.scenario.task_loss(&inst.sample.c, &sol.x_star, &inst.sample.e)?;
        let g = grad_wrt_e_hat(&assemble_kkt_system(&qp, &sol)?, &tl.grad_x)?;
        if g.grad.norm() >= cfg.min_grad_norm {
            return Ok((inst, redraws));
        }
    }
    Err(Error::Numerical(format!(
        "no non-degenerate instance in {} draws",
        cfg.max_draws
    )))
}

/// The QP of `scenario` with the completion penalty switched off: `β = 0`.
pub fn without_completion_penalty(scenario: &Scenario, c: &[f64], e_hat: &[f64]) -> Result<QPProblem> {
    let mut qp = scenario.qp(c, e_hat)?;
    let n = qp.n_vars();
    let e = DVector::from_column_slice(e_hat);
    qp.q += &qp.rhs_scale * &e;
    qp.q_mat = DMatrix::identity(n, n) * (2.0 * scenario.station.alpha);
    qp.rhs_scale.fill(0.0);
    qp.constant = 0.0;
    Ok(qp)
}

fn beta_zero_max_abs(cfg: &GradcheckConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let mut worst = 0.0_f64;
    for _ in 0..cfg.n_beta_zero {
        let inst = random_instance(&mut rng, cfg.hidden_width)?;
        let e_hat = inst.params.forecast(&inst.sample.c);
        let qp = without_completion_penalty(&inst.scenario, &inst.sample.c, &e_hat)?;
        let sol = solve_converged(&qp, &cfg.solver)?;
        let tl = inst.scenario.task_loss(&inst.sample.c, &sol.x_star, &inst.sample.e)?;
        let g = grad_wrt_e_hat(&assemble_kkt_system(&qp, &sol)?, &tl.grad_x)?;
        worst = g.grad.iter().fold(worst, |m, v| m.max(v.abs()));
    }
    Ok(worst)
}

/// Runs the audit. Instance `k` is drawn from ChaCha stream `k` of `seed`.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    cfg.validate()?;
    let instances = (0..cfg.n_instances)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(k as u64);
            let (inst, redraws) = screened_instance(&mut rng, cfg)?;
            let (e_err, theta_err) = check_instance(&inst, cfg)?;
            Ok(InstanceCheck {
                index: k,
                n_customers: inst.scenario.station.n_customers,
                horizon: inst.scenario.station.horizon,
                redraws,
                e_hat_rel_err: e_err,
                theta_rel_err: theta_err,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let passed = |f: fn(&InstanceCheck) -> f64| instances.iter().filter(|i| f(i) <= cfg.rel_tol).count();
    let worst = |f: fn(&InstanceCheck) -> f64| instances.iter().map(f).fold(0.0, f64::max);
    Ok(GradcheckReport {
        rel_tol: cfg.rel_tol,
        e_hat_passed: passed(|i| i.e_hat_rel_err),
        theta_passed: passed(|i| i.theta_rel_err),
        worst_e_hat_rel_err: worst(|i| i.e_hat_rel_err),
        worst_theta_rel_err: worst(|i| i.theta_rel_err),
        beta_zero_max_abs: beta_zero_max_abs(cfg)?,
        instances,
    })
}
