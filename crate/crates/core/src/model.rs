//! Charging-station domain types and assembly of the station scheduling QP.
//!
//! The schedule is a flat vector `x` of length `N·T` where `x[i·T + t]` is the
//! average power (kW) delivered to customer `i` during hour `t`. With unit-hour
//! slots the same number is the energy in kWh delivered in that slot.
//!
//! The scheduling problem is
//!
//! ```text
//! min  β‖Bx − ê‖² + (p − Bᵀc)ᵀx + α‖x‖²
//! s.t. [−A; A; −I; I] x ≤ [0; r; 0; y]
//!      F x = 0
//! ```
//!
//! where `A` sums power per hour, `B` sums energy per customer and `F` pins the
//! slots outside each customer's session to zero.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

/// Station-side constants shared by every scheduling instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationConfig {
    /// Horizon length in hourly slots.
    pub horizon: usize,
    /// Number of EV customers.
    pub n_customers: usize,
    /// Purchase price from the grid per hour, $/kWh.
    pub purchase_price: Vec<f64>,
    /// Maximum total station power per hour, kW.
    pub station_cap: f64,
    /// Demand-completion penalty coefficient.
    pub beta: f64,
    /// Smoothness penalty coefficient.
    pub alpha: f64,
}

impl StationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.n_customers == 0 {
            return Err(Error::Config("n_customers must be at least 1".into()));
        }
        ensure_len("purchase_price", self.horizon, self.purchase_price.len())?;
        if self.purchase_price.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config(
                "purchase prices must be finite and nonnegative".into(),
            ));
        }
        if !(self.station_cap > 0.0 && self.station_cap.is_finite()) {
            return Err(Error::Config("station_cap must be positive".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be nonnegative".into()));
        }
        Ok(())
    }

    /// Number of schedule variables, `N·T`.
    pub fn n_vars(&self) -> usize {
        self.horizon * self.n_customers
    }
}

/// One customer's presence at the station: active on hours `t_arrival..t_depart`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Session {
    pub ev_index: usize,
    pub t_arrival: usize,
    pub t_depart: usize,
    /// Per-EV power cap, kW.
    pub max_power: f64,
    /// Selling price offered to this customer, $/kWh.
    pub selling_price: f64,
}

impl Session {
    pub fn new(
        ev_index: usize,
        t_arrival: usize,
        t_depart: usize,
        max_power: f64,
        selling_price: f64,
    ) -> Result<Self> {
        let s = Session {
            ev_index,
            t_arrival,
            t_depart,
            max_power,
            selling_price,
        };
        s.validate(usize::MAX)?;
        Ok(s)
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.t_arrival >= self.t_depart {
            return Err(Error::Config(format!(
                "session {} has no active slots (arrival {} >= departure {})",
                self.ev_index, self.t_arrival, self.t_depart
            )));
        }
        if self.t_depart > horizon {
            return Err(Error::Config(format!(
                "session {} departs at {} beyond horizon {}",
                self.ev_index, self.t_depart, horizon
            )));
        }
        if !(self.max_power > 0.0 && self.max_power.is_finite()) {
            return Err(Error::Config(format!(
                "session {} max_power must be positive",
                self.ev_index
            )));
        }
        if !(self.selling_price >= 0.0 && self.selling_price.is_finite()) {
            return Err(Error::Config(format!(
                "session {} selling_price must be nonnegative",
                self.ev_index
            )));
        }
        Ok(())
    }

    pub fn is_active(&self, t: usize) -> bool {
        t >= self.t_arrival && t < self.t_depart
    }

    pub fn n_active(&self) -> usize {
        self.t_depart - self.t_arrival
    }
}

/// Replaces each session's selling price with the matching entry of `prices`.
pub fn with_prices(sessions: &[Session], prices: &[f64]) -> Result<Vec<Session>> {
    ensure_len("selling prices", sessions.len(), prices.len())?;
    Ok(sessions
        .iter()
        .zip(prices)
        .map(|(s, &c)| Session {
            selling_price: c,
            ..s.clone()
        })
        .collect())
}

/// A fixed experiment setup: the station and its customers' sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub station: StationConfig,
    pub sessions: Vec<Session>,
}

impl Scenario {
    pub fn new(station: StationConfig, sessions: Vec<Session>) -> Result<Self> {
        let sc = Scenario { station, sessions };
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<()> {
        self.station.validate()?;
        validate_sessions(&self.station, &self.sessions)
    }

    /// Builds the QP for one sample with selling prices `c` and demand estimate `e_hat`.
    pub fn qp(&self, c: &[f64], e_hat: &[f64]) -> Result<QPProblem> {
        let priced = with_prices(&self.sessions, c)?;
        build_qp(&self.station, &priced, e_hat)
    }

    pub fn task_loss(&self, c: &[f64], x_star: &DVector<f64>, e_true: &[f64]) -> Result<TaskLoss> {
        let priced = with_prices(&self.sessions, c)?;
        task_loss(x_star, e_true, &self.station, &priced)
    }
}

fn validate_sessions(config: &StationConfig, sessions: &[Session]) -> Result<()> {
    ensure_len("sessions", config.n_customers, sessions.len())?;
    for (i, s) in sessions.iter().enumerate() {
        if s.ev_index != i {
            return Err(Error::Config(format!(
                "session at position {i} has ev_index {}",
                s.ev_index
            )));
        }
        s.validate(config.horizon)?;
    }
    Ok(())
}

/// Standard-form QP: minimize `½xᵀQx + qᵀx + constant` subject to
/// `G x ≤ h` and `F x = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QPProblem {
    pub q_mat: DMatrix<f64>,
    pub q: DVector<f64>,
    pub g_ineq: DMatrix<f64>,
    pub h: DVector<f64>,
    pub f_eq: DMatrix<f64>,
    pub constant: f64,
    /// Sensitivity of the linear term to the demand estimate: `q = q₀ − rhs_scale·ê`.
    /// For station problems this is `2βBᵀ`.
    pub rhs_scale: DMatrix<f64>,
}

impl QPProblem {
    pub fn n_vars(&self) -> usize {
        self.q.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.h.len()
    }

    pub fn n_eq(&self) -> usize {
        self.f_eq.nrows()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q_mat * x)) + self.q.dot(x) + self.constant
    }

    /// Checks dimensional consistency and that each equality row pins exactly one
    /// coordinate.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_vars();
        ensure_len("Q rows", n, self.q_mat.nrows())?;
        ensure_len("Q cols", n, self.q_mat.ncols())?;
        ensure_len("G cols", n, self.g_ineq.ncols())?;
        ensure_len("G rows", self.h.len(), self.g_ineq.nrows())?;
        ensure_len("F cols", n, self.f_eq.ncols())?;
        ensure_len("rhs_scale rows", n, self.rhs_scale.nrows())?;
        for r in 0..self.f_eq.nrows() {
            let nnz = self.f_eq.row(r).iter().filter(|v| **v != 0.0).count();
            if nnz != 1 {
                return Err(Error::Problem(format!(
                    "equality row {r} has {nnz} nonzeros; only single-coordinate pins are supported"
                )));
            }
        }
        Ok(())
    }

    /// Coordinate pinned by each equality row.
    pub fn pinned_coordinates(&self) -> Vec<usize> {
        (0..self.f_eq.nrows())
            .filter_map(|r| self.f_eq.row(r).iter().position(|v| *v != 0.0))
            .collect()
    }
}

/// Hour-summing matrix `A` (T×NT), customer-summing matrix `B` (N×NT) and the
/// zero-pin matrix `F` (H×NT).
pub fn build_matrices(
    config: &StationConfig,
    sessions: &[Session],
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    config.validate()?;
    validate_sessions(config, sessions)?;
    let (t_len, n) = (config.horizon, config.n_customers);
    let nt = n * t_len;

    let mut a = DMatrix::zeros(t_len, nt);
    let mut b = DMatrix::zeros(n, nt);
    for i in 0..n {
        for t in 0..t_len {
            a[(t, i * t_len + t)] = 1.0;
            b[(i, i * t_len + t)] = 1.0;
        }
    }

    let pinned: Vec<usize> = sessions
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            (0..t_len)
                .filter(move |&t| !s.is_active(t))
                .map(move |t| i * t_len + t)
        })
        .collect();
    let mut f = DMatrix::zeros(pinned.len(), nt);
    for (row, &col) in pinned.iter().enumerate() {
        f[(row, col)] = 1.0;
    }
    Ok((a, b, f))
}

/// Assembles the station QP for demand estimate `e_hat`. Selling prices come from
/// the sessions.
pub fn build_qp(config: &StationConfig, sessions: &[Session], e_hat: &[f64]) -> Result<QPProblem> {
    let (a, b, f) = build_matrices(config, sessions)?;
    ensure_len("e_hat", config.n_customers, e_hat.len())?;
    if e_hat.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(Error::Problem(
            "demand estimates must be finite and nonnegative".into(),
        ));
    }
    let (t_len, n) = (config.horizon, config.n_customers);
    let nt = n * t_len;
    let (beta, alpha) = (config.beta, config.alpha);

    let btb = b.transpose() * &b;
    let q_mat = btb * (2.0 * beta) + DMatrix::identity(nt, nt) * (2.0 * alpha);

    let e_hat = DVector::from_column_slice(e_hat);
    let rhs_scale = b.transpose() * (2.0 * beta);
    let q = linear_cost(config, sessions) - &rhs_scale * &e_hat;
    let constant = beta * e_hat.dot(&e_hat);

    let mut g_ineq = DMatrix::zeros(2 * t_len + 2 * nt, nt);
    g_ineq.view_mut((0, 0), (t_len, nt)).copy_from(&(-&a));
    g_ineq.view_mut((t_len, 0), (t_len, nt)).copy_from(&a);
    g_ineq
        .view_mut((2 * t_len, 0), (nt, nt))
        .copy_from(&(-DMatrix::<f64>::identity(nt, nt)));
    g_ineq
        .view_mut((2 * t_len + nt, 0), (nt, nt))
        .fill_with_identity();

    let mut h = DVector::zeros(2 * t_len + 2 * nt);
    for t in 0..t_len {
        h[t_len + t] = config.station_cap;
    }
    for (i, s) in sessions.iter().enumerate() {
        for t in 0..t_len {
            h[2 * t_len + nt + i * t_len + t] = s.max_power;
        }
    }

    Ok(QPProblem {
        q_mat,
        q,
        g_ineq,
        h,
        f_eq: f,
        constant,
        rhs_scale,
    })
}

/// `p − Bᵀc`: the per-slot purchase price minus the owning customer's selling price.
fn linear_cost(config: &StationConfig, sessions: &[Session]) -> DVector<f64> {
    let t_len = config.horizon;
    DVector::from_fn(config.n_vars(), |k, _| {
        config.purchase_price[k % t_len] - sessions[k / t_len].selling_price
    })
}

/// Actual operation cost of a schedule against true demands, with its gradient
/// and its three components.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLoss {
    pub loss: f64,
    pub grad_x: DVector<f64>,
    /// `(cᵀB − pᵀ)x`; enters the loss with a negative sign.
    pub profit: f64,
    /// `β‖Bx − e‖²`.
    pub completion: f64,
    /// `α‖x‖²`.
    pub smooth: f64,
}

pub fn task_loss(
    x_star: &DVector<f64>,
    e_true: &[f64],
    config: &StationConfig,
    sessions: &[Session],
) -> Result<TaskLoss> {
    ensure_len("x_star", config.n_vars(), x_star.len())?;
    ensure_len("e_true", config.n_customers, e_true.len())?;
    ensure_len("sessions", config.n_customers, sessions.len())?;
    if x_star.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("schedule contains non-finite entries".into()));
    }
    let t_len = config.horizon;
    let (beta, alpha) = (config.beta, config.alpha);
    let lin = linear_cost(config, sessions);

    let gap: Vec<f64> = (0..config.n_customers)
        .map(|i| x_star.rows(i * t_len, t_len).sum() - e_true[i])
        .collect();

    let profit = -lin.dot(x_star);
    let completion = beta * gap.iter().map(|g| g * g).sum::<f64>();
    let smooth = alpha * x_star.dot(x_star);
    let loss = -profit + completion + smooth;

    let grad_x = DVector::from_fn(x_star.len(), |k, _| {
        2.0 * beta * gap[k / t_len] + lin[k] + 2.0 * alpha * x_star[k]
    });

    Ok(TaskLoss {
        loss,
        grad_x,
        profit,
        completion,
        smooth,
    })
}
