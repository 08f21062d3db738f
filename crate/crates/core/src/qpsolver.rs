//! Dense primal-dual interior-point solver for convex QPs of the form
//!
//! ```text
//! min ½xᵀQx + qᵀx   s.t.  G x ≤ h,  F x = 0
//! ```
//!
//! where every row of `F` pins a single coordinate to zero. Pinned coordinates are
//! removed before the interior-point iterations and re-inserted afterwards; their
//! equality multipliers are read off the stationarity residual. Inequality rows
//! that only touch pinned coordinates are constant and get a zero multiplier.
//!
//! The iterations are Mehrotra predictor-corrector steps on the normal equations
//! `(Q + Gᵀ diag(λ/s) G) dx = r`, factored by Cholesky once per iteration and
//! reused for both the predictor and the corrector.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::QPProblem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    /// Infinity-norm bound on every KKT residual at termination.
    pub tol_kkt: f64,
    pub max_iter: usize,
    /// Static diagonal shift added to the Newton matrix.
    pub regularization: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tol_kkt: 1e-8,
            max_iter: 100,
            regularization: 1e-10,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_kkt > 0.0) {
            return Err(Error::Config("tol_kkt must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if !(self.regularization >= 0.0) {
            return Err(Error::Config("regularization must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Infeasible,
}

/// Infinity norms of the KKT residuals.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `‖Qx + q + Gᵀλ + Fᵀν‖`
    pub stationarity: f64,
    /// `‖Fx‖`
    pub primal_eq: f64,
    /// `max(0, max(Gx − h))`
    pub primal_ineq: f64,
    /// `max |λᵢ (h − Gx)ᵢ|`
    pub complementarity: f64,
    /// `max(0, −min λ)`
    pub dual_sign: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_ineq)
            .max(self.complementarity)
            .max(self.dual_sign)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    /// `max(‖r_dual‖, ‖r_primal‖)` at each iterate, starting point included.
    pub merit_history: Vec<f64>,
    /// Inequality rows where both the multiplier and the slack are below 1e-7.
    pub degenerate_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QPSolution {
    pub x_star: DVector<f64>,
    pub lambda_star: DVector<f64>,
    pub nu_star: DVector<f64>,
    pub status: SolveStatus,
    pub residuals: KktResiduals,
    pub diagnostics: SolverDiagnostics,
}

impl QPSolution {
    /// `h − G x⋆`
    pub fn slack(&self, problem: &QPProblem) -> DVector<f64> {
        &problem.h - &problem.g_ineq * &self.x_star
    }

    pub fn is_converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

pub fn kkt_residuals(
    problem: &QPProblem,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    nu: &DVector<f64>,
) -> KktResiduals {
    let stat = &problem.q_mat * x
        + &problem.q
        + problem.g_ineq.transpose() * lambda
        + problem.f_eq.transpose() * nu;
    let slack = &problem.h - &problem.g_ineq * x;
    let fx = &problem.f_eq * x;
    KktResiduals {
        stationarity: stat.amax(),
        primal_eq: if fx.is_empty() { 0.0 } else { fx.amax() },
        primal_ineq: slack.iter().fold(0.0_f64, |m, s| m.max(-s)),
        complementarity: lambda
            .iter()
            .zip(slack.iter())
            .fold(0.0_f64, |m, (l, s)| m.max((l * s).abs())),
        dual_sign: lambda.iter().fold(0.0_f64, |m, l| m.max(-l)),
    }
}

const DEGENERACY_THRESHOLD: f64 = 1e-7;

/// The problem restricted to unpinned coordinates and non-constant rows.
struct Reduced {
    free: Vec<usize>,
    rows: Vec<usize>,
    row_nz: Vec<Vec<(usize, f64)>>,
    q_mat: DMatrix<f64>,
    q: DVector<f64>,
    h: DVector<f64>,
}

impl Reduced {
    fn new(problem: &QPProblem, tol: f64) -> Result<Option<Reduced>> {
        let n = problem.n_vars();
        let mut pinned = vec![false; n];
        for j in problem.pinned_coordinates() {
            pinned[j] = true;
        }
        let free: Vec<usize> = (0..n).filter(|&j| !pinned[j]).collect();
        let mut col_of = vec![usize::MAX; n];
        for (k, &j) in free.iter().enumerate() {
            col_of[j] = k;
        }

        let mut rows = Vec::new();
        let mut row_nz = Vec::new();
        for r in 0..problem.n_ineq() {
            let nz: Vec<(usize, f64)> = free
                .iter()
                .filter_map(|&j| {
                    let v = problem.g_ineq[(r, j)];
                    (v != 0.0).then_some((col_of[j], v))
                })
                .collect();
            if nz.is_empty() {
                if problem.h[r] < -tol {
                    return Ok(None);
                }
                continue;
            }
            rows.push(r);
            row_nz.push(nz);
        }

        let q_mat = DMatrix::from_fn(free.len(), free.len(), |a, b| {
            problem.q_mat[(free[a], free[b])]
        });
        let q = DVector::from_fn(free.len(), |a, _| problem.q[free[a]]);
        let h = DVector::from_fn(rows.len(), |k, _| problem.h[rows[k]]);
        Ok(Some(Reduced {
            free,
            rows,
            row_nz,
            q_mat,
            q,
            h,
        }))
    }

    fn n(&self) -> usize {
        self.free.len()
    }

    fn m(&self) -> usize {
        self.rows.len()
    }

    fn g_mul(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.m(), |r, _| {
            self.row_nz[r].iter().map(|&(j, v)| v * x[j]).sum()
        })
    }

    fn gt_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n());
        for (r, nz) in self.row_nz.iter().enumerate() {
            for &(j, g) in nz {
                out[j] += g * v[r];
            }
        }
        out
    }

    /// `Q + Gᵀ diag(w) G`
    fn normal_matrix(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let mut k = self.q_mat.clone();
        for (r, nz) in self.row_nz.iter().enumerate() {
            for &(a, ga) in nz {
                for &(b, gb) in nz {
                    k[(a, b)] += w[r] * ga * gb;
                }
            }
        }
        k
    }

    /// Box midpoint from singleton rows, shrunk toward the origin until every
    /// coupled row is strictly satisfied.
    fn initial_point(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.n();
        let mut lo = vec![f64::NEG_INFINITY; n];
        let mut hi = vec![f64::INFINITY; n];
        for (r, nz) in self.row_nz.iter().enumerate() {
            if let [(j, g)] = nz.as_slice() {
                let bound = self.h[r] / g;
                if *g > 0.0 {
                    hi[*j] = hi[*j].min(bound);
                } else {
                    lo[*j] = lo[*j].max(bound);
                }
            }
        }
        let mid = DVector::from_fn(n, |j, _| match (lo[j].is_finite(), hi[j].is_finite()) {
            (true, true) => 0.5 * (lo[j] + hi[j]),
            (true, false) => lo[j] + 1.0,
            (false, true) => hi[j] - 1.0,
            (false, false) => 0.0,
        });

        let mut scale = 1.0;
        for _ in 0..40 {
            let x = &mid * scale;
            let s = &self.h - self.g_mul(&x);
            if s.iter().all(|v| *v > 1e-8) {
                return (x, s);
            }
            scale *= 0.5;
        }
        let s = (&self.h - self.g_mul(&mid)).map(|v| v.max(1.0));
        (mid, s)
    }
}

fn step_to_boundary(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .fold(1.0_f64, |a, (x, d)| a.min(-x / d))
}

struct NewtonSolver {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    k: DMatrix<f64>,
}

impl NewtonSolver {
    fn new(k: DMatrix<f64>, reg: f64) -> Result<Self> {
        let mut shift = reg;
        for _ in 0..8 {
            let mut shifted = k.clone();
            for i in 0..shifted.nrows() {
                shifted[(i, i)] += shift;
            }
            if let Some(chol) = shifted.cholesky() {
                return Ok(NewtonSolver { chol, k });
            }
            shift = (shift * 100.0).max(1e-12);
        }
        Err(Error::Numerical(
            "Newton matrix is not positive definite".into(),
        ))
    }

    /// Solve with one step of iterative refinement against the unshifted matrix.
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut x = self.chol.solve(rhs);
        let r = rhs - &self.k * &x;
        x += self.chol.solve(&r);
        x
    }
}

pub fn solve_qp(problem: &QPProblem, settings: &SolverSettings) -> Result<QPSolution> {
    settings.validate()?;
    problem.validate()?;
    let tol = settings.tol_kkt;
    let n_full = problem.n_vars();

    let Some(red) = Reduced::new(problem, tol)? else {
        return Ok(QPSolution {
            x_star: DVector::zeros(n_full),
            lambda_star: DVector::zeros(problem.n_ineq()),
            nu_star: DVector::zeros(problem.n_eq()),
            status: SolveStatus::Infeasible,
            residuals: KktResiduals::default(),
            diagnostics: SolverDiagnostics::default(),
        });
    };

    let (x_red, z_red, status, diagnostics) = interior_point(&red, settings)?;

    let mut x_star = DVector::zeros(n_full);
    for (k, &j) in red.free.iter().enumerate() {
        x_star[j] = x_red[k];
    }
    let mut lambda_star = DVector::zeros(problem.n_ineq());
    for (k, &r) in red.rows.iter().enumerate() {
        lambda_star[r] = z_red[k];
    }
    let partial = &problem.q_mat * &x_star + &problem.q + problem.g_ineq.transpose() * &lambda_star;
    let nu_star = DVector::from_iterator(
        problem.n_eq(),
        problem
            .pinned_coordinates()
            .into_iter()
            .enumerate()
            .map(|(row, j)| -partial[j] / problem.f_eq[(row, j)]),
    );

    let residuals = kkt_residuals(problem, &x_star, &lambda_star, &nu_star);
    let slack = &problem.h - &problem.g_ineq * &x_star;
    let degenerate_rows = red
        .rows
        .iter()
        .copied()
        .filter(|&r| lambda_star[r] < DEGENERACY_THRESHOLD && slack[r] < DEGENERACY_THRESHOLD)
        .collect();

    Ok(QPSolution {
        x_star,
        lambda_star,
        nu_star,
        status,
        residuals,
        diagnostics: SolverDiagnostics {
            degenerate_rows,
            ..diagnostics
        },
    })
}

type IpmOutcome = (DVector<f64>, DVector<f64>, SolveStatus, SolverDiagnostics);

fn interior_point(red: &Reduced, settings: &SolverSettings) -> Result<IpmOutcome> {
    let (n, m) = (red.n(), red.m());
    let tol = settings.tol_kkt;

    if n == 0 {
        return Ok((
            DVector::zeros(0),
            DVector::zeros(m),
            SolveStatus::Converged,
            SolverDiagnostics::default(),
        ));
    }
    if m == 0 {
        let newton = NewtonSolver::new(red.q_mat.clone(), settings.regularization)?;
        let x = newton.solve(&(-&red.q));
        return Ok((x, DVector::zeros(0), SolveStatus::Converged, SolverDiagnostics::default()));
    }

    let (mut x, mut s) = red.initial_point();
    let mut z = DVector::from_element(m, 1.0);

    // Residual measures on the true slack h − Gx, which is what the caller sees.
    let true_residual = |x: &DVector<f64>, z: &DVector<f64>| -> f64 {
        let rd = &red.q_mat * x + &red.q + red.gt_mul(z);
        let slack = &red.h - red.g_mul(x);
        let primal = slack.iter().fold(0.0_f64, |a, v| a.max(-v));
        let compl = z
            .iter()
            .zip(slack.iter())
            .fold(0.0_f64, |a, (zi, si)| a.max((zi * si).abs()));
        rd.amax().max(primal).max(compl)
    };

    let mut diag = SolverDiagnostics::default();
    let mut best = (x.clone(), z.clone(), f64::INFINITY);

    for iter in 0..=settings.max_iter {
        let rd = &red.q_mat * &x + &red.q + red.gt_mul(&z);
        let rp = red.g_mul(&x) + &s - &red.h;
        diag.merit_history.push(rd.amax().max(rp.amax()));

        let res = true_residual(&x, &z);
        if res < best.2 {
            best = (x.clone(), z.clone(), res);
        }
        if res <= tol {
            diag.iterations = iter;
            return Ok((x, z, SolveStatus::Converged, diag));
        }
        if iter == settings.max_iter {
            break;
        }

        let mu = s.dot(&z) / m as f64;
        let w = z.component_div(&s);
        let newton = NewtonSolver::new(red.normal_matrix(&w), settings.regularization)?;

        // Given a complementarity target r_sz, solve
        //   Q dx + Gᵀdz = −rd,  G dx + ds = −rp,  Z ds + S dz = −r_sz.
        let direction = |r_sz: &DVector<f64>| {
            let t = (r_sz - z.component_mul(&rp)).component_div(&s);
            let rhs = -&rd + red.gt_mul(&t);
            let dx = newton.solve(&rhs);
            let ds = -&rp - red.g_mul(&dx);
            let dz = (-r_sz - z.component_mul(&ds)).component_div(&s);
            (dx, ds, dz)
        };

        let r_aff = s.component_mul(&z);
        let (_, ds_a, dz_a) = direction(&r_aff);
        let a_aff = step_to_boundary(&s, &ds_a).min(step_to_boundary(&z, &dz_a));
        let mu_aff = (&s + &ds_a * a_aff).dot(&(&z + &dz_a * a_aff)) / m as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

        let r_cc = &r_aff + ds_a.component_mul(&dz_a) - DVector::from_element(m, sigma * mu);
        let (dx, ds, dz) = direction(&r_cc);
        let a_max = step_to_boundary(&s, &ds).min(step_to_boundary(&z, &dz));
        let step = (0.99 * a_max).min(1.0);

        x += &dx * step;
        s += &ds * step;
        z += &dz * step;
        if x.iter().chain(s.iter()).chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("interior-point iterate became non-finite".into()));
        }
    }

    diag.iterations = settings.max_iter;
    Ok((best.0, best.1, SolveStatus::MaxIter, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_qp, Session, StationConfig};

    fn scalar_box(q: f64, qq: f64, upper: f64) -> QPProblem {
        QPProblem {
            q_mat: DMatrix::from_element(1, 1, q),
            q: DVector::from_element(1, qq),
            g_ineq: DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]),
            h: DVector::from_vec(vec![0.0, upper]),
            f_eq: DMatrix::zeros(0, 1),
            constant: 0.0,
            rhs_scale: DMatrix::zeros(1, 1),
        }
    }

    #[test]
    fn scalar_interior_optimum() {
        let sol = solve_qp(&scalar_box(2.0, -4.0, 10.0), &SolverSettings::default()).unwrap();
        assert!(sol.is_converged());
        assert!((sol.x_star[0] - 2.0).abs() < 1e-8);
        assert!(sol.lambda_star.iter().all(|l| *l < 1e-7));
    }

    #[test]
    fn scalar_upper_bound_active() {
        let sol = solve_qp(&scalar_box(2.0, -40.0, 10.0), &SolverSettings::default()).unwrap();
        assert!(sol.is_converged());
        assert!((sol.x_star[0] - 10.0).abs() < 1e-8);
        // stationarity: 2·10 − 40 + λ_upper = 0
        assert!((sol.lambda_star[1] - 20.0).abs() < 1e-6);
    }

    #[test]
    fn symmetric_split() {
        let cfg = StationConfig {
            horizon: 2,
            n_customers: 1,
            purchase_price: vec![0.0, 0.0],
            station_cap: 100.0,
            beta: 1.0,
            alpha: 0.001,
        };
        let sessions = vec![Session::new(0, 0, 2, 50.0, 0.0).unwrap()];
        let qp = build_qp(&cfg, &sessions, &[10.0]).unwrap();
        let sol = solve_qp(&qp, &SolverSettings::default()).unwrap();
        assert!(sol.is_converged());
        assert!((sol.x_star[0] - sol.x_star[1]).abs() < 1e-8);
        // 2β(2x − 10) + 2αx = 0
        let expect = 20.0 / (4.0 + 0.002);
        assert!((sol.x_star[0] - expect).abs() < 1e-7);
        assert!((sol.x_star[0] - 5.0).abs() < 1e-2);
    }

    #[test]
    fn origin_optimal_with_zero_demand() {
        let cfg = StationConfig {
            horizon: 3,
            n_customers: 2,
            purchase_price: vec![0.1, 0.2, 0.3],
            station_cap: 10.0,
            beta: 2.0,
            alpha: 0.01,
        };
        let sessions = vec![
            Session::new(0, 0, 3, 5.0, 0.0).unwrap(),
            Session::new(1, 1, 3, 5.0, 0.0).unwrap(),
        ];
        let qp = build_qp(&cfg, &sessions, &[0.0, 0.0]).unwrap();
        let sol = solve_qp(&qp, &SolverSettings::default()).unwrap();
        assert!(sol.is_converged());
        assert!(sol.x_star.amax() < 1e-8);
    }

    #[test]
    fn pinned_coordinates_stay_zero() {
        let cfg = StationConfig {
            horizon: 4,
            n_customers: 2,
            purchase_price: vec![0.1; 4],
            station_cap: 6.0,
            beta: 5.0,
            alpha: 0.001,
        };
        let sessions = vec![
            Session::new(0, 1, 3, 4.0, 0.4).unwrap(),
            Session::new(1, 0, 2, 4.0, 0.4).unwrap(),
        ];
        let qp = build_qp(&cfg, &sessions, &[7.0, 3.0]).unwrap();
        let sol = solve_qp(&qp, &SolverSettings::default()).unwrap();
        assert!(sol.is_converged(), "{:?}", sol.residuals);
        for (i, s) in sessions.iter().enumerate() {
            for t in 0..4 {
                if !s.is_active(t) {
                    assert_eq!(sol.x_star[i * 4 + t], 0.0);
                }
            }
        }
        assert!(sol.residuals.max() <= 1e-8);
    }

    #[test]
    fn constant_row_infeasibility_detected() {
        let mut qp = scalar_box(1.0, 0.0, 1.0);
        qp.f_eq = DMatrix::from_element(1, 1, 1.0);
        qp.h[0] = -1.0; // −x ≤ −1 with x pinned at zero
        let sol = solve_qp(&qp, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn rejects_general_equalities() {
        let mut qp = scalar_box(1.0, 0.0, 1.0);
        qp.q_mat = DMatrix::identity(2, 2);
        qp.q = DVector::zeros(2);
        qp.g_ineq = DMatrix::zeros(1, 2);
        qp.h = DVector::zeros(1);
        qp.f_eq = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        qp.rhs_scale = DMatrix::zeros(2, 1);
        assert!(solve_qp(&qp, &SolverSettings::default()).is_err());
    }

    #[test]
    fn max_iter_reports_status() {
        let settings = SolverSettings {
            max_iter: 1,
            ..SolverSettings::default()
        };
        let sol = solve_qp(&scalar_box(2.0, -40.0, 10.0), &settings).unwrap();
        assert_eq!(sol.status, SolveStatus::MaxIter);
    }

    #[test]
    fn invalid_settings_rejected() {
        let settings = SolverSettings {
            tol_kkt: 0.0,
            ..SolverSettings::default()
        };
        assert!(solve_qp(&scalar_box(2.0, -4.0, 10.0), &settings).is_err());
    }
}
