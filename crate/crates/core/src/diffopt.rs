//! Sensitivity of the QP optimum to the demand estimate.
//!
//! Differentiating the KKT conditions at `(x⋆, λ⋆, ν⋆)` gives
//!
//! ```text
//! ⎡ Q           Gᵀ              Fᵀ ⎤ ⎡dx⎤   ⎡2βBᵀ dê⎤
//! ⎢ diag(λ⋆)G   diag(Gx⋆ − h)   0  ⎥ ⎢dλ⎥ = ⎢   0   ⎥
//! ⎣ F           0               0  ⎦ ⎣dν⎦   ⎣   0   ⎦
//! ```
//!
//! The loss gradient is taken in adjoint form: solve `Kᵀz = (∂L/∂x⋆, 0, 0)` and
//! return `(2βBᵀ)ᵀ z_x`, which avoids forming the full Jacobian.
//!
//! Inequality rows whose coefficients all fall on pinned coordinates are constant
//! (`0 ≤ h`). Their multiplier is zero and, for the lower bounds, so is their
//! slack, which would leave an all-zero row in `K`; those rows are left out.
//!
//! `K` is singular exactly when strict complementarity fails. A tiny pivot
//! triggers a diagonal shift of `ε` (sign-matched to each block) and the result
//! is flagged.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::model::QPProblem;
use crate::qpsolver::QPSolution;

/// Diagonal shift applied when the KKT matrix has a tiny pivot.
pub const KKT_REGULARIZATION: f64 = 1e-8;
/// Pivot ratio `min|uᵢᵢ| / max|uᵢᵢ|` below which the matrix counts as singular.
const PIVOT_RATIO_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientStatus {
    Clean,
    Regularized,
    Singular,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KktDiagnostics {
    /// `max|uᵢᵢ| / min|uᵢᵢ|` from the LU factorization of `Kᵀ`.
    pub condition_estimate: f64,
    pub regularized: bool,
    pub singular: bool,
    /// Original inequality rows with both multiplier and slack below 1e-7.
    pub degenerate_rows: Vec<usize>,
    /// Original inequality rows left out as constant.
    pub dropped_rows: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct KKTSystem {
    pub g_mat: DMatrix<f64>,
    /// `2βBᵀ` for station problems.
    pub rhs_scale: DMatrix<f64>,
    pub n_x: usize,
    /// Original indices of the inequality rows present in `g_mat`.
    pub ineq_rows: Vec<usize>,
    pub n_eq: usize,
    pub diagnostics: KktDiagnostics,
    adjoint_lu: LU<f64, Dyn, Dyn>,
}

impl KKTSystem {
    pub fn dim(&self) -> usize {
        self.g_mat.nrows()
    }

    /// Forward sensitivities `∂x⋆/∂ê` (n_x × n_e), one solve of `K` per column.
    pub fn jacobian(&self) -> Result<DMatrix<f64>> {
        let (lu, _) = factor(self.g_mat.clone(), self.n_x, self.ineq_rows.len())?;
        let n_e = self.rhs_scale.ncols();
        let mut jac = DMatrix::zeros(self.n_x, n_e);
        for col in 0..n_e {
            let mut rhs = DVector::zeros(self.dim());
            rhs.rows_mut(0, self.n_x).copy_from(&self.rhs_scale.column(col));
            let sol = lu
                .solve(&rhs)
                .ok_or_else(|| Error::Numerical("KKT matrix is singular".into()))?;
            jac.column_mut(col).copy_from(&sol.rows(0, self.n_x));
        }
        Ok(jac)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EHatGradient {
    pub grad: DVector<f64>,
    pub status: GradientStatus,
}

fn pivot_ratio(lu: &LU<f64, Dyn, Dyn>) -> (f64, f64) {
    let u = lu.u();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
    for i in 0..u.nrows() {
        let v = u[(i, i)].abs();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if u.nrows() == 0 {
        return (1.0, 1.0);
    }
    (lo, hi)
}

/// LU of `mat`, shifted by ±ε on the diagonal when a pivot is tiny. Returns the
/// factorization and `(regularized, singular, condition_estimate)`.
fn factor(
    mut mat: DMatrix<f64>,
    n_x: usize,
    _n_ineq: usize,
) -> Result<(LU<f64, Dyn, Dyn>, (bool, bool, f64))> {
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("KKT matrix has non-finite entries".into()));
    }
    let lu = mat.clone().lu();
    let (lo, hi) = pivot_ratio(&lu);
    if lo > PIVOT_RATIO_FLOOR * hi {
        return Ok((lu, (false, false, hi / lo)));
    }
    for i in 0..mat.nrows() {
        // Q block is PSD; the slack and equality blocks are ≤ 0 on the diagonal.
        mat[(i, i)] += if i < n_x {
            KKT_REGULARIZATION
        } else {
            -KKT_REGULARIZATION
        };
    }
    let lu = mat.lu();
    let (lo, hi) = pivot_ratio(&lu);
    let singular = !(lo > PIVOT_RATIO_FLOOR * hi) || !lo.is_finite();
    Ok((lu, (true, singular, if lo > 0.0 { hi / lo } else { f64::INFINITY })))
}

pub fn assemble_kkt_system(problem: &QPProblem, sol: &QPSolution) -> Result<KKTSystem> {
    if !sol.is_converged() {
        return Err(Error::Numerical(format!(
            "cannot differentiate a non-converged solution (status {:?})",
            sol.status
        )));
    }
    problem.validate()?;
    let n = problem.n_vars();
    ensure_len("x_star", n, sol.x_star.len())?;
    ensure_len("lambda_star", problem.n_ineq(), sol.lambda_star.len())?;

    let mut pinned = vec![false; n];
    for j in problem.pinned_coordinates() {
        pinned[j] = true;
    }
    let (ineq_rows, dropped_rows): (Vec<usize>, Vec<usize>) = (0..problem.n_ineq())
        .partition(|&r| (0..n).any(|j| !pinned[j] && problem.g_ineq[(r, j)] != 0.0));

    let m = ineq_rows.len();
    let h_eq = problem.n_eq();
    let dim = n + m + h_eq;
    let residual = &problem.g_ineq * &sol.x_star - &problem.h;

    let mut g_mat = DMatrix::zeros(dim, dim);
    g_mat.view_mut((0, 0), (n, n)).copy_from(&problem.q_mat);
    for (k, &r) in ineq_rows.iter().enumerate() {
        let lam = sol.lambda_star[r];
        for j in 0..n {
            let g = problem.g_ineq[(r, j)];
            if g != 0.0 {
                g_mat[(j, n + k)] = g;
                g_mat[(n + k, j)] = lam * g;
            }
        }
        g_mat[(n + k, n + k)] = residual[r];
    }
    for e in 0..h_eq {
        for j in 0..n {
            let f = problem.f_eq[(e, j)];
            if f != 0.0 {
                g_mat[(j, n + m + e)] = f;
                g_mat[(n + m + e, j)] = f;
            }
        }
    }

    let (adjoint_lu, (regularized, singular, condition_estimate)) =
        factor(g_mat.transpose(), n, m)?;

    let degenerate_rows = ineq_rows
        .iter()
        .copied()
        .filter(|&r| sol.lambda_star[r] < 1e-7 && -residual[r] < 1e-7)
        .collect();

    Ok(KKTSystem {
        g_mat,
        rhs_scale: problem.rhs_scale.clone(),
        n_x: n,
        ineq_rows,
        n_eq: h_eq,
        diagnostics: KktDiagnostics {
            condition_estimate,
            regularized,
            singular,
            degenerate_rows,
            dropped_rows,
        },
        adjoint_lu,
    })
}

/// `dL/dê` from `∂L/∂x⋆` via the transposed KKT system.
pub fn grad_wrt_e_hat(system: &KKTSystem, grad_x: &DVector<f64>) -> Result<EHatGradient> {
    ensure_len("grad_x", system.n_x, grad_x.len())?;
    let n_e = system.rhs_scale.ncols();
    if system.diagnostics.singular {
        log::warn!("KKT system is singular after regularization; returning zero gradient");
        return Ok(EHatGradient {
            grad: DVector::zeros(n_e),
            status: GradientStatus::Singular,
        });
    }
    let mut rhs = DVector::zeros(system.dim());
    rhs.rows_mut(0, system.n_x).copy_from(grad_x);
    let z = system.adjoint_lu.solve(&rhs);
    let Some(z) = z.filter(|z| z.iter().all(|v| v.is_finite())) else {
        log::warn!("adjoint KKT solve failed; returning zero gradient");
        return Ok(EHatGradient {
            grad: DVector::zeros(n_e),
            status: GradientStatus::Singular,
        });
    };
    let grad = system.rhs_scale.transpose() * z.rows(0, system.n_x);
    let status = if system.diagnostics.regularized {
        GradientStatus::Regularized
    } else {
        GradientStatus::Clean
    };
    Ok(EHatGradient { grad, status })
}

/// Rows with `λ/s` above this go to the bordered block instead of the Cholesky
/// matrix.
const STRONG_WEIGHT: f64 = 1e4;

/// Cholesky of `mat`, retried with a growing diagonal shift. Returns the factor
/// and whether a shift was needed.
fn shifted_cholesky(mat: &DMatrix<f64>, what: &str) -> Result<(Cholesky<f64, Dyn>, bool)> {
    let mut shift = 0.0;
    loop {
        let mut shifted = mat.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += shift;
        }
        if let Some(c) = shifted.cholesky() {
            return Ok((c, shift > 0.0));
        }
        shift = if shift == 0.0 {
            KKT_REGULARIZATION
        } else {
            shift * 100.0
        };
        if shift > 1.0 {
            return Err(Error::Numerical(format!("{what} is not positive definite")));
        }
    }
}

/// The same sensitivity system with `dν` eliminated and most of `dλ` too.
///
/// From the middle block rows, `gᵢᵀ dx = (sᵢ / λᵢ) dλᵢ` with `s = h − Gx⋆`. For
/// rows with a moderate weight `λᵢ/sᵢ`, `dλᵢ` is substituted out, which adds
/// `(λᵢ/sᵢ) gᵢgᵢᵀ` to `Q`. Strongly active rows would put huge weights there,
/// so they stay as a border:
///
/// ```text
/// [ K   Aᵀ ] [dx]   [r]
/// [ A  −D  ] [dμ] = [0],   D = diag(s/λ)
/// ```
///
/// solved through the Schur complement `A K⁻¹ Aᵀ + D`. Pinned coordinates are
/// dropped. The system is symmetric, so the forward and adjoint solves are the
/// same. This is the form used in training loops.
#[derive(Debug, Clone)]
pub struct ReducedSensitivity {
    free: Vec<usize>,
    n_x: usize,
    k_chol: Cholesky<f64, Dyn>,
    border: DMatrix<f64>,
    schur_chol: Option<Cholesky<f64, Dyn>>,
    rhs_scale_free: DMatrix<f64>,
    pub regularized: bool,
}

impl ReducedSensitivity {
    pub fn new(problem: &QPProblem, sol: &QPSolution) -> Result<Self> {
        if !sol.is_converged() {
            return Err(Error::Numerical(format!(
                "cannot differentiate a non-converged solution (status {:?})",
                sol.status
            )));
        }
        let n = problem.n_vars();
        let mut pinned = vec![false; n];
        for j in problem.pinned_coordinates() {
            pinned[j] = true;
        }
        let free: Vec<usize> = (0..n).filter(|&j| !pinned[j]).collect();
        let slack = sol.slack(problem);

        let mut k = DMatrix::from_fn(free.len(), free.len(), |a, b| {
            problem.q_mat[(free[a], free[b])]
        });
        let mut strong: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
        for r in 0..problem.n_ineq() {
            let lam = sol.lambda_star[r];
            if lam <= 0.0 {
                continue;
            }
            let nz: Vec<(usize, f64)> = free
                .iter()
                .enumerate()
                .filter_map(|(a, &j)| {
                    let g = problem.g_ineq[(r, j)];
                    (g != 0.0).then_some((a, g))
                })
                .collect();
            if nz.is_empty() {
                continue;
            }
            let s = slack[r].max(0.0);
            if lam > STRONG_WEIGHT * s {
                strong.push((nz, s / lam));
                continue;
            }
            let w = lam / s;
            for &(a, ga) in &nz {
                for &(b, gb) in &nz {
                    k[(a, b)] += w * ga * gb;
                }
            }
        }
        let (k_chol, mut regularized) = shifted_cholesky(&k, "reduced sensitivity matrix")?;

        let mut border = DMatrix::zeros(strong.len(), free.len());
        for (i, (nz, _)) in strong.iter().enumerate() {
            for &(a, g) in nz {
                border[(i, a)] = g;
            }
        }
        let schur_chol = if strong.is_empty() {
            None
        } else {
            let mut schur = &border * k_chol.solve(&border.transpose());
            for (i, (_, d)) in strong.iter().enumerate() {
                schur[(i, i)] += d;
            }
            let (c, shifted) = shifted_cholesky(&schur, "active-constraint Schur complement")?;
            regularized |= shifted;
            Some(c)
        };

        let rhs_scale_free = DMatrix::from_fn(free.len(), problem.rhs_scale.ncols(), |a, c| {
            problem.rhs_scale[(free[a], c)]
        });
        Ok(ReducedSensitivity {
            free,
            n_x: n,
            k_chol,
            border,
            schur_chol,
            rhs_scale_free,
            regularized,
        })
    }

    /// `dx_f` for right-hand sides given as the columns of `r`.
    fn solve(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self.k_chol.solve(r);
        match &self.schur_chol {
            None => y,
            Some(schur) => {
                let mu = schur.solve(&(&self.border * &y));
                y - self.k_chol.solve(&(self.border.transpose() * mu))
            }
        }
    }

    pub fn grad_wrt_e_hat(&self, grad_x: &DVector<f64>) -> Result<EHatGradient> {
        ensure_len("grad_x", self.n_x, grad_x.len())?;
        let g_free = DMatrix::from_fn(self.free.len(), 1, |a, _| grad_x[self.free[a]]);
        let y = self.solve(&g_free);
        let grad = self.rhs_scale_free.transpose() * y.column(0);
        Ok(EHatGradient {
            grad,
            status: if self.regularized {
                GradientStatus::Regularized
            } else {
                GradientStatus::Clean
            },
        })
    }

    pub fn jacobian(&self) -> DMatrix<f64> {
        let sol = self.solve(&self.rhs_scale_free);
        let mut jac = DMatrix::zeros(self.n_x, sol.ncols());
        for (a, &j) in self.free.iter().enumerate() {
            jac.row_mut(j).copy_from(&sol.row(a));
        }
        jac
    }
}
