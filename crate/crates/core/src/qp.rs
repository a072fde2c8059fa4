//! Dense strictly convex QP solver.
//!
//! Solves
//!
//! ```text
//!     minimize    ½ uᵀ H u + qᵀ u
//!     subject to  lower ≤ C u ≤ upper
//! ```
//!
//! with the dual active-set method of Goldfarb and Idnani. The iteration
//! starts at the unconstrained minimizer and adds the most violated
//! constraint each round, so no feasible starting point is needed. The
//! factorization `J Jᵀ = H⁻¹`, `J₁ᵀ N = R` is updated with Givens rotations
//! as constraints enter and leave the active set.
//!
//! Two-sided rows are split into two one-sided constraints; rows with
//! `lower == upper` are kept as equalities and never dropped. Infinite
//! bounds are ignored.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("row {row} has lower bound {lower} above upper bound {upper}")]
    InfeasibleBounds { row: usize, lower: f64, upper: f64 },
    #[error("Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("no convergence after {} iterations", .0.iterations)]
    MaxIterations(Box<QpSolution>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub rows: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QpProblem {
    /// Problem without constraints.
    pub fn unconstrained(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let n = linear.len();
        QpProblem {
            hessian,
            linear,
            rows: DMatrix::zeros(0, n),
            lower: DVector::zeros(0),
            upper: DVector::zeros(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn row_count(&self) -> usize {
        self.rows.nrows()
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.hessian * u)) + self.linear.dot(u)
    }

    fn validate(&self) -> Result<(), QpError> {
        let n = self.dim();
        if self.hessian.shape() != (n, n) {
            return Err(QpError::DimensionMismatch(format!(
                "hessian is {:?}, expected ({n}, {n})",
                self.hessian.shape()
            )));
        }
        let m = self.rows.nrows();
        if self.rows.ncols() != n || self.lower.len() != m || self.upper.len() != m {
            return Err(QpError::DimensionMismatch(format!(
                "constraint rows {:?} with {} lower / {} upper bounds for {n} variables",
                self.rows.shape(),
                self.lower.len(),
                self.upper.len()
            )));
        }
        for row in 0..m {
            let (lower, upper) = (self.lower[row], self.upper[row]);
            if lower > upper || lower.is_nan() || upper.is_nan() {
                return Err(QpError::InfeasibleBounds { row, lower, upper });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QpSettings {
    /// Target for the primal, stationarity and complementarity residuals.
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            tol: 1e-8,
            max_iterations: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    /// `‖H u + q − Cᵀ λ‖∞`
    pub stationarity: f64,
    /// Largest bound violation.
    pub primal: f64,
    /// Largest `|λ_i · slack_i|` over the side each multiplier acts on.
    pub complementarity: f64,
    /// Largest multiplier of the wrong sign.
    pub dual: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.complementarity)
            .max(self.dual)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: DVector<f64>,
    /// Row multipliers: positive when the lower bound is active, negative
    /// when the upper bound is active.
    pub multipliers: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub residuals: KktResiduals,
    pub converged: bool,
}

/// KKT residuals of `(u, λ)` with the sign convention of [`QpSolution::multipliers`].
pub fn kkt_residuals(problem: &QpProblem, u: &DVector<f64>, multipliers: &DVector<f64>) -> KktResiduals {
    let grad = &problem.hessian * u + &problem.linear - problem.rows.transpose() * multipliers;
    let cu = &problem.rows * u;
    let mut res = KktResiduals {
        stationarity: grad.amax(),
        ..Default::default()
    };
    for row in 0..problem.row_count() {
        let (lower, upper, value, lambda) = (problem.lower[row], problem.upper[row], cu[row], multipliers[row]);
        res.primal = res.primal.max(lower - value).max(value - upper);
        let equality = lower == upper;
        if lambda > 0.0 {
            if lower.is_finite() {
                res.complementarity = res.complementarity.max((lambda * (value - lower)).abs());
            } else {
                res.dual = res.dual.max(lambda);
            }
        } else if lambda < 0.0 {
            if upper.is_finite() {
                if !equality {
                    res.complementarity = res.complementarity.max((lambda * (upper - value)).abs());
                }
            } else {
                res.dual = res.dual.max(-lambda);
            }
        }
    }
    res
}

/// One-sided constraint `sign · c_row · u ≥ bound`.
#[derive(Debug, Clone, Copy)]
struct Side {
    row: usize,
    sign: f64,
    bound: f64,
    equality: bool,
}

struct ActiveSet {
    /// `J`, n × n.
    j: DMatrix<f64>,
    /// Upper-triangular `R`, first `len()` columns in use.
    r: DMatrix<f64>,
    sides: Vec<usize>,
    multipliers: Vec<f64>,
}

impl ActiveSet {
    fn len(&self) -> usize {
        self.sides.len()
    }

    /// Appends a constraint whose `d = Jᵀ n` is given, rotating `d` so only
    /// its first `q + 1` entries are nonzero.
    fn push(&mut self, side: usize, mut d: DVector<f64>, multiplier: f64) {
        let n = d.len();
        let q = self.len();
        for k in (q + 1..n).rev() {
            let (a, b) = (d[k - 1], d[k]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            d[k - 1] = h;
            d[k] = 0.0;
            rotate_columns(&mut self.j, k - 1, k, c, s);
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
        self.sides.push(side);
        self.multipliers.push(multiplier);
    }

    /// Removes the constraint at active position `pos` and restores the
    /// triangular shape of `R`.
    fn remove(&mut self, pos: usize) {
        let q = self.len();
        for col in pos..q - 1 {
            for i in 0..q {
                self.r[(i, col)] = self.r[(i, col + 1)];
            }
        }
        for i in 0..q {
            self.r[(i, q - 1)] = 0.0;
        }
        self.sides.remove(pos);
        self.multipliers.remove(pos);
        let q = q - 1;
        for k in pos..q {
            let (a, b) = (self.r[(k, k)], self.r[(k + 1, k)]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for col in k..q {
                let (x, y) = (self.r[(k, col)], self.r[(k + 1, col)]);
                self.r[(k, col)] = c * x + s * y;
                self.r[(k + 1, col)] = -s * x + c * y;
            }
            self.r[(k + 1, k)] = 0.0;
            rotate_columns(&mut self.j, k, k + 1, c, s);
        }
    }

    /// `R⁻¹ d[..q]` by back substitution.
    fn dual_direction(&self, d: &DVector<f64>) -> Vec<f64> {
        let q = self.len();
        let mut r = vec![0.0; q];
        for i in (0..q).rev() {
            let mut acc = d[i];
            for k in i + 1..q {
                acc -= self.r[(i, k)] * r[k];
            }
            r[i] = acc / self.r[(i, i)];
        }
        r
    }

    /// Primal direction `J₂ J₂ᵀ n` from `d = Jᵀ n`.
    fn primal_direction(&self, d: &DVector<f64>) -> DVector<f64> {
        let q = self.len();
        let n = d.len();
        let mut z = DVector::zeros(n);
        for k in q..n {
            if d[k] != 0.0 {
                z.axpy(d[k], &self.j.column(k), 1.0);
            }
        }
        z
    }
}

fn rotate_columns(m: &mut DMatrix<f64>, a: usize, b: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let (x, y) = (m[(i, a)], m[(i, b)]);
        m[(i, a)] = c * x + s * y;
        m[(i, b)] = -s * x + c * y;
    }
}

/// Solves `problem`. Deterministic: constraints are scanned in row order and
/// ties resolve to the lowest index.
pub fn solve_qp(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    problem.validate()?;
    let n = problem.dim();
    let m = problem.row_count();

    if n == 0 {
        for row in 0..m {
            if problem.lower[row] > 0.0 || problem.upper[row] < 0.0 {
                return Err(QpError::Infeasible);
            }
        }
        return Ok(QpSolution {
            u: DVector::zeros(0),
            multipliers: DVector::zeros(m),
            objective: 0.0,
            iterations: 0,
            residuals: KktResiduals::default(),
            converged: true,
        });
    }

    let chol = problem
        .hessian
        .clone()
        .cholesky()
        .ok_or(QpError::NotPositiveDefinite)?;
    let l = chol.l();
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(QpError::NotPositiveDefinite)?;

    let mut sides = Vec::with_capacity(2 * m);
    for row in 0..m {
        let (lower, upper) = (problem.lower[row], problem.upper[row]);
        if lower == upper {
            sides.push(Side { row, sign: 1.0, bound: lower, equality: true });
            continue;
        }
        if lower.is_finite() {
            sides.push(Side { row, sign: 1.0, bound: lower, equality: false });
        }
        if upper.is_finite() {
            sides.push(Side { row, sign: -1.0, bound: -upper, equality: false });
        }
    }
    let row_norms: Vec<f64> = (0..m).map(|row| problem.rows.row(row).norm().max(1e-300)).collect();

    let mut u = -chol.solve(&problem.linear);
    let mut active = ActiveSet {
        j: l_inv.transpose(),
        r: DMatrix::zeros(n, n),
        sides: Vec::new(),
        multipliers: Vec::new(),
    };
    let mut in_active = vec![false; m];

    // Internal violation threshold; tighter than the user tolerance so the
    // reported residuals land below it.
    let feas_tol = (settings.tol * 1e-2).max(1e-14);
    let mut iterations = 0usize;

    let mut cu = &problem.rows * &u;
    loop {
        // most violated constraint, normalized by row norm
        let mut pick: Option<(usize, f64)> = None;
        for (idx, side) in sides.iter().enumerate() {
            if in_active[side.row] {
                continue;
            }
            let mut slack = side.sign * cu[side.row] - side.bound;
            if side.equality {
                slack = -slack.abs();
            }
            let scaled = slack / (row_norms[side.row] * (1.0 + side.bound.abs()));
            if scaled < -feas_tol && pick.is_none_or(|(_, best)| scaled < best) {
                pick = Some((idx, scaled));
            }
        }
        let Some((p_idx, _)) = pick else {
            break;
        };
        if sides[p_idx].equality && sides[p_idx].sign * cu[sides[p_idx].row] > sides[p_idx].bound {
            // equality violated from above: enter with the flipped normal
            let s = sides[p_idx];
            sides[p_idx] = Side { sign: -s.sign, bound: -s.bound, ..s };
        }
        let mut added_multiplier = 0.0;

        loop {
            iterations += 1;
            if iterations > settings.max_iterations {
                let sol = finish(problem, &sides, &active, u, iterations, settings);
                return Err(QpError::MaxIterations(Box::new(sol)));
            }
            let side = sides[p_idx];
            let normal: DVector<f64> = problem.rows.row(side.row).transpose() * side.sign;
            let d = active.j.tr_mul(&normal);
            let z = active.primal_direction(&d);
            let r = active.dual_direction(&d);

            // partial (dual) step length
            let mut t1 = f64::INFINITY;
            let mut drop_pos = None;
            for (pos, &rk) in r.iter().enumerate() {
                if sides[active.sides[pos]].equality || rk <= 0.0 {
                    continue;
                }
                let ratio = active.multipliers[pos] / rk;
                if ratio < t1 {
                    t1 = ratio;
                    drop_pos = Some(pos);
                }
            }

            // full (primal) step length
            let slack = normal.dot(&u) - side.bound;
            let zn = z.dot(&normal);
            let t2 = if zn > 1e-14 * normal.norm_squared() { -slack / zn } else { f64::INFINITY };

            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible);
            }
            for (mult, rk) in active.multipliers.iter_mut().zip(&r) {
                *mult -= t * rk;
            }
            added_multiplier += t;

            if t2.is_finite() {
                u.axpy(t, &z, 1.0);
            }
            if t2 <= t1 {
                active.push(p_idx, d, added_multiplier);
                in_active[side.row] = true;
                break;
            }
            // partial step: the entering constraint is still violated
            let pos = drop_pos.expect("finite partial step has a blocking constraint");
            in_active[sides[active.sides[pos]].row] = false;
            active.remove(pos);
        }
        cu = &problem.rows * &u;
    }

    let sol = finish(problem, &sides, &active, u, iterations, settings);
    Ok(sol)
}

fn finish(
    problem: &QpProblem,
    sides: &[Side],
    active: &ActiveSet,
    u: DVector<f64>,
    iterations: usize,
    settings: &QpSettings,
) -> QpSolution {
    let mut multipliers = DVector::zeros(problem.row_count());
    for (&idx, &mult) in active.sides.iter().zip(&active.multipliers) {
        let side = sides[idx];
        multipliers[side.row] += side.sign * mult;
    }
    let residuals = kkt_residuals(problem, &u, &multipliers);
    let objective = problem.objective(&u);
    QpSolution {
        converged: residuals.max() <= settings.tol,
        u,
        multipliers,
        objective,
        iterations,
        residuals,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(values: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(values))
    }

    #[test]
    fn unconstrained_minimizer() {
        let p = QpProblem::unconstrained(DMatrix::identity(3, 3), DVector::from_element(3, -1.0));
        let sol = solve_qp(&p, &QpSettings::default()).unwrap();
        assert!((sol.u.clone() - DVector::from_element(3, 1.0)).amax() < 1e-15);
        assert!(sol.converged);
    }

    #[test]
    fn active_upper_bound_1d() {
        // (u - 2)² = u² - 4u + 4  →  H = 2, q = -4
        let p = QpProblem {
            hessian: diag(&[2.0]),
            linear: DVector::from_row_slice(&[-4.0]),
            rows: DMatrix::from_row_slice(1, 1, &[1.0]),
            lower: DVector::from_row_slice(&[f64::NEG_INFINITY]),
            upper: DVector::from_row_slice(&[1.0]),
        };
        let sol = solve_qp(&p, &QpSettings::default()).unwrap();
        assert!((sol.u[0] - 1.0).abs() < 1e-15);
        // stationarity: 2·1 - 4 - λ = 0 → λ = -2 (upper side)
        assert!((sol.multipliers[0] + 2.0).abs() < 1e-12);
        assert!(sol.converged);
    }

    #[test]
    fn textbook_problem() {
        // min ½x² + ½y² + x  s.t.  x + 2y ≥ 1  →  (-0.6, 0.8)
        let p = QpProblem {
            hessian: DMatrix::identity(2, 2),
            linear: DVector::from_row_slice(&[1.0, 0.0]),
            rows: DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            lower: DVector::from_row_slice(&[1.0]),
            upper: DVector::from_row_slice(&[f64::INFINITY]),
        };
        let sol = solve_qp(&p, &QpSettings::default()).unwrap();
        assert!((sol.u[0] + 0.6).abs() < 1e-14);
        assert!((sol.u[1] - 0.8).abs() < 1e-14);
    }

    #[test]
    fn equality_row() {
        // min ½‖u‖²  s.t. u0 + u1 = 2
        let p = QpProblem {
            hessian: DMatrix::identity(2, 2),
            linear: DVector::zeros(2),
            rows: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            lower: DVector::from_row_slice(&[2.0]),
            upper: DVector::from_row_slice(&[2.0]),
        };
        let sol = solve_qp(&p, &QpSettings::default()).unwrap();
        assert!((sol.u[0] - 1.0).abs() < 1e-14 && (sol.u[1] - 1.0).abs() < 1e-14);
        // from above
        let mut p2 = p.clone();
        p2.lower[0] = -2.0;
        p2.upper[0] = -2.0;
        let sol = solve_qp(&p2, &QpSettings::default()).unwrap();
        assert!((sol.u[0] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn dropping_a_constraint() {
        // min (u0-1)² + (u1-1)²  s.t. u0 + u1 ≤ 1, u0 - u1 ≥ 0.5... the second
        // enters first as the most violated, then forces a drop later.
        let p = QpProblem {
            hessian: diag(&[2.0, 2.0]),
            linear: DVector::from_row_slice(&[-2.0, -2.0]),
            rows: DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, -1.0, 0.0, 1.0]),
            lower: DVector::from_row_slice(&[f64::NEG_INFINITY, 0.5, -10.0]),
            upper: DVector::from_row_slice(&[1.0, f64::INFINITY, 0.2]),
        };
        let sol = solve_qp(&p, &QpSettings::default()).unwrap();
        assert!(sol.converged, "{:?}", sol.residuals);
        assert!(sol.residuals.max() < 1e-12);
    }

    #[test]
    fn infeasible_bounds_rejected() {
        let p = QpProblem {
            hessian: DMatrix::identity(1, 1),
            linear: DVector::zeros(1),
            rows: DMatrix::from_row_slice(1, 1, &[1.0]),
            lower: DVector::from_row_slice(&[2.0]),
            upper: DVector::from_row_slice(&[1.0]),
        };
        assert!(matches!(
            solve_qp(&p, &QpSettings::default()),
            Err(QpError::InfeasibleBounds { row: 0, .. })
        ));
    }

    #[test]
    fn infeasible_system_detected() {
        // u ≥ 1 and u ≤ 0 on two separate rows
        let p = QpProblem {
            hessian: DMatrix::identity(1, 1),
            linear: DVector::zeros(1),
            rows: DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            lower: DVector::from_row_slice(&[1.0, f64::NEG_INFINITY]),
            upper: DVector::from_row_slice(&[f64::INFINITY, 0.0]),
        };
        assert_eq!(solve_qp(&p, &QpSettings::default()), Err(QpError::Infeasible));
    }

    #[test]
    fn not_positive_definite() {
        let p = QpProblem::unconstrained(diag(&[1.0, -1.0]), DVector::zeros(2));
        assert_eq!(solve_qp(&p, &QpSettings::default()), Err(QpError::NotPositiveDefinite));
    }

    #[test]
    fn empty_problem() {
        let p = QpProblem::unconstrained(DMatrix::zeros(0, 0), DVector::zeros(0));
        let sol = solve_qp(&p, &QpSettings::default()).unwrap();
        assert_eq!(sol.u.len(), 0);
    }

    #[test]
    fn max_iterations_returns_iterate() {
        let p = QpProblem {
            hessian: DMatrix::identity(2, 2),
            linear: DVector::from_row_slice(&[-5.0, -5.0]),
            rows: DMatrix::identity(2, 2),
            lower: DVector::from_row_slice(&[f64::NEG_INFINITY; 2]),
            upper: DVector::from_row_slice(&[1.0, 1.0]),
        };
        let settings = QpSettings { max_iterations: 1, ..QpSettings::default() };
        match solve_qp(&p, &settings) {
            Err(QpError::MaxIterations(sol)) => assert!(!sol.converged),
            other => panic!("unexpected {other:?}"),
        }
    }
}
