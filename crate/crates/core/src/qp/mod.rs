//! Dense convex quadratic programming with exact duals.
//!
//! Problems take the form `min 1/2 x'Qx + q'x` over `A x >= b`, where
//! individual rows may be flagged as equalities. The solver is a primal
//! active-set method: feasibility is established by a slack-variable
//! phase-1 QP solved with the same engine, after which working sets are
//! updated until the KKT conditions hold. Exact active sets and dual
//! variables are the point -- the inverse-optimization layer consumes them.

mod active_set;
mod dense;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rows with a right-hand side at or below this sentinel never bind: they
/// are excluded from working sets, blocking tests and duals.
pub const NEVER_BINDING: f64 = -1e25;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("infeasible constraints (max violation {violation:.3e})")]
    Infeasible { violation: f64 },
    #[error("objective unbounded below along a feasible ray")]
    Unbounded,
    #[error("active-set iteration limit {0} exceeded")]
    MaxIterations(usize),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("quadratic term not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
}

/// Linear constraints `A x >= b` with equality rows flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    a: DMatrix<f64>,
    b: DVector<f64>,
    equality: Vec<bool>,
}

impl ConstraintSet {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, equality: Vec<bool>) -> Result<Self, QpError> {
        if a.nrows() != b.len() || a.nrows() != equality.len() {
            return Err(QpError::Shape(format!(
                "constraint rows {} vs rhs {} vs flags {}",
                a.nrows(),
                b.len(),
                equality.len()
            )));
        }
        if a.nrows() == 0 {
            return Err(QpError::Shape("constraint set must have m >= 1 rows".into()));
        }
        Ok(ConstraintSet { a, b, equality })
    }

    /// Long-only rows `x_i >= 0` followed by the budget equality `sum x = 1`.
    pub fn long_only_budget(n: usize) -> Self {
        let mut a = DMatrix::zeros(n + 1, n);
        let mut b = DVector::zeros(n + 1);
        let mut equality = vec![false; n + 1];
        for i in 0..n {
            a[(i, i)] = 1.0;
        }
        for j in 0..n {
            a[(n, j)] = 1.0;
        }
        b[n] = 1.0;
        equality[n] = true;
        ConstraintSet { a, b, equality }
    }

    pub fn push_row(&mut self, coeffs: &[f64], rhs: f64, is_equality: bool) {
        assert_eq!(coeffs.len(), self.n_vars());
        let m = self.a.nrows();
        self.a = self.a.clone().insert_row(m, 0.0);
        for (j, &c) in coeffs.iter().enumerate() {
            self.a[(m, j)] = c;
        }
        self.b = self.b.clone().insert_row(m, rhs);
        self.equality.push(is_equality);
    }

    pub fn len(&self) -> usize {
        self.a.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.a.nrows() == 0
    }

    pub fn n_vars(&self) -> usize {
        self.a.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn rhs_vector(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn is_equality(&self, row: usize) -> bool {
        self.equality[row]
    }

    pub fn rhs(&self, row: usize) -> f64 {
        self.b[row]
    }

    pub fn coeff(&self, row: usize, col: usize) -> f64 {
        self.a[(row, col)]
    }

    pub fn row_dot(&self, row: usize, x: &DVector<f64>) -> f64 {
        self.a.row(row).transpose().dot(x)
    }

    pub fn row_norm(&self, row: usize) -> f64 {
        self.a.row(row).norm()
    }

    fn never_binding(&self, row: usize) -> bool {
        !self.equality[row] && self.b[row] <= NEVER_BINDING
    }

    fn skip_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.never_binding(i)).collect()
    }

    /// Max violation of the set at `x` (never-binding rows excluded).
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.len() {
            if self.never_binding(i) {
                continue;
            }
            let slack = self.row_dot(i, x) - self.b[i];
            let v = if self.equality[i] { slack.abs() } else { (-slack).max(0.0) };
            worst = worst.max(v);
        }
        worst
    }
}

/// `min 1/2 x'Qx + q'x` subject to a [`ConstraintSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub constraints: ConstraintSet,
}

impl QpProblem {
    pub fn new(q: DMatrix<f64>, lin: DVector<f64>, constraints: ConstraintSet) -> Result<Self, QpError> {
        let n = lin.len();
        if q.nrows() != n || q.ncols() != n {
            return Err(QpError::Shape(format!(
                "Q is {}x{}, linear term has {} entries",
                q.nrows(),
                q.ncols(),
                n
            )));
        }
        if constraints.n_vars() != n {
            return Err(QpError::Shape(format!(
                "constraints over {} vars, objective over {}",
                constraints.n_vars(),
                n
            )));
        }
        let asym = (&q - q.transpose()).amax();
        if asym > 1e-10 * (1.0 + q.amax()) {
            return Err(QpError::NotSymmetric(asym));
        }
        Ok(QpProblem { q, lin, constraints })
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q * x)) + self.lin.dot(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// Primal/dual solution of a QP.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per constraint row; >= 0 on inequality rows.
    pub duals: DVector<f64>,
    /// Rows in the final working set, ascending.
    pub active: Vec<usize>,
    pub objective: f64,
    pub status: SolveStatus,
    /// Set when the solve needed a ridge fallback on Q.
    pub regularized: bool,
    pub iterations: usize,
}

/// KKT residuals of a candidate point.
#[derive(Debug, Clone, Copy)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Solves the QP to tolerance `tol` (1e-8 is the conventional choice).
pub fn solve_qp(problem: &QpProblem, tol: f64) -> Result<QpSolution, QpError> {
    let skip = problem.constraints.skip_mask();
    let x0 = phase1(&problem.constraints, &skip, tol)?;
    solve_from(problem, &skip, x0, tol)
}

fn solve_from(
    problem: &QpProblem,
    skip: &[bool],
    x0: DVector<f64>,
    tol: f64,
) -> Result<QpSolution, QpError> {
    let n = problem.lin.len();
    let m = problem.constraints.len();
    let max_iter = 50 * (n + m + 10);
    let q_sym = (&problem.q + problem.q.transpose()) * 0.5;

    match active_set::run(&q_sym, &problem.lin, &problem.constraints, skip, x0.clone(), tol, max_iter)
    {
        Ok(out) => Ok(finish(problem, out, false)),
        Err(active_set::EngineError::Unbounded) => Err(QpError::Unbounded),
        Err(active_set::EngineError::MaxIterations(_)) => {
            // ridge fallback for Q that is singular on the constraint surface
            let ridge = &q_sym + DMatrix::identity(n, n) * 1e-10;
            match active_set::run(&ridge, &problem.lin, &problem.constraints, skip, x0, tol, max_iter)
            {
                Ok(out) => Ok(finish(problem, out, true)),
                Err(active_set::EngineError::Unbounded) => Err(QpError::Unbounded),
                Err(active_set::EngineError::MaxIterations(k)) => Err(QpError::MaxIterations(k)),
            }
        }
    }
}

fn finish(problem: &QpProblem, out: active_set::EngineOutcome, regularized: bool) -> QpSolution {
    let objective = problem.objective(&out.x);
    QpSolution {
        x: out.x,
        duals: out.duals,
        active: out.working,
        objective,
        status: SolveStatus::Optimal,
        regularized,
        iterations: out.iterations,
    }
}

/// Phase-1: minimize `1/2 |s|^2` over `A x + s {>=,=} b`, starting from
/// `x = 0` with slacks absorbing every row. Returns a feasible point or
/// the infeasibility certificate.
fn phase1(cons: &ConstraintSet, skip: &[bool], tol: f64) -> Result<DVector<f64>, QpError> {
    let n = cons.n_vars();
    let m = cons.len();
    let dim = n + m;

    let mut q = DMatrix::zeros(dim, dim);
    for i in 0..m {
        q[(n + i, n + i)] = 1.0;
    }
    let lin = DVector::zeros(dim);

    let mut a = DMatrix::zeros(m, dim);
    let mut equality = Vec::with_capacity(m);
    for i in 0..m {
        for j in 0..n {
            a[(i, j)] = cons.coeff(i, j);
        }
        a[(i, n + i)] = 1.0;
        equality.push(cons.is_equality(i));
    }
    let aug = ConstraintSet {
        a,
        b: cons.b.clone(),
        equality,
    };

    let mut x0 = DVector::zeros(dim);
    for i in 0..m {
        if skip[i] {
            continue;
        }
        x0[n + i] = if cons.is_equality(i) { cons.rhs(i) } else { cons.rhs(i).max(0.0) };
    }

    let max_iter = 50 * (dim + m + 10);
    let out =
        active_set::run(&q, &lin, &aug, skip, x0, tol, max_iter).map_err(|e| match e {
            active_set::EngineError::MaxIterations(k) => QpError::MaxIterations(k),
            // the phase-1 objective is bounded below, a ray cannot persist
            active_set::EngineError::Unbounded => QpError::MaxIterations(max_iter),
        })?;

    let x = DVector::from_fn(n, |i, _| out.x[i]);
    let b_scale = 1.0 + cons.b.iter().filter(|v| v.is_finite()).fold(0.0f64, |acc, v| acc.max(v.abs()));
    let violation = cons.violation(&x);
    if violation <= tol * b_scale {
        Ok(x)
    } else {
        Err(QpError::Infeasible { violation })
    }
}

/// Residual norm of the basic least-squares solution of `m w = d`;
/// near zero iff the system is consistent.
pub(crate) fn least_squares_residual(m: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    dense::PivotedQr::new(m).solve_ls(d).1
}

/// Computes KKT residuals of `candidate` for `problem`.
///
/// Stationarity is compared against `tol * (1 + |q|_inf)`, the remaining
/// residuals against `tol` directly.
pub fn check_kkt(problem: &QpProblem, candidate: &QpSolution, tol: f64) -> KktReport {
    let cons = &problem.constraints;
    let grad = &problem.q * &candidate.x + &problem.lin;
    let at_u = cons.matrix().transpose() * &candidate.duals;
    let stationarity = (grad - at_u).amax();

    let mut primal = 0.0f64;
    let mut dual = 0.0f64;
    let mut complementarity = 0.0f64;
    for i in 0..cons.len() {
        if cons.never_binding(i) {
            continue;
        }
        let slack = cons.row_dot(i, &candidate.x) - cons.rhs(i);
        if cons.is_equality(i) {
            primal = primal.max(slack.abs());
        } else {
            primal = primal.max((-slack).max(0.0));
            dual = dual.max((-candidate.duals[i]).max(0.0));
            complementarity = complementarity.max((candidate.duals[i] * slack).abs());
        }
    }

    let pass = stationarity <= tol * (1.0 + problem.lin.amax())
        && primal <= tol
        && dual <= tol
        && complementarity <= tol;
    KktReport {
        stationarity,
        primal,
        dual,
        complementarity,
        tol,
        pass,
    }
}
