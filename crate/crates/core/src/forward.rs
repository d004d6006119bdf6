//! Forward portfolio problems: risk-tolerance and target-return forms.
//!
//! Risk-tolerance form: `min 1/2 x'Qx - r c'x` over the constraint set.
//! Target-return form: `min 1/2 x'Qx` with the return row `c'x >= e`
//! stacked on top of the base constraints.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::qp::{self, ConstraintSet, QpError, QpProblem, QpSolution};

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error("target return {target:.4} exceeds best attainable {max:.4}")]
    Infeasible { target: f64, max: f64 },
    #[error("risk tolerance must be positive, got {0}")]
    NonPositiveTolerance(f64),
    #[error("solver failure: {0}")]
    Solver(#[from] QpError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardMode {
    /// Coefficient on the linear return term; larger favors return.
    RiskTolerance(f64),
    /// Lower bound on the expected portfolio return.
    TargetReturn(f64),
}

/// A fully specified forward problem.
#[derive(Debug, Clone)]
pub struct ForwardSpec {
    pub covariance: DMatrix<f64>,
    pub expected_returns: DVector<f64>,
    pub mode: ForwardMode,
    pub constraints: ConstraintSet,
}

impl ForwardSpec {
    /// Risk-tolerance form under the default long-only + budget constraints.
    pub fn risk_tolerance(covariance: DMatrix<f64>, expected_returns: DVector<f64>, r: f64) -> Self {
        let n = expected_returns.len();
        ForwardSpec {
            covariance,
            expected_returns,
            mode: ForwardMode::RiskTolerance(r),
            constraints: ConstraintSet::long_only_budget(n),
        }
    }

    /// Target-return form under the default long-only + budget constraints.
    pub fn target_return(covariance: DMatrix<f64>, expected_returns: DVector<f64>, e: f64) -> Self {
        let n = expected_returns.len();
        ForwardSpec {
            covariance,
            expected_returns,
            mode: ForwardMode::TargetReturn(e),
            constraints: ConstraintSet::long_only_budget(n),
        }
    }

    pub fn with_constraints(mut self, constraints: ConstraintSet) -> Self {
        self.constraints = constraints;
        self
    }

    fn is_default_simplex(&self) -> bool {
        let n = self.expected_returns.len();
        self.constraints == ConstraintSet::long_only_budget(n)
    }
}

/// Stacks the return row `c'x >= e` on top of `base`, exactly in the order
/// the b-learning inverse formulation expects: the return row comes first.
pub fn stack_constraints(c: &DVector<f64>, e: f64, base: &ConstraintSet) -> ConstraintSet {
    let n = c.len();
    let m = base.len();
    let mut a = DMatrix::zeros(m + 1, n);
    let mut b = DVector::zeros(m + 1);
    let mut equality = Vec::with_capacity(m + 1);
    for j in 0..n {
        a[(0, j)] = c[j];
    }
    b[0] = e;
    equality.push(false);
    for i in 0..m {
        for j in 0..n {
            a[(i + 1, j)] = base.coeff(i, j);
        }
        b[i + 1] = base.rhs(i);
        equality.push(base.is_equality(i));
    }
    ConstraintSet::new(a, b, equality).expect("stacked constraint dimensions are consistent")
}

/// Solves the forward problem, returning the full primal/dual solution so
/// that inverse modules can reuse the duals and active set.
pub fn solve_forward(spec: &ForwardSpec) -> Result<QpSolution, ForwardError> {
    let n = spec.expected_returns.len();
    match spec.mode {
        ForwardMode::RiskTolerance(r) => {
            if r <= 0.0 {
                return Err(ForwardError::NonPositiveTolerance(r));
            }
            let lin = &spec.expected_returns * (-r);
            let problem = QpProblem::new(spec.covariance.clone(), lin, spec.constraints.clone())?;
            Ok(qp::solve_qp(&problem, 1e-8)?)
        }
        ForwardMode::TargetReturn(e) => {
            // Under the default simplex the attainable maximum is max_i c_i;
            // at the boundary the feasible set collapses to the argmax face,
            // where ties split proportionally.
            if spec.is_default_simplex() {
                let max_val = spec.expected_returns.max();
                if e > max_val + 1e-9 {
                    return Err(ForwardError::Infeasible { target: e, max: max_val });
                }
                if e >= max_val - 1e-12 {
                    return argmax_face_solution(spec, max_val);
                }
            }
            let stacked = stack_constraints(&spec.expected_returns, e, &spec.constraints);
            let problem = QpProblem::new(spec.covariance.clone(), DVector::zeros(n), stacked)
                .map_err(ForwardError::Solver)?;
            match qp::solve_qp(&problem, 1e-8) {
                Ok(sol) => Ok(sol),
                Err(QpError::Infeasible { .. }) => Err(ForwardError::Infeasible {
                    target: e,
                    max: f64::NAN,
                }),
                Err(e) => Err(ForwardError::Solver(e)),
            }
        }
    }
}

/// Boundary case `e = max_i c_i`: the only feasible support is the argmax
/// set, so minimize variance over that face. A single argmax asset gets the
/// whole budget; with a degenerate covariance on the face the tie splits
/// deterministically. Duals refer to the reduced problem and are reported
/// as zeros for the stacked rows.
fn argmax_face_solution(spec: &ForwardSpec, max_val: f64) -> Result<QpSolution, ForwardError> {
    let n = spec.expected_returns.len();
    let ties: Vec<usize> = (0..n)
        .filter(|&i| (spec.expected_returns[i] - max_val).abs() <= 1e-12 * (1.0 + max_val.abs()))
        .collect();
    let mut x = DVector::zeros(n);
    if ties.len() == 1 {
        x[ties[0]] = 1.0;
    } else {
        let k = ties.len();
        let q_face = DMatrix::from_fn(k, k, |a, b| spec.covariance[(ties[a], ties[b])]);
        let face = QpProblem::new(
            q_face,
            DVector::zeros(k),
            ConstraintSet::long_only_budget(k),
        )?;
        let sol = qp::solve_qp(&face, 1e-8)?;
        for (a, &i) in ties.iter().enumerate() {
            x[i] = sol.x[a];
        }
    }
    let stacked = stack_constraints(&spec.expected_returns, max_val, &spec.constraints);
    let objective = 0.5 * x.dot(&(&spec.covariance * &x));
    Ok(QpSolution {
        x,
        duals: DVector::zeros(stacked.len()),
        active: vec![0],
        objective,
        status: qp::SolveStatus::Optimal,
        regularized: false,
        iterations: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn symmetric_assets_split_evenly() {
        let spec = ForwardSpec::risk_tolerance(
            DMatrix::identity(2, 2),
            DVector::from_column_slice(&[0.1, 0.1]),
            1.0,
        );
        let sol = solve_forward(&spec).unwrap();
        assert_relative_eq!(sol.x[0], 0.5, epsilon = 1e-9);
        assert_relative_eq!(sol.x[1], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn equal_returns_reduce_to_min_variance() {
        // linear term is constant on the simplex, so any r gives the
        // min-variance point (0.8, 0.2) for Q = diag(1, 4)
        for r in [0.1, 1.0, 7.5] {
            let spec = ForwardSpec::risk_tolerance(
                DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 4.0])),
                DVector::from_column_slice(&[0.05, 0.05]),
                r,
            );
            let sol = solve_forward(&spec).unwrap();
            assert_relative_eq!(sol.x[0], 0.8, epsilon = 1e-7);
            assert_relative_eq!(sol.x[1], 0.2, epsilon = 1e-7);
        }
    }

    #[test]
    fn boundary_target_picks_argmax_assets() {
        let spec = ForwardSpec::target_return(
            DMatrix::identity(3, 3),
            DVector::from_column_slice(&[0.05, 0.2, 0.2]),
            0.2,
        );
        let sol = solve_forward(&spec).unwrap();
        assert_relative_eq!(sol.x[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(sol.x[1], 0.5, epsilon = 1e-12);
        assert_relative_eq!(sol.x[2], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn unreachable_target_is_infeasible() {
        let spec = ForwardSpec::target_return(
            DMatrix::identity(2, 2),
            DVector::from_column_slice(&[0.05, 0.08]),
            0.2,
        );
        match solve_forward(&spec) {
            Err(ForwardError::Infeasible { .. }) => {}
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn stacked_constraints_put_return_row_first() {
        let base = ConstraintSet::long_only_budget(2);
        let c = DVector::from_column_slice(&[0.1, 0.2]);
        let stacked = stack_constraints(&c, 0.15, &base);
        assert_eq!(stacked.len(), 4);
        assert_eq!(stacked.coeff(0, 0), 0.1);
        assert_eq!(stacked.coeff(0, 1), 0.2);
        assert_eq!(stacked.rhs(0), 0.15);
        assert!(!stacked.is_equality(0));
        assert!(stacked.is_equality(3));
    }

    #[test]
    fn sentinel_target_never_binds() {
        let q = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 4.0]));
        let c = DVector::from_column_slice(&[0.1, 0.2]);
        let base = ConstraintSet::long_only_budget(2);
        let stacked = stack_constraints(&c, crate::qp::NEVER_BINDING, &base);
        let with_row = QpProblem::new(q.clone(), DVector::zeros(2), stacked).unwrap();
        let without = QpProblem::new(q, DVector::zeros(2), base).unwrap();
        let a = crate::qp::solve_qp(&with_row, 1e-8).unwrap();
        let b = crate::qp::solve_qp(&without, 1e-8).unwrap();
        assert!((a.x - b.x).amax() <= 1e-10);
    }

    #[test]
    fn modes_are_consistent_on_the_frontier() {
        let q = DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]);
        let c = DVector::from_column_slice(&[0.06, 0.10]);
        for r in [0.2, 0.5, 1.0] {
            let sol_r =
                solve_forward(&ForwardSpec::risk_tolerance(q.clone(), c.clone(), r)).unwrap();
            let achieved = c.dot(&sol_r.x);
            let sol_e =
                solve_forward(&ForwardSpec::target_return(q.clone(), c.clone(), achieved)).unwrap();
            let var_r = sol_r.x.dot(&(&q * &sol_r.x));
            let var_e = sol_e.x.dot(&(&q * &sol_e.x));
            assert!((var_r - var_e).abs() <= 1e-6, "r={r}: {var_r} vs {var_e}");
        }
    }

    #[test]
    fn return_is_monotone_in_risk_tolerance() {
        let q = DMatrix::from_row_slice(2, 2, &[0.05, 0.0, 0.0, 0.02]);
        let c = DVector::from_column_slice(&[0.12, 0.04]);
        let mut prev = f64::NEG_INFINITY;
        for k in 0..20 {
            let r = 0.05 + 0.25 * k as f64;
            let sol = solve_forward(&ForwardSpec::risk_tolerance(q.clone(), c.clone(), r)).unwrap();
            let ret = c.dot(&sol.x);
            assert!(ret >= prev - 1e-9, "r={r}: {ret} < {prev}");
            prev = ret;
            // long-only/budget always hold
            assert!(sol.x.min() >= -1e-9);
            assert!((sol.x.sum() - 1.0).abs() <= 1e-8);
        }
    }
}
