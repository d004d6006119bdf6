//! Mixed-integer QPs arising from big-M complementarity linearization.
//!
//! A [`MiqpProblem`] is a convex QP plus a set of complementarity pairs
//! `(row . w >= rhs, u = w[dual])`: each pair carries one binary indicator
//! `z` with `u <= M z` and `row . w - rhs <= M (1 - z)`. For a fixed binary
//! pattern the continuous restriction is a convex QP; the pattern space is
//! searched either exhaustively (the oracle) or by best-first branch and
//! bound on the continuous relaxation, where the indicator is eliminated:
//! `z in [0,1]` exists iff `u + (row . w - rhs) <= M`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use thiserror::Error;

use crate::qp::{self, ConstraintSet, QpError, QpProblem};

/// Indicators beyond this count refuse to enumerate.
pub const ENUMERATE_LIMIT: usize = 24;

#[derive(Debug, Error)]
pub enum MiqpError {
    #[error("no binary pattern admits a feasible continuous solution")]
    Infeasible,
    #[error("{pairs} complementarity pairs exceed the enumeration limit {limit}")]
    PatternLimitExceeded { pairs: usize, limit: usize },
    #[error("pattern {pattern:#b}: {source}")]
    Solver { pattern: u64, source: QpError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MiqpStrategy {
    /// Exhaustive pattern enumeration; the correctness oracle.
    Enumerate,
    /// Best-first branch and bound on the relaxed complementarity coupling.
    BranchAndBound,
}

/// One linearized complementarity pair.
#[derive(Debug, Clone)]
pub struct ComplementarityPair {
    /// Constraint row over the full variable vector `w`.
    pub row: DVector<f64>,
    pub rhs: f64,
    /// Index of the paired dual variable within `w`.
    pub dual: usize,
}

/// Quadratic objective, always-on constraints, and complementarity pairs.
#[derive(Debug, Clone)]
pub struct MiqpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    /// Constant term of the objective, included in reported values.
    pub constant: f64,
    pub fixed: ConstraintSet,
    pub pairs: Vec<ComplementarityPair>,
    pub big_m: f64,
}

#[derive(Debug, Clone)]
pub struct MiqpSolution {
    pub w: DVector<f64>,
    /// `pattern[j]` is true when pair `j`'s constraint row is active.
    pub pattern: Vec<bool>,
    pub objective: f64,
    /// Number of patterns attaining the optimum within 1e-8 (enumerate) or
    /// observed doing so during the search (branch and bound).
    pub ties: usize,
    /// Continuous subproblems solved.
    pub nodes: usize,
}

impl MiqpProblem {
    fn dim(&self) -> usize {
        self.linear.len()
    }

    /// QP restriction for a fully fixed pattern.
    fn pattern_qp(&self, pattern: &[bool]) -> QpProblem {
        let dim = self.dim();
        let mut cons = self.fixed.clone();
        for (j, pair) in self.pairs.iter().enumerate() {
            let row_vec: Vec<f64> = pair.row.iter().cloned().collect();
            if pattern[j] {
                // row active, dual bounded by M
                cons.push_row(&row_vec, pair.rhs, true);
                let mut cap = vec![0.0; dim];
                cap[pair.dual] = -1.0;
                cons.push_row(&cap, -self.big_m, false);
            } else {
                // row slack within M, dual pinned to zero
                cons.push_row(&row_vec, pair.rhs, false);
                let neg: Vec<f64> = row_vec.iter().map(|v| -v).collect();
                cons.push_row(&neg, -(pair.rhs + self.big_m), false);
                let mut pin = vec![0.0; dim];
                pin[pair.dual] = 1.0;
                cons.push_row(&pin, 0.0, true);
            }
        }
        QpProblem::new(self.hessian.clone(), self.linear.clone(), cons)
            .expect("pattern restriction dimensions are consistent")
    }

    /// QP relaxation for a node where some indicators are still free.
    fn node_qp(&self, fixed: &[Option<bool>]) -> QpProblem {
        let dim = self.dim();
        let mut cons = self.fixed.clone();
        for (j, pair) in self.pairs.iter().enumerate() {
            let row_vec: Vec<f64> = pair.row.iter().cloned().collect();
            match fixed[j] {
                Some(true) => {
                    cons.push_row(&row_vec, pair.rhs, true);
                    let mut cap = vec![0.0; dim];
                    cap[pair.dual] = -1.0;
                    cons.push_row(&cap, -self.big_m, false);
                }
                Some(false) => {
                    cons.push_row(&row_vec, pair.rhs, false);
                    let neg: Vec<f64> = row_vec.iter().map(|v| -v).collect();
                    cons.push_row(&neg, -(pair.rhs + self.big_m), false);
                    let mut pin = vec![0.0; dim];
                    pin[pair.dual] = 1.0;
                    cons.push_row(&pin, 0.0, true);
                }
                None => {
                    cons.push_row(&row_vec, pair.rhs, false);
                    // u + (row.w - rhs) <= M  <=>  -u - row.w >= -(M + rhs)
                    let mut coupled: Vec<f64> = row_vec.iter().map(|v| -v).collect();
                    coupled[pair.dual] -= 1.0;
                    cons.push_row(&coupled, -(self.big_m + pair.rhs), false);
                }
            }
        }
        QpProblem::new(self.hessian.clone(), self.linear.clone(), cons)
            .expect("node relaxation dimensions are consistent")
    }

    /// Cheap pre-filter: a pattern whose implied equality system is
    /// inconsistent cannot be feasible. Conservative by a wide tolerance.
    fn pattern_consistent(&self, pattern: &[bool]) -> bool {
        let dim = self.dim();
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        for i in 0..self.fixed.len() {
            if self.fixed.is_equality(i) {
                rows.push((
                    (0..dim).map(|j| self.fixed.coeff(i, j)).collect(),
                    self.fixed.rhs(i),
                ));
            }
        }
        for (j, pair) in self.pairs.iter().enumerate() {
            if pattern[j] {
                rows.push((pair.row.iter().cloned().collect(), pair.rhs));
            } else {
                let mut pin = vec![0.0; dim];
                pin[pair.dual] = 1.0;
                rows.push((pin, 0.0));
            }
        }
        if rows.is_empty() {
            return true;
        }
        let e = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i].0[j]);
        let d = DVector::from_fn(rows.len(), |i, _| rows[i].1);
        let resid = crate::qp::least_squares_residual(&e, &d);
        resid <= 1e-6 * (1.0 + d.amax())
    }
}

/// Globally minimizes the MIQP over binary patterns.
pub fn solve_miqp(
    problem: &MiqpProblem,
    strategy: MiqpStrategy,
    tol: f64,
) -> Result<MiqpSolution, MiqpError> {
    match strategy {
        MiqpStrategy::Enumerate => enumerate(problem, tol),
        MiqpStrategy::BranchAndBound => branch_and_bound(problem, tol),
    }
}

fn pattern_bits(id: u64, m: usize) -> Vec<bool> {
    (0..m).map(|j| (id >> j) & 1 == 1).collect()
}

fn enumerate(problem: &MiqpProblem, tol: f64) -> Result<MiqpSolution, MiqpError> {
    let m = problem.pairs.len();
    if m > ENUMERATE_LIMIT {
        return Err(MiqpError::PatternLimitExceeded {
            pairs: m,
            limit: ENUMERATE_LIMIT,
        });
    }
    let total: u64 = 1 << m;
    let results: Vec<Result<Option<(f64, u64, DVector<f64>)>, MiqpError>> = (0..total)
        .into_par_iter()
        .map(|id| {
            let pattern = pattern_bits(id, m);
            if !problem.pattern_consistent(&pattern) {
                return Ok(None);
            }
            let qp_problem = problem.pattern_qp(&pattern);
            match qp::solve_qp(&qp_problem, tol) {
                Ok(sol) => Ok(Some((sol.objective + problem.constant, id, sol.x))),
                Err(QpError::Infeasible { .. }) => Ok(None),
                Err(source) => Err(MiqpError::Solver { pattern: id, source }),
            }
        })
        .collect();

    let mut evaluated = 0usize;
    let mut best: Option<(f64, u64, DVector<f64>)> = None;
    let mut feasible: Vec<(f64, u64)> = Vec::new();
    for r in results {
        match r? {
            None => {}
            Some((obj, id, w)) => {
                evaluated += 1;
                feasible.push((obj, id));
                let better = match &best {
                    None => true,
                    Some((bobj, bid, _)) => {
                        obj < bobj - 1e-12 || (obj <= bobj + 1e-12 && id < *bid)
                    }
                };
                if better {
                    best = Some((obj, id, w));
                }
            }
        }
    }
    let (objective, id, w) = best.ok_or(MiqpError::Infeasible)?;
    let ties = feasible
        .iter()
        .filter(|(obj, _)| (obj - objective).abs() <= 1e-8 * (1.0 + objective.abs()))
        .count();
    Ok(MiqpSolution {
        w,
        pattern: pattern_bits(id, problem.pairs.len()),
        objective,
        ties,
        nodes: evaluated,
    })
}

struct Node {
    bound: f64,
    id: u64,
    fixed: Vec<Option<bool>>,
    w: DVector<f64>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // BinaryHeap is a max-heap; invert so the smallest bound pops first,
    // breaking ties toward the oldest node for determinism.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.id.cmp(&self.id))
    }
}

fn branch_and_bound(problem: &MiqpProblem, tol: f64) -> Result<MiqpSolution, MiqpError> {
    let m = problem.pairs.len();
    let comp_tol = 1e-7 * (1.0 + problem.big_m.abs().sqrt());
    let mut next_id = 0u64;
    let mut heap: BinaryHeap<Node> = BinaryHeap::new();
    let mut nodes = 0usize;

    let push = |heap: &mut BinaryHeap<Node>,
                    fixed: Vec<Option<bool>>,
                    next_id: &mut u64,
                    nodes: &mut usize|
     -> Result<(), MiqpError> {
        let relax = problem.node_qp(&fixed);
        *nodes += 1;
        match qp::solve_qp(&relax, tol) {
            Ok(sol) => {
                heap.push(Node {
                    bound: sol.objective + problem.constant,
                    id: *next_id,
                    fixed,
                    w: sol.x,
                });
                *next_id += 1;
                Ok(())
            }
            Err(QpError::Infeasible { .. }) => Ok(()),
            Err(source) => Err(MiqpError::Solver {
                pattern: u64::MAX,
                source,
            }),
        }
    };

    push(&mut heap, vec![None; m], &mut next_id, &mut nodes)?;

    let mut incumbent: Option<(f64, Vec<bool>, DVector<f64>)> = None;
    let mut ties = 0usize;

    while let Some(node) = heap.pop() {
        if let Some((inc, _, _)) = &incumbent {
            if node.bound >= inc - 1e-9 {
                break; // best-first: every remaining bound is at least this
            }
        }
        // most violated complementarity among relaxed pairs
        let mut worst: Option<(usize, f64)> = None;
        for (j, pair) in problem.pairs.iter().enumerate() {
            if node.fixed[j].is_some() {
                continue;
            }
            let u = node.w[pair.dual];
            let slack = pair.row.dot(&node.w) - pair.rhs;
            let viol = u.min(slack);
            if viol > comp_tol && worst.map_or(true, |(_, v)| viol > v) {
                worst = Some((j, viol));
            }
        }
        match worst {
            None => {
                // complementary already: certify the implied full pattern
                let pattern: Vec<bool> = (0..m)
                    .map(|j| match node.fixed[j] {
                        Some(b) => b,
                        None => {
                            let slack = problem.pairs[j].row.dot(&node.w) - problem.pairs[j].rhs;
                            slack <= comp_tol
                        }
                    })
                    .collect();
                let qp_problem = problem.pattern_qp(&pattern);
                nodes += 1;
                match qp::solve_qp(&qp_problem, tol) {
                    Ok(sol) => {
                        let obj = sol.objective + problem.constant;
                        match &mut incumbent {
                            None => incumbent = Some((obj, pattern, sol.x)),
                            Some((inc, ipat, iw)) => {
                                if (obj - *inc).abs() <= 1e-8 * (1.0 + inc.abs()) {
                                    ties += 1;
                                }
                                if obj < *inc - 1e-12 {
                                    *inc = obj;
                                    *ipat = pattern;
                                    *iw = sol.x;
                                }
                            }
                        }
                    }
                    Err(QpError::Infeasible { .. }) => {}
                    Err(source) => {
                        return Err(MiqpError::Solver {
                            pattern: u64::MAX,
                            source,
                        })
                    }
                }
            }
            Some((j, _)) => {
                for b in [false, true] {
                    let mut fixed = node.fixed.clone();
                    fixed[j] = Some(b);
                    push(&mut heap, fixed, &mut next_id, &mut nodes)?;
                }
            }
        }
    }

    let (objective, pattern, w) = incumbent.ok_or(MiqpError::Infeasible)?;
    Ok(MiqpSolution {
        w,
        pattern,
        objective,
        ties: ties + 1,
        nodes,
    })
}
