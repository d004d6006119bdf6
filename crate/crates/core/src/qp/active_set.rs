//! Primal active-set engine for dense convex QPs.
//!
//! Works on problems `min 1/2 x'Qx + q'x, A x >= b` (equality rows flagged)
//! with Q symmetric PSD. Steps are computed in the null space of the working
//! set via a symmetric eigendecomposition of the reduced Hessian, so singular
//! Q (rank-deficient covariances, flat dual blocks of inverse problems) is
//! handled without ridge terms. Degenerate ties use Bland's smallest-index
//! rule for both entering and leaving rows.

use nalgebra::{DMatrix, DVector};

use super::dense::PivotedQr;
use super::ConstraintSet;

pub(crate) struct EngineOutcome {
    pub x: DVector<f64>,
    pub duals: DVector<f64>,
    pub working: Vec<usize>,
    pub iterations: usize,
}

pub(crate) enum EngineError {
    Unbounded,
    MaxIterations(usize),
}

/// Runs the active-set iteration from a feasible `x0`.
///
/// `skip[i]` marks structurally never-binding rows (sentinel bounds); they
/// are excluded from the working set, blocking tests and duals.
pub(crate) fn run(
    q: &DMatrix<f64>,
    lin: &DVector<f64>,
    cons: &ConstraintSet,
    skip: &[bool],
    mut x: DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<EngineOutcome, EngineError> {
    let n = x.len();
    let m = cons.len();
    let mut in_working = vec![false; m];
    let mut working: Vec<usize> = Vec::new();
    for i in 0..m {
        if cons.is_equality(i) && !skip[i] {
            in_working[i] = true;
            working.push(i);
        }
    }

    let grad_scale = 1.0 + lin.amax();
    let ray_tol = 0.1 * tol * grad_scale;

    for iter in 0..max_iter {
        let g = q * &x + lin;
        let (step, is_ray) = compute_step(q, &g, cons, &working, n, ray_tol);

        let step_small = step.amax() <= 1e-11 * (1.0 + x.amax());
        if !is_ray && step_small {
            // candidate optimum: inspect multipliers of the working set
            let a_w = rows_matrix(cons, &working, n);
            let qr = PivotedQr::new(&a_w.transpose());
            let (u_w, _resid) = qr.solve_ls(&g);
            let drop_tol = 1e-9 * grad_scale;
            let mut drop: Option<(usize, usize)> = None; // (row index, position)
            for (pos, &row) in working.iter().enumerate() {
                if cons.is_equality(row) {
                    continue;
                }
                if u_w[pos] < -drop_tol {
                    // Bland: smallest constraint index among negatives
                    if drop.map_or(true, |(r, _)| row < r) {
                        drop = Some((row, pos));
                    }
                }
            }
            match drop {
                Some((row, pos)) => {
                    working.remove(pos);
                    in_working[row] = false;
                    continue;
                }
                None => {
                    let mut duals = DVector::zeros(m);
                    for (pos, &row) in working.iter().enumerate() {
                        let v = u_w[pos];
                        duals[row] = if cons.is_equality(row) { v } else { v.max(0.0) };
                    }
                    let mut active = working.clone();
                    active.sort_unstable();
                    return Ok(EngineOutcome {
                        x,
                        duals,
                        working: active,
                        iterations: iter,
                    });
                }
            }
        }

        // largest feasible step along `step`
        let mut alpha_min = f64::INFINITY;
        for i in 0..m {
            if in_working[i] || skip[i] || cons.is_equality(i) {
                continue;
            }
            let dir = cons.row_dot(i, &step);
            let scale = 1e-13 * (1.0 + cons.row_norm(i) * step.norm());
            if dir < -scale {
                let slack = (cons.row_dot(i, &x) - cons.rhs(i)).max(0.0);
                let alpha = slack / (-dir);
                if alpha < alpha_min {
                    alpha_min = alpha;
                }
            }
        }
        // Bland: smallest row index within a whisker of the minimizing step
        let mut blocker: Option<usize> = None;
        if alpha_min.is_finite() {
            let tie = alpha_min * (1.0 + 1e-10) + 1e-14;
            for i in 0..m {
                if in_working[i] || skip[i] || cons.is_equality(i) {
                    continue;
                }
                let dir = cons.row_dot(i, &step);
                let scale = 1e-13 * (1.0 + cons.row_norm(i) * step.norm());
                if dir < -scale {
                    let slack = (cons.row_dot(i, &x) - cons.rhs(i)).max(0.0);
                    if slack / (-dir) <= tie {
                        blocker = Some(i);
                        break;
                    }
                }
            }
        }

        if is_ray {
            match blocker {
                None => return Err(EngineError::Unbounded),
                Some(row) => {
                    x += alpha_min * &step;
                    in_working[row] = true;
                    working.push(row);
                }
            }
        } else if alpha_min <= 1.0 {
            x += alpha_min * &step;
            if let Some(row) = blocker {
                in_working[row] = true;
                working.push(row);
            }
        } else {
            x += &step;
        }
    }
    Err(EngineError::MaxIterations(max_iter))
}

/// Step in the null space of the working set. Returns `(p, is_ray)`:
/// `is_ray` marks an unbounded descent direction of zero curvature.
fn compute_step(
    q: &DMatrix<f64>,
    g: &DVector<f64>,
    cons: &ConstraintSet,
    working: &[usize],
    n: usize,
    ray_tol: f64,
) -> (DVector<f64>, bool) {
    let z = if working.is_empty() {
        DMatrix::identity(n, n)
    } else {
        let a_w = rows_matrix(cons, working, n);
        PivotedQr::new(&a_w.transpose()).null_space()
    };
    let free = z.ncols();
    if free == 0 {
        return (DVector::zeros(n), false);
    }
    let h = {
        let raw = z.transpose() * q * &z;
        (&raw + raw.transpose()) * 0.5
    };
    let gz = z.transpose() * g;
    let eig = h.symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let flat_tol = 1e-11 * lam_max.max(1.0);

    // descent ray along a flat direction with nonzero slope?
    let mut ray: Option<(usize, f64)> = None;
    for i in 0..free {
        if eig.eigenvalues[i] <= flat_tol {
            let slope = eig.eigenvectors.column(i).dot(&gz);
            if slope.abs() > ray_tol && ray.map_or(true, |(_, s)| slope.abs() > s.abs()) {
                ray = Some((i, slope));
            }
        }
    }
    if let Some((i, slope)) = ray {
        let dir = eig.eigenvectors.column(i).into_owned() * (-slope.signum());
        return (&z * dir, true);
    }

    // Newton step on the curved subspace (pseudo-inverse on flat directions)
    let mut pz = DVector::zeros(free);
    for i in 0..free {
        let lam = eig.eigenvalues[i];
        if lam > flat_tol {
            let coef = eig.eigenvectors.column(i).dot(&gz) / lam;
            pz.axpy(-coef, &eig.eigenvectors.column(i).into_owned(), 1.0);
        }
    }
    (&z * pz, false)
}

fn rows_matrix(cons: &ConstraintSet, rows: &[usize], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows.len(), n);
    for (k, &i) in rows.iter().enumerate() {
        for j in 0..n {
            m[(k, j)] = cons.coeff(i, j);
        }
    }
    m
}
