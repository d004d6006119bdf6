//! Column-pivoted Householder QR with a full orthogonal factor.
//!
//! nalgebra's QR variants only expose the thin factor, which is useless for
//! extracting null-space bases of working-set matrices. This factorization
//! keeps the full `n x n` Q so that columns `rank..n` form an orthonormal
//! basis of the null space of the transposed input.

use nalgebra::{DMatrix, DVector};

pub(crate) struct PivotedQr {
    /// Full orthogonal factor, n x n.
    q: DMatrix<f64>,
    /// Upper-trapezoidal factor, n x k.
    r: DMatrix<f64>,
    /// Column permutation: position j holds original column `perm[j]`.
    perm: Vec<usize>,
    rank: usize,
    n: usize,
    k: usize,
}

impl PivotedQr {
    /// Factors `m` (n x k) as `m * P = Q * R` with column pivoting.
    pub fn new(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let k = m.ncols();
        let mut r = m.clone();
        let mut perm: Vec<usize> = (0..k).collect();
        let steps = n.min(k);
        // reflectors stored as (offset, v); H = I - 2 v v^T / |v|^2 on rows offset..
        let mut reflectors: Vec<(usize, DVector<f64>)> = Vec::with_capacity(steps);

        let mut pivot_scale = 0.0f64;
        for j in 0..steps {
            // pivot: remaining column with the largest trailing norm, smallest index on ties
            let mut best = j;
            let mut best_norm = trailing_norm(&r, j, j);
            for c in j + 1..k {
                let nc = trailing_norm(&r, j, c);
                if nc > best_norm * (1.0 + 1e-12) {
                    best = c;
                    best_norm = nc;
                }
            }
            if best != j {
                r.swap_columns(j, best);
                perm.swap(j, best);
            }
            if j == 0 {
                pivot_scale = best_norm;
            }
            if best_norm <= rank_tol(n, k, pivot_scale) {
                break;
            }
            // Householder vector for column j, rows j..n
            let mut v = DVector::zeros(n - j);
            for i in j..n {
                v[i - j] = r[(i, j)];
            }
            let alpha = if v[0] >= 0.0 { -v.norm() } else { v.norm() };
            v[0] -= alpha;
            let vn2 = v.norm_squared();
            if vn2 > 0.0 {
                for c in j..k {
                    let mut dot = 0.0;
                    for i in j..n {
                        dot += v[i - j] * r[(i, c)];
                    }
                    let w = 2.0 * dot / vn2;
                    for i in j..n {
                        r[(i, c)] -= w * v[i - j];
                    }
                }
            }
            r[(j, j)] = alpha;
            for i in j + 1..n {
                r[(i, j)] = 0.0;
            }
            reflectors.push((j, v));
        }

        let rank = {
            let tol = rank_tol(n, k, pivot_scale);
            let mut rk = 0;
            for j in 0..reflectors.len() {
                if r[(j, j)].abs() > tol {
                    rk = j + 1;
                }
            }
            rk
        };

        // accumulate the full Q = H_0 H_1 ... applied to the identity
        let mut q = DMatrix::identity(n, n);
        for (offset, v) in reflectors.iter().rev() {
            let vn2 = v.norm_squared();
            if vn2 == 0.0 {
                continue;
            }
            for c in 0..n {
                let mut dot = 0.0;
                for i in *offset..n {
                    dot += v[i - offset] * q[(i, c)];
                }
                let w = 2.0 * dot / vn2;
                for i in *offset..n {
                    q[(i, c)] -= w * v[i - offset];
                }
            }
        }

        PivotedQr { q, r, perm, rank, n, k }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Orthonormal basis of the null space of `m^T`, i.e. the orthogonal
    /// complement of the column span of `m`. Shape n x (n - rank).
    pub fn null_space(&self) -> DMatrix<f64> {
        let cols = self.n - self.rank;
        let mut z = DMatrix::zeros(self.n, cols);
        for c in 0..cols {
            for i in 0..self.n {
                z[(i, c)] = self.q[(i, self.rank + c)];
            }
        }
        z
    }

    /// Basic least-squares solution of `m * u = rhs`; free components are
    /// zero. Returns `(u, residual_norm)`.
    pub fn solve_ls(&self, rhs: &DVector<f64>) -> (DVector<f64>, f64) {
        let y = self.q.transpose() * rhs;
        let mut w = DVector::zeros(self.k);
        for i in (0..self.rank).rev() {
            let mut acc = y[i];
            for j in i + 1..self.rank {
                acc -= self.r[(i, j)] * w[j];
            }
            w[i] = acc / self.r[(i, i)];
        }
        let mut u = DVector::zeros(self.k);
        for (pos, &orig) in self.perm.iter().enumerate() {
            u[orig] = w[pos];
        }
        let mut resid = 0.0;
        for i in self.rank..self.n {
            resid += y[i] * y[i];
        }
        (u, resid.sqrt())
    }
}

fn trailing_norm(r: &DMatrix<f64>, from_row: usize, col: usize) -> f64 {
    let mut s = 0.0;
    for i in from_row..r.nrows() {
        s += r[(i, col)] * r[(i, col)];
    }
    s.sqrt()
}

fn rank_tol(n: usize, k: usize, scale: f64) -> f64 {
    f64::EPSILON * (n.max(k) as f64) * scale.max(1e-30)
}
