//! Forward-consistent synthetic instances for round-trip validation.
//!
//! Instances are built backwards: draw an interior allocation and a
//! covariance with a spread-out spectrum, then choose expected returns so
//! the KKT system holds exactly at the drawn allocation for the prescribed
//! risk tolerance. The allocation is then the exact forward optimum, which
//! makes recovery errors attributable to the inverse solver alone.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// One synthetic inverse-problem instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub covariance: DMatrix<f64>,
    pub expected_returns: DVector<f64>,
    /// Exact forward optimum for `(covariance, expected_returns, r_star)`
    /// under long-only + budget constraints; strictly interior.
    pub holdings: DVector<f64>,
    pub r_star: f64,
}

/// Random orthogonal factor from the QR of a Gaussian matrix.
fn random_orthogonal<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    g.qr().q()
}

/// Draws an instance whose risk tolerance is well identified.
///
/// The softest eigendirection of the covariance is given a small but
/// controlled overlap with the budget direction, which places the
/// minimum-variance portfolio far outside the simplex. The optimal
/// allocation then moves steeply with `r`, so an observation-fit term
/// pins the tolerance tightly. Requires `n >= 2`.
pub fn identifiable_instance<R: Rng>(n: usize, r_star: f64, rng: &mut R) -> Instance {
    assert!(n >= 2, "instances need at least two assets");
    // interior allocation, bounded away from the faces
    let raw = DVector::from_fn(n, |_, _| rng.random_range(0.3..1.0));
    let holdings = &raw / raw.sum();

    // soft eigendirection: mostly orthogonal to 1, small overlap
    let one_hat = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut w: DVector<f64> = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    w -= &one_hat * w.dot(&one_hat);
    if w.norm() < 1e-9 {
        w[0] += 1.0;
        w[n - 1] -= 1.0;
        w -= &one_hat * w.dot(&one_hat);
    }
    w /= w.norm();
    let overlap = rng.random_range(0.03..0.10);
    let mut v_min = w + &one_hat * overlap;
    v_min /= v_min.norm();

    // orthonormal basis whose first column is v_min: Householder mapping
    // e0 -> v_min, remaining columns scrambled inside the complement
    let mut u = v_min.clone();
    u[0] -= 1.0;
    let basis = if u.norm() < 1e-12 {
        DMatrix::identity(n, n)
    } else {
        let un = &u / u.norm();
        DMatrix::identity(n, n) - &un * un.transpose() * 2.0
    };
    let rot = random_orthogonal(n - 1, rng);
    let v = DMatrix::from_fn(n, n, |i, c| {
        if c == 0 {
            basis[(i, 0)]
        } else {
            (1..n).map(|k| basis[(i, k)] * rot[(k - 1, c - 1)]).sum()
        }
    });

    // spectrum spanning several decades, softest along v_min
    let mut lambda = DVector::zeros(n);
    lambda[0] = 1e-5;
    for i in 1..n {
        lambda[i] = 10f64.powf(rng.random_range(-2.5..-1.3));
    }
    let covariance = {
        let raw = &v * DMatrix::from_diagonal(&lambda) * v.transpose();
        (&raw + raw.transpose()) * 0.5
    };

    // returns chosen so stationarity holds exactly at the allocation with
    // budget dual nu and zero long-only duals; floor keeps them positive
    let qy = &covariance * &holdings;
    let nu = qy.min() - 0.02 * r_star;
    let expected_returns = (&qy - DVector::from_element(n, nu)) / r_star;

    Instance {
        covariance,
        expected_returns,
        holdings,
        r_star,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{solve_forward, ForwardSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn instances_are_exact_forward_optima() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for n in 2..=6 {
            let inst = identifiable_instance(n, 2.5, &mut rng);
            assert!((inst.holdings.sum() - 1.0).abs() <= 1e-12);
            assert!(inst.holdings.min() > 0.0);
            assert!(inst.expected_returns.min() >= 0.01);
            assert!(crate::market::min_eigenvalue(&inst.covariance) >= -1e-12);
            let fwd = solve_forward(&ForwardSpec::risk_tolerance(
                inst.covariance.clone(),
                inst.expected_returns.clone(),
                2.5,
            ))
            .unwrap();
            assert!(
                (&fwd.x - &inst.holdings).amax() <= 1e-6,
                "n={n}: forward optimum should equal the constructed holdings"
            );
        }
    }

    #[test]
    fn min_variance_portfolio_sits_far_from_the_simplex() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..20 {
            let inst = identifiable_instance(5, 3.0, &mut rng);
            let q_inv_one = inst
                .covariance
                .clone()
                .lu()
                .solve(&DVector::from_element(5, 1.0))
                .unwrap();
            let x_mv = &q_inv_one / q_inv_one.sum();
            assert!(
                (&inst.holdings - &x_mv).norm() >= 2.0,
                "weakly identified draw: |y - x_mv| = {}",
                (&inst.holdings - &x_mv).norm()
            );
        }
    }
}
