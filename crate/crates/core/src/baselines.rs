//! Classical comparison strategies: single-period buy-and-hold and
//! quarterly-rebalanced sequential mean-variance, both long-only with a
//! budget constraint and rolling estimation.
//!
//! Positions drift between decisions (no renormalization), matching the
//! self-financing dynamics; the buy-and-hold book never trades after the
//! initial purchase, so its turnover and transaction cost are zero by
//! construction.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::forward::{solve_forward, ForwardError, ForwardSpec};
use crate::market::{psd_floor, MarketError, PriceSeries};
use crate::mv_env::{MarketEpisode, WealthPath};
use crate::TRADING_DAYS;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("estimation window too short: {days} days")]
    WindowTooShort { days: usize },
    #[error("{got} estimation windows supplied, {expected} quarters requested")]
    WindowCountMismatch { got: usize, expected: usize },
    #[error("forward solve: {0}")]
    Forward(#[from] ForwardError),
    #[error("market: {0}")]
    Market(#[from] MarketError),
    #[error("{0}")]
    Invalid(String),
}

/// Daily-scale mean/covariance estimated strictly from data before the
/// decision date.
#[derive(Debug, Clone)]
pub struct EstimationWindow {
    pub tickers: Vec<String>,
    /// Mean daily simple return per asset.
    pub mean: DVector<f64>,
    /// Sample covariance of daily simple returns, PSD-floored.
    pub covariance: DMatrix<f64>,
    pub days: usize,
}

impl EstimationWindow {
    /// Estimates from a price slice (e.g. the two years preceding a test
    /// period).
    pub fn estimate(prices: &PriceSeries) -> Result<Self, BaselineError> {
        let days = prices.n_days();
        if days < 3 {
            return Err(BaselineError::WindowTooShort { days });
        }
        let n = prices.n_assets();
        let t = days - 1;
        let rets = DMatrix::from_fn(t, n, |i, j| {
            prices.close[(i + 1, j)] / prices.close[(i, j)] - 1.0
        });
        let mut mean = DVector::zeros(n);
        for i in 0..t {
            mean += rets.row(i).transpose();
        }
        mean /= t as f64;
        let mut cov = DMatrix::zeros(n, n);
        for i in 0..t {
            let d = rets.row(i).transpose() - &mean;
            cov += &d * d.transpose();
        }
        cov /= (t - 1) as f64;
        Ok(EstimationWindow {
            tickers: prices.tickers.clone(),
            mean,
            covariance: psd_floor(&cov),
            days: t,
        })
    }

    /// Mean and covariance scaled to a holding horizon of `periods` days.
    fn scaled(&self, periods: f64) -> (DVector<f64>, DMatrix<f64>) {
        (&self.mean * periods, &self.covariance * periods)
    }
}

/// A baseline wealth path plus whether the infeasible-target fallback was
/// hit at any decision.
#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub path: WealthPath,
    pub fallback_used: bool,
}

/// Solves the target-return problem, falling back to the max-mean vertex
/// when the target is unattainable.
fn allocate_for_target(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    target: f64,
) -> Result<(DVector<f64>, bool), BaselineError> {
    match solve_forward(&ForwardSpec::target_return(cov.clone(), mean.clone(), target)) {
        Ok(sol) => Ok((sol.x, false)),
        Err(ForwardError::Infeasible { .. }) => {
            let mut best = 0;
            for i in 1..mean.len() {
                if mean[i] > mean[best] {
                    best = i;
                }
            }
            let mut x = DVector::zeros(mean.len());
            x[best] = 1.0;
            Ok((x, true))
        }
        Err(e) => Err(e.into()),
    }
}

/// One-time allocation at the start targeting the daily return
/// `(1 + z)^(1/252) - 1`, then no trades: positions drift with prices.
pub fn buy_and_hold(
    window: &EstimationWindow,
    z_annual: f64,
    episode: &MarketEpisode,
) -> Result<StrategyRun, BaselineError> {
    let n = episode.n_assets();
    if window.mean.len() != n {
        return Err(BaselineError::Invalid(format!(
            "estimation over {} assets, episode has {n}",
            window.mean.len()
        )));
    }
    let daily_target = (1.0 + z_annual).powf(1.0 / TRADING_DAYS as f64) - 1.0;
    let (x, fallback_used) = allocate_for_target(&window.mean, &window.covariance, daily_target)?;

    let steps = episode.horizon();
    let mut wealth = Vec::with_capacity(steps + 1);
    let mut allocations = DMatrix::zeros(steps, n);
    let mut v = x.clone(); // W_0 = 1
    wealth.push(1.0);
    for i in 0..steps {
        allocations.row_mut(i).copy_from(&v.transpose());
        let rel = episode.relatives.row(i).transpose();
        v = v.component_mul(&rel);
        wealth.push(v.sum());
    }
    Ok(StrategyRun {
        path: WealthPath {
            wealth,
            allocations,
            decisions: vec![0],
        },
        fallback_used,
    })
}

/// Sequential single-period problems, one per quarter, each targeting
/// `(1 + z)^(1/quarters) - 1` with that quarter's rolling estimates scaled
/// to the quarter length. Wealth rolls over; positions drift within a
/// quarter.
pub fn quarterly_mv(
    windows: &[EstimationWindow],
    z_annual: f64,
    episode: &MarketEpisode,
) -> Result<StrategyRun, BaselineError> {
    let quarters = windows.len();
    if quarters == 0 {
        return Err(BaselineError::WindowCountMismatch { got: 0, expected: 4 });
    }
    let n = episode.n_assets();
    let steps = episode.horizon();
    if steps < quarters {
        return Err(BaselineError::Invalid(format!(
            "{steps}-step episode cannot host {quarters} quarters"
        )));
    }
    let target = (1.0 + z_annual).powf(1.0 / quarters as f64) - 1.0;
    let boundaries: Vec<usize> = (0..quarters).map(|q| q * steps / quarters).collect();

    let mut wealth = Vec::with_capacity(steps + 1);
    let mut allocations = DMatrix::zeros(steps, n);
    let mut fallback_used = false;
    let mut w = 1.0f64;
    let mut v = DVector::zeros(n);
    wealth.push(w);
    for i in 0..steps {
        if let Some(q) = boundaries.iter().position(|&b| b == i) {
            let window = &windows[q];
            if window.mean.len() != n {
                return Err(BaselineError::Invalid(format!(
                    "quarter {q} estimation over {} assets, episode has {n}",
                    window.mean.len()
                )));
            }
            let quarter_len = if q + 1 < quarters {
                boundaries[q + 1] - boundaries[q]
            } else {
                steps - boundaries[q]
            };
            let (mean_q, cov_q) = window.scaled(quarter_len as f64);
            let (x, fb) = allocate_for_target(&mean_q, &cov_q, target)?;
            fallback_used |= fb;
            v = x * w;
        }
        allocations.row_mut(i).copy_from(&v.transpose());
        let rel = episode.relatives.row(i).transpose();
        v = v.component_mul(&rel);
        w = v.sum();
        wealth.push(w);
    }
    Ok(StrategyRun {
        path: WealthPath {
            wealth,
            allocations,
            decisions: boundaries,
        },
        fallback_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn window(mean: &[f64], var: &[f64]) -> EstimationWindow {
        let n = mean.len();
        EstimationWindow {
            tickers: (0..n).map(|i| format!("T{i}")).collect(),
            mean: DVector::from_column_slice(mean),
            covariance: DMatrix::from_diagonal(&DVector::from_column_slice(var)),
            days: 504,
        }
    }

    fn flat_episode(n: usize, steps: usize) -> MarketEpisode {
        MarketEpisode::new(
            (0..n).map(|i| format!("T{i}")).collect(),
            DMatrix::from_element(steps, n, 1.0),
            None,
        )
        .unwrap()
    }

    #[test]
    fn zero_target_is_the_identity_daily_target() {
        assert_eq!((1.0f64 + 0.0).powf(1.0 / 252.0) - 1.0, 0.0);
    }

    #[test]
    fn single_asset_buy_and_hold_compounds_relatives() {
        let win = window(&[0.001], &[0.0001]);
        let rels = [1.02, 0.97, 1.05];
        let episode = MarketEpisode::new(
            vec!["T0".into()],
            DMatrix::from_column_slice(3, 1, &rels),
            None,
        )
        .unwrap();
        let run = buy_and_hold(&win, 0.1, &episode).unwrap();
        let expected: f64 = rels.iter().product();
        assert_relative_eq!(run.path.terminal(), expected, epsilon = 1e-14);
        assert_eq!(run.path.decisions, vec![0]);
    }

    #[test]
    fn dominant_asset_with_aggressive_target_gets_the_corner() {
        // asset 0 dominates the mean with equal variance; an aggressive
        // target forces the whole budget onto it
        let win = window(&[0.004, 0.0005], &[0.0001, 0.0001]);
        let episode = flat_episode(2, 4);
        let aggressive = (1.0 + 0.004f64).powi(252) - 1.0; // exactly asset 0's compounded mean
        let run = buy_and_hold(&win, aggressive * 0.999, &episode).unwrap();
        assert!(run.path.allocations[(0, 0)] > 0.99);
        assert!(!run.fallback_used);

        // cross-check against the forward solver at the same target
        let daily = (1.0 + aggressive * 0.999f64).powf(1.0 / 252.0) - 1.0;
        let sol = solve_forward(&ForwardSpec::target_return(
            win.covariance.clone(),
            win.mean.clone(),
            daily,
        ))
        .unwrap();
        assert!((&run.path.allocations.row(0).transpose() - &sol.x).amax() <= 1e-9);
    }

    #[test]
    fn unattainable_target_falls_back_to_max_mean_vertex() {
        let win = window(&[0.001, 0.0005], &[0.0001, 0.0001]);
        let episode = flat_episode(2, 4);
        let run = buy_and_hold(&win, 5.0, &episode).unwrap();
        assert!(run.fallback_used);
        assert_eq!(run.path.allocations[(0, 0)], 1.0);
    }

    #[test]
    fn identical_quarters_in_a_flat_market_hold_the_same_allocation() {
        let win = window(&[0.002, 0.001], &[0.0002, 0.0001]);
        let wins = vec![win.clone(), win.clone(), win.clone(), win];
        let episode = flat_episode(2, 12);
        let run = quarterly_mv(&wins, 0.05, &episode).unwrap();
        assert_eq!(run.path.decisions, vec![0, 3, 6, 9]);
        // same estimates + flat prices: every quarter re-solves to the same
        // book, so no trading happens at the boundaries
        for q in [3usize, 6, 9] {
            for j in 0..2 {
                let drifted = run.path.allocations[(q - 1, j)]; // flat: v_{i+} = v_i
                assert_relative_eq!(run.path.allocations[(q, j)], drifted, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn zero_target_reduces_to_minimum_variance_each_quarter() {
        // variances 1:4 with equal (zero-ish) means: min-variance book is
        // (0.8, 0.2); a zero target never binds
        let win = window(&[0.0, 0.0], &[0.0001, 0.0004]);
        let wins = vec![win.clone(), win.clone(), win.clone(), win];
        let episode = flat_episode(2, 8);
        let run = quarterly_mv(&wins, 0.0, &episode).unwrap();
        assert_relative_eq!(run.path.allocations[(0, 0)], 0.8, epsilon = 1e-7);
        assert_relative_eq!(run.path.allocations[(0, 1)], 0.2, epsilon = 1e-7);
    }

    #[test]
    fn flipped_dominance_flips_the_allocation_at_the_boundary() {
        // two quarters; the dominant asset flips between the windows
        let w1 = window(&[0.004, 0.0005], &[0.0001, 0.0001]);
        let w2 = window(&[0.0005, 0.004], &[0.0001, 0.0001]);
        // mild up-moves on both legs so wealth is hand-checkable
        let episode = MarketEpisode::new(
            vec!["T0".into(), "T1".into()],
            DMatrix::from_row_slice(4, 2, &[1.1, 1.0, 1.1, 1.0, 1.0, 1.2, 1.0, 1.2]),
            None,
        )
        .unwrap();
        let run = quarterly_mv(&[w1, w2], 0.6, &episode).unwrap();
        assert_eq!(run.path.decisions, vec![0, 2]);
        assert!(run.path.allocations[(0, 0)] > 0.95);
        assert!(run.path.allocations[(2, 1)] > 0.95);
        // hand evaluation: quarter 1 compounds asset 0 twice (1.21), then
        // the book flips to asset 1 which compounds 1.44
        assert_relative_eq!(run.path.terminal(), 1.1 * 1.1 * 1.2 * 1.2, epsilon = 1e-6);
    }

    #[test]
    fn budget_and_long_only_hold_at_every_decision() {
        let win = window(&[0.002, 0.001, 0.0005], &[0.0002, 0.0001, 0.0003]);
        let wins = vec![win.clone(), win.clone(), win.clone(), win];
        let episode = flat_episode(3, 16);
        let run = quarterly_mv(&wins, 0.03, &episode).unwrap();
        for &d in &run.path.decisions {
            let row = run.path.allocations.row(d);
            let w_at = run.path.wealth[d];
            assert!((row.sum() - w_at).abs() <= 1e-9);
            assert!(row.iter().all(|&v| v >= -1e-9));
        }
    }

    #[test]
    fn estimation_window_from_prices() {
        let dates: Vec<chrono::NaiveDate> = (0..5)
            .map(|i| chrono::NaiveDate::from_ymd_opt(2020, 1, 2 + i).unwrap())
            .collect();
        let prices = PriceSeries {
            dates,
            tickers: vec!["A".into()],
            close: DMatrix::from_column_slice(5, 1, &[100.0, 101.0, 99.0, 102.0, 101.0]),
        };
        let win = EstimationWindow::estimate(&prices).unwrap();
        assert_eq!(win.days, 4);
        // independent mean of the four simple returns
        let rets = [0.01, -2.0 / 101.0, 3.0 / 99.0, -1.0 / 102.0];
        let mean: f64 = rets.iter().sum::<f64>() / 4.0;
        assert_relative_eq!(win.mean[0], mean, epsilon = 1e-12);
    }
}
