//! Multi-period mean-variance environment.
//!
//! Wealth follows the self-financing dynamics with zero interest:
//! `W_{i+1} = sum_j v_i^j rel_i^j + W_i - sum_j v_i^j`, where `v_i` are
//! dollar allocations chosen at step `i`. No-shorting/no-borrowing means
//! `v >= 0` and `sum_j v_i^j = W_i`, so the cash leg never carries weight.
//! The episode criterion is the quadratic `(W_N - omega)^2 - (omega-1-z)^2`
//! with the multiplier `omega` tracked by stochastic approximation on the
//! terminal-wealth constraint.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("allocation violates no-shorting/no-borrowing: {0}")]
    ConstraintViolation(String),
    #[error("gross relative {value} at step {step}, asset {asset} is not positive and finite")]
    NonPositiveRelative {
        step: usize,
        asset: usize,
        value: f64,
    },
    #[error("episode io: {0}")]
    Io(#[from] std::io::Error),
    #[error("episode csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Gross price relatives for one episode: row `i` holds `S_{i+1}/S_i`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarketEpisode {
    pub tickers: Vec<String>,
    /// N x n, all entries positive and finite.
    pub relatives: DMatrix<f64>,
    pub start_date: Option<chrono::NaiveDate>,
}

impl MarketEpisode {
    pub fn new(
        tickers: Vec<String>,
        relatives: DMatrix<f64>,
        start_date: Option<chrono::NaiveDate>,
    ) -> Result<Self, EnvError> {
        if relatives.ncols() != tickers.len() {
            return Err(EnvError::Invalid(format!(
                "{} relative columns vs {} tickers",
                relatives.ncols(),
                tickers.len()
            )));
        }
        for i in 0..relatives.nrows() {
            for j in 0..relatives.ncols() {
                let v = relatives[(i, j)];
                if !(v.is_finite() && v > 0.0) {
                    return Err(EnvError::NonPositiveRelative {
                        step: i,
                        asset: j,
                        value: v,
                    });
                }
            }
        }
        Ok(MarketEpisode {
            tickers,
            relatives,
            start_date,
        })
    }

    pub fn horizon(&self) -> usize {
        self.relatives.nrows()
    }

    pub fn n_assets(&self) -> usize {
        self.relatives.ncols()
    }

    /// Episode file format: header `step,ticker,relative`.
    pub fn read_csv(path: &Path) -> Result<Self, EnvError> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut cells: std::collections::BTreeMap<(usize, String), f64> = Default::default();
        let mut tickers: std::collections::BTreeSet<String> = Default::default();
        let mut steps = 0usize;
        for rec in rdr.records() {
            let rec = rec?;
            let step: usize = rec
                .get(0)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| EnvError::Invalid(format!("bad step {:?}", rec.get(0))))?;
            let ticker = rec.get(1).unwrap_or("").to_string();
            let value: f64 = rec
                .get(2)
                .unwrap_or("")
                .parse()
                .map_err(|_| EnvError::Invalid(format!("bad relative {:?}", rec.get(2))))?;
            steps = steps.max(step + 1);
            tickers.insert(ticker.clone());
            cells.insert((step, ticker), value);
        }
        let tickers: Vec<String> = tickers.into_iter().collect();
        let mut relatives = DMatrix::zeros(steps, tickers.len());
        for i in 0..steps {
            for (j, t) in tickers.iter().enumerate() {
                match cells.get(&(i, t.clone())) {
                    Some(&v) => relatives[(i, j)] = v,
                    None => {
                        return Err(EnvError::Invalid(format!("missing relative ({i}, {t})")))
                    }
                }
            }
        }
        MarketEpisode::new(tickers, relatives, None)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EnvError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "ticker", "relative"])?;
        for i in 0..self.horizon() {
            for (j, t) in self.tickers.iter().enumerate() {
                w.write_record([
                    i.to_string(),
                    t.clone(),
                    format!("{:.12}", self.relatives[(i, j)]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// A realized wealth path with the dollar allocations that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WealthPath {
    /// N + 1 values, `wealth[0] = 1`.
    pub wealth: Vec<f64>,
    /// N x n dollar allocations, row i chosen at step i.
    pub allocations: DMatrix<f64>,
    /// Steps at which the strategy was allowed to trade; dense paths list
    /// every step, a buy-and-hold path lists only step 0.
    pub decisions: Vec<usize>,
}

impl WealthPath {
    pub fn terminal(&self) -> f64 {
        *self.wealth.last().expect("wealth path is nonempty")
    }

    /// Simple per-step returns `W_{i+1}/W_i - 1`.
    pub fn daily_returns(&self) -> Vec<f64> {
        self.wealth.windows(2).map(|w| w[1] / w[0] - 1.0).collect()
    }
}

/// Advances wealth one step after validating the allocation. The budget
/// must match the current wealth to 1e-8 and legs must be nonnegative.
pub fn step(wealth: f64, allocation: &DVector<f64>, relatives: &DVector<f64>) -> Result<f64, EnvError> {
    for (j, &rel) in relatives.iter().enumerate() {
        if !(rel.is_finite() && rel > 0.0) {
            return Err(EnvError::NonPositiveRelative {
                step: 0,
                asset: j,
                value: rel,
            });
        }
    }
    let min = allocation.min();
    if min < -1e-9 {
        return Err(EnvError::ConstraintViolation(format!(
            "negative allocation leg {min}"
        )));
    }
    let total = allocation.sum();
    if (total - wealth).abs() > 1e-8 * (1.0 + wealth.abs()) {
        return Err(EnvError::ConstraintViolation(format!(
            "allocations sum to {total}, wealth is {wealth}"
        )));
    }
    Ok(propagate(wealth, allocation, relatives))
}

/// The raw dynamics, without constraint checks: cash earns zero interest.
pub fn propagate(wealth: f64, allocation: &DVector<f64>, relatives: &DVector<f64>) -> f64 {
    allocation.dot(relatives) + wealth - allocation.sum()
}

/// Anything that maps the environment state to simplex weights.
///
/// `wealth_gap` is `W_i - omega`; `time_frac` is `i / N`. Implementations
/// decide whether the time coordinate enters their input.
pub trait AllocationPolicy {
    fn allocate(&self, wealth_gap: f64, time_frac: f64) -> DVector<f64>;
}

/// Equal weights at every state; the classical 1/n benchmark and a handy
/// test policy.
#[derive(Debug, Clone, Copy)]
pub struct EqualWeightPolicy {
    pub n: usize,
}

impl AllocationPolicy for EqualWeightPolicy {
    fn allocate(&self, _wealth_gap: f64, _time_frac: f64) -> DVector<f64> {
        DVector::from_element(self.n, 1.0 / self.n as f64)
    }
}

/// Rolls a policy through an episode. The policy sees `(W_i - omega, i/N)`
/// and its simplex weights are scaled by current wealth, which satisfies
/// the no-shorting/no-borrowing constraint by construction.
pub fn run_episode(
    policy: &dyn AllocationPolicy,
    episode: &MarketEpisode,
    omega: f64,
) -> Result<WealthPath, EnvError> {
    let n_steps = episode.horizon();
    let n = episode.n_assets();
    let mut wealth = Vec::with_capacity(n_steps + 1);
    let mut allocations = DMatrix::zeros(n_steps, n);
    let mut w = 1.0;
    wealth.push(w);
    for i in 0..n_steps {
        let weights = policy.allocate(w - omega, i as f64 / n_steps as f64);
        debug_assert!((weights.sum() - 1.0).abs() <= 1e-9 && weights.min() >= -1e-12);
        let v = weights * w;
        let rel = episode.relatives.row(i).transpose();
        w = step(w, &v, &rel)?;
        allocations.row_mut(i).copy_from(&v.transpose());
        wealth.push(w);
    }
    Ok(WealthPath {
        wealth,
        allocations,
        decisions: (0..n_steps).collect(),
    })
}

/// Episode criterion `(W_N - omega)^2 - (omega - 1 - z)^2`.
pub fn lagrangian_value(terminal_wealth: f64, omega: f64, z: f64) -> f64 {
    let a = terminal_wealth - omega;
    let b = omega - 1.0 - z;
    a * a - b * b
}

/// Learning-rate schedules for the multiplier update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AlphaSchedule {
    Constant(f64),
    /// `base / k`, the classical stochastic-approximation decay.
    Harmonic { base: f64 },
    /// `base / ceil(k / step)`: piecewise-constant harmonic decay.
    Stepped { base: f64, step: usize },
}

impl AlphaSchedule {
    /// Rate for the k-th update, k starting at 1.
    pub fn at(&self, k: usize) -> f64 {
        match self {
            AlphaSchedule::Constant(a) => *a,
            AlphaSchedule::Harmonic { base } => base / k as f64,
            AlphaSchedule::Stepped { base, step } => base / (k as f64 / *step as f64).ceil(),
        }
    }
}

/// Tracks the Lagrange multiplier by stochastic approximation of the
/// terminal-wealth constraint: every `update_period` episodes,
/// `omega += alpha_k (mean(recent W_N) - 1 - z)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiplierTracker {
    pub omega: f64,
    pub schedule: AlphaSchedule,
    pub window: usize,
    pub update_period: usize,
    history: VecDeque<f64>,
    episodes_seen: usize,
    updates_done: usize,
}

impl MultiplierTracker {
    pub fn new(omega0: f64, schedule: AlphaSchedule, window: usize, update_period: usize) -> Self {
        assert!(window >= 1 && update_period >= 1);
        MultiplierTracker {
            omega: omega0,
            schedule,
            window,
            update_period,
            history: VecDeque::with_capacity(window),
            episodes_seen: 0,
            updates_done: 0,
        }
    }

    /// Paper-style defaults: slow updates on averaged terminal wealth.
    pub fn with_defaults(omega0: f64) -> Self {
        MultiplierTracker::new(omega0, AlphaSchedule::Stepped { base: 0.05, step: 50 }, 10, 10)
    }

    pub fn updates_done(&self) -> usize {
        self.updates_done
    }

    /// Records a terminal wealth; applies the multiplier update when the
    /// period elapses. Returns true when omega moved.
    pub fn observe(&mut self, terminal_wealth: f64, z: f64) -> bool {
        if self.history.len() == self.window {
            self.history.pop_front();
        }
        self.history.push_back(terminal_wealth);
        self.episodes_seen += 1;
        if self.episodes_seen % self.update_period != 0 {
            return false;
        }
        let mean: f64 = self.history.iter().sum::<f64>() / self.history.len() as f64;
        let k = self.updates_done + 1;
        let alpha = self.schedule.at(k);
        self.omega += alpha * (mean - 1.0 - z);
        self.updates_done = k;
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn vecd(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn dynamics_hand_cases() {
        // all cash: wealth unchanged (checked via the raw dynamics; the
        // constrained step rejects an all-cash book)
        let w = propagate(1.0, &vecd(&[0.0, 0.0]), &vecd(&[1.3, 0.7]));
        assert_eq!(w, 1.0);
        assert!(step(1.0, &vecd(&[0.0, 0.0]), &vecd(&[1.3, 0.7])).is_err());

        // everything in one stock
        let w = step(2.0, &vecd(&[2.0, 0.0]), &vecd(&[1.1, 0.9])).unwrap();
        assert_relative_eq!(w, 2.2, epsilon = 1e-12);

        // offsetting moves cancel
        let w = step(1.0, &vecd(&[0.5, 0.5]), &vecd(&[1.2, 0.8])).unwrap();
        assert_relative_eq!(w, 1.0, epsilon = 1e-12);

        assert!(matches!(
            step(1.0, &vecd(&[1.0]), &vecd(&[0.0])),
            Err(EnvError::NonPositiveRelative { .. })
        ));
        assert!(matches!(
            step(1.0, &vecd(&[-0.1, 1.1]), &vecd(&[1.0, 1.0])),
            Err(EnvError::ConstraintViolation(_))
        ));
    }

    #[test]
    fn flat_market_conserves_wealth_for_any_policy() {
        let episode = MarketEpisode::new(
            vec!["A".into(), "B".into(), "C".into()],
            DMatrix::from_element(40, 3, 1.0),
            None,
        )
        .unwrap();
        struct Wobble;
        impl AllocationPolicy for Wobble {
            fn allocate(&self, gap: f64, t: f64) -> DVector<f64> {
                let raw = vecd(&[1.0 + (gap * 31.0).sin().abs(), 0.5 + t, 0.25]);
                let s = raw.sum();
                raw / s
            }
        }
        let path = run_episode(&Wobble, &episode, 1.0).unwrap();
        for w in &path.wealth {
            assert!((w - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_asset_is_the_product_of_relatives() {
        let rels = [1.01, 0.97, 1.05, 1.002];
        let episode = MarketEpisode::new(
            vec!["A".into()],
            DMatrix::from_column_slice(4, 1, &rels),
            None,
        )
        .unwrap();
        let path = run_episode(&EqualWeightPolicy { n: 1 }, &episode, 0.7).unwrap();
        let expected: f64 = rels.iter().product();
        assert_relative_eq!(path.terminal(), expected, epsilon = 1e-14);
    }

    #[test]
    fn equal_weight_two_day_path_matches_hand_computation() {
        // day 0: relatives (1.1, 0.9) -> W1 = 1.0
        // day 1: relatives (1.2, 0.8) -> W2 = 1.0
        let episode = MarketEpisode::new(
            vec!["A".into(), "B".into()],
            DMatrix::from_row_slice(2, 2, &[1.1, 0.9, 1.2, 0.8]),
            None,
        )
        .unwrap();
        let path = run_episode(&EqualWeightPolicy { n: 2 }, &episode, 0.0).unwrap();
        assert_eq!(path.wealth.len(), 3);
        assert_relative_eq!(path.wealth[1], 1.0, epsilon = 1e-14);
        assert_relative_eq!(path.wealth[2], 1.0, epsilon = 1e-14);
        assert_relative_eq!(path.allocations[(1, 0)], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn episodes_are_deterministic() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let rels = DMatrix::from_fn(30, 2, |_, _| 1.0 + rng.random_range(-0.02..0.02));
        let episode = MarketEpisode::new(vec!["A".into(), "B".into()], rels, None).unwrap();
        let a = run_episode(&EqualWeightPolicy { n: 2 }, &episode, 0.9).unwrap();
        let b = run_episode(&EqualWeightPolicy { n: 2 }, &episode, 0.9).unwrap();
        for (x, y) in a.wealth.iter().zip(b.wealth.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn positive_relatives_keep_wealth_positive() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..50 {
            let rels = DMatrix::from_fn(60, 3, |_, _| (0.2 + rng.random_range(0.0..1.6f64)).max(0.01));
            let episode =
                MarketEpisode::new(vec!["A".into(), "B".into(), "C".into()], rels, None).unwrap();
            let path = run_episode(&EqualWeightPolicy { n: 3 }, &episode, 0.0).unwrap();
            assert!(path.wealth.iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn lagrangian_hand_values() {
        assert_eq!(lagrangian_value(1.5, 1.5, 0.5), 0.0);
        assert_relative_eq!(lagrangian_value(1.2, 1.0, 0.1), 0.03, epsilon = 1e-15);
        // even in the wealth gap
        let up = lagrangian_value(1.5 + 0.2, 1.5, 0.0);
        let down = lagrangian_value(1.5 - 0.2, 1.5, 0.0);
        assert_eq!(up, down);
    }

    #[test]
    fn multiplier_fixed_point_and_increments() {
        let mut t = MultiplierTracker::new(1.0, AlphaSchedule::Constant(0.1), 1, 1);
        t.observe(1.05, 0.05); // mean = 1 + z exactly
        assert_eq!(t.omega, 1.0);

        let mut t = MultiplierTracker::new(1.0, AlphaSchedule::Constant(0.1), 1, 1);
        t.observe(1.10, 0.05); // surplus 0.05
        assert_relative_eq!(t.omega, 1.005, epsilon = 1e-15);
    }

    #[test]
    fn constant_surplus_telescopes_exactly() {
        // alpha and surplus chosen exactly representable in binary
        let alpha = 0.25;
        let delta = 0.5;
        let z = 0.0;
        let mut t = MultiplierTracker::new(2.0, AlphaSchedule::Constant(alpha), 1, 1);
        let k = 37;
        for _ in 0..k {
            t.observe(1.0 + z + delta, z);
        }
        assert_eq!(t.omega, 2.0 + k as f64 * alpha * delta);
    }

    #[test]
    fn update_period_and_window_average() {
        let mut t = MultiplierTracker::new(0.0, AlphaSchedule::Constant(1.0), 2, 3);
        assert!(!t.observe(1.2, 0.0));
        assert!(!t.observe(1.4, 0.0));
        // third observation triggers; window holds {1.4, 1.6} -> mean 1.5
        assert!(t.observe(1.6, 0.0));
        assert_relative_eq!(t.omega, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn harmonic_schedule_keeps_drift_bounded_under_noise() {
        // Robbins-Monro: zero-mean noise, alpha_k = a/k; the running mean of
        // late updates must shrink toward zero.
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let z = 0.1;
        let mut t = MultiplierTracker::new(1.0, AlphaSchedule::Harmonic { base: 0.5 }, 1, 1);
        let mut late_updates = Vec::new();
        for k in 0..10_000 {
            let before = t.omega;
            let noisy = 1.0 + z + rng.random_range(-0.3..0.3);
            t.observe(noisy, z);
            if k >= 9_000 {
                late_updates.push(t.omega - before);
            }
        }
        let mean_drift = late_updates.iter().sum::<f64>() / late_updates.len() as f64;
        assert!(mean_drift.abs() < 1e-3, "late mean drift {mean_drift}");
        assert!((t.omega - 1.0).abs() < 0.5);
    }

    #[test]
    fn episode_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.csv");
        let episode = MarketEpisode::new(
            vec!["A".into(), "B".into()],
            DMatrix::from_row_slice(2, 2, &[1.01, 0.99, 1.02, 0.98]),
            None,
        )
        .unwrap();
        episode.write_csv(&path).unwrap();
        let back = MarketEpisode::read_csv(&path).unwrap();
        assert_eq!(back.tickers, episode.tickers);
        assert!((back.relatives - episode.relatives).amax() <= 1e-12);
    }
}
