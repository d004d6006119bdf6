//! Backtest harness: rolling train/validate/test windows, randomized
//! portfolio ensembles, and the evaluation metrics.
//!
//! Turnover compares each day's post-rebalance book with the previous
//! book drifted by that day's relatives; the per-day normalization divides
//! by the number of rebalance opportunities the strategy actually had, so
//! a quarterly strategy is averaged over its quarter boundaries rather
//! than diluted over days it could not trade. Transaction cost is the
//! undivided sum of traded notional at the proportional rate. The initial
//! purchase is excluded for every strategy alike.

pub mod synthetic;

pub use synthetic::{gen_synthetic_pool, GbmAssetSpec, SyntheticSpec};

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, BaselineError, EstimationWindow};
use crate::drl::{self, DrlError, LeaderboardEntry, Policy, TrainConfig};
use crate::market::{MarketError, PriceSeries};
use crate::mv_env::{self, EnvError, MarketEpisode, WealthPath};
use crate::TRADING_DAYS;

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("wealth path has {0} points, need at least 2")]
    PathTooShort(usize),
    #[error("returns have zero variance")]
    ZeroVariance,
    #[error("market: {0}")]
    Market(#[from] MarketError),
    #[error("baseline: {0}")]
    Baseline(#[from] BaselineError),
    #[error("agent: {0}")]
    Drl(#[from] DrlError),
    #[error("environment: {0}")]
    Env(#[from] EnvError),
    #[error("{0}")]
    Invalid(String),
}

/// Average traded fraction of wealth per rebalance opportunity, in percent.
///
/// `sum_i sum_j |(v_{i+1}^j - v_i^j rel_i^j) / W_{i+1}|` divided by the
/// number of rebalance intervals (`decisions - 1`). Paths that never had a
/// second chance to trade (buy-and-hold) score exactly 0.
pub fn turnover(path: &WealthPath, episode: &MarketEpisode) -> Result<f64, BacktestError> {
    if path.wealth.len() < 2 {
        return Err(BacktestError::PathTooShort(path.wealth.len()));
    }
    if path.decisions.len() < 2 {
        return Ok(0.0);
    }
    let sum = trade_fraction_sum(path, episode)?;
    Ok(sum / (path.decisions.len() - 1) as f64 * 100.0)
}

fn trade_fraction_sum(path: &WealthPath, episode: &MarketEpisode) -> Result<f64, BacktestError> {
    let steps = path.allocations.nrows();
    let n = path.allocations.ncols();
    if episode.horizon() != steps || episode.n_assets() != n {
        return Err(BacktestError::Invalid(format!(
            "episode is {}x{}, path allocations are {steps}x{n}",
            episode.horizon(),
            episode.n_assets()
        )));
    }
    let mut total = 0.0;
    for i in 0..steps.saturating_sub(1) {
        let w_next = path.wealth[i + 1];
        for j in 0..n {
            let drifted = path.allocations[(i, j)] * episode.relatives[(i, j)];
            total += ((path.allocations[(i + 1, j)] - drifted) / w_next).abs();
        }
    }
    Ok(total)
}

/// Cumulative transaction cost in percent of initial wealth:
/// `(c / W_0) sum_i sum_j |v_{i+1}^j - v_i^j rel_i^j| * 100`. Both legs of
/// every order count; the initial purchase does not.
pub fn transaction_cost(
    path: &WealthPath,
    episode: &MarketEpisode,
    rate: f64,
) -> Result<f64, BacktestError> {
    if path.wealth.len() < 2 {
        return Err(BacktestError::PathTooShort(path.wealth.len()));
    }
    let steps = path.allocations.nrows();
    let n = path.allocations.ncols();
    if episode.horizon() != steps || episode.n_assets() != n {
        return Err(BacktestError::Invalid("episode/path shape mismatch".into()));
    }
    let w0 = path.wealth[0];
    let mut notional = 0.0;
    for i in 0..steps.saturating_sub(1) {
        for j in 0..n {
            let drifted = path.allocations[(i, j)] * episode.relatives[(i, j)];
            notional += (path.allocations[(i + 1, j)] - drifted).abs();
        }
    }
    Ok(rate * notional / w0 * 100.0)
}

/// Largest peak-to-trough loss of the wealth series, in [0, 1).
pub fn max_drawdown(wealth: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst = 0.0f64;
    for &w in wealth {
        peak = peak.max(w);
        worst = worst.max((peak - w) / peak);
    }
    worst
}

/// Annualized Sharpe ratio of daily simple returns at zero risk-free rate:
/// `mean / sample_std * sqrt(252)`. Daily volatility at or below 1e-12 is
/// roundoff, not risk, and reports as degenerate.
pub fn sharpe(returns: &[f64]) -> Result<f64, BacktestError> {
    if returns.len() < 2 {
        return Err(BacktestError::PathTooShort(returns.len()));
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 1e-24 {
        return Err(BacktestError::ZeroVariance);
    }
    Ok(mean / var.sqrt() * (TRADING_DAYS as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyKind {
    IpoDrl,
    BuyAndHold,
    QuarterlyMv,
}

impl StrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::IpoDrl => "ipo-drl",
            StrategyKind::BuyAndHold => "buy-and-hold",
            StrategyKind::QuarterlyMv => "quarterly-mv",
        }
    }
}

/// One rolling evaluation window: disjoint, ordered spans.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BacktestWindow {
    pub label: String,
    pub train: (NaiveDate, NaiveDate),
    pub validation: (NaiveDate, NaiveDate),
    pub test: (NaiveDate, NaiveDate),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BacktestConfig {
    /// Stocks per portfolio draw.
    pub n: usize,
    /// Independent random portfolios per window.
    pub portfolios: usize,
    pub windows: Vec<BacktestWindow>,
    /// Proportional cost per transaction (5 basis points by default).
    pub cost_rate: f64,
    /// Days of history behind each baseline estimation.
    pub lookback_days: usize,
    /// Rebalances per test span for the sequential baseline.
    pub quarters: usize,
    /// Hyperparameter grid for the learned strategy.
    pub drl_grid: Vec<TrainConfig>,
    /// Validation portfolios used during model selection.
    pub val_portfolios: usize,
    pub seed: u64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig {
            n: 5,
            portfolios: 100,
            windows: Vec::new(),
            cost_rate: 5e-4,
            lookback_days: 504,
            quarters: 4,
            drl_grid: vec![TrainConfig::default()],
            val_portfolios: 100,
            seed: 0,
        }
    }
}

/// Ensemble averages of the per-portfolio metrics.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub cost_adjusted_return_pct: f64,
    pub stdev_pct: f64,
    pub sharpe: f64,
    pub turnover_pct: f64,
    pub transaction_cost_pct: f64,
    pub max_drawdown_pct: f64,
}

/// Pointwise mean wealth with the empirical 95% band across portfolios.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WealthBand {
    pub dates: Vec<NaiveDate>,
    pub mean: Vec<f64>,
    pub lo95: Vec<f64>,
    pub hi95: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: String,
    pub metrics: MetricSummary,
    pub band: WealthBand,
    /// Draws excluded from the averages, with reasons.
    pub failures: Vec<String>,
    /// Draws where the infeasible-target fallback fired.
    pub fallbacks: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowReport {
    pub label: String,
    pub target: f64,
    pub leaderboard: Vec<LeaderboardEntry>,
    pub strategies: Vec<StrategyReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BacktestReport {
    pub config: BacktestConfig,
    pub targets: Vec<f64>,
    pub windows: Vec<WindowReport>,
}

impl BacktestReport {
    /// Wealth-path CSVs (`date,mean,lo95,hi95`), one per window/strategy.
    pub fn write_band_csvs(&self, dir: &std::path::Path) -> Result<(), BacktestError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| BacktestError::Invalid(format!("create {}: {e}", dir.display())))?;
        for w in &self.windows {
            for s in &w.strategies {
                let name = format!("{}_{}.csv", sanitize(&w.label), s.strategy);
                let mut writer = csv::Writer::from_path(dir.join(&name))
                    .map_err(|e| BacktestError::Invalid(format!("open {name}: {e}")))?;
                writer
                    .write_record(["date", "mean", "lo95", "hi95"])
                    .and_then(|_| {
                        for i in 0..s.band.dates.len() {
                            writer.write_record([
                                s.band.dates[i].to_string(),
                                format!("{:.10}", s.band.mean[i]),
                                format!("{:.10}", s.band.lo95[i]),
                                format!("{:.10}", s.band.hi95[i]),
                            ])?;
                        }
                        writer.flush().map_err(csv::Error::from)
                    })
                    .map_err(|e| BacktestError::Invalid(format!("write {name}: {e}")))?;
            }
        }
        Ok(())
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

struct DrawOutcome {
    wealth: Vec<f64>,
    metrics: MetricSummary,
    fallback: bool,
    degenerate_sharpe: bool,
}

/// Runs every strategy over every window on shared randomized portfolio
/// draws and aggregates the metrics.
pub fn run_backtest(
    strategies: &[StrategyKind],
    pool: &PriceSeries,
    config: &BacktestConfig,
    targets: &[f64],
) -> Result<BacktestReport, BacktestError> {
    if strategies.is_empty() {
        return Err(BacktestError::Invalid("no strategies requested".into()));
    }
    if targets.len() != config.windows.len() {
        return Err(BacktestError::Invalid(format!(
            "{} targets for {} windows",
            targets.len(),
            config.windows.len()
        )));
    }
    if config.n == 0 || config.portfolios == 0 || config.quarters == 0 {
        return Err(BacktestError::Invalid(
            "n, portfolios and quarters must be positive".into(),
        ));
    }
    let wants_drl = strategies.contains(&StrategyKind::IpoDrl);
    if wants_drl {
        if config.drl_grid.is_empty() {
            return Err(BacktestError::Invalid("drl grid is empty".into()));
        }
        for (i, g) in config.drl_grid.iter().enumerate() {
            if g.n_assets != config.n {
                return Err(BacktestError::Invalid(format!(
                    "grid entry {i} trains {} assets, backtest draws {}",
                    g.n_assets, config.n
                )));
            }
        }
    }

    let mut window_reports = Vec::with_capacity(config.windows.len());
    for (wi, window) in config.windows.iter().enumerate() {
        let z = targets[wi];
        let test_slice = pool.slice_dates(window.test.0, window.test.1)?;
        if test_slice.n_days() < config.quarters + 1 {
            return Err(BacktestError::Invalid(format!(
                "window {}: test span too short",
                window.label
            )));
        }
        let test_start_idx = pool
            .dates
            .iter()
            .position(|d| *d == test_slice.dates[0])
            .expect("test slice dates come from the pool");

        let (policy, leaderboard) = if wants_drl {
            let train_slice = pool.slice_dates(window.train.0, window.train.1)?;
            let val_slice = pool.slice_dates(window.validation.0, window.validation.1)?;
            let outcome = drl::hyperparameter_search(
                &config.drl_grid,
                &train_slice,
                &val_slice,
                z,
                config.val_portfolios,
            )?;
            (Some(outcome.policy), outcome.leaderboard)
        } else {
            (None, Vec::new())
        };

        let draws: Vec<Vec<Result<DrawOutcome, String>>> = (0..config.portfolios)
            .into_par_iter()
            .map(|d| {
                run_draw(
                    strategies,
                    pool,
                    config,
                    policy.as_ref(),
                    z,
                    test_start_idx,
                    test_slice.n_days(),
                    crate::derive_seed(config.seed, ((wi as u64) << 40) ^ d as u64),
                )
            })
            .collect();

        let dates = test_slice.dates.clone();
        let mut strategy_reports = Vec::with_capacity(strategies.len());
        for (si, kind) in strategies.iter().enumerate() {
            strategy_reports.push(aggregate(kind, si, &draws, &dates));
        }
        window_reports.push(WindowReport {
            label: window.label.clone(),
            target: z,
            leaderboard,
            strategies: strategy_reports,
        });
    }
    Ok(BacktestReport {
        config: config.clone(),
        targets: targets.to_vec(),
        windows: window_reports,
    })
}

/// One portfolio draw: every strategy consumes the identical episode.
#[allow(clippy::too_many_arguments)]
fn run_draw(
    strategies: &[StrategyKind],
    pool: &PriceSeries,
    config: &BacktestConfig,
    policy: Option<&Policy>,
    z: f64,
    test_start_idx: usize,
    test_days: usize,
    seed: u64,
) -> Vec<Result<DrawOutcome, String>> {
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, pool.n_assets(), config.n).into_vec();
    picks.sort_unstable();
    let tickers: Vec<String> = picks.iter().map(|&j| pool.tickers[j].clone()).collect();

    let episode = match build_episode(pool, &tickers, test_start_idx, test_days) {
        Ok(e) => e,
        Err(e) => {
            return strategies.iter().map(|_| Err(e.to_string())).collect();
        }
    };
    let steps = episode.horizon();

    strategies
        .iter()
        .map(|kind| {
            let run: Result<(WealthPath, bool), String> = match kind {
                StrategyKind::IpoDrl => {
                    let p = policy.expect("policy trained when the learned strategy runs");
                    mv_env::run_episode(p, &episode, p.omega)
                        .map(|path| (path, false))
                        .map_err(|e| e.to_string())
                }
                StrategyKind::BuyAndHold => estimation_slice(
                    pool,
                    &tickers,
                    test_start_idx,
                    config.lookback_days,
                )
                .and_then(|w| baselines::buy_and_hold(&w, z, &episode).map_err(|e| e.to_string()))
                .map(|r| (r.path, r.fallback_used)),
                StrategyKind::QuarterlyMv => {
                    let mut windows = Vec::with_capacity(config.quarters);
                    let mut err = None;
                    for q in 0..config.quarters {
                        let boundary = test_start_idx + q * steps / config.quarters;
                        match estimation_slice(pool, &tickers, boundary, config.lookback_days) {
                            Ok(w) => windows.push(w),
                            Err(e) => {
                                err = Some(e);
                                break;
                            }
                        }
                    }
                    match err {
                        Some(e) => Err(e),
                        None => baselines::quarterly_mv(&windows, z, &episode)
                            .map(|r| (r.path, r.fallback_used))
                            .map_err(|e| e.to_string()),
                    }
                }
            };
            run.and_then(|(path, fallback)| {
                score_path(&path, &episode, config.cost_rate, steps)
                    .map(|(metrics, degenerate)| DrawOutcome {
                        wealth: path.wealth.clone(),
                        metrics,
                        fallback,
                        degenerate_sharpe: degenerate,
                    })
                    .map_err(|e| e.to_string())
            })
        })
        .collect()
}

fn build_episode(
    pool: &PriceSeries,
    tickers: &[String],
    test_start_idx: usize,
    test_days: usize,
) -> Result<MarketEpisode, BacktestError> {
    let sub = pool.select_tickers(tickers)?;
    let relatives = sub.relatives(test_start_idx, test_days - 1)?;
    Ok(MarketEpisode::new(
        tickers.to_vec(),
        relatives,
        Some(pool.dates[test_start_idx]),
    )?)
}

fn estimation_slice(
    pool: &PriceSeries,
    tickers: &[String],
    end_idx: usize,
    lookback: usize,
) -> Result<EstimationWindow, String> {
    if end_idx < lookback {
        return Err(format!(
            "only {end_idx} days of history before the decision, lookback needs {lookback}"
        ));
    }
    let sub = pool.select_tickers(tickers).map_err(|e| e.to_string())?;
    let slice = PriceSeries {
        dates: sub.dates[end_idx - lookback..end_idx].to_vec(),
        tickers: sub.tickers.clone(),
        close: DMatrix::from_fn(lookback, tickers.len(), |i, j| {
            sub.close[(end_idx - lookback + i, j)]
        }),
    };
    EstimationWindow::estimate(&slice).map_err(|e| e.to_string())
}

fn score_path(
    path: &WealthPath,
    episode: &MarketEpisode,
    cost_rate: f64,
    steps: usize,
) -> Result<(MetricSummary, bool), BacktestError> {
    let returns = path.daily_returns();
    let raw_annual = path.terminal().powf(TRADING_DAYS as f64 / steps as f64) - 1.0;
    let cost_pct = transaction_cost(path, episode, cost_rate)?;
    let turnover_pct = turnover(path, episode)?;
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let (sharpe_val, degenerate) = match sharpe(&returns) {
        Ok(s) => (s, false),
        Err(BacktestError::ZeroVariance) => (0.0, true),
        Err(e) => return Err(e),
    };
    Ok((
        MetricSummary {
            cost_adjusted_return_pct: raw_annual * 100.0 - cost_pct,
            stdev_pct: var.sqrt() * (TRADING_DAYS as f64).sqrt() * 100.0,
            sharpe: sharpe_val,
            turnover_pct,
            transaction_cost_pct: cost_pct,
            max_drawdown_pct: max_drawdown(&path.wealth) * 100.0,
        },
        degenerate,
    ))
}

fn aggregate(
    kind: &StrategyKind,
    si: usize,
    draws: &[Vec<Result<DrawOutcome, String>>],
    dates: &[NaiveDate],
) -> StrategyReport {
    let mut ok: Vec<&DrawOutcome> = Vec::new();
    let mut failures = Vec::new();
    let mut fallbacks = 0usize;
    for (d, row) in draws.iter().enumerate() {
        match &row[si] {
            Ok(out) => {
                if out.fallback {
                    fallbacks += 1;
                }
                if out.degenerate_sharpe {
                    failures.push(format!("draw {d}: zero-variance returns, sharpe set to 0"));
                }
                ok.push(out);
            }
            Err(e) => failures.push(format!("draw {d}: {e}")),
        }
    }
    let k = ok.len().max(1) as f64;
    let mut metrics = MetricSummary::default();
    for out in &ok {
        metrics.cost_adjusted_return_pct += out.metrics.cost_adjusted_return_pct / k;
        metrics.stdev_pct += out.metrics.stdev_pct / k;
        metrics.sharpe += out.metrics.sharpe / k;
        metrics.turnover_pct += out.metrics.turnover_pct / k;
        metrics.transaction_cost_pct += out.metrics.transaction_cost_pct / k;
        metrics.max_drawdown_pct += out.metrics.max_drawdown_pct / k;
    }
    let points = dates.len();
    let mut mean = vec![0.0; points];
    let mut lo95 = vec![0.0; points];
    let mut hi95 = vec![0.0; points];
    if !ok.is_empty() {
        for t in 0..points {
            let mut vals: Vec<f64> = ok.iter().map(|o| o.wealth[t]).collect();
            vals.sort_by(|a, b| a.total_cmp(b));
            mean[t] = vals.iter().sum::<f64>() / vals.len() as f64;
            lo95[t] = percentile(&vals, 0.025);
            hi95[t] = percentile(&vals, 0.975);
        }
    }
    StrategyReport {
        strategy: kind.name().to_string(),
        metrics,
        band: WealthBand {
            dates: dates.to_vec(),
            mean,
            lo95,
            hi95,
        },
        failures,
        fallbacks,
    }
}

/// Linear-interpolated empirical percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let k = sorted.len();
    if k == 1 {
        return sorted[0];
    }
    let pos = q * (k - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn flat_episode(n: usize, steps: usize) -> MarketEpisode {
        MarketEpisode::new(
            (0..n).map(|i| format!("T{i}")).collect(),
            DMatrix::from_element(steps, n, 1.0),
            None,
        )
        .unwrap()
    }

    fn path(wealth: Vec<f64>, allocations: DMatrix<f64>, decisions: Vec<usize>) -> WealthPath {
        WealthPath {
            wealth,
            allocations,
            decisions,
        }
    }

    #[test]
    fn no_trading_means_zero_turnover_and_cost() {
        // positions equal to drifted positions at every step
        let episode = flat_episode(2, 3);
        let alloc = DMatrix::from_row_slice(3, 2, &[0.6, 0.4, 0.6, 0.4, 0.6, 0.4]);
        let p = path(vec![1.0; 4], alloc, (0..3).collect());
        assert_eq!(turnover(&p, &episode).unwrap(), 0.0);
        assert_eq!(transaction_cost(&p, &episode, 5e-4).unwrap(), 0.0);
    }

    #[test]
    fn full_swap_hand_case_is_200_percent() {
        // N = 2, flat prices, full liquidation into the other asset once
        let episode = flat_episode(2, 2);
        let alloc = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let p = path(vec![1.0; 3], alloc, vec![0, 1]);
        assert_relative_eq!(turnover(&p, &episode).unwrap(), 200.0, epsilon = 1e-12);
        // unit swap at 5 bp: 0.0005 * 2.0 * 100% = 0.1%
        assert_relative_eq!(
            transaction_cost(&p, &episode, 5e-4).unwrap(),
            0.1,
            epsilon = 1e-12
        );
        assert_eq!(transaction_cost(&p, &episode, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn ten_percent_rebalance_hand_case_is_20_percent() {
        let episode = flat_episode(2, 2);
        let alloc = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.4, 0.6]);
        let p = path(vec![1.0; 3], alloc, vec![0, 1]);
        assert_relative_eq!(turnover(&p, &episode).unwrap(), 20.0, epsilon = 1e-12);
    }

    #[test]
    fn buy_and_hold_style_paths_score_zero() {
        let episode = flat_episode(2, 3);
        let alloc = DMatrix::from_row_slice(3, 2, &[0.5, 0.5, 0.5, 0.5, 0.5, 0.5]);
        let p = path(vec![1.0; 4], alloc, vec![0]);
        assert_eq!(turnover(&p, &episode).unwrap(), 0.0);
        let too_short = path(vec![1.0], DMatrix::zeros(0, 2), vec![0]);
        assert!(matches!(
            turnover(&too_short, &episode),
            Err(BacktestError::PathTooShort(_))
        ));
    }

    /// Exhaustive O(T^2) drawdown oracle.
    fn drawdown_oracle(w: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..w.len() {
            for j in i..w.len() {
                worst = worst.max((w[i] - w[j]) / w[i]);
            }
        }
        worst
    }

    #[test]
    fn drawdown_matches_exhaustive_enumeration() {
        assert_eq!(max_drawdown(&[1.0, 1.1, 1.2]), 0.0);
        assert_eq!(max_drawdown(&[1.0, 1.0, 1.0]), 0.0);
        assert_relative_eq!(max_drawdown(&[1.0, 1.2, 0.9, 1.1]), 0.25, epsilon = 1e-15);

        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..200 {
            let len = rng.random_range(2..120);
            let mut w = 1.0;
            let path: Vec<f64> = (0..len)
                .map(|_| {
                    w *= 1.0 + rng.random_range(-0.05..0.05);
                    w
                })
                .collect();
            let fast = max_drawdown(&path);
            let slow = drawdown_oracle(&path);
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn sharpe_oracle_and_degenerate_cases() {
        // alternating returns: zero mean, zero Sharpe
        let s = sharpe(&[0.01, -0.01, 0.01, -0.01]).unwrap();
        assert_relative_eq!(s, 0.0, epsilon = 1e-12);

        // hand-set 4-vector against an independent mean/std computation
        let r = [0.004, -0.002, 0.003, 0.001];
        let mean = r.iter().sum::<f64>() / 4.0;
        let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
        let expected = mean / var.sqrt() * 252f64.sqrt();
        assert_relative_eq!(sharpe(&r).unwrap(), expected, epsilon = 1e-12);

        assert!(matches!(
            sharpe(&[0.01, 0.01, 0.01]),
            Err(BacktestError::ZeroVariance)
        ));
        assert!(matches!(sharpe(&[0.01]), Err(BacktestError::PathTooShort(_))));
    }

    #[test]
    fn cost_equals_rate_times_unnormalized_notional() {
        // random paths: transaction_cost must equal the direct summation
        // of traded notional times the rate
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..50 {
            let steps = rng.random_range(2..40);
            let n = rng.random_range(1..5);
            let episode = MarketEpisode::new(
                (0..n).map(|i| format!("T{i}")).collect(),
                DMatrix::from_fn(steps, n, |_, _| 1.0 + rng.random_range(-0.03..0.03)),
                None,
            )
            .unwrap();
            // synthesize a self-financing path with random rebalances
            let mut wealth = vec![1.0];
            let mut alloc = DMatrix::zeros(steps, n);
            let mut w = 1.0;
            for i in 0..steps {
                let mut weights = DVector::from_fn(n, |_, _| rng.random_range(0.01..1.0));
                let s = weights.sum();
                weights /= s;
                let v = weights * w;
                alloc.row_mut(i).copy_from(&v.transpose());
                w = v.dot(&episode.relatives.row(i).transpose());
                wealth.push(w);
            }
            let p = path(wealth.clone(), alloc.clone(), (0..steps).collect());

            let mut notional = 0.0;
            for i in 0..steps - 1 {
                for j in 0..n {
                    notional += (alloc[(i + 1, j)] - alloc[(i, j)] * episode.relatives[(i, j)]).abs();
                }
            }
            let direct = 5e-4 * notional / wealth[0] * 100.0;
            let got = transaction_cost(&p, &episode, 5e-4).unwrap();
            assert!((got - direct).abs() <= 1e-12 * (1.0 + direct.abs()));

            // turnover against its own direct summation
            let mut tsum = 0.0;
            for i in 0..steps - 1 {
                for j in 0..n {
                    tsum += ((alloc[(i + 1, j)] - alloc[(i, j)] * episode.relatives[(i, j)])
                        / wealth[i + 1])
                        .abs();
                }
            }
            let t_direct = tsum / (steps - 1) as f64 * 100.0;
            let t_got = turnover(&p, &episode).unwrap();
            assert!((t_got - t_direct).abs() <= 1e-12 * (1.0 + t_direct.abs()));
        }
    }

    #[test]
    fn percentile_brackets_the_mean() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        for _ in 0..50 {
            let k = rng.random_range(2..60);
            let mut vals: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..5.0)).collect();
            vals.sort_by(|a, b| a.total_cmp(b));
            let mean = vals.iter().sum::<f64>() / k as f64;
            let lo = percentile(&vals, 0.025);
            let hi = percentile(&vals, 0.975);
            assert!(lo <= mean + 1e-12 && mean <= hi + 1e-12);
        }
    }

    #[test]
    fn backtest_on_a_flat_market_is_all_zeros() {
        let spec = SyntheticSpec {
            assets: (0..3)
                .map(|i| GbmAssetSpec {
                    ticker: format!("S{i}"),
                    drift: 0.0,
                    vol: 0.0,
                    start_price: 50.0,
                })
                .collect(),
            correlation: None,
        };
        let pool = gen_synthetic_pool(
            &spec,
            160,
            1,
            NaiveDate::from_ymd_opt(2019, 1, 1).unwrap(),
        )
        .unwrap();
        let windows = vec![BacktestWindow {
            label: "w0".into(),
            train: (pool.dates[0], pool.dates[39]),
            validation: (pool.dates[40], pool.dates[79]),
            test: (pool.dates[120], pool.dates[159]),
        }];
        let config = BacktestConfig {
            n: 2,
            portfolios: 1,
            windows,
            lookback_days: 30,
            quarters: 4,
            drl_grid: Vec::new(),
            val_portfolios: 2,
            seed: 3,
            ..BacktestConfig::default()
        };
        let report = run_backtest(
            &[StrategyKind::BuyAndHold, StrategyKind::QuarterlyMv],
            &pool,
            &config,
            &[0.0],
        )
        .unwrap();
        for s in &report.windows[0].strategies {
            assert!(s.metrics.cost_adjusted_return_pct.abs() <= 1e-9);
            assert!(s.metrics.max_drawdown_pct.abs() <= 1e-9);
            assert_eq!(s.metrics.sharpe, 0.0);
            // zero-variance draws are flagged
            assert!(!s.failures.is_empty());
            for (m, lo, hi) in itertools_zip(&s.band) {
                assert!(lo <= m && m <= hi);
            }
        }
    }

    fn itertools_zip(b: &WealthBand) -> Vec<(f64, f64, f64)> {
        (0..b.mean.len()).map(|i| (b.mean[i], b.lo95[i], b.hi95[i])).collect()
    }

    #[test]
    fn repeated_runs_produce_identical_reports() {
        let spec = SyntheticSpec {
            assets: (0..4)
                .map(|i| GbmAssetSpec {
                    ticker: format!("S{i}"),
                    drift: 0.0004,
                    vol: 0.015,
                    start_price: 100.0,
                })
                .collect(),
            correlation: None,
        };
        let pool = gen_synthetic_pool(
            &spec,
            200,
            17,
            NaiveDate::from_ymd_opt(2018, 1, 1).unwrap(),
        )
        .unwrap();
        let windows = vec![BacktestWindow {
            label: "w0".into(),
            train: (pool.dates[0], pool.dates[49]),
            validation: (pool.dates[50], pool.dates[99]),
            test: (pool.dates[140], pool.dates[199]),
        }];
        let config = BacktestConfig {
            n: 2,
            portfolios: 4,
            windows,
            lookback_days: 40,
            quarters: 2,
            drl_grid: Vec::new(),
            val_portfolios: 2,
            seed: 23,
            ..BacktestConfig::default()
        };
        let kinds = [StrategyKind::BuyAndHold, StrategyKind::QuarterlyMv];
        let a = run_backtest(&kinds, &pool, &config, &[0.05]).unwrap();
        let b = run_backtest(&kinds, &pool, &config, &[0.05]).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
