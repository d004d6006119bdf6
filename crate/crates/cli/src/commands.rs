//! Subcommand implementations.

use std::path::PathBuf;

use advisor_core::backtest::{
    self, gen_synthetic_pool, GbmAssetSpec, StrategyKind, SyntheticSpec,
};
use advisor_core::drl::{self, Policy, TrainConfig};
use advisor_core::forward::{solve_forward, ForwardSpec};
use advisor_core::inverse::{
    alternating_learn, ensemble_annual_target, EtaSchedule, IpoConfig, LearnMode,
    RiskProfileEstimate, TargetReturn,
};
use advisor_core::inverse::miqp::MiqpStrategy;
use advisor_core::market::{
    self, load_holdings, load_prices, monthly_aggregate, rolling_yearly_profit,
};
use advisor_core::mv_env::{self, MarketEpisode};
use advisor_core::TRADING_DAYS;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::CliError;
use crate::params::{self, parse_date, write_json};

pub fn gen_data(flags: params::GenDataFlags) -> Result<(), CliError> {
    let (p, out) = flags.resolve()?;
    if p.tickers == 0 || p.days == 0 {
        return Err(CliError::Data("tickers and days must be positive".into()));
    }
    let daily_drift = p.annual_drift / TRADING_DAYS as f64;
    let daily_vol = p.annual_vol / (TRADING_DAYS as f64).sqrt();
    let n = p.tickers;
    let correlation = if p.corr.abs() > 0.0 {
        Some(DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { p.corr }))
    } else {
        None
    };
    let spec = SyntheticSpec {
        assets: (0..n)
            .map(|i| GbmAssetSpec {
                ticker: format!("S{i:03}"),
                drift: daily_drift,
                vol: daily_vol,
                start_price: 100.0,
            })
            .collect(),
        correlation,
    };
    let start = parse_date(&p.start)?;
    let pool = gen_synthetic_pool(&spec, p.days, p.seed, start)?;
    pool.write_csv(&out)?;

    if let Some(hpath) = &p.holdings_out {
        write_consistent_holdings(&pool, &p, hpath)?;
    }
    write_json(&out.with_extension("meta.json"), &p)?;
    println!(
        "wrote {} ({} days x {} tickers, seed {})",
        out.display(),
        pool.n_days(),
        pool.n_assets(),
        p.seed
    );
    Ok(())
}

/// Holdings produced by a fixed-tolerance mean-variance allocator over the
/// pool's own rolling statistics; `infer` round-trips these by design.
fn write_consistent_holdings(
    pool: &market::PriceSeries,
    p: &params::GenDataParams,
    path: &PathBuf,
) -> Result<(), CliError> {
    let daily = rolling_yearly_profit(pool, p.profit_window)?;
    let monthly = monthly_aggregate(&daily)?;
    let mut rows: Vec<(chrono::NaiveDate, Vec<f64>)> = Vec::new();
    let mut m = p.lookback; // first index with a full lookback behind it
    while m < monthly.dates.len() {
        let date = monthly.dates[m];
        let (q, mean) = market::lookback_covariance(&monthly, date, p.lookback)?;
        let sol = solve_forward(&ForwardSpec::risk_tolerance(q, mean, p.risk_tolerance))?;
        // clamp solver-tolerance negatives and renormalize
        let mut w: Vec<f64> = sol.x.iter().map(|&v| v.max(0.0)).collect();
        let s: f64 = w.iter().sum();
        for v in &mut w {
            *v /= s;
        }
        rows.push((date, w));
        m += p.holdings_every;
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!(
            "no monthly date has {} months of history; generate more days",
            p.lookback
        )));
    }
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| CliError::Data(format!("open {}: {e}", path.display())))?;
    writer
        .write_record(["date", "ticker", "weight"])
        .map_err(|e| CliError::Data(e.to_string()))?;
    for (date, w) in &rows {
        for (j, t) in pool.tickers.iter().enumerate() {
            writer
                .write_record([date.to_string(), t.clone(), format!("{:.14}", w[j])])
                .map_err(|e| CliError::Data(e.to_string()))?;
        }
    }
    writer.flush().map_err(|e| CliError::Data(e.to_string()))?;
    println!("wrote {} ({} snapshots)", path.display(), rows.len());
    Ok(())
}

#[derive(Serialize)]
struct RiskProfileArtifact<'a> {
    config: &'a params::InferParams,
    warnings: &'a [String],
    estimates: &'a [RiskProfileEstimate],
    target: &'a TargetReturn,
}

pub fn infer(flags: params::InferFlags) -> Result<(), CliError> {
    let (p, prices_path, holdings_path, out) = flags.resolve()?;
    let mode = match p.mode.as_str() {
        "restart" => LearnMode::Restart,
        "warm" => LearnMode::Warm,
        other => return Err(CliError::Data(format!("unknown mode {other:?}"))),
    };
    let strategy = match p.solver.as_str() {
        "enumerate" => MiqpStrategy::Enumerate,
        "branch-and-bound" => MiqpStrategy::BranchAndBound,
        other => return Err(CliError::Data(format!("unknown solver {other:?}"))),
    };

    let prices = load_prices(&prices_path)?;
    let holdings = load_holdings(&holdings_path)?;
    let daily = rolling_yearly_profit(&prices, p.window)?;
    let monthly = monthly_aggregate(&daily)?;
    let stream = market::align_observations(&holdings, &monthly, p.lookback)?;

    let config = IpoConfig {
        big_m: p.big_m,
        eta: EtaSchedule::Constant(p.eta),
        r0: p.r0,
        c_bounds: p.c_bounds,
        e_bounds: p.c_bounds,
        r_lower: 1e-6,
        strategy,
    };
    let estimates = alternating_learn(&stream, &config, mode)?;

    // ensemble: the trailing four z estimates as quarters plus the final
    // yearly-scale estimate; z values are annual-scale by construction
    let quarterly: Vec<f64> = estimates
        .iter()
        .rev()
        .take(4)
        .map(|e| (1.0 + e.z).powf(0.25) - 1.0)
        .rev()
        .collect();
    let yearly = estimates.last().map(|e| e.z).unwrap_or(0.0);
    let mut target = ensemble_annual_target(&quarterly, yearly);
    target.label = format!(
        "{}..{}",
        estimates.first().map(|e| e.date.to_string()).unwrap_or_default(),
        estimates.last().map(|e| e.date.to_string()).unwrap_or_default()
    );

    write_json(
        &out,
        &RiskProfileArtifact {
            config: &p,
            warnings: &stream.warnings,
            estimates: &estimates,
            target: &target,
        },
    )?;
    println!(
        "wrote {} ({} estimates, ensemble target {:.4})",
        out.display(),
        estimates.len(),
        target.ensemble
    );
    Ok(())
}

pub fn train(flags: params::TrainFlags) -> Result<(), CliError> {
    let (p, prices_path, out, target) = flags.resolve()?;
    let pool = load_prices(&prices_path)?;
    let val_pool = match &p.val_prices {
        Some(vp) => load_prices(vp)?,
        None => pool.clone(),
    };
    let grid: Vec<TrainConfig> = match &p.grid {
        Some(g) => g.clone(),
        None => p
            .episodes
            .iter()
            .map(|&episodes| TrainConfig {
                episodes,
                ..p.base.clone()
            })
            .collect(),
    };
    let outcome = drl::hyperparameter_search(&grid, &pool, &val_pool, target, p.portfolios)?;
    outcome.policy.save(&out)?;
    for e in &outcome.leaderboard {
        println!(
            "config {} (episodes {}): sharpe {:.4}{}",
            e.config_index,
            e.episodes,
            e.avg_sharpe,
            e.error.as_deref().map(|m| format!(" [failed: {m}]")).unwrap_or_default()
        );
    }
    write_json(
        &out.with_extension("leaderboard.json"),
        &serde_json::json!({ "config": p, "target": target, "leaderboard": outcome.leaderboard }),
    )?;
    if let Some(log_path) = &p.log_out {
        // deterministic re-run of the winner to capture its episode log
        let rerun = drl::train(&grid[outcome.best_index], &pool, target)
            .map_err(CliError::from)?;
        drl::write_training_log(&rerun.log, log_path)?;
    }
    println!("wrote {} (best config {})", out.display(), outcome.best_index);
    Ok(())
}

pub fn backtest(flags: params::BacktestFlags) -> Result<(), CliError> {
    let (p, prices_path, out) = flags.resolve()?;
    let pool = load_prices(&prices_path)?;
    let strategies: Vec<StrategyKind> = p
        .strategies
        .iter()
        .map(|s| match s.as_str() {
            "ipo-drl" => Ok(StrategyKind::IpoDrl),
            "buy-and-hold" => Ok(StrategyKind::BuyAndHold),
            "quarterly-mv" => Ok(StrategyKind::QuarterlyMv),
            other => Err(CliError::Data(format!("unknown strategy {other:?}"))),
        })
        .collect::<Result<_, _>>()?;
    let report = backtest::run_backtest(&strategies, &pool, &p.backtest, &p.targets)?;
    write_json(&out, &serde_json::json!({ "run": p, "report": report }))?;
    if let Some(dir) = &p.csv_dir {
        report.write_band_csvs(dir)?;
    }
    println!("wrote {} ({} windows)", out.display(), report.windows.len());
    Ok(())
}

pub fn eval_policy(flags: params::EvalPolicyFlags) -> Result<(), CliError> {
    let (p, policy_path, episode_path, out) = flags.resolve()?;
    let policy = Policy::load(&policy_path)?;
    let episode = MarketEpisode::read_csv(&episode_path)?;
    if episode.n_assets() != policy.config.n_assets {
        return Err(CliError::Data(format!(
            "episode has {} assets, policy expects {}",
            episode.n_assets(),
            policy.config.n_assets
        )));
    }
    let omega = p.omega.unwrap_or(policy.omega);
    let path = mv_env::run_episode(&policy, &episode, omega)?;
    let returns = path.daily_returns();
    let steps = episode.horizon();
    let annualized =
        path.terminal().powf(TRADING_DAYS as f64 / steps as f64) - 1.0;
    let sharpe = backtest::sharpe(&returns).ok();
    let turnover = backtest::turnover(&path, &episode)?;
    let cost = backtest::transaction_cost(&path, &episode, p.cost_rate)?;
    let drawdown = backtest::max_drawdown(&path.wealth);
    write_json(
        &out,
        &serde_json::json!({
            "config": p,
            "policy_seed": policy.config.seed,
            "omega": omega,
            "terminal_wealth": path.terminal(),
            "annualized_return": annualized,
            "sharpe": sharpe,
            "turnover_pct": turnover,
            "transaction_cost_pct": cost,
            "max_drawdown": drawdown,
            "wealth": path.wealth,
        }),
    )?;
    println!(
        "wrote {} (terminal wealth {:.4})",
        out.display(),
        path.terminal()
    );
    Ok(())
}
