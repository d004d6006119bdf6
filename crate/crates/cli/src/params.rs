//! Per-subcommand parameters: a JSON config file provides defaults, flags
//! override individual fields, and the fully resolved set is embedded in
//! every output artifact.

use std::path::{Path, PathBuf};

use advisor_core::backtest::BacktestConfig;
use advisor_core::drl::TrainConfig;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

fn load_config<T: serde::de::DeserializeOwned + Default>(
    path: &Option<PathBuf>,
) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Data(format!("read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("parse {}: {e}", p.display())))
        }
    }
}

fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    path.clone()
        .ok_or_else(|| CliError::Data(format!("{what} is required (flag or config file)")))
}

pub fn parse_date(s: &str) -> Result<chrono::NaiveDate, CliError> {
    chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|_| CliError::Data(format!("unparseable date {s:?}")))
}

// ---------------------------------------------------------------- gen-data

#[derive(Args)]
pub struct GenDataFlags {
    /// JSON config file mirroring the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output prices CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of synthetic tickers.
    #[arg(long)]
    pub tickers: Option<usize>,
    /// Trading days to generate.
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Annual drift applied to every asset.
    #[arg(long)]
    pub annual_drift: Option<f64>,
    /// Annual volatility applied to every asset.
    #[arg(long)]
    pub annual_vol: Option<f64>,
    /// Common pairwise shock correlation.
    #[arg(long)]
    pub corr: Option<f64>,
    /// First calendar date (weekends are skipped).
    #[arg(long)]
    pub start: Option<String>,
    /// Also emit holdings generated by a fixed-risk-tolerance allocator.
    #[arg(long)]
    pub holdings_out: Option<PathBuf>,
    /// Risk tolerance of the synthetic holdings generator.
    #[arg(long)]
    pub risk_tolerance: Option<f64>,
    /// Months between holdings snapshots.
    #[arg(long)]
    pub holdings_every: Option<usize>,
    /// Lookback months for the snapshot covariance.
    #[arg(long)]
    pub lookback: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataParams {
    pub out: Option<PathBuf>,
    pub tickers: usize,
    pub days: usize,
    pub seed: u64,
    pub annual_drift: f64,
    pub annual_vol: f64,
    pub corr: f64,
    pub start: String,
    pub holdings_out: Option<PathBuf>,
    pub risk_tolerance: f64,
    pub holdings_every: usize,
    pub lookback: usize,
    pub profit_window: usize,
}

impl Default for GenDataParams {
    fn default() -> Self {
        GenDataParams {
            out: None,
            tickers: 8,
            days: 1600,
            seed: 1,
            annual_drift: 0.05,
            annual_vol: 0.2,
            corr: 0.0,
            start: "2015-01-02".to_string(),
            holdings_out: None,
            risk_tolerance: 2.0,
            holdings_every: 3,
            lookback: 12,
            profit_window: 252,
        }
    }
}

impl GenDataFlags {
    pub fn resolve(self) -> Result<(GenDataParams, PathBuf), CliError> {
        let mut p: GenDataParams = load_config(&self.config)?;
        if self.out.is_some() {
            p.out = self.out;
        }
        if let Some(v) = self.tickers {
            p.tickers = v;
        }
        if let Some(v) = self.days {
            p.days = v;
        }
        if let Some(v) = self.seed {
            p.seed = v;
        }
        if let Some(v) = self.annual_drift {
            p.annual_drift = v;
        }
        if let Some(v) = self.annual_vol {
            p.annual_vol = v;
        }
        if let Some(v) = self.corr {
            p.corr = v;
        }
        if let Some(v) = self.start {
            p.start = v;
        }
        if self.holdings_out.is_some() {
            p.holdings_out = self.holdings_out;
        }
        if let Some(v) = self.risk_tolerance {
            p.risk_tolerance = v;
        }
        if let Some(v) = self.holdings_every {
            p.holdings_every = v;
        }
        if let Some(v) = self.lookback {
            p.lookback = v;
        }
        let out = require(&p.out, "--out")?;
        Ok((p, out))
    }
}

// ------------------------------------------------------------------- infer

#[derive(Args)]
pub struct InferFlags {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Prices CSV (`date,ticker,close`).
    #[arg(long)]
    pub prices: Option<PathBuf>,
    /// Holdings CSV (`date,ticker,weight`).
    #[arg(long)]
    pub holdings: Option<PathBuf>,
    /// Output risk-profile JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Rolling profit window in trading days.
    #[arg(long)]
    pub window: Option<usize>,
    /// Lookback months behind each observation.
    #[arg(long)]
    pub lookback: Option<usize>,
    /// Observation-fit weight.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Initial risk-tolerance guess.
    #[arg(long)]
    pub r0: Option<f64>,
    #[arg(long)]
    pub big_m: Option<f64>,
    /// `restart` (paper-faithful) or `warm`.
    #[arg(long)]
    pub mode: Option<String>,
    /// `enumerate` or `branch-and-bound`.
    #[arg(long)]
    pub solver: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InferParams {
    pub prices: Option<PathBuf>,
    pub holdings: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub window: usize,
    pub lookback: usize,
    pub eta: f64,
    pub r0: f64,
    pub big_m: f64,
    pub c_bounds: (f64, f64),
    pub mode: String,
    pub solver: String,
}

impl Default for InferParams {
    fn default() -> Self {
        InferParams {
            prices: None,
            holdings: None,
            out: None,
            window: 252,
            lookback: 12,
            eta: 1000.0,
            r0: 1.0,
            big_m: 1000.0,
            c_bounds: (-0.5, 1.0),
            mode: "restart".to_string(),
            solver: "branch-and-bound".to_string(),
        }
    }
}

impl InferFlags {
    pub fn resolve(self) -> Result<(InferParams, PathBuf, PathBuf, PathBuf), CliError> {
        let mut p: InferParams = load_config(&self.config)?;
        if self.prices.is_some() {
            p.prices = self.prices;
        }
        if self.holdings.is_some() {
            p.holdings = self.holdings;
        }
        if self.out.is_some() {
            p.out = self.out;
        }
        if let Some(v) = self.window {
            p.window = v;
        }
        if let Some(v) = self.lookback {
            p.lookback = v;
        }
        if let Some(v) = self.eta {
            p.eta = v;
        }
        if let Some(v) = self.r0 {
            p.r0 = v;
        }
        if let Some(v) = self.big_m {
            p.big_m = v;
        }
        if let Some(v) = self.mode {
            p.mode = v;
        }
        if let Some(v) = self.solver {
            p.solver = v;
        }
        let prices = require(&p.prices, "--prices")?;
        let holdings = require(&p.holdings, "--holdings")?;
        let out = require(&p.out, "--out")?;
        Ok((p, prices, holdings, out))
    }
}

// ------------------------------------------------------------------- train

#[derive(Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training pool CSV.
    #[arg(long)]
    pub prices: Option<PathBuf>,
    /// Validation pool CSV (training pool when absent).
    #[arg(long)]
    pub val_prices: Option<PathBuf>,
    /// Output policy JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Annual target return.
    #[arg(long)]
    pub target: Option<f64>,
    /// Stocks per episode.
    #[arg(long)]
    pub n: Option<usize>,
    /// Steps per training episode.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Comma-separated episode-count grid (early-stopping candidates).
    #[arg(long, value_delimiter = ',')]
    pub episodes: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Validation portfolios per grid entry.
    #[arg(long)]
    pub portfolios: Option<usize>,
    /// Per-episode training log CSV for the winning run.
    #[arg(long)]
    pub log_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub prices: Option<PathBuf>,
    pub val_prices: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub target: Option<f64>,
    pub episodes: Vec<usize>,
    pub portfolios: usize,
    pub log_out: Option<PathBuf>,
    /// Base configuration shared by every grid entry.
    pub base: TrainConfig,
    /// Explicit grid; overrides `episodes` x `base` when present.
    pub grid: Option<Vec<TrainConfig>>,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            prices: None,
            val_prices: None,
            out: None,
            target: None,
            episodes: vec![500],
            portfolios: 20,
            log_out: None,
            base: TrainConfig::default(),
            grid: None,
        }
    }
}

impl TrainFlags {
    pub fn resolve(self) -> Result<(TrainParams, PathBuf, PathBuf, f64), CliError> {
        let mut p: TrainParams = load_config(&self.config)?;
        if self.prices.is_some() {
            p.prices = self.prices;
        }
        if self.val_prices.is_some() {
            p.val_prices = self.val_prices;
        }
        if self.out.is_some() {
            p.out = self.out;
        }
        if self.target.is_some() {
            p.target = self.target;
        }
        if let Some(v) = self.n {
            p.base.n_assets = v;
        }
        if let Some(v) = self.horizon {
            p.base.horizon = v;
        }
        if let Some(v) = self.episodes {
            p.episodes = v;
        }
        if let Some(v) = self.seed {
            p.base.seed = v;
        }
        if let Some(v) = self.portfolios {
            p.portfolios = v;
        }
        if self.log_out.is_some() {
            p.log_out = self.log_out;
        }
        let prices = require(&p.prices, "--prices")?;
        let out = require(&p.out, "--out")?;
        let target = p
            .target
            .ok_or_else(|| CliError::Data("--target is required".into()))?;
        Ok((p, prices, out, target))
    }
}

// ---------------------------------------------------------------- backtest

#[derive(Args)]
pub struct BacktestFlags {
    /// JSON config file with windows, targets, strategies and the grid.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub prices: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for per-strategy wealth-band CSVs.
    #[arg(long)]
    pub csv_dir: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub portfolios: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Single target broadcast to every window.
    #[arg(long)]
    pub target: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BacktestParams {
    pub prices: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub csv_dir: Option<PathBuf>,
    pub strategies: Vec<String>,
    pub targets: Vec<f64>,
    #[serde(flatten)]
    pub backtest: BacktestConfig,
}

impl Default for BacktestParams {
    fn default() -> Self {
        BacktestParams {
            prices: None,
            out: None,
            csv_dir: None,
            strategies: vec![
                "ipo-drl".to_string(),
                "buy-and-hold".to_string(),
                "quarterly-mv".to_string(),
            ],
            targets: Vec::new(),
            backtest: BacktestConfig::default(),
        }
    }
}

impl BacktestFlags {
    pub fn resolve(self) -> Result<(BacktestParams, PathBuf, PathBuf), CliError> {
        let mut p: BacktestParams = load_config(&self.config)?;
        if self.prices.is_some() {
            p.prices = self.prices;
        }
        if self.out.is_some() {
            p.out = self.out;
        }
        if self.csv_dir.is_some() {
            p.csv_dir = self.csv_dir;
        }
        if let Some(v) = self.n {
            p.backtest.n = v;
        }
        if let Some(v) = self.portfolios {
            p.backtest.portfolios = v;
        }
        if let Some(v) = self.seed {
            p.backtest.seed = v;
        }
        if let Some(t) = self.target {
            p.targets = vec![t; p.backtest.windows.len()];
        }
        let prices = require(&p.prices, "--prices")?;
        let out = require(&p.out, "--out")?;
        Ok((p, prices, out))
    }
}

// ------------------------------------------------------------- eval-policy

#[derive(Args)]
pub struct EvalPolicyFlags {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Saved policy JSON.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Episode CSV (`step,ticker,relative`).
    #[arg(long)]
    pub episode: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the policy's multiplier.
    #[arg(long)]
    pub omega: Option<f64>,
    /// Proportional cost rate for the reported transaction cost.
    #[arg(long)]
    pub cost_rate: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalPolicyParams {
    pub policy: Option<PathBuf>,
    pub episode: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub omega: Option<f64>,
    pub cost_rate: f64,
}

impl Default for EvalPolicyParams {
    fn default() -> Self {
        EvalPolicyParams {
            policy: None,
            episode: None,
            out: None,
            omega: None,
            cost_rate: 5e-4,
        }
    }
}

impl EvalPolicyFlags {
    pub fn resolve(self) -> Result<(EvalPolicyParams, PathBuf, PathBuf, PathBuf), CliError> {
        let mut p: EvalPolicyParams = load_config(&self.config)?;
        if self.policy.is_some() {
            p.policy = self.policy;
        }
        if self.episode.is_some() {
            p.episode = self.episode;
        }
        if self.out.is_some() {
            p.out = self.out;
        }
        if self.omega.is_some() {
            p.omega = self.omega;
        }
        if let Some(v) = self.cost_rate {
            p.cost_rate = v;
        }
        let policy = require(&p.policy, "--policy")?;
        let episode = require(&p.episode, "--episode")?;
        let out = require(&p.out, "--out")?;
        Ok((p, policy, episode, out))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text)
        .map_err(|e| CliError::Data(format!("write {}: {e}", path.display())))
}
