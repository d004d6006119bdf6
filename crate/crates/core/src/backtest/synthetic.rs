//! Synthetic market data: correlated geometric random walks on a weekday
//! calendar. The desk-scale stand-in for a live stock pool.

use chrono::{Datelike, NaiveDate, Weekday};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::market::{min_eigenvalue, psd_floor, PriceSeries};

use super::BacktestError;

/// Per-asset daily drift/volatility of log prices.
///
/// The per-step log relative is `(drift - vol^2/2) + vol * eps`, so `drift`
/// is the per-day growth rate of the expected price.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbmAssetSpec {
    pub ticker: String,
    pub drift: f64,
    pub vol: f64,
    pub start_price: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub assets: Vec<GbmAssetSpec>,
    /// Cross-asset correlation of the daily shocks; identity when absent.
    pub correlation: Option<DMatrix<f64>>,
}

/// Generates `days` weekday closes from the spec, seeded.
pub fn gen_synthetic_pool(
    spec: &SyntheticSpec,
    days: usize,
    seed: u64,
    start: NaiveDate,
) -> Result<PriceSeries, BacktestError> {
    let n = spec.assets.len();
    if n == 0 || days == 0 {
        return Err(BacktestError::InvalidSpec(
            "need at least one asset and one day".into(),
        ));
    }
    for a in &spec.assets {
        if !(a.vol >= 0.0 && a.vol.is_finite() && a.drift.is_finite() && a.start_price > 0.0) {
            return Err(BacktestError::InvalidSpec(format!(
                "bad parameters for {}: drift {}, vol {}, start {}",
                a.ticker, a.drift, a.vol, a.start_price
            )));
        }
    }
    let chol = match &spec.correlation {
        None => DMatrix::identity(n, n),
        Some(c) => {
            if c.nrows() != n || c.ncols() != n {
                return Err(BacktestError::InvalidSpec(format!(
                    "correlation is {}x{}, expected {n}x{n}",
                    c.nrows(),
                    c.ncols()
                )));
            }
            if (c - c.transpose()).amax() > 1e-10 {
                return Err(BacktestError::InvalidSpec("correlation must be symmetric".into()));
            }
            if min_eigenvalue(c) < -1e-10 {
                return Err(BacktestError::InvalidSpec(
                    "correlation must be positive semi-definite".into(),
                ));
            }
            // floor roundoff, then a tiny ridge so the factorization exists
            // even for perfectly correlated specs
            let repaired = psd_floor(c) + DMatrix::identity(n, n) * 1e-12;
            repaired
                .cholesky()
                .ok_or_else(|| {
                    BacktestError::InvalidSpec("correlation factorization failed".into())
                })?
                .l()
        }
    };

    // canonical lexicographic ticker order
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| spec.assets[a].ticker.cmp(&spec.assets[b].ticker));

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut dates = Vec::with_capacity(days);
    let mut d = start;
    while dates.len() < days {
        if d.weekday() != Weekday::Sat && d.weekday() != Weekday::Sun {
            dates.push(d);
        }
        d = d.succ_opt().expect("date range");
    }

    let mut log_prices: Vec<f64> = order
        .iter()
        .map(|&j| spec.assets[j].start_price.ln())
        .collect();
    let mut close = DMatrix::zeros(days, n);
    for (i, _) in dates.iter().enumerate() {
        if i > 0 {
            let eps = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let shocks = &chol * eps;
            for (k, &j) in order.iter().enumerate() {
                let a = &spec.assets[j];
                log_prices[k] += a.drift - 0.5 * a.vol * a.vol + a.vol * shocks[k];
            }
        }
        for k in 0..n {
            close[(i, k)] = log_prices[k].exp();
        }
    }
    Ok(PriceSeries {
        dates,
        tickers: order.iter().map(|&j| spec.assets[j].ticker.clone()).collect(),
        close,
    })
}
