//! Market data ingestion and observation preparation.
//!
//! Prices come in as long-format CSV (`date,ticker,close`), holdings as
//! (`date,ticker,weight`). From prices we derive rolling yearly profits,
//! month-level aggregates, and lookback covariance/mean pairs, then align
//! them with holdings snapshots into an observation stream for the
//! inverse-optimization agent.
//!
//! Conventions: tickers are kept in lexicographic order everywhere, missing
//! cells are a hard error (no imputation), and covariance matrices are
//! symmetrized and eigenvalue-floored at zero after estimation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("unparseable date {0:?}")]
    UnparseableDate(String),
    #[error("missing cell for ({date}, {ticker})")]
    MissingCell { date: NaiveDate, ticker: String },
    #[error("duplicate cell for ({date}, {ticker})")]
    DuplicateCell { date: NaiveDate, ticker: String },
    #[error("non-positive price {close} for ({date}, {ticker})")]
    NonPositivePrice {
        date: NaiveDate,
        ticker: String,
        close: f64,
    },
    #[error("series of length {len} shorter than window {window}")]
    SeriesTooShort { len: usize, window: usize },
    #[error("input is already aggregated to {0:?}")]
    WrongAggregation(Aggregation),
    #[error("need {needed} monthly observations at {date}, have {available}")]
    InsufficientHistory {
        date: NaiveDate,
        needed: usize,
        available: usize,
    },
    #[error("holdings universe shares no tickers with the price universe")]
    UniverseMismatch,
    #[error("holdings for {date} sum to {sum}, expected 1 within 1e-6")]
    BadWeightSum { date: NaiveDate, sum: f64 },
    #[error("negative weight {weight} for ({date}, {ticker})")]
    NegativeWeight {
        date: NaiveDate,
        ticker: String,
        weight: f64,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Dense per-asset daily closing prices on a shared, strictly increasing
/// date index. Columns follow lexicographic ticker order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriceSeries {
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
    /// One row per date, one column per ticker; finite and > 0.
    pub close: DMatrix<f64>,
}

impl PriceSeries {
    pub fn n_assets(&self) -> usize {
        self.tickers.len()
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    /// Rows with `start <= date <= end`.
    pub fn slice_dates(&self, start: NaiveDate, end: NaiveDate) -> Result<PriceSeries, MarketError> {
        let idx: Vec<usize> = (0..self.n_days())
            .filter(|&i| self.dates[i] >= start && self.dates[i] <= end)
            .collect();
        if idx.is_empty() {
            return Err(MarketError::Invalid(format!(
                "no dates in range {start}..={end}"
            )));
        }
        let close = DMatrix::from_fn(idx.len(), self.n_assets(), |i, j| self.close[(idx[i], j)]);
        Ok(PriceSeries {
            dates: idx.iter().map(|&i| self.dates[i]).collect(),
            tickers: self.tickers.clone(),
            close,
        })
    }

    /// Column view restricted to the given tickers (must all exist).
    pub fn select_tickers(&self, tickers: &[String]) -> Result<PriceSeries, MarketError> {
        let mut cols = Vec::with_capacity(tickers.len());
        for t in tickers {
            let j = self
                .tickers
                .iter()
                .position(|s| s == t)
                .ok_or_else(|| MarketError::Invalid(format!("unknown ticker {t}")))?;
            cols.push(j);
        }
        let close = DMatrix::from_fn(self.n_days(), cols.len(), |i, k| self.close[(i, cols[k])]);
        Ok(PriceSeries {
            dates: self.dates.clone(),
            tickers: tickers.to_vec(),
            close,
        })
    }

    /// Gross relatives `close[t+1]/close[t]` for rows `start..start+steps`.
    pub fn relatives(&self, start: usize, steps: usize) -> Result<DMatrix<f64>, MarketError> {
        if start + steps + 1 > self.n_days() {
            return Err(MarketError::SeriesTooShort {
                len: self.n_days(),
                window: start + steps + 1,
            });
        }
        Ok(DMatrix::from_fn(steps, self.n_assets(), |i, j| {
            self.close[(start + i + 1, j)] / self.close[(start + i, j)]
        }))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MarketError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["date", "ticker", "close"])?;
        for (i, d) in self.dates.iter().enumerate() {
            for (j, t) in self.tickers.iter().enumerate() {
                w.write_record([d.to_string(), t.clone(), format!("{:.10}", self.close[(i, j)])])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    Daily,
    Monthly,
}

/// Rolling yearly profit ratios, daily or aggregated to month level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfitSeries {
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
    pub profits: DMatrix<f64>,
    pub aggregation: Aggregation,
}

impl ProfitSeries {
    pub fn select_tickers(&self, tickers: &[String]) -> Result<ProfitSeries, MarketError> {
        let mut cols = Vec::with_capacity(tickers.len());
        for t in tickers {
            let j = self
                .tickers
                .iter()
                .position(|s| s == t)
                .ok_or_else(|| MarketError::Invalid(format!("unknown ticker {t}")))?;
            cols.push(j);
        }
        let profits = DMatrix::from_fn(self.dates.len(), cols.len(), |i, k| {
            self.profits[(i, cols[k])]
        });
        Ok(ProfitSeries {
            dates: self.dates.clone(),
            tickers: tickers.to_vec(),
            profits,
            aggregation: self.aggregation,
        })
    }
}

/// An observed portfolio weight vector at a date, dense over a universe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HoldingsSnapshot {
    pub date: NaiveDate,
    pub tickers: Vec<String>,
    pub weights: DVector<f64>,
}

/// One aligned observation: the holdings vector plus the lookback
/// covariance and mean profit at the same date.
#[derive(Debug, Clone)]
pub struct ObservationPoint {
    pub date: NaiveDate,
    pub holdings: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub mean_profit: DVector<f64>,
}

/// Ordered observations over a canonical ticker set.
#[derive(Debug, Clone)]
pub struct ObservationStream {
    pub tickers: Vec<String>,
    pub entries: Vec<ObservationPoint>,
    /// Set when holdings tickers had to be dropped and weights renormalized.
    pub renormalized: bool,
    pub warnings: Vec<String>,
}

/// Loads a long-format price CSV and densifies it over the union of dates
/// and tickers. Any absent (date, ticker) pair is an error.
pub fn load_prices(path: &Path) -> Result<PriceSeries, MarketError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut cells: BTreeMap<(NaiveDate, String), f64> = BTreeMap::new();
    let mut dates: BTreeSet<NaiveDate> = BTreeSet::new();
    let mut tickers: BTreeSet<String> = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let date = parse_date(rec.get(0).unwrap_or(""))?;
        let ticker = rec.get(1).unwrap_or("").to_string();
        let close: f64 = rec
            .get(2)
            .unwrap_or("")
            .parse()
            .map_err(|_| MarketError::Invalid(format!("bad close {:?}", rec.get(2))))?;
        if !(close.is_finite() && close > 0.0) {
            return Err(MarketError::NonPositivePrice { date, ticker, close });
        }
        if cells.insert((date, ticker.clone()), close).is_some() {
            return Err(MarketError::DuplicateCell { date, ticker });
        }
        dates.insert(date);
        tickers.insert(ticker);
    }
    let dates: Vec<NaiveDate> = dates.into_iter().collect();
    let tickers: Vec<String> = tickers.into_iter().collect();
    let mut close = DMatrix::zeros(dates.len(), tickers.len());
    for (i, d) in dates.iter().enumerate() {
        for (j, t) in tickers.iter().enumerate() {
            match cells.get(&(*d, t.clone())) {
                Some(&v) => close[(i, j)] = v,
                None => {
                    return Err(MarketError::MissingCell {
                        date: *d,
                        ticker: t.clone(),
                    })
                }
            }
        }
    }
    Ok(PriceSeries { dates, tickers, close })
}

/// Loads holdings snapshots (`date,ticker,weight`), densified over the union
/// of tickers in the file; weights must be nonnegative and sum to 1 per date.
pub fn load_holdings(path: &Path) -> Result<Vec<HoldingsSnapshot>, MarketError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut cells: BTreeMap<NaiveDate, BTreeMap<String, f64>> = BTreeMap::new();
    let mut universe: BTreeSet<String> = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let date = parse_date(rec.get(0).unwrap_or(""))?;
        let ticker = rec.get(1).unwrap_or("").to_string();
        let weight: f64 = rec
            .get(2)
            .unwrap_or("")
            .parse()
            .map_err(|_| MarketError::Invalid(format!("bad weight {:?}", rec.get(2))))?;
        if weight < 0.0 {
            return Err(MarketError::NegativeWeight { date, ticker, weight });
        }
        universe.insert(ticker.clone());
        if cells.entry(date).or_default().insert(ticker.clone(), weight).is_some() {
            return Err(MarketError::DuplicateCell { date, ticker });
        }
    }
    let tickers: Vec<String> = universe.into_iter().collect();
    let mut out = Vec::with_capacity(cells.len());
    for (date, row) in cells {
        let weights = DVector::from_fn(tickers.len(), |j, _| *row.get(&tickers[j]).unwrap_or(&0.0));
        let sum = weights.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(MarketError::BadWeightSum { date, sum });
        }
        out.push(HoldingsSnapshot {
            date,
            tickers: tickers.clone(),
            weights,
        });
    }
    Ok(out)
}

fn parse_date(s: &str) -> Result<NaiveDate, MarketError> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map_err(|_| MarketError::UnparseableDate(s.to_string()))
}

/// Rolling yearly profit: for each date `t` at least `window - 1` rows in,
/// `close[t] / close[t - window + 1] - 1` per asset, so 0 means flat.
pub fn rolling_yearly_profit(prices: &PriceSeries, window: usize) -> Result<ProfitSeries, MarketError> {
    if window < 2 {
        return Err(MarketError::Invalid("window must be >= 2".into()));
    }
    let t = prices.n_days();
    if t < window {
        return Err(MarketError::SeriesTooShort { len: t, window });
    }
    let rows = t - window + 1;
    let profits = DMatrix::from_fn(rows, prices.n_assets(), |i, j| {
        prices.close[(i + window - 1, j)] / prices.close[(i, j)] - 1.0
    });
    Ok(ProfitSeries {
        dates: prices.dates[window - 1..].to_vec(),
        tickers: prices.tickers.clone(),
        profits,
        aggregation: Aggregation::Daily,
    })
}

/// Aggregates day-level profits to month level by averaging all trading
/// days within each calendar month. Months with no rows are skipped. Each
/// month is labeled with its last trading date present in the input.
pub fn monthly_aggregate(daily: &ProfitSeries) -> Result<ProfitSeries, MarketError> {
    if daily.aggregation == Aggregation::Monthly {
        return Err(MarketError::WrongAggregation(Aggregation::Monthly));
    }
    let n = daily.tickers.len();
    let mut groups: BTreeMap<(i32, u32), Vec<usize>> = BTreeMap::new();
    for (i, d) in daily.dates.iter().enumerate() {
        groups.entry((d.year(), d.month())).or_default().push(i);
    }
    let mut dates = Vec::with_capacity(groups.len());
    let mut rows = Vec::with_capacity(groups.len());
    for (_, idx) in groups {
        let last = *idx.last().expect("non-empty month group");
        dates.push(daily.dates[last]);
        // mean shifted by the first trading day: exact for constant months
        let first = daily.profits.row(idx[0]).transpose();
        let mut mean = DVector::zeros(n);
        for &i in &idx {
            mean += daily.profits.row(i).transpose() - &first;
        }
        mean /= idx.len() as f64;
        mean += &first;
        rows.push(mean);
    }
    let profits = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
    Ok(ProfitSeries {
        dates,
        tickers: daily.tickers.clone(),
        profits,
        aggregation: Aggregation::Monthly,
    })
}

/// Sample covariance (n-1 denominator) and mean of the last `w + 1` monthly
/// rows at or before `t`. The covariance is symmetrized and its spectrum is
/// floored at zero to undo roundoff.
pub fn lookback_covariance(
    profits: &ProfitSeries,
    t: NaiveDate,
    w: usize,
) -> Result<(DMatrix<f64>, DVector<f64>), MarketError> {
    let idx: Vec<usize> = (0..profits.dates.len())
        .filter(|&i| profits.dates[i] <= t)
        .collect();
    let needed = w + 1;
    if idx.len() < needed {
        return Err(MarketError::InsufficientHistory {
            date: t,
            needed,
            available: idx.len(),
        });
    }
    let take = &idx[idx.len() - needed..];
    let n = profits.tickers.len();
    let mut mean = DVector::zeros(n);
    for &i in take {
        mean += profits.profits.row(i).transpose();
    }
    mean /= needed as f64;
    let mut cov = DMatrix::zeros(n, n);
    for &i in take {
        let d = profits.profits.row(i).transpose() - &mean;
        cov += &d * d.transpose();
    }
    cov /= (needed - 1) as f64;
    Ok((psd_floor(&cov), mean))
}

/// Symmetrizes and clips negative eigenvalues at zero.
pub fn psd_floor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return sym;
    }
    let mut floored = eig;
    for l in floored.eigenvalues.iter_mut() {
        if *l < 0.0 {
            *l = 0.0;
        }
    }
    let rec = floored.recompose();
    (&rec + rec.transpose()) * 0.5
}

/// Minimum eigenvalue of the symmetrized matrix, for PSD checks.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Aligns holdings snapshots with monthly profits: one entry per snapshot,
/// restricted to the (lexicographic) intersection of the two universes.
/// Holdings mass on tickers outside the price universe is dropped and the
/// remaining weights renormalized, with a warning recorded.
pub fn align_observations(
    holdings: &[HoldingsSnapshot],
    profits: &ProfitSeries,
    w: usize,
) -> Result<ObservationStream, MarketError> {
    if profits.aggregation != Aggregation::Monthly {
        return Err(MarketError::WrongAggregation(profits.aggregation));
    }
    let holdings_universe: BTreeSet<&String> =
        holdings.iter().flat_map(|h| h.tickers.iter()).collect();
    let tickers: Vec<String> = profits
        .tickers
        .iter()
        .filter(|t| holdings_universe.contains(t))
        .cloned()
        .collect();
    if tickers.is_empty() {
        return Err(MarketError::UniverseMismatch);
    }
    let restricted = profits.select_tickers(&tickers)?;

    let mut entries = Vec::with_capacity(holdings.len());
    let mut warnings = Vec::new();
    let mut renormalized = false;
    for snap in holdings {
        let mut y = DVector::zeros(tickers.len());
        let mut kept = 0.0;
        for (j, t) in snap.tickers.iter().enumerate() {
            if let Some(k) = tickers.iter().position(|s| s == t) {
                y[k] = snap.weights[j];
                kept += snap.weights[j];
            }
        }
        if (kept - 1.0).abs() > 1e-6 {
            if kept <= 0.0 {
                return Err(MarketError::UniverseMismatch);
            }
            y /= kept;
            renormalized = true;
            warnings.push(format!(
                "{}: dropped {:.4} holdings mass outside the price universe",
                snap.date,
                1.0 - kept
            ));
        }
        let (covariance, mean_profit) = lookback_covariance(&restricted, snap.date, w)?;
        entries.push(ObservationPoint {
            date: snap.date,
            holdings: y,
            covariance,
            mean_profit,
        });
    }
    entries.sort_by_key(|e| e.date);
    Ok(ObservationStream {
        tickers,
        entries,
        renormalized,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::io::Write;

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    fn series(dates: Vec<NaiveDate>, tickers: Vec<&str>, rows: Vec<Vec<f64>>) -> PriceSeries {
        let close = DMatrix::from_fn(rows.len(), tickers.len(), |i, j| rows[i][j]);
        PriceSeries {
            dates,
            tickers: tickers.into_iter().map(String::from).collect(),
            close,
        }
    }

    #[test]
    fn load_prices_densifies_complete_files() {
        let f = write_csv(
            "date,ticker,close\n\
             2020-01-02,B,20\n\
             2020-01-02,A,10\n\
             2020-01-03,A,11\n\
             2020-01-03,B,21\n\
             2020-01-06,A,12\n\
             2020-01-06,B,22\n",
        );
        let p = load_prices(f.path()).unwrap();
        assert_eq!(p.tickers, vec!["A", "B"]);
        assert_eq!(p.n_days(), 3);
        assert_eq!(p.close[(0, 0)], 10.0);
        assert_eq!(p.close[(2, 1)], 22.0);
        assert!(p.dates.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn load_prices_rejects_gaps_and_bad_values() {
        let gap = write_csv(
            "date,ticker,close\n2020-01-02,A,10\n2020-01-02,B,20\n2020-01-03,A,11\n",
        );
        match load_prices(gap.path()) {
            Err(MarketError::MissingCell { ticker, .. }) => assert_eq!(ticker, "B"),
            other => panic!("expected missing cell, got {other:?}"),
        }

        let zero = write_csv("date,ticker,close\n2020-01-02,A,0\n");
        assert!(matches!(
            load_prices(zero.path()),
            Err(MarketError::NonPositivePrice { .. })
        ));

        let bad_date = write_csv("date,ticker,close\n02/01/2020,A,10\n");
        assert!(matches!(
            load_prices(bad_date.path()),
            Err(MarketError::UnparseableDate(_))
        ));
    }

    #[test]
    fn rolling_profit_window_convention() {
        // constant series -> 0; 100 -> 110 over the window -> 0.10; doubling -> 1.0
        let n = 252;
        let mut rows = Vec::new();
        let mut dates = Vec::new();
        let start = date("2019-01-01");
        for i in 0..n {
            dates.push(start + chrono::Duration::days(i as i64));
            let frac = i as f64 / (n - 1) as f64;
            rows.push(vec![100.0, 100.0 + 10.0 * frac, 100.0 * (1.0 + frac)]);
        }
        let p = series(dates, vec!["C", "G", "D"], rows);
        let prof = rolling_yearly_profit(&p, 252).unwrap();
        assert_eq!(prof.dates.len(), 1);
        assert_relative_eq!(prof.profits[(0, 0)], 0.0, epsilon = 1e-14);
        assert_relative_eq!(prof.profits[(0, 1)], 0.10, epsilon = 1e-12);
        assert_relative_eq!(prof.profits[(0, 2)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rolling_profit_needs_enough_history() {
        let p = series(
            vec![date("2020-01-02"), date("2020-01-03")],
            vec!["A"],
            vec![vec![1.0], vec![2.0]],
        );
        assert!(matches!(
            rolling_yearly_profit(&p, 252),
            Err(MarketError::SeriesTooShort { .. })
        ));
    }

    #[test]
    fn monthly_aggregation_is_the_within_month_mean() {
        let daily = ProfitSeries {
            dates: vec![
                date("2020-01-10"),
                date("2020-01-20"),
                date("2020-02-10"),
                date("2020-02-20"),
            ],
            tickers: vec!["A".into()],
            profits: DMatrix::from_column_slice(4, 1, &[0.0, 0.2, 0.3, 0.3]),
            aggregation: Aggregation::Daily,
        };
        let monthly = monthly_aggregate(&daily).unwrap();
        assert_eq!(monthly.dates, vec![date("2020-01-20"), date("2020-02-20")]);
        assert_relative_eq!(monthly.profits[(0, 0)], 0.1, epsilon = 1e-15);
        assert_relative_eq!(monthly.profits[(1, 0)], 0.3, epsilon = 1e-15);
        assert!(matches!(
            monthly_aggregate(&monthly),
            Err(MarketError::WrongAggregation(_))
        ));
    }

    /// Independent textbook sample-covariance oracle.
    fn sample_cov_oracle(rows: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let k = rows.len();
        let n = rows[0].len();
        let mut mean = vec![0.0; n];
        for r in rows {
            for j in 0..n {
                mean[j] += r[j] / k as f64;
            }
        }
        let mut cov = vec![vec![0.0; n]; n];
        for r in rows {
            for a in 0..n {
                for b in 0..n {
                    cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]) / (k - 1) as f64;
                }
            }
        }
        (cov, mean)
    }

    #[test]
    fn lookback_covariance_matches_hand_oracle() {
        let rows = vec![vec![0.1, 0.0], vec![0.2, 0.1], vec![0.0, -0.1]];
        let (cov_o, mean_o) = sample_cov_oracle(&rows);
        let profits = ProfitSeries {
            dates: vec![date("2020-01-31"), date("2020-02-28"), date("2020-03-31")],
            tickers: vec!["A".into(), "B".into()],
            profits: DMatrix::from_row_slice(3, 2, &[0.1, 0.0, 0.2, 0.1, 0.0, -0.1]),
            aggregation: Aggregation::Monthly,
        };
        let (q, mean) = lookback_covariance(&profits, date("2020-03-31"), 2).unwrap();
        for a in 0..2 {
            assert_relative_eq!(mean[a], mean_o[a], epsilon = 1e-14);
            for b in 0..2 {
                assert_relative_eq!(q[(a, b)], cov_o[a][b], epsilon = 1e-12);
            }
        }
        // frozen hand values: var = cov = 0.01 with these samples
        assert_relative_eq!(q[(0, 0)], 0.01, epsilon = 1e-14);
        assert_relative_eq!(q[(0, 1)], 0.01, epsilon = 1e-14);
        assert_relative_eq!(mean[0], 0.1, epsilon = 1e-14);
        assert_relative_eq!(mean[1], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn lookback_covariance_degenerate_cases() {
        // constant profits -> zero matrix; duplicated column -> rank 1
        let profits = ProfitSeries {
            dates: (1..=3).map(|m| date(&format!("2020-0{m}-28"))).collect(),
            tickers: vec!["A".into(), "B".into()],
            profits: DMatrix::from_row_slice(3, 2, &[0.05, 0.05, 0.05, 0.05, 0.05, 0.05]),
            aggregation: Aggregation::Monthly,
        };
        let (q, mean) = lookback_covariance(&profits, date("2020-03-28"), 2).unwrap();
        assert!(q.amax() <= 1e-15);
        assert_relative_eq!(mean[0], 0.05, epsilon = 1e-15);

        let dup = ProfitSeries {
            dates: (1..=3).map(|m| date(&format!("2020-0{m}-28"))).collect(),
            tickers: vec!["A".into(), "B".into()],
            profits: DMatrix::from_row_slice(3, 2, &[0.1, 0.1, 0.2, 0.2, 0.4, 0.4]),
            aggregation: Aggregation::Monthly,
        };
        let (q, _) = lookback_covariance(&dup, date("2020-03-28"), 2).unwrap();
        assert_relative_eq!(q[(0, 1)], q[(0, 0)], epsilon = 1e-14);
        assert!(min_eigenvalue(&q) >= 0.0);
        // rank 1: determinant ~ 0
        assert!(q.determinant().abs() <= 1e-12);

        assert!(matches!(
            lookback_covariance(&dup, date("2020-03-28"), 5),
            Err(MarketError::InsufficientHistory { .. })
        ));
    }

    fn monthly_fixture(months: usize) -> ProfitSeries {
        let mut dates = Vec::new();
        let mut vals = Vec::new();
        for i in 0..months {
            let y = 2018 + (i / 12) as i32;
            let m = (i % 12) as u32 + 1;
            dates.push(NaiveDate::from_ymd_opt(y, m, 28).unwrap());
            let x = i as f64;
            vals.push(vec![0.05 + 0.01 * (x * 0.7).sin(), -0.02 + 0.02 * (x * 0.3).cos()]);
        }
        ProfitSeries {
            dates,
            tickers: vec!["AAA".into(), "BBB".into()],
            profits: DMatrix::from_fn(months, 2, |i, j| vals[i][j]),
            aggregation: Aggregation::Monthly,
        }
    }

    #[test]
    fn alignment_produces_one_entry_per_admissible_snapshot() {
        let profits = monthly_fixture(18);
        let snap = HoldingsSnapshot {
            date: date("2019-05-28"),
            tickers: vec!["AAA".into(), "BBB".into()],
            weights: DVector::from_column_slice(&[0.6, 0.4]),
        };
        let stream = align_observations(&[snap.clone()], &profits, 6).unwrap();
        assert_eq!(stream.entries.len(), 1);
        assert!(!stream.renormalized);
        assert!(min_eigenvalue(&stream.entries[0].covariance) >= -1e-10);

        let early = HoldingsSnapshot {
            date: date("2018-02-28"),
            ..snap
        };
        assert!(matches!(
            align_observations(&[early], &profits, 6),
            Err(MarketError::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn alignment_drops_unknown_tickers_with_renormalization() {
        let profits = monthly_fixture(18);
        let snap = HoldingsSnapshot {
            date: date("2019-05-28"),
            tickers: vec!["AAA".into(), "BBB".into(), "ZZZ".into()],
            weights: DVector::from_column_slice(&[0.5, 0.3, 0.2]),
        };
        let stream = align_observations(&[snap], &profits, 6).unwrap();
        assert!(stream.renormalized);
        assert_eq!(stream.tickers, vec!["AAA", "BBB"]);
        let y = &stream.entries[0].holdings;
        assert_relative_eq!(y.sum(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(y[0], 0.625, epsilon = 1e-12);

        let alien = HoldingsSnapshot {
            date: date("2019-05-28"),
            tickers: vec!["ZZZ".into()],
            weights: DVector::from_column_slice(&[1.0]),
        };
        assert!(matches!(
            align_observations(&[alien], &profits, 6),
            Err(MarketError::UniverseMismatch)
        ));
    }

    #[test]
    fn holdings_loader_enforces_weight_sums() {
        let ok = write_csv(
            "date,ticker,weight\n2020-03-31,A,0.25\n2020-03-31,B,0.75\n",
        );
        let snaps = load_holdings(ok.path()).unwrap();
        assert_eq!(snaps.len(), 1);
        assert_eq!(snaps[0].weights[0], 0.25);

        let bad = write_csv("date,ticker,weight\n2020-03-31,A,0.25\n2020-03-31,B,0.80\n");
        assert!(matches!(
            load_holdings(bad.path()),
            Err(MarketError::BadWeightSum { .. })
        ));
    }

    proptest! {
        /// Reconstruction: close[t-w+1] * (1 + profit) returns close[t].
        #[test]
        fn profit_reconstruction_roundtrip(seed in 0u64..500) {
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let days = 300;
            let mut dates = Vec::new();
            let mut rows = Vec::new();
            let mut px = [100.0f64, 50.0];
            for i in 0..days {
                dates.push(date("2018-01-01") + chrono::Duration::days(i as i64));
                for p in px.iter_mut() {
                    *p *= 1.0 + rng.random_range(-0.03..0.03);
                }
                rows.push(px.to_vec());
            }
            let series = series(dates, vec!["A", "B"], rows);
            let prof = rolling_yearly_profit(&series, 252).unwrap();
            for i in 0..prof.dates.len() {
                for j in 0..2 {
                    let recon = series.close[(i, j)] * (1.0 + prof.profits[(i, j)]);
                    let truth = series.close[(i + 251, j)];
                    prop_assert!((recon - truth).abs() <= 1e-12 * truth.abs());
                }
            }
        }

        /// Monthly aggregation of a constant daily series is exact.
        #[test]
        fn monthly_of_constant_is_exact(v in -0.5f64..1.0) {
            let mut dates = Vec::new();
            for i in 0..90 {
                dates.push(date("2020-01-01") + chrono::Duration::days(i as i64));
            }
            let ps = ProfitSeries {
                dates: dates.clone(),
                tickers: vec!["A".into()],
                profits: DMatrix::from_element(90, 1, v),
                aggregation: Aggregation::Daily,
            };
            let m = monthly_aggregate(&ps).unwrap();
            for i in 0..m.dates.len() {
                prop_assert_eq!(m.profits[(i, 0)], v);
            }
        }
    }
}
