//! Inverse portfolio optimization: recovering risk tolerance and expected
//! returns from observed allocations.
//!
//! Each subproblem embeds the forward problem's KKT system with big-M
//! complementarity indicators and minimizes a prior-deviation term plus an
//! observation-fit term `eta |y - x|^2`. The alternating loop interleaves
//! the expected-return and risk-tolerance solves over an observation
//! stream; by default it restarts from the initial guesses whenever the
//! stream grows, so earlier estimates never depend on later data.

pub mod miqp;
pub mod synth;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::ObservationStream;
use crate::qp::ConstraintSet;
use miqp::{solve_miqp, ComplementarityPair, MiqpError, MiqpProblem, MiqpSolution, MiqpStrategy};

#[derive(Debug, Error)]
pub enum IpoError {
    #[error("{0}")]
    Miqp(#[from] MiqpError),
    #[error("at stream index {index} ({date}): {source}")]
    AtStep {
        index: usize,
        date: NaiveDate,
        source: Box<IpoError>,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Observation-fit weight schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum EtaSchedule {
    Constant(f64),
    /// Per-step values; the last value repeats beyond the end.
    PerStep(Vec<f64>),
}

impl EtaSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            EtaSchedule::Constant(v) => *v,
            EtaSchedule::PerStep(v) => v.get(t).or(v.last()).copied().unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IpoConfig {
    /// Big-M bound on duals and constraint slacks.
    pub big_m: f64,
    pub eta: EtaSchedule,
    /// Initial risk-tolerance guess for the alternating loop.
    pub r0: f64,
    /// Elementwise bounds on learnable expected returns, per year.
    pub c_bounds: (f64, f64),
    /// Bounds on the learnable return floor in the b-form.
    pub e_bounds: (f64, f64),
    /// Hard lower bound keeping the risk tolerance positive.
    pub r_lower: f64,
    pub strategy: MiqpStrategy,
}

impl Default for IpoConfig {
    fn default() -> Self {
        IpoConfig {
            big_m: 1e3,
            eta: EtaSchedule::Constant(1e3),
            r0: 1.0,
            c_bounds: (-0.5, 1.0),
            e_bounds: (-0.5, 1.0),
            r_lower: 1e-6,
            strategy: MiqpStrategy::Enumerate,
        }
    }
}

/// Diagnostics shared by all inverse fits.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IpoFlags {
    /// Multiple binary patterns attain the optimum within 1e-8.
    pub non_identifiable: bool,
    /// Times the big-M bound had to be grown tenfold.
    pub m_escalations: usize,
    /// A dual or slack still sits within 1% of the final bound.
    pub m_saturated: bool,
}

impl IpoFlags {
    pub fn labels(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.non_identifiable {
            v.push("non-identifiable".to_string());
        }
        if self.m_escalations > 0 {
            v.push(format!("big-m-escalated-{}", self.m_escalations));
        }
        if self.m_saturated {
            v.push("big-m-saturated".to_string());
        }
        v
    }
}

/// Solution of one inverse subproblem.
#[derive(Debug, Clone)]
pub struct InverseFit {
    /// The recovered parameter: `r`, the vector `c`, or `e`.
    pub value: DVector<f64>,
    pub x: DVector<f64>,
    pub duals: DVector<f64>,
    /// Active pattern per inequality row.
    pub pattern: Vec<bool>,
    pub objective: f64,
    /// Euclidean distance between the observation and the fitted allocation.
    pub fit_residual: f64,
    pub flags: IpoFlags,
}

/// Time-indexed estimate produced by the alternating loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskProfileEstimate {
    pub date: NaiveDate,
    pub r: f64,
    pub c: Vec<f64>,
    /// Implied portfolio-level expected return `c' y`.
    pub z: f64,
    pub residual: f64,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LearnMode {
    /// Re-run the whole loop from the initial guesses for every prefix, so
    /// estimates for the first T entries never depend on later ones.
    Restart,
    /// Single pass, carrying estimates forward.
    Warm,
}

/// Annualized target-return assembly across estimation frequencies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetReturn {
    pub label: String,
    pub quarterly: Vec<f64>,
    pub yearly: f64,
    pub annualized_from_quarterly: f64,
    pub ensemble: f64,
}

/// Recovers the risk tolerance from one observation, holding `c` fixed.
pub fn solve_ipo_risk(
    covariance: &DMatrix<f64>,
    constraints: &ConstraintSet,
    holdings: &DVector<f64>,
    c_fixed: &DVector<f64>,
    r_prior: f64,
    eta: f64,
    config: &IpoConfig,
) -> Result<InverseFit, IpoError> {
    let n = holdings.len();
    let m = constraints.len();
    solve_with_audit(config, |big_m| {
        let dim = 1 + n + m;
        let mut hessian = DMatrix::zeros(dim, dim);
        hessian[(0, 0)] = 1.0;
        for i in 0..n {
            hessian[(1 + i, 1 + i)] = 2.0 * eta;
        }
        let mut linear = DVector::zeros(dim);
        linear[0] = -r_prior;
        for i in 0..n {
            linear[1 + i] = -2.0 * eta * holdings[i];
        }
        let constant = 0.5 * r_prior * r_prior + eta * holdings.norm_squared();

        let mut rows: Vec<(Vec<f64>, f64, bool)> = Vec::new();
        push_common_rows(&mut rows, constraints, n, 1, dim);
        // stationarity: Q x - r c - A'u = 0
        for k in 0..n {
            let mut row = vec![0.0; dim];
            row[0] = -c_fixed[k];
            for j in 0..n {
                row[1 + j] = covariance[(k, j)];
            }
            for j in 0..m {
                row[1 + n + j] = -constraints.coeff(j, k);
            }
            rows.push((row, 0.0, true));
        }
        // r stays strictly positive
        let mut r_row = vec![0.0; dim];
        r_row[0] = 1.0;
        rows.push((r_row, config.r_lower, false));

        MiqpProblem {
            hessian,
            linear,
            constant,
            fixed: rows_to_set(rows, dim),
            pairs: pattern_pairs(constraints, n, 1, dim),
            big_m,
        }
    })
    .map(|(sol, flags)| extract_fit(sol, flags, holdings, 0..1, 1, n))
}

/// Recovers asset-level expected returns, holding `r` fixed.
pub fn solve_ipo_return(
    covariance: &DMatrix<f64>,
    constraints: &ConstraintSet,
    holdings: &DVector<f64>,
    r_fixed: f64,
    c_prior: &DVector<f64>,
    eta: f64,
    config: &IpoConfig,
) -> Result<InverseFit, IpoError> {
    let n = holdings.len();
    let m = constraints.len();
    solve_with_audit(config, |big_m| {
        let dim = n + n + m;
        let mut hessian = DMatrix::zeros(dim, dim);
        for i in 0..n {
            hessian[(i, i)] = 1.0;
            hessian[(n + i, n + i)] = 2.0 * eta;
        }
        let mut linear = DVector::zeros(dim);
        for i in 0..n {
            linear[i] = -c_prior[i];
            linear[n + i] = -2.0 * eta * holdings[i];
        }
        let constant = 0.5 * c_prior.norm_squared() + eta * holdings.norm_squared();

        let mut rows: Vec<(Vec<f64>, f64, bool)> = Vec::new();
        push_common_rows(&mut rows, constraints, n, n, dim);
        // stationarity: Q x - r c - A'u = 0
        for k in 0..n {
            let mut row = vec![0.0; dim];
            row[k] = -r_fixed;
            for j in 0..n {
                row[n + j] = covariance[(k, j)];
            }
            for j in 0..m {
                row[n + n + j] = -constraints.coeff(j, k);
            }
            rows.push((row, 0.0, true));
        }
        // elementwise bounds on c
        for i in 0..n {
            let mut lo = vec![0.0; dim];
            lo[i] = 1.0;
            rows.push((lo, config.c_bounds.0, false));
            let mut hi = vec![0.0; dim];
            hi[i] = -1.0;
            rows.push((hi, -config.c_bounds.1, false));
        }

        MiqpProblem {
            hessian,
            linear,
            constant,
            fixed: rows_to_set(rows, dim),
            pairs: pattern_pairs(constraints, n, n, dim),
            big_m,
        }
    })
    .map(|(sol, flags)| extract_fit(sol, flags, holdings, 0..n, n, n))
}

/// Recovers the learnable return floor `e` (first element of the stacked
/// right-hand side): the stacked set must have the return row `c'x >= e`
/// first, as produced by [`crate::forward::stack_constraints`].
pub fn solve_ipo_b(
    covariance: &DMatrix<f64>,
    stacked: &ConstraintSet,
    holdings: &DVector<f64>,
    e_prior: f64,
    eta: f64,
    config: &IpoConfig,
) -> Result<InverseFit, IpoError> {
    let n = holdings.len();
    let m = stacked.len();
    if stacked.is_equality(0) {
        return Err(IpoError::Invalid(
            "the learnable return row must be an inequality".into(),
        ));
    }
    solve_with_audit(config, |big_m| {
        let dim = 1 + n + m;
        let mut hessian = DMatrix::zeros(dim, dim);
        hessian[(0, 0)] = 1.0;
        for i in 0..n {
            hessian[(1 + i, 1 + i)] = 2.0 * eta;
        }
        let mut linear = DVector::zeros(dim);
        linear[0] = -e_prior;
        for i in 0..n {
            linear[1 + i] = -2.0 * eta * holdings[i];
        }
        let constant = 0.5 * e_prior * e_prior + eta * holdings.norm_squared();

        let mut rows: Vec<(Vec<f64>, f64, bool)> = Vec::new();
        // base equality rows (the return row is row 0 and never equality)
        for i in 1..m {
            if stacked.is_equality(i) {
                let mut row = vec![0.0; dim];
                for j in 0..n {
                    row[1 + j] = stacked.coeff(i, j);
                }
                rows.push((row, stacked.rhs(i), true));
            }
        }
        // duals of inequality rows stay nonnegative
        for j in 0..m {
            if !stacked.is_equality(j) {
                let mut row = vec![0.0; dim];
                row[1 + n + j] = 1.0;
                rows.push((row, 0.0, false));
            }
        }
        // stationarity of the b-form: Q x - A'u = 0 (no explicit r)
        for k in 0..n {
            let mut row = vec![0.0; dim];
            for j in 0..n {
                row[1 + j] = covariance[(k, j)];
            }
            for j in 0..m {
                row[1 + n + j] = -stacked.coeff(j, k);
            }
            rows.push((row, 0.0, true));
        }
        // bounds on e
        let mut lo = vec![0.0; dim];
        lo[0] = 1.0;
        rows.push((lo, config.e_bounds.0, false));
        let mut hi = vec![0.0; dim];
        hi[0] = -1.0;
        rows.push((hi, -config.e_bounds.1, false));

        // complementarity pairs; the return row carries `e` in coefficients:
        // c'x - e >= 0
        let mut pairs = Vec::new();
        for j in 0..m {
            if stacked.is_equality(j) {
                continue;
            }
            let mut row = DVector::zeros(dim);
            if j == 0 {
                row[0] = -1.0;
                for k in 0..n {
                    row[1 + k] = stacked.coeff(0, k);
                }
                pairs.push(ComplementarityPair { row, rhs: 0.0, dual: 1 + n });
            } else {
                for k in 0..n {
                    row[1 + k] = stacked.coeff(j, k);
                }
                pairs.push(ComplementarityPair {
                    row,
                    rhs: stacked.rhs(j),
                    dual: 1 + n + j,
                });
            }
        }

        MiqpProblem {
            hessian,
            linear,
            constant,
            fixed: rows_to_set(rows, dim),
            pairs,
            big_m,
        }
    })
    .map(|(sol, flags)| extract_fit(sol, flags, holdings, 0..1, 1, n))
}

/// Base equality rows and dual-sign rows shared by the risk/return forms.
/// `x_off` is the offset of `x` within `w`; duals live at `x_off + n + j`.
fn push_common_rows(
    rows: &mut Vec<(Vec<f64>, f64, bool)>,
    constraints: &ConstraintSet,
    n: usize,
    x_off: usize,
    dim: usize,
) {
    let m = constraints.len();
    for i in 0..m {
        if constraints.is_equality(i) {
            let mut row = vec![0.0; dim];
            for j in 0..n {
                row[x_off + j] = constraints.coeff(i, j);
            }
            rows.push((row, constraints.rhs(i), true));
        } else {
            let mut row = vec![0.0; dim];
            row[x_off + n + i] = 1.0;
            rows.push((row, 0.0, false));
        }
    }
}

fn pattern_pairs(
    constraints: &ConstraintSet,
    n: usize,
    x_off: usize,
    dim: usize,
) -> Vec<ComplementarityPair> {
    let mut pairs = Vec::new();
    for j in 0..constraints.len() {
        if constraints.is_equality(j) {
            continue;
        }
        let mut row = DVector::zeros(dim);
        for k in 0..n {
            row[x_off + k] = constraints.coeff(j, k);
        }
        pairs.push(ComplementarityPair {
            row,
            rhs: constraints.rhs(j),
            dual: x_off + n + j,
        });
    }
    pairs
}

fn rows_to_set(rows: Vec<(Vec<f64>, f64, bool)>, dim: usize) -> ConstraintSet {
    let a = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i].0[j]);
    let b = DVector::from_fn(rows.len(), |i, _| rows[i].1);
    let eq = rows.iter().map(|r| r.2).collect();
    ConstraintSet::new(a, b, eq).expect("inverse subproblem rows are consistent")
}

/// Solves with the configured strategy and audits the big-M bound: if any
/// dual or slack lands within 1% of M the bound is grown tenfold (twice at
/// most) and the solve repeats.
fn solve_with_audit(
    config: &IpoConfig,
    build: impl Fn(f64) -> MiqpProblem,
) -> Result<(MiqpSolution, IpoFlags), IpoError> {
    let mut big_m = config.big_m;
    let mut escalations = 0usize;
    loop {
        let problem = build(big_m);
        let sol = solve_miqp(&problem, config.strategy, 1e-9)?;
        let saturated = problem.pairs.iter().any(|pair| {
            let u = sol.w[pair.dual];
            let slack = pair.row.dot(&sol.w) - pair.rhs;
            u >= 0.99 * big_m || slack >= 0.99 * big_m
        });
        if !saturated || escalations >= 2 {
            let flags = IpoFlags {
                non_identifiable: sol.ties >= 2,
                m_escalations: escalations,
                m_saturated: saturated,
            };
            return Ok((sol, flags));
        }
        big_m *= 10.0;
        escalations += 1;
    }
}

fn extract_fit(
    sol: MiqpSolution,
    flags: IpoFlags,
    holdings: &DVector<f64>,
    value_range: std::ops::Range<usize>,
    x_off: usize,
    n: usize,
) -> InverseFit {
    let value = DVector::from_fn(value_range.len(), |i, _| sol.w[value_range.start + i]);
    let x = DVector::from_fn(n, |i, _| sol.w[x_off + i]);
    let duals = DVector::from_fn(sol.w.len() - x_off - n, |i, _| sol.w[x_off + n + i]);
    let fit_residual = (holdings - &x).norm();
    InverseFit {
        value,
        x,
        duals,
        pattern: sol.pattern,
        objective: sol.objective,
        fit_residual,
        flags,
    }
}

/// Runs the alternating estimation loop over an observation stream: at each
/// entry the expected returns are re-fit against the previous risk tolerance
/// and the risk tolerance is re-fit against the new returns.
pub fn alternating_learn(
    stream: &ObservationStream,
    config: &IpoConfig,
    mode: LearnMode,
) -> Result<Vec<RiskProfileEstimate>, IpoError> {
    if stream.entries.is_empty() {
        return Err(IpoError::Invalid("observation stream is empty".into()));
    }
    let n = stream.tickers.len();
    let constraints = ConstraintSet::long_only_budget(n);
    match mode {
        LearnMode::Warm => {
            let mut r = config.r0;
            let mut c = stream.entries[0].mean_profit.clone();
            let mut out = Vec::with_capacity(stream.entries.len());
            for (idx, entry) in stream.entries.iter().enumerate() {
                let (nr, nc, est) = alternating_step(entry, &constraints, r, &c, idx, config)?;
                r = nr;
                c = nc;
                out.push(est);
            }
            Ok(out)
        }
        LearnMode::Restart => {
            let mut out = Vec::with_capacity(stream.entries.len());
            for t_end in 1..=stream.entries.len() {
                // fresh pass over the prefix, seeded by the lookback mean at
                // the newest entry
                let mut r = config.r0;
                let mut c = stream.entries[t_end - 1].mean_profit.clone();
                let mut last = None;
                for (idx, entry) in stream.entries[..t_end].iter().enumerate() {
                    let (nr, nc, est) = alternating_step(entry, &constraints, r, &c, idx, config)?;
                    r = nr;
                    c = nc;
                    last = Some(est);
                }
                out.push(last.expect("prefix is nonempty"));
            }
            Ok(out)
        }
    }
}

fn alternating_step(
    entry: &crate::market::ObservationPoint,
    constraints: &ConstraintSet,
    r_prev: f64,
    c_prev: &DVector<f64>,
    idx: usize,
    config: &IpoConfig,
) -> Result<(f64, DVector<f64>, RiskProfileEstimate), IpoError> {
    let eta = config.eta.at(idx);
    let at = |e: IpoError| IpoError::AtStep {
        index: idx,
        date: entry.date,
        source: Box::new(e),
    };
    let ret_fit = solve_ipo_return(
        &entry.covariance,
        constraints,
        &entry.holdings,
        r_prev,
        c_prev,
        eta,
        config,
    )
    .map_err(at)?;
    let c_new = ret_fit.value.clone();
    let risk_fit = solve_ipo_risk(
        &entry.covariance,
        constraints,
        &entry.holdings,
        &c_new,
        r_prev,
        eta,
        config,
    )
    .map_err(|e| IpoError::AtStep {
        index: idx,
        date: entry.date,
        source: Box::new(e),
    })?;
    let r_new = risk_fit.value[0];

    let mut flags = ret_fit.flags.labels();
    for f in risk_fit.flags.labels() {
        if !flags.contains(&f) {
            flags.push(f);
        }
    }
    let z = c_new.dot(&entry.holdings);
    let est = RiskProfileEstimate {
        date: entry.date,
        r: r_new,
        c: c_new.iter().cloned().collect(),
        z,
        residual: risk_fit.fit_residual,
        flags,
    };
    Ok((r_new, c_new, est))
}

/// Compounds quarterly estimates into a year and averages with the yearly
/// estimate: `annualized = prod(1 + z_i) - 1`, `ensemble = mean(annualized,
/// yearly)`.
pub fn ensemble_annual_target(quarterly: &[f64], yearly: f64) -> TargetReturn {
    let annualized_from_quarterly = quarterly.iter().fold(1.0, |acc, z| acc * (1.0 + z)) - 1.0;
    let ensemble = 0.5 * (annualized_from_quarterly + yearly);
    TargetReturn {
        label: String::new(),
        quarterly: quarterly.to_vec(),
        yearly,
        annualized_from_quarterly,
        ensemble,
    }
}
