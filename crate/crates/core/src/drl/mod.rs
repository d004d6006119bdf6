//! Deterministic policy-gradient agent for the constrained multi-period
//! mean-variance problem.
//!
//! The actor maps the state `(W_i - omega, i/N)` to simplex weights through
//! a softmax head; the critic scores (state, action) pairs. Training rolls
//! out episodes over random stock subsets drawn fresh from the pool each
//! episode, stores transitions in a prioritized replay buffer with a
//! terminal boost, and updates the Lagrange multiplier omega on a slow
//! schedule from recent terminal wealths. Everything is seeded: one run is
//! bitwise reproducible on a machine.

pub mod net;
pub mod replay;

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{MarketError, PriceSeries};
use crate::mv_env::{
    self, AllocationPolicy, AlphaSchedule, EnvError, MarketEpisode, MultiplierTracker,
};
use net::{polyak, softmax, NetworkParams, OutputHead};
use replay::{PrioritizedReplay, Transition};

#[derive(Debug, Error)]
pub enum DrlError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("replay buffer holds {len} transitions, batch of {batch} requested")]
    BufferTooSmall { len: usize, batch: usize },
    #[error("pool has {pool} tickers, episode needs {needed}")]
    PoolTooSmall { pool: usize, needed: usize },
    #[error("pool span of {days} days cannot host a {needed}-step episode")]
    SpanTooShort { days: usize, needed: usize },
    #[error("training diverged at episode {episode}: {what}")]
    Divergence { episode: usize, what: String },
    #[error("every configuration in the grid failed")]
    AllConfigsFailed,
    #[error("environment: {0}")]
    Env(#[from] EnvError),
    #[error("market: {0}")]
    Market(#[from] MarketError),
    #[error("{0}")]
    Invalid(String),
}

/// Everything one training run depends on. Serialized into saved policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Stocks per episode.
    pub n_assets: usize,
    /// Training episodes; doubles as the early-stopping knob in grids.
    pub episodes: usize,
    /// Steps per training episode.
    pub horizon: usize,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Polyak rate for target networks.
    pub polyak: f64,
    /// Width of the two hidden layers in both networks.
    pub hidden: usize,
    /// Initial std of Gaussian exploration noise on actor logits.
    pub noise_scale: f64,
    /// Episode count over which the noise decays linearly to zero.
    pub noise_decay_episodes: usize,
    pub terminal_boost: f64,
    pub per_alpha: f64,
    /// Initial importance-sampling exponent, annealed to 1.
    pub per_beta0: f64,
    pub per_eps: f64,
    pub buffer_capacity: usize,
    /// Learning step every this many environment steps.
    pub update_every: usize,
    pub grad_clip: f64,
    /// Initial multiplier; `None` starts at `1 + z`.
    pub omega0: Option<f64>,
    pub omega_alpha: AlphaSchedule,
    pub omega_window: usize,
    pub omega_period: usize,
    /// Feed `i/N` as a second state coordinate. Disable for a policy whose
    /// input is the wealth gap alone.
    pub time_feature: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_assets: 5,
            episodes: 2000,
            horizon: 252,
            batch_size: 32,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            polyak: 0.01,
            hidden: 64,
            noise_scale: 0.2,
            noise_decay_episodes: 1500,
            terminal_boost: 10.0,
            per_alpha: 0.6,
            per_beta0: 0.4,
            per_eps: 1e-3,
            buffer_capacity: 100_000,
            update_every: 2,
            grad_clip: 1.0,
            omega0: None,
            omega_alpha: AlphaSchedule::Stepped { base: 0.05, step: 50 },
            omega_window: 10,
            omega_period: 10,
            time_feature: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn state_dim(&self) -> usize {
        if self.time_feature {
            2
        } else {
            1
        }
    }

    fn validate(&self) -> Result<(), DrlError> {
        if self.n_assets == 0 || self.episodes == 0 || self.horizon == 0 || self.batch_size == 0 {
            return Err(DrlError::Invalid(
                "n_assets, episodes, horizon and batch_size must be positive".into(),
            ));
        }
        if !(self.actor_lr >= 0.0 && self.critic_lr >= 0.0 && self.polyak >= 0.0) {
            return Err(DrlError::Invalid("rates must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Actor/critic parameters plus the learned multiplier; the deployable
/// artifact of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub version: u32,
    pub actor: NetworkParams,
    pub critic: NetworkParams,
    pub target_actor: NetworkParams,
    pub target_critic: NetworkParams,
    pub omega: f64,
    pub config: TrainConfig,
}

pub const POLICY_FORMAT_VERSION: u32 = 1;

impl Policy {
    fn state(&self, wealth_gap: f64, time_frac: f64) -> DVector<f64> {
        if self.config.time_feature {
            DVector::from_column_slice(&[wealth_gap, time_frac])
        } else {
            DVector::from_column_slice(&[wealth_gap])
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DrlError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| DrlError::Invalid(format!("serialize policy: {e}")))?;
        let mut f = std::fs::File::create(path)
            .map_err(|e| DrlError::Invalid(format!("create {}: {e}", path.display())))?;
        f.write_all(json.as_bytes())
            .map_err(|e| DrlError::Invalid(format!("write policy: {e}")))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Policy, DrlError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DrlError::Invalid(format!("read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| DrlError::Invalid(format!("parse policy: {e}")))
    }
}

impl AllocationPolicy for Policy {
    fn allocate(&self, wealth_gap: f64, time_frac: f64) -> DVector<f64> {
        self.actor.forward(&self.state(wealth_gap, time_frac))
    }
}

/// Simplex weights from the actor; errors when the state width is wrong.
pub fn actor_forward(actor: &NetworkParams, state: &DVector<f64>) -> Result<DVector<f64>, DrlError> {
    if state.len() != actor.input_dim() {
        return Err(DrlError::ShapeMismatch {
            expected: actor.input_dim(),
            got: state.len(),
        });
    }
    Ok(actor.forward(state))
}

/// Q-value of a (state, action) pair; the action is concatenated onto the
/// state at the first layer.
pub fn critic_forward(
    critic: &NetworkParams,
    state: &DVector<f64>,
    action: &DVector<f64>,
) -> Result<f64, DrlError> {
    let dim = state.len() + action.len();
    if dim != critic.input_dim() {
        return Err(DrlError::ShapeMismatch {
            expected: critic.input_dim(),
            got: dim,
        });
    }
    let input = concat(state, action);
    Ok(critic.forward(&input)[0])
}

fn concat(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

/// Draws `n` distinct tickers uniformly and a contiguous window of gross
/// relatives from the pool. Seed-deterministic.
pub fn universal_episode_sampler(
    pool: &PriceSeries,
    n: usize,
    horizon: usize,
    rng: &mut ChaCha20Rng,
) -> Result<MarketEpisode, DrlError> {
    if pool.n_assets() < n {
        return Err(DrlError::PoolTooSmall {
            pool: pool.n_assets(),
            needed: n,
        });
    }
    if pool.n_days() < horizon + 1 {
        return Err(DrlError::SpanTooShort {
            days: pool.n_days(),
            needed: horizon + 1,
        });
    }
    let mut picks = rand::seq::index::sample(rng, pool.n_assets(), n).into_vec();
    picks.sort_unstable();
    let tickers: Vec<String> = picks.iter().map(|&j| pool.tickers[j].clone()).collect();
    let start = rng.random_range(0..=pool.n_days() - horizon - 1);
    let sub = pool.select_tickers(&tickers)?;
    let relatives = sub.relatives(start, horizon)?;
    Ok(MarketEpisode::new(tickers, relatives, Some(pool.dates[start]))?)
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub terminal_wealth: f64,
    pub omega: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
}

/// Writes the per-episode log as CSV
/// (`episode,terminal_wealth,omega,critic_loss,actor_loss`).
pub fn write_training_log(log: &[EpisodeLog], path: &Path) -> Result<(), DrlError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| DrlError::Invalid(format!("open {}: {e}", path.display())))?;
    w.write_record(["episode", "terminal_wealth", "omega", "critic_loss", "actor_loss"])
        .and_then(|_| {
            for l in log {
                w.write_record([
                    l.episode.to_string(),
                    format!("{:.12}", l.terminal_wealth),
                    format!("{:.12}", l.omega),
                    format!("{:.6e}", l.critic_loss),
                    format!("{:.6e}", l.actor_loss),
                ])?;
            }
            w.flush().map_err(csv::Error::from)
        })
        .map_err(|e| DrlError::Invalid(format!("write log: {e}")))?;
    Ok(())
}

pub struct TrainOutcome {
    pub policy: Policy,
    pub log: Vec<EpisodeLog>,
}

/// Trains a policy on episodes sampled from the pool, targeting annual
/// return `z`.
pub fn train(config: &TrainConfig, pool: &PriceSeries, z: f64) -> Result<TrainOutcome, DrlError> {
    config.validate()?;
    let n = config.n_assets;
    let state_dim = config.state_dim();
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);

    let mut actor = NetworkParams::new(
        &[state_dim, config.hidden, config.hidden, n],
        OutputHead::Softmax,
        &mut rng,
    );
    let mut critic = NetworkParams::new(
        &[state_dim + n, config.hidden, config.hidden, 1],
        OutputHead::Linear,
        &mut rng,
    );
    let mut target_actor = actor.clone();
    let mut target_critic = critic.clone();

    let mut buffer = PrioritizedReplay::new(config.buffer_capacity, config.per_alpha);
    let mut tracker = MultiplierTracker::new(
        config.omega0.unwrap_or(1.0 + z),
        config.omega_alpha.clone(),
        config.omega_window,
        config.omega_period,
    );

    let total_updates = (config.episodes * config.horizon / config.update_every).max(1);
    let mut updates_done = 0usize;
    let mut global_step = 0usize;
    let mut log = Vec::with_capacity(config.episodes);

    for ep in 0..config.episodes {
        let episode = universal_episode_sampler(pool, n, config.horizon, &mut rng)?;
        let sigma = if ep >= config.noise_decay_episodes {
            0.0
        } else {
            config.noise_scale * (1.0 - ep as f64 / config.noise_decay_episodes as f64)
        };

        let mut w = 1.0f64;
        let mut critic_loss_sum = 0.0;
        let mut actor_obj_sum = 0.0;
        let mut update_count = 0usize;
        for i in 0..config.horizon {
            let state = make_state(w - tracker.omega, i as f64 / config.horizon as f64, config);
            let mut logits = actor.logits(&state);
            if sigma > 0.0 {
                for v in logits.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v += sigma * e;
                }
            }
            let action = softmax(&logits);
            let allocation = &action * w;
            let rel = episode.relatives.row(i).transpose();
            let w_next = mv_env::step(w, &allocation, &rel)?;
            let terminal = i + 1 == config.horizon;
            let reward = if terminal {
                let gap = w_next - tracker.omega;
                -gap * gap
            } else {
                0.0
            };
            let next_state = make_state(
                w_next - tracker.omega,
                (i + 1) as f64 / config.horizon as f64,
                config,
            );
            buffer.push(
                Transition {
                    state,
                    action,
                    reward,
                    next_state,
                    terminal,
                },
                config.terminal_boost,
            );

            if buffer.len() >= config.batch_size && global_step % config.update_every == 0 {
                let beta = config.per_beta0
                    + (1.0 - config.per_beta0) * (updates_done as f64 / total_updates as f64);
                let (closs, aobj) = learn_step(
                    config,
                    &mut actor,
                    &mut critic,
                    &mut target_actor,
                    &mut target_critic,
                    &mut buffer,
                    beta.min(1.0),
                    &mut rng,
                )?;
                critic_loss_sum += closs;
                actor_obj_sum += aobj;
                update_count += 1;
                updates_done += 1;
            }
            global_step += 1;
            w = w_next;
        }
        tracker.observe(w, z);

        let critic_loss = if update_count > 0 { critic_loss_sum / update_count as f64 } else { 0.0 };
        let actor_loss = if update_count > 0 { actor_obj_sum / update_count as f64 } else { 0.0 };
        if !(w.is_finite() && tracker.omega.is_finite() && critic_loss.is_finite()) {
            return Err(DrlError::Divergence {
                episode: ep,
                what: format!("wealth {w}, omega {}, critic loss {critic_loss}", tracker.omega),
            });
        }
        log.push(EpisodeLog {
            episode: ep,
            terminal_wealth: w,
            omega: tracker.omega,
            critic_loss,
            actor_loss,
        });
        if ep % 64 == 0 && !(actor.all_finite() && critic.all_finite()) {
            return Err(DrlError::Divergence {
                episode: ep,
                what: "non-finite network parameters".into(),
            });
        }
    }

    if !(actor.all_finite() && critic.all_finite()) {
        return Err(DrlError::Divergence {
            episode: config.episodes,
            what: "non-finite network parameters".into(),
        });
    }

    Ok(TrainOutcome {
        policy: Policy {
            version: POLICY_FORMAT_VERSION,
            actor,
            critic,
            target_actor,
            target_critic,
            omega: tracker.omega,
            config: config.clone(),
        },
        log,
    })
}

fn make_state(gap: f64, time_frac: f64, config: &TrainConfig) -> DVector<f64> {
    if config.time_feature {
        DVector::from_column_slice(&[gap, time_frac])
    } else {
        DVector::from_column_slice(&[gap])
    }
}

/// One DDPG learning step on a prioritized batch: weighted critic
/// regression on the undiscounted Bellman target, actor ascent on the
/// critic, priority refresh, Polyak averaging.
#[allow(clippy::too_many_arguments)]
fn learn_step(
    config: &TrainConfig,
    actor: &mut NetworkParams,
    critic: &mut NetworkParams,
    target_actor: &mut NetworkParams,
    target_critic: &mut NetworkParams,
    buffer: &mut PrioritizedReplay,
    beta: f64,
    rng: &mut ChaCha20Rng,
) -> Result<(f64, f64), DrlError> {
    let batch = buffer.sample(config.batch_size, beta, rng)?;
    let b = batch.indices.len() as f64;

    let mut critic_grads = critic.zeros_like();
    let mut critic_loss = 0.0;
    let mut new_raw = Vec::with_capacity(batch.indices.len());
    for (k, &idx) in batch.indices.iter().enumerate() {
        let t = buffer.get(idx);
        let q_next = if t.terminal {
            0.0
        } else {
            let a_next = target_actor.forward(&t.next_state);
            target_critic.forward(&concat(&t.next_state, &a_next))[0]
        };
        // undiscounted: the criterion is a terminal cost
        let target = t.reward + q_next;
        let cache = critic.forward_cached(&concat(&t.state, &t.action));
        let td = cache.output()[0] - target;
        let wk = batch.weights[k];
        critic_loss += wk * td * td / b;
        let upstream = DVector::from_column_slice(&[2.0 * wk * td / b]);
        critic.backward(&cache, &upstream, &mut critic_grads);
        new_raw.push(td.abs() + config.per_eps);
    }
    critic_grads.clip_global_norm(config.grad_clip);
    critic.apply_gradients(&critic_grads, config.critic_lr);

    let mut actor_grads = actor.zeros_like();
    let mut actor_obj = 0.0;
    for &idx in &batch.indices {
        let t = buffer.get(idx);
        let a_cache = actor.forward_cached(&t.state);
        let action = a_cache.output().clone();
        let c_cache = critic.forward_cached(&concat(&t.state, &action));
        actor_obj += c_cache.output()[0] / b;
        // dQ/da via the critic input gradient, then ascend
        let mut scratch = critic.zeros_like();
        let input_grad = critic.backward(&c_cache, &DVector::from_column_slice(&[1.0]), &mut scratch);
        let dq_da = input_grad.rows(t.state.len(), action.len()).into_owned();
        let upstream = -dq_da / b;
        actor.backward(&a_cache, &upstream, &mut actor_grads);
    }
    actor_grads.clip_global_norm(config.grad_clip);
    actor.apply_gradients(&actor_grads, config.actor_lr);

    buffer.update_priorities(&batch.indices, &new_raw, config.terminal_boost);
    polyak(target_actor, actor, config.polyak);
    polyak(target_critic, critic, config.polyak);
    Ok((critic_loss, -actor_obj))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub config_index: usize,
    pub episodes: usize,
    pub avg_sharpe: f64,
    pub error: Option<String>,
}

pub struct SearchOutcome {
    pub best_index: usize,
    pub policy: Policy,
    pub leaderboard: Vec<LeaderboardEntry>,
}

/// Trains every configuration in the grid (in parallel) and keeps the one
/// with the highest average Sharpe ratio over random validation
/// portfolios. Failed configurations are recorded on the leaderboard and
/// only fatal when nothing survives.
pub fn hyperparameter_search(
    grid: &[TrainConfig],
    train_pool: &PriceSeries,
    validation_pool: &PriceSeries,
    z: f64,
    portfolios: usize,
) -> Result<SearchOutcome, DrlError> {
    if grid.is_empty() {
        return Err(DrlError::Invalid("hyperparameter grid is empty".into()));
    }
    let runs: Vec<(usize, Result<(Policy, f64), DrlError>)> = grid
        .par_iter()
        .enumerate()
        .map(|(i, cfg)| {
            let out = train(cfg, train_pool, z).and_then(|out| {
                let eval_seed = crate::derive_seed(cfg.seed, 0xE7A1);
                let sharpe = average_validation_sharpe(
                    &out.policy,
                    validation_pool,
                    cfg.n_assets,
                    portfolios,
                    eval_seed,
                )?;
                Ok((out.policy, sharpe))
            });
            (i, out)
        })
        .collect();

    let mut leaderboard = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, Policy, f64)> = None;
    for (i, run) in runs {
        match run {
            Ok((policy, sharpe)) => {
                leaderboard.push(LeaderboardEntry {
                    config_index: i,
                    episodes: grid[i].episodes,
                    avg_sharpe: sharpe,
                    error: None,
                });
                let better = match &best {
                    None => true,
                    Some((bi, _, bs)) => sharpe > *bs || (sharpe == *bs && i < *bi),
                };
                if better {
                    best = Some((i, policy, sharpe));
                }
            }
            Err(e) => leaderboard.push(LeaderboardEntry {
                config_index: i,
                episodes: grid[i].episodes,
                avg_sharpe: f64::NEG_INFINITY,
                error: Some(e.to_string()),
            }),
        }
    }
    leaderboard.sort_by(|a, b| {
        b.avg_sharpe
            .partial_cmp(&a.avg_sharpe)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.config_index.cmp(&b.config_index))
    });
    let (best_index, policy, _) = best.ok_or(DrlError::AllConfigsFailed)?;
    Ok(SearchOutcome {
        best_index,
        policy,
        leaderboard,
    })
}

/// Mean annualized Sharpe of the greedy policy over seeded random
/// validation portfolios; zero-variance paths score 0.
pub fn average_validation_sharpe(
    policy: &Policy,
    pool: &PriceSeries,
    n: usize,
    portfolios: usize,
    seed: u64,
) -> Result<f64, DrlError> {
    let horizon = policy.config.horizon.min(pool.n_days().saturating_sub(1));
    if horizon == 0 {
        return Err(DrlError::SpanTooShort {
            days: pool.n_days(),
            needed: 2,
        });
    }
    let mut total = 0.0;
    for d in 0..portfolios {
        let mut rng = ChaCha20Rng::seed_from_u64(crate::derive_seed(seed, d as u64));
        let episode = universal_episode_sampler(pool, n, horizon, &mut rng)?;
        let path = mv_env::run_episode(policy, &episode, policy.omega)?;
        let sharpe = crate::backtest::sharpe(&path.daily_returns()).unwrap_or(0.0);
        total += sharpe;
    }
    Ok(total / portfolios as f64)
}
