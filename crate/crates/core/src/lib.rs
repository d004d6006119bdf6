//! Desk-scale portfolio advising toolkit.
//!
//! The library wires together two agents and the harness around them:
//!
//! * an inverse-optimization agent ([`inverse`]) that infers time-varying
//!   risk tolerance and expected returns from observed (price, holdings)
//!   streams by solving KKT-linearized mixed-integer quadratic programs;
//! * a deep-RL agent ([`drl`]) that learns a constrained multi-period
//!   mean-variance rebalancing policy with a softmax actor, prioritized
//!   replay and a slowly-learned Lagrange multiplier;
//! * classical single-period baselines ([`baselines`]) and a randomized
//!   backtest harness ([`backtest`]) with the usual desk metrics.
//!
//! The numerical kernel is a dense primal active-set QP solver ([`qp`])
//! that returns exact duals, which the inverse problems require.

pub mod backtest;
pub mod baselines;
pub mod drl;
pub mod forward;
pub mod inverse;
pub mod market;
pub mod mv_env;
pub mod qp;

pub use forward::{solve_forward, stack_constraints, ForwardSpec};
pub use qp::{check_kkt, solve_qp, ConstraintSet, QpProblem, QpSolution};

/// Trading days per year used for all annualization.
pub const TRADING_DAYS: usize = 252;

/// Derives a child seed from a base seed and a stream tag, so parallel
/// workers get independent, order-free RNG streams.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    // splitmix64 over the combined word
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
