//! Binary rewards with a Beta prior: exact finite-horizon values and the
//! reservation-cost stopping rule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{Action, StopDecision, StopReason};

/// Width at which the reservation-cost bisection stops.
pub const RESERVATION_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum BernoulliError {
    #[error("reward {0} is not 0 or 1")]
    NonBinary(f64),
    #[error("Beta parameters must be positive and finite, got a={a}, b={b}")]
    InvalidPrior { a: f64, b: f64 },
    #[error("stage {k} must be below the horizon {n}")]
    Horizon { n: usize, k: usize },
    #[error("cost must be finite and nonnegative, got {0}")]
    InvalidCost(f64),
}

pub type Result<T> = std::result::Result<T, BernoulliError>;

/// Beta posterior plus the best reward seen so far.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaState {
    /// Prior successes plus observed successes.
    pub a: f64,
    /// Prior failures plus observed failures.
    pub b: f64,
    /// A success has been observed.
    pub z: bool,
}

impl BetaState {
    pub fn new(a0: f64, b0: f64) -> Result<Self> {
        if !(a0 > 0.0 && b0 > 0.0 && a0.is_finite() && b0.is_finite()) {
            return Err(BernoulliError::InvalidPrior { a: a0, b: b0 });
        }
        Ok(Self { a: a0, b: b0, z: false })
    }

    /// Predictive success probability of the next draw.
    pub fn q(&self) -> f64 {
        self.a / (self.a + self.b)
    }
}

pub fn beta_update(state: &BetaState, r: f64) -> Result<BetaState> {
    let success = if r == 1.0 {
        true
    } else if r == 0.0 {
        false
    } else {
        return Err(BernoulliError::NonBinary(r));
    };
    Ok(BetaState {
        a: state.a + f64::from(u8::from(success)),
        b: state.b + f64::from(u8::from(!success)),
        z: state.z || success,
    })
}

/// Values `R_s(a, b + j; c)` for `j = 0..=t−s`, bottom-up from `R_0 ≡ 0`.
/// Only the failure count changes along the no-success path, so one row per
/// remaining-draw count suffices.
fn value_row(t: usize, a: f64, b: f64, c: f64) -> Vec<f64> {
    let mut row = vec![0.0; t + 1];
    for s in 1..=t {
        for j in 0..=(t - s) {
            let bj = b + j as f64;
            let q = a / (a + bj);
            row[j] = (q + (1.0 - q) * row[j + 1] - c).max(0.0);
        }
    }
    row
}

/// Optimal continuation value `R_t(a, b; c)` with `t` draws remaining and no
/// success yet; `c ≥ 0`.
pub fn value_r(t: usize, a: f64, b: f64, c: f64) -> f64 {
    debug_assert!(c >= 0.0);
    value_row(t, a, b, c)[0]
}

/// Margin `q + (1−q)·R_{t−1}(a, b+1; c) − c` of one more draw.
fn continue_margin(t: usize, a: f64, b: f64, c: f64) -> f64 {
    let q = a / (a + b);
    q + (1.0 - q) * value_r(t - 1, a, b + 1.0, c) - c
}

/// The unique cost in `[0, 1]` at which one more draw from `(a, b)` at stage
/// `k` of `n` is worth exactly its cost.
pub fn reservation_cost(n: usize, k: usize, a: f64, b: f64) -> Result<f64> {
    if k >= n {
        return Err(BernoulliError::Horizon { n, k });
    }
    BetaState::new(a, b)?;
    let t = n - k;
    let (mut lo, mut hi) = (0.0, 1.0);
    while hi - lo > RESERVATION_TOL {
        let mid = 0.5 * (lo + hi);
        if continue_margin(t, a, b, mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Stop once a success is seen or no draws remain; otherwise continue iff
/// `c` is below the reservation cost.
pub fn binary_decide(state: &BetaState, t: usize, c: f64) -> Result<StopDecision> {
    if !(c >= 0.0 && c.is_finite()) {
        return Err(BernoulliError::InvalidCost(c));
    }
    let stop = |h_value, reason| StopDecision {
        action: Action::Stop,
        h_value,
        threshold: c,
        zhat: 1.0,
        reason: Some(reason),
    };
    if state.z {
        return Ok(stop(0.0, StopReason::IndexBelowThreshold));
    }
    if t == 0 {
        return Ok(StopDecision {
            zhat: 0.0,
            ..stop(0.0, StopReason::HorizonExhausted)
        });
    }
    let reservation = reservation_cost(t, 0, state.a, state.b)?;
    let (action, reason) = if c < reservation {
        (Action::Continue, None)
    } else {
        (Action::Stop, Some(StopReason::IndexBelowThreshold))
    };
    Ok(StopDecision {
        action,
        h_value: reservation,
        threshold: c,
        zhat: 0.0,
        reason,
    })
}

/// Optimal `E[z_K − c·K]` from the start by dynamic programming over the full
/// decision tree `(k, z, successes, failures)`, allowing draws after a success.
pub fn full_tree_value(n: usize, a0: f64, b0: f64, c: f64) -> Result<f64> {
    BetaState::new(a0, b0)?;
    fn go(n: usize, k: usize, z: f64, s: usize, f: usize, a0: f64, b0: f64, c: f64) -> f64 {
        if k == n {
            return z;
        }
        let a = a0 + s as f64;
        let b = b0 + f as f64;
        let q = a / (a + b);
        let draw = q * go(n, k + 1, 1.0, s + 1, f, a0, b0, c)
            + (1.0 - q) * go(n, k + 1, z, s, f + 1, a0, b0, c)
            - c;
        draw.max(z)
    }
    Ok(go(n, 0, 0.0, 0, 0, a0, b0, c))
}

/// Expected `z_K − c·K` of [`binary_decide`] by enumerating every reward
/// sequence of length `n` with its Beta-Bernoulli probability.
pub fn enumerate_policy_value(n: usize, a0: f64, b0: f64, c: f64) -> Result<f64> {
    let start = BetaState::new(a0, b0)?;
    let mut total = 0.0;
    for bits in 0u64..(1u64 << n) {
        let mut state = start;
        let mut prob = 1.0;
        let mut k = 0;
        while k < n && !binary_decide(&state, n - k, c)?.is_stop() {
            let r = (bits >> k) & 1;
            let q = state.q();
            prob *= if r == 1 { q } else { 1.0 - q };
            state = beta_update(&state, r as f64)?;
            k += 1;
        }
        // every undrawn tail repeats the same stopped path
        let value = f64::from(u8::from(state.z)) - c * k as f64;
        total += prob * value / 2f64.powi((n - k) as i32);
    }
    Ok(total)
}
