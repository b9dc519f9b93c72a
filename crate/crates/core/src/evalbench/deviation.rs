//! One-step deviation check: at sampled decision states, estimate by
//! posterior-predictive rollouts whether flipping the current decision and
//! then following the rule would pay more than the rule itself.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stream::{StreamSpec, SyntheticStream};
use super::Result;
use crate::policy::{Action, PolicyConfig, StoppingRule};
use crate::posterior::{absorb_one, NigState, SearchState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationSpec {
    /// Stream that drives the rule to the checked states.
    pub stream: StreamSpec,
    pub states: usize,
    pub rollouts: usize,
    pub seed: u64,
    /// Flag a flip whose mean gain exceeds this many standard errors.
    pub z_threshold: f64,
}

impl DeviationSpec {
    pub fn new(stream: StreamSpec, states: usize, rollouts: usize, seed: u64) -> Self {
        Self {
            stream,
            states,
            rollouts,
            seed,
            z_threshold: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateCheck {
    pub state: SearchState,
    pub action: Action,
    /// Mean of (flipped value − rule value).
    pub flip_gain: f64,
    pub std_error: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub checks: Vec<StateCheck>,
    pub flagged: usize,
}

impl DeviationReport {
    pub fn passed(&self) -> bool {
        self.flagged == 0
    }
}

/// Parameters `(μ, σ)` drawn from the Normal-Inverse-Gamma posterior.
fn sample_parameters(nig: &NigState, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let precision_scale = Gamma::new(nig.alpha, 1.0).expect("alpha > 0 after bootstrap");
    let var = nig.beta / precision_scale.sample(rng);
    let z: f64 = StandardNormal.sample(rng);
    (nig.mu + (var / nig.nu).sqrt() * z, var.sqrt())
}

/// Net value, relative to stopping now with `z`, of drawing once and then
/// following `rule` to the horizon.
fn continue_rollout(
    rule: &dyn StoppingRule,
    cfg: &PolicyConfig,
    start: (SearchState, NigState),
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (mu, sd) = sample_parameters(&start.1, rng);
    let (mut s, mut nig) = start;
    let mut spent = 0.0;
    loop {
        let e: f64 = StandardNormal.sample(rng);
        (s, nig) = absorb_one(&s, &nig, mu + sd * e)?;
        spent += cfg.cost;
        if s.k >= cfg.horizon || rule.action(&s)? == Action::Stop {
            return Ok(s.z - start.0.z - spent);
        }
    }
}

/// Drives `rule` along a synthetic stream to a random stage, then compares
/// the rule's action there with its flip. Rollouts use exact conjugate
/// updates and rewards drawn from the posterior predictive of the state.
pub fn deviation_check(rule: &dyn StoppingRule, cfg: &PolicyConfig, spec: &DeviationSpec) -> Result<DeviationReport> {
    cfg.validate()?;
    spec.stream.validate()?;
    let k0 = cfg.prior.min_samples().max(1);
    if cfg.horizon <= k0 {
        return Err(super::EvalError::InvalidOptions(format!(
            "horizon {} leaves no decision after {k0} bootstrap draws",
            cfg.horizon
        )));
    }
    let checks = (0..spec.states)
        .into_par_iter()
        .map(|i| -> Result<StateCheck> {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let target = k0 + (rand::Rng::random_range(&mut rng, 0..cfg.horizon - k0));
            let mut stream = SyntheticStream::new(&spec.stream, i as u64)?;
            let (mut s, mut nig) = SearchState::bootstrap(&cfg.prior, &stream.take(k0))?;
            while s.k < target && rule.action(&s)? == Action::Continue {
                (s, nig) = absorb_one(&s, &nig, stream.next_reward())?;
            }
            let action = rule.action(&s)?;
            let sign = match action {
                Action::Continue => -1.0,
                Action::Stop => 1.0,
            };
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in 0..spec.rollouts {
                let gain = sign * continue_rollout(rule, cfg, (s, nig), &mut rng)?;
                sum += gain;
                sum_sq += gain * gain;
            }
            let n = spec.rollouts as f64;
            let mean = sum / n;
            let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
            let std_error = (var / n).sqrt();
            Ok(StateCheck {
                state: s,
                action,
                flip_gain: mean,
                std_error,
                flagged: mean > spec.z_threshold * std_error && mean > 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let flagged = checks.iter().filter(|c| c.flagged).count();
    Ok(DeviationReport { checks, flagged })
}
