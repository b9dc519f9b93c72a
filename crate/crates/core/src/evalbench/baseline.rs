//! Baselines: best-of-N and the known-distribution reservation-price rule.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::{EvalError, Result};
use crate::numerics::{bisect_root, StudentT};
use crate::policy::{
    Action, EpisodeLog, EpisodeResult, PolicyError, RewardSource, SourceError, StepRecord, StopDecision,
    StopReason,
};

/// A reward distribution known to the searcher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KnownDist {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, sd: f64 },
    StudentT { dof: f64, loc: f64, scale: f64 },
}

impl KnownDist {
    /// `E[(Y − r)⁺]`.
    pub fn expected_excess(&self, r: f64) -> Result<f64> {
        Ok(match *self {
            KnownDist::Uniform { low, high } => {
                let top = (high - r.max(low)).max(0.0);
                let below = (low - r).max(0.0);
                top * top / (2.0 * (high - low)) + below
            }
            KnownDist::Normal { mean, sd } => {
                let t = (r - mean) / sd;
                let pdf = (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
                let sf = 0.5 * erfc(t / std::f64::consts::SQRT_2);
                sd * (pdf - t * sf)
            }
            KnownDist::StudentT { dof, loc, scale } => StudentT::new(dof, loc, scale)?.partial_expectation(r)?,
        })
    }

    fn infimum(&self) -> f64 {
        match *self {
            KnownDist::Uniform { low, .. } => low,
            _ => f64::NEG_INFINITY,
        }
    }

    fn center_and_spread(&self) -> (f64, f64) {
        match *self {
            KnownDist::Uniform { low, high } => (0.5 * (low + high), high - low),
            KnownDist::Normal { mean, sd } => (mean, sd),
            KnownDist::StudentT { loc, scale, .. } => (loc, scale),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            KnownDist::Uniform { low, high } => low.is_finite() && high.is_finite() && low < high,
            KnownDist::Normal { mean, sd } => mean.is_finite() && sd > 0.0 && sd.is_finite(),
            KnownDist::StudentT { dof, loc, scale } => dof > 1.0 && loc.is_finite() && scale > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(EvalError::InvalidOptions(format!("invalid known distribution {self:?}")))
        }
    }
}

/// Solves `c = E[(Y − r*)⁺]`. When `c` reaches the mean excess over the
/// infimum of the support, returns that infimum.
pub fn classical_reservation(dist: &KnownDist, c: f64) -> Result<f64> {
    dist.validate()?;
    if !(c > 0.0 && c.is_finite()) {
        return Err(EvalError::InvalidCost(c));
    }
    if let KnownDist::Uniform { low, high } = *dist {
        let width = high - low;
        return Ok(if c >= 0.5 * width {
            low
        } else {
            high - (2.0 * c * width).sqrt()
        });
    }
    let inf = dist.infimum();
    if inf.is_finite() && c >= dist.expected_excess(inf)? {
        return Ok(inf);
    }
    let (center, spread) = dist.center_and_spread();
    let g = |r: f64| dist.expected_excess(r).map(|e| e - c);
    let mut step = spread;
    while g(center - step)? <= 0.0 || g(center + step)? >= 0.0 {
        step *= 2.0;
        if !step.is_finite() {
            return Err(EvalError::InvalidCost(c));
        }
    }
    let mut failure = None;
    let root = bisect_root(
        |r| match g(r) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        center - step,
        center + step,
        1e-13 * spread.max(1.0),
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(root),
    }
}

fn draw<S: RewardSource + ?Sized>(source: &mut S, log: &EpisodeLog) -> std::result::Result<f64, PolicyError> {
    let k = log.len();
    source
        .draw(k)
        .and_then(|r| if r.is_finite() { Ok(r) } else { Err(SourceError::NonFinite(r)) })
        .map_err(|source| PolicyError::Source {
            k,
            source,
            partial: Box::new(log.clone()),
        })
}

fn push(log: &mut EpisodeLog, r: f64, decision: Option<StopDecision>) {
    let z = log.steps.last().map_or(r, |s| s.z.max(r));
    log.steps.push(StepRecord {
        k: log.len() + 1,
        reward: r,
        filtered: false,
        z,
        mu: None,
        sigma: None,
        decision,
    });
}

fn finish(log: EpisodeLog, reason: StopReason) -> EpisodeResult {
    let (best_index, best_reward) = log.best().expect("at least one draw");
    EpisodeResult {
        best_index,
        best_reward,
        samples: log.len(),
        stop_reason: reason,
        trace: log,
    }
}

/// Best-of-N: draws exactly `n` rewards and keeps the largest.
pub fn run_fixed_n<S: RewardSource + ?Sized>(source: &mut S, n: usize) -> std::result::Result<EpisodeResult, PolicyError> {
    if n == 0 {
        return Err(PolicyError::InvalidConfig("best-of-N needs N >= 1".into()));
    }
    let mut log = EpisodeLog::default();
    for _ in 0..n {
        let r = draw(source, &log)?;
        push(&mut log, r, None);
    }
    Ok(finish(log, StopReason::HorizonExhausted))
}

/// Draws until the best reward reaches `reservation` or `n` rewards are in.
pub fn run_reservation<S: RewardSource + ?Sized>(
    source: &mut S,
    reservation: f64,
    n: usize,
) -> std::result::Result<EpisodeResult, PolicyError> {
    if n == 0 {
        return Err(PolicyError::InvalidConfig("horizon must be at least 1".into()));
    }
    let mut log = EpisodeLog::default();
    loop {
        let r = draw(source, &log)?;
        push(&mut log, r, None);
        let z = log.steps.last().expect("just pushed").z;
        let reached = z >= reservation;
        let exhausted = log.len() >= n;
        let reason = if reached {
            Some(StopReason::IndexBelowThreshold)
        } else if exhausted {
            Some(StopReason::HorizonExhausted)
        } else {
            None
        };
        let decision = StopDecision {
            action: if reason.is_some() { Action::Stop } else { Action::Continue },
            h_value: z,
            threshold: reservation,
            zhat: z,
            reason,
        };
        log.steps.last_mut().expect("just pushed").decision = Some(decision);
        if let Some(reason) = reason {
            return Ok(finish(log, reason));
        }
    }
}

/// Reservation-price search with the true distribution, capped at `n` draws.
pub fn run_classical<S: RewardSource + ?Sized>(
    source: &mut S,
    dist: &KnownDist,
    c: f64,
    n: usize,
) -> Result<EpisodeResult> {
    let reservation = classical_reservation(dist, c)?;
    Ok(run_reservation(source, reservation, n)?)
}
