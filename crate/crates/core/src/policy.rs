//! The stopping controller: bootstrap, then alternate decide / draw / absorb
//! until the index falls to the scaled cost or the horizon runs out.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hindex::{HIndexError, HTable};
use crate::posterior::{
    absorb_one, robust_absorb_one, sigma_floor, NigPrior, NigState, PosteriorError, SearchState,
    SkewGate, DEFAULT_FILTER_QUANTILE, SIGMA_FLOOR,
};

/// Failure of a reward source.
#[derive(Debug, Error)]
pub enum SourceError {
    #[error("no response within {0:?}")]
    Timeout(std::time::Duration),
    #[error("unparseable reward in line {0:?}")]
    Parse(String),
    #[error("unexpected line {0:?}")]
    Protocol(String),
    #[error("source closed before answering")]
    Eof,
    #[error("source exhausted after {0} rewards")]
    Exhausted(usize),
    #[error("non-finite reward {0}")]
    NonFinite(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A per-episode supplier of rewards.
pub trait RewardSource {
    /// The reward of draw `k` (zero-based).
    fn draw(&mut self, k: usize) -> std::result::Result<f64, SourceError>;
}

impl<F> RewardSource for F
where
    F: FnMut(usize) -> std::result::Result<f64, SourceError>,
{
    fn draw(&mut self, k: usize) -> std::result::Result<f64, SourceError> {
        self(k)
    }
}

/// Replays a fixed list of rewards.
#[derive(Debug, Clone)]
pub struct Replay {
    rewards: Vec<f64>,
}

impl Replay {
    pub fn new(rewards: impl Into<Vec<f64>>) -> Self {
        Self {
            rewards: rewards.into(),
        }
    }
}

impl RewardSource for Replay {
    fn draw(&mut self, k: usize) -> std::result::Result<f64, SourceError> {
        self.rewards
            .get(k)
            .copied()
            .ok_or(SourceError::Exhausted(self.rewards.len()))
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error("table horizon {table} differs from policy horizon {config}")]
    HorizonMismatch { table: usize, config: usize },
    #[error("table prior differs from policy prior")]
    PriorMismatch,
    #[error("state at k={k} precedes the minimum sample size {k0}")]
    TooEarly { k: usize, k0: usize },
    #[error("reward source failed at draw {k}: {source}")]
    Source {
        k: usize,
        #[source]
        source: SourceError,
        partial: Box<EpisodeLog>,
    },
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error(transparent)]
    HIndex(#[from] HIndexError),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    /// Cost per draw; zero means never stop before the horizon.
    pub cost: f64,
    pub horizon: usize,
    #[serde(default)]
    pub prior: NigPrior,
    #[serde(default = "default_true")]
    pub robust: bool,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_quantile")]
    pub quantile: f64,
    /// Only winsorize while recent rewards are left-skewed.
    #[serde(default)]
    pub skew_gate: Option<SkewGate>,
}

fn default_true() -> bool {
    true
}

fn default_batch() -> usize {
    1
}

fn default_quantile() -> f64 {
    DEFAULT_FILTER_QUANTILE
}

impl PolicyConfig {
    /// Jeffreys prior, robust updates, one draw per round.
    pub fn new(cost: f64, horizon: usize) -> Self {
        Self {
            cost,
            horizon,
            prior: NigPrior::jeffreys(),
            robust: true,
            batch_size: 1,
            quantile: DEFAULT_FILTER_QUANTILE,
            skew_gate: None,
        }
    }

    pub fn plain(mut self) -> Self {
        self.robust = false;
        self
    }

    pub fn with_batch(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PolicyError::InvalidConfig(m));
        if !(self.cost >= 0.0 && self.cost.is_finite()) {
            return bad(format!("cost must be finite and nonnegative, got {}", self.cost));
        }
        let k0 = self.prior.min_samples();
        if self.horizon < k0 + 1 {
            return bad(format!("horizon {} must exceed k0={k0}", self.horizon));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return bad(format!("filter quantile must lie in (0, 1), got {}", self.quantile));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    IndexBelowThreshold,
    HorizonExhausted,
    DegenerateSigma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopDecision {
    pub action: Action,
    /// Tabulated index at the current state; zero once the horizon is reached.
    pub h_value: f64,
    /// `c / σ` with σ floored.
    pub threshold: f64,
    pub zhat: f64,
    /// Set exactly when `action` is `Stop`.
    pub reason: Option<StopReason>,
}

impl StopDecision {
    pub fn is_stop(&self) -> bool {
        self.action == Action::Stop
    }
}

/// One record per drawn reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Number of rewards drawn so far, including this one.
    pub k: usize,
    pub reward: f64,
    /// The posterior saw the current mean instead of this reward.
    pub filtered: bool,
    /// Best reward so far.
    pub z: f64,
    /// Posterior state after this reward; absent during bootstrap.
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    /// Decision taken after this reward; absent during bootstrap and
    /// inside a batch.
    pub decision: Option<StopDecision>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub steps: Vec<StepRecord>,
}

impl EpisodeLog {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|s| s.reward)
    }

    pub fn decisions(&self) -> impl Iterator<Item = &StopDecision> + '_ {
        self.steps.iter().filter_map(|s| s.decision.as_ref())
    }

    /// Index and value of the first maximal reward.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.rewards()
            .enumerate()
            .fold(None, |acc: Option<(usize, f64)>, (i, r)| match acc {
                Some((_, b)) if b >= r => acc,
                _ => Some((i, r)),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    /// Zero-based draw index of the selected reward (first maximum).
    pub best_index: usize,
    pub best_reward: f64,
    /// Number of rewards drawn.
    pub samples: usize,
    pub stop_reason: StopReason,
    pub trace: EpisodeLog,
}

fn check_table(table: &HTable, cfg: &PolicyConfig) -> Result<()> {
    if table.horizon() != cfg.horizon {
        return Err(PolicyError::HorizonMismatch {
            table: table.horizon(),
            config: cfg.horizon,
        });
    }
    if table.spec().prior.key() != cfg.prior.key() {
        return Err(PolicyError::PriorMismatch);
    }
    Ok(())
}

/// Continue iff `h_{n,k}(ẑ) > c/σ` and `k < n`.
pub fn decide(table: &HTable, state: &SearchState, cfg: &PolicyConfig) -> Result<StopDecision> {
    check_table(table, cfg)?;
    let k0 = table.k0();
    if state.k < k0 {
        return Err(PolicyError::TooEarly { k: state.k, k0 });
    }
    let floored = sigma_floor(state);
    let zhat = (floored.z - floored.mu) / floored.sigma;
    let threshold = cfg.cost / floored.sigma;
    if state.k >= cfg.horizon {
        return Ok(StopDecision {
            action: Action::Stop,
            h_value: 0.0,
            threshold,
            zhat,
            reason: Some(StopReason::HorizonExhausted),
        });
    }
    let h_value = table.lookup(state.k, zhat)?;
    let degenerate = state.sigma < SIGMA_FLOOR;
    let (action, reason) = if degenerate && cfg.cost > 0.0 {
        (Action::Stop, Some(StopReason::DegenerateSigma))
    } else if h_value > threshold {
        (Action::Continue, None)
    } else {
        if threshold > table.max_value() {
            log::debug!(
                "scaled cost {threshold} exceeds every tabulated index at k={}",
                state.k
            );
        }
        (Action::Stop, Some(StopReason::IndexBelowThreshold))
    };
    Ok(StopDecision {
        action,
        h_value,
        threshold,
        zhat,
        reason,
    })
}

/// Mutable per-episode state.
struct Episode<'a> {
    table: &'a HTable,
    cfg: &'a PolicyConfig,
    log: EpisodeLog,
    state: Option<(SearchState, NigState)>,
}

impl<'a> Episode<'a> {
    fn draw<S: RewardSource + ?Sized>(&mut self, source: &mut S) -> Result<f64> {
        let k = self.log.len();
        let reward = source.draw(k).and_then(|r| {
            if r.is_finite() {
                Ok(r)
            } else {
                Err(SourceError::NonFinite(r))
            }
        });
        reward.map_err(|source| PolicyError::Source {
            k,
            source,
            partial: Box::new(self.log.clone()),
        })
    }

    /// Draws `max(k0, 1)` rewards: even a proper prior needs one reward to
    /// have a best-so-far.
    fn bootstrap<S: RewardSource + ?Sized>(&mut self, source: &mut S) -> Result<()> {
        let k0 = self.table.k0().max(1);
        let mut rewards = Vec::with_capacity(k0);
        for _ in 0..k0 {
            let r = self.draw(source)?;
            rewards.push(r);
            let z = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            self.log.steps.push(StepRecord {
                k: rewards.len(),
                reward: r,
                filtered: false,
                z,
                mu: None,
                sigma: None,
                decision: None,
            });
        }
        let (s, nig) = SearchState::bootstrap(&self.cfg.prior, &rewards)?;
        if let Some(last) = self.log.steps.last_mut() {
            last.mu = Some(s.mu);
            last.sigma = Some(s.sigma);
        }
        self.state = Some((s, nig));
        Ok(())
    }

    fn absorb<S: RewardSource + ?Sized>(&mut self, source: &mut S) -> Result<()> {
        let r = self.draw(source)?;
        let (s, nig) = self.state.expect("bootstrapped");
        let gate_open = match &self.cfg.skew_gate {
            Some(gate) => {
                let mut recent: Vec<f64> = self.log.rewards().collect();
                recent.push(r);
                gate.allows(&recent)
            }
            None => true,
        };
        let (next, posterior, filtered) = if self.cfg.robust && gate_open && s.sigma > 0.0 {
            let u = robust_absorb_one(&s, &nig, r, self.cfg.quantile)?;
            (u.state, u.posterior, u.filtered)
        } else {
            let (next, posterior) = absorb_one(&s, &nig, r)?;
            (next, posterior, false)
        };
        self.log.steps.push(StepRecord {
            k: next.k,
            reward: r,
            filtered,
            z: next.z,
            mu: Some(next.mu),
            sigma: Some(next.sigma),
            decision: None,
        });
        self.state = Some((next, posterior));
        Ok(())
    }

    fn decide(&mut self) -> Result<StopDecision> {
        let (s, _) = self.state.expect("bootstrapped");
        let d = decide(self.table, &s, self.cfg)?;
        if let Some(last) = self.log.steps.last_mut() {
            last.decision = Some(d);
        }
        Ok(d)
    }

    fn finish(self, reason: StopReason) -> EpisodeResult {
        let (best_index, best_reward) = self.log.best().expect("at least k0 >= 1 draws");
        EpisodeResult {
            best_index,
            best_reward,
            samples: self.log.len(),
            stop_reason: reason,
            trace: self.log,
        }
    }
}

fn run<S: RewardSource + ?Sized>(
    source: &mut S,
    table: &HTable,
    cfg: &PolicyConfig,
    batch: usize,
) -> Result<EpisodeResult> {
    cfg.validate()?;
    check_table(table, cfg)?;
    let mut ep = Episode {
        table,
        cfg,
        log: EpisodeLog::default(),
        state: None,
    };
    ep.bootstrap(source)?;
    loop {
        let d = ep.decide()?;
        if let Some(reason) = d.reason {
            return Ok(ep.finish(reason));
        }
        let remaining = cfg.horizon - ep.log.len();
        for _ in 0..batch.min(remaining) {
            ep.absorb(source)?;
        }
    }
}

/// One draw per decision.
pub fn run_episode<S: RewardSource + ?Sized>(
    source: &mut S,
    table: &HTable,
    cfg: &PolicyConfig,
) -> Result<EpisodeResult> {
    run(source, table, cfg, 1)
}

/// `cfg.batch_size` draws per decision (fewer when the horizon cuts the last
/// round short).
pub fn run_episode_batched<S: RewardSource + ?Sized>(
    source: &mut S,
    table: &HTable,
    cfg: &PolicyConfig,
) -> Result<EpisodeResult> {
    run(source, table, cfg, cfg.batch_size)
}

fn fail(report: &mut SensitivityReport, property: &'static str, k: usize, detail: String) {
    report.violations.push(Violation {
        property: property.to_string(),
        k,
        detail,
    });
}

/// A monotonicity property of the decision rule that failed at a point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub property: String,
    pub k: usize,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub points: usize,
    pub comparisons: usize,
    pub violations: Vec<Violation>,
}

impl SensitivityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks at `points` random states that: stopping is upward closed in the
/// cost; a larger best reward never turns Stop into Continue; a larger scale
/// never turns Continue into Stop when `z ≥ μ`; and continuing at `k+1`
/// implies continuing at `k`.
pub fn sensitivity_probe(
    table: &HTable,
    cfg: &PolicyConfig,
    costs: &[f64],
    points: usize,
    seed: u64,
) -> Result<SensitivityReport> {
    check_table(table, cfg)?;
    let mut costs = costs.to_vec();
    costs.sort_by(f64::total_cmp);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SensitivityReport {
        points,
        ..Default::default()
    };
    let k0 = table.k0();
    let at = |k: usize, z: f64, mu: f64, sigma: f64, c: f64| -> Result<Action> {
        let cfg = PolicyConfig { cost: c, ..cfg.clone() };
        Ok(decide(table, &SearchState { k, z, mu, sigma }, &cfg)?.action)
    };
    for _ in 0..points {
        let k = rng.random_range(k0..cfg.horizon);
        let mu = rng.random_range(-2.0..2.0);
        let sigma = 10f64.powf(rng.random_range(-1.5..0.5));
        let zhat: f64 = rng.random_range(-3.0..5.0);
        let z = mu + zhat * sigma;
        let c = costs[rng.random_range(0..costs.len())];

        let mut stopped_at = None;
        for &ci in &costs {
            let a = at(k, z, mu, sigma, ci)?;
            report.comparisons += 1;
            match (stopped_at, a) {
                (None, Action::Stop) => stopped_at = Some(ci),
                (Some(cs), Action::Continue) => fail(
                    &mut report,
                    "stop region upward closed in cost",
                    k,
                    format!("zhat={zhat} stops at c={cs} but continues at c={ci}"),
                ),
                _ => {}
            }
        }

        let dz = rng.random_range(0.0..2.0) * sigma;
        if at(k, z, mu, sigma, c)? == Action::Stop && at(k, z + dz, mu, sigma, c)? == Action::Continue {
            fail(
                &mut report,
                "larger best reward stops",
                k,
                format!("z={z} stops, z={} continues (mu={mu}, sigma={sigma}, c={c})", z + dz),
            );
        }
        report.comparisons += 1;

        let scale = 1.0 + rng.random_range(0.0..2.0);
        let z_up = z.max(mu);
        if at(k, z_up, mu, sigma, c)? == Action::Continue
            && at(k, z_up, mu, sigma * scale, c)? == Action::Stop
        {
            fail(
                &mut report,
                "larger scale continues",
                k,
                format!("sigma={sigma} continues, sigma={} stops (z={z_up}, mu={mu}, c={c})", sigma * scale),
            );
        }
        report.comparisons += 1;

        if k + 1 < cfg.horizon
            && at(k + 1, z, mu, sigma, c)? == Action::Continue
            && at(k, z, mu, sigma, c)? == Action::Stop
        {
            fail(
                &mut report,
                "patience in remaining budget",
                k,
                format!("continues at k+1 but stops at k (zhat={zhat}, c/sigma={})", c / sigma),
            );
        }
        report.comparisons += 1;
    }
    Ok(report)
}

/// A decision rule over search states, for rollouts that start mid-episode.
pub trait StoppingRule: Sync {
    fn action(&self, state: &SearchState) -> Result<Action>;
}

/// The index policy with a fixed table and config.
#[derive(Debug, Clone, Copy)]
pub struct IndexRule<'a> {
    pub table: &'a HTable,
    pub cfg: &'a PolicyConfig,
}

impl StoppingRule for IndexRule<'_> {
    fn action(&self, state: &SearchState) -> Result<Action> {
        Ok(decide(self.table, state, self.cfg)?.action)
    }
}

/// Stops at every state; a deliberately poor rule.
#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysStop;

impl StoppingRule for AlwaysStop {
    fn action(&self, _state: &SearchState) -> Result<Action> {
        Ok(Action::Stop)
    }
}
