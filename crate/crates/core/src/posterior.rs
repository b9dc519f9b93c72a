//! Normal-Inverse-Gamma belief maintenance over an unknown reward mean and
//! variance.
//!
//! [`NigState`] holds the conjugate hyperparameters; [`SearchState`] holds the
//! sufficient statistics `(z, μ, σ, k)` the stopping rule consumes. Both are
//! immutable values: every update returns new states.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, StudentT};

/// Lower bound applied to the predictive scale before it is used for decisions.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Default predictive quantile below which rewards are winsorized.
pub const DEFAULT_FILTER_QUANTILE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PosteriorError {
    #[error(
        "prior (mu0={mu0}, nu0={nu0}, alpha0={alpha0}, beta0={beta0}) matches no minimum-sample-size row"
    )]
    UnsupportedPrior {
        mu0: f64,
        nu0: f64,
        alpha0: f64,
        beta0: f64,
    },
    #[error("need at least k0={k0} rewards for a proper posterior, got {got}")]
    TooFewRewards { k0: usize, got: usize },
    #[error("reward must be finite, got {0}")]
    NonFiniteReward(f64),
    #[error("search state at k={state_k} does not match posterior at k={posterior_k}")]
    StageMismatch { state_k: usize, posterior_k: usize },
    #[error("predictive scale is undefined at k={k} (alpha={alpha}, nu={nu})")]
    UndefinedScale { k: usize, alpha: f64, nu: f64 },
    #[error("predictive scale is zero; floor it before standardizing")]
    ZeroScale,
    #[error("filter quantile {0} outside (0, 1)")]
    BadQuantile(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, PosteriorError>;

/// Minimum number of observations for a proper posterior predictive, by prior
/// configuration. Rows are checked in order; `None` if no row applies.
pub fn min_samples_for(alpha0: f64, nu0: f64, beta0: f64) -> Option<usize> {
    let two_alpha = 2.0 * alpha0;
    if nu0 < 0.0 || beta0 < 0.0 {
        return None;
    }
    if two_alpha > 1.0 && nu0 > 0.0 && beta0 > 0.0 {
        Some(0)
    } else if two_alpha > 0.0 && two_alpha <= 1.0 && nu0 > 0.0 {
        Some(1)
    } else if two_alpha > 1.0 && nu0 > 0.0 && beta0 == 0.0 {
        Some(1)
    } else if alpha0 > 0.0 && beta0 > 0.0 && nu0 == 0.0 {
        Some(1)
    } else if alpha0 > 0.0 && nu0 == 0.0 && beta0 == 0.0 {
        Some(2)
    } else if two_alpha > -1.0 && two_alpha <= 0.0 {
        Some(2)
    } else if two_alpha == -1.0 {
        Some(3)
    } else {
        None
    }
}

/// Normal-Inverse-Gamma prior `NIG(μ₀, ν₀, α₀, β₀)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PriorParams", into = "PriorParams")]
pub struct NigPrior {
    mu0: f64,
    nu0: f64,
    alpha0: f64,
    beta0: f64,
    k0: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct PriorParams {
    mu0: f64,
    nu0: f64,
    alpha0: f64,
    beta0: f64,
}

impl TryFrom<PriorParams> for NigPrior {
    type Error = PosteriorError;

    fn try_from(p: PriorParams) -> Result<Self> {
        NigPrior::new(p.mu0, p.nu0, p.alpha0, p.beta0)
    }
}

impl From<NigPrior> for PriorParams {
    fn from(p: NigPrior) -> Self {
        PriorParams {
            mu0: p.mu0,
            nu0: p.nu0,
            alpha0: p.alpha0,
            beta0: p.beta0,
        }
    }
}

impl NigPrior {
    pub fn new(mu0: f64, nu0: f64, alpha0: f64, beta0: f64) -> Result<Self> {
        let finite = [mu0, nu0, alpha0, beta0].iter().all(|v| v.is_finite());
        let k0 = finite
            .then(|| min_samples_for(alpha0, nu0, beta0))
            .flatten()
            .ok_or(PosteriorError::UnsupportedPrior {
                mu0,
                nu0,
                alpha0,
                beta0,
            })?;
        Ok(Self {
            mu0,
            nu0,
            alpha0,
            beta0,
            k0,
        })
    }

    /// Jeffreys' non-informative prior `(α₀, ν₀, μ₀, β₀) = (−½, 0, 0, 0)`.
    pub fn jeffreys() -> Self {
        Self {
            mu0: 0.0,
            nu0: 0.0,
            alpha0: -0.5,
            beta0: 0.0,
            k0: 3,
        }
    }

    pub fn mu0(&self) -> f64 {
        self.mu0
    }

    pub fn nu0(&self) -> f64 {
        self.nu0
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn beta0(&self) -> f64 {
        self.beta0
    }

    pub fn min_samples(&self) -> usize {
        self.k0
    }

    /// Degrees of freedom of the predictive after `k` observations, `2α₀ + k`.
    pub fn predictive_dof(&self, k: usize) -> f64 {
        2.0 * self.alpha0 + k as f64
    }

    /// Bit-level identity used for cache keys.
    pub fn key(&self) -> [u64; 4] {
        [
            self.mu0.to_bits(),
            self.nu0.to_bits(),
            self.alpha0.to_bits(),
            self.beta0.to_bits(),
        ]
    }
}

impl Default for NigPrior {
    fn default() -> Self {
        Self::jeffreys()
    }
}

/// Posterior hyperparameters after `k` observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NigState {
    pub prior: NigPrior,
    pub k: usize,
    pub alpha: f64,
    pub nu: f64,
    pub mu: f64,
    pub beta: f64,
}

impl NigState {
    pub fn from_prior(prior: NigPrior) -> Self {
        Self {
            prior,
            k: 0,
            alpha: prior.alpha0,
            nu: prior.nu0,
            mu: prior.mu0,
            beta: prior.beta0,
        }
    }

    /// Predictive scale `σ_k = √((ν_k+1)β_k / (ν_k α_k))`; `None` while
    /// `ν_k ≤ 0` or `α_k ≤ 0`. A zero scale means every reward so far was equal.
    pub fn sigma(&self) -> Option<f64> {
        if self.nu > 0.0 && self.alpha > 0.0 {
            Some(((self.nu + 1.0) * self.beta / (self.nu * self.alpha)).max(0.0).sqrt())
        } else {
            None
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.sigma() == Some(0.0)
    }

    pub fn predictive_dof(&self) -> f64 {
        2.0 * self.alpha
    }

    /// Posterior predictive for the next reward.
    pub fn predictive(&self) -> Result<StudentT> {
        let sigma = self.sigma().ok_or(PosteriorError::UndefinedScale {
            k: self.k,
            alpha: self.alpha,
            nu: self.nu,
        })?;
        Ok(StudentT::new(self.predictive_dof(), self.mu, sigma)?)
    }

    /// Exact single-observation hyperparameter update.
    pub fn observe(&self, r: f64) -> Result<Self> {
        if !r.is_finite() {
            return Err(PosteriorError::NonFiniteReward(r));
        }
        let innovation = r - self.mu;
        let k = self.k + 1;
        Ok(Self {
            prior: self.prior,
            k,
            // α and ν depend on k alone; recompute instead of accumulating
            alpha: self.prior.alpha0 + 0.5 * k as f64,
            nu: self.prior.nu0 + k as f64,
            mu: self.mu + innovation / (self.nu + 1.0),
            beta: self.beta + self.nu * innovation * innovation / (2.0 * (self.nu + 1.0)),
        })
    }
}

/// Closed-form batch posterior.
pub fn absorb_batch(prior: &NigPrior, rewards: &[f64]) -> Result<NigState> {
    let k0 = prior.min_samples();
    if rewards.len() < k0 {
        return Err(PosteriorError::TooFewRewards {
            k0,
            got: rewards.len(),
        });
    }
    if let Some(&bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(PosteriorError::NonFiniteReward(bad));
    }
    if rewards.is_empty() {
        return Ok(NigState::from_prior(*prior));
    }
    let k = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / k;
    let ss: f64 = rewards.iter().map(|r| (r - mean) * (r - mean)).sum();
    let (mu0, nu0) = (prior.mu0, prior.nu0);
    Ok(NigState {
        prior: *prior,
        k: rewards.len(),
        alpha: prior.alpha0 + 0.5 * k,
        nu: nu0 + k,
        mu: (nu0 * mu0 + k * mean) / (nu0 + k),
        beta: prior.beta0 + 0.5 * ss + k * nu0 * (mean - mu0).powi(2) / (2.0 * (nu0 + k)),
    })
}

/// Sufficient statistics for the stopping decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub k: usize,
    /// Best reward observed so far.
    pub z: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl SearchState {
    /// Builds the search state from a posterior whose predictive scale is
    /// defined. Degenerate (zero-scale) posteriors are allowed here and must
    /// go through [`sigma_floor`] before any decision.
    pub fn from_posterior(nig: &NigState, z: f64) -> Result<Self> {
        let sigma = nig.sigma().ok_or(PosteriorError::UndefinedScale {
            k: nig.k,
            alpha: nig.alpha,
            nu: nig.nu,
        })?;
        Ok(Self {
            k: nig.k,
            z,
            mu: nig.mu,
            sigma,
        })
    }

    /// Bootstraps a search state from the first rewards of a stream.
    pub fn bootstrap(prior: &NigPrior, rewards: &[f64]) -> Result<(Self, NigState)> {
        let nig = absorb_batch(prior, rewards)?;
        let z = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok((Self::from_posterior(&nig, z)?, nig))
    }
}

/// Incremental update of `(z, μ, σ, k)` and the hyperparameters with one
/// reward.
pub fn absorb_one(state: &SearchState, nig: &NigState, r: f64) -> Result<(SearchState, NigState)> {
    if !r.is_finite() {
        return Err(PosteriorError::NonFiniteReward(r));
    }
    if state.k != nig.k {
        return Err(PosteriorError::StageMismatch {
            state_k: state.k,
            posterior_k: nig.k,
        });
    }
    let prior = &nig.prior;
    let k = state.k as f64;
    let n1 = prior.nu0 + k + 1.0;
    let dof = 2.0 * prior.alpha0 + k;
    let innovation = r - state.mu;
    let shrink = ((1.0 - 1.0 / (n1 * n1)) / (dof + 1.0)).sqrt();
    let next = SearchState {
        k: state.k + 1,
        z: state.z.max(r),
        mu: state.mu + innovation / n1,
        sigma: shrink * (dof * state.sigma * state.sigma + innovation * innovation).sqrt(),
    };
    Ok((next, nig.observe(r)?))
}

/// Outcome of a robust update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustUpdate {
    pub state: SearchState,
    pub posterior: NigState,
    /// `true` when the reward fell below the predictive quantile and the
    /// posterior saw the current mean instead.
    pub filtered: bool,
}

/// Winsorized update: rewards below the `quantile` predictive quantile are
/// replaced by the current mean for the posterior. `z` always tracks the raw
/// reward.
pub fn robust_absorb_one(
    state: &SearchState,
    nig: &NigState,
    r: f64,
    quantile: f64,
) -> Result<RobustUpdate> {
    if !r.is_finite() {
        return Err(PosteriorError::NonFiniteReward(r));
    }
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(PosteriorError::BadQuantile(quantile));
    }
    if state.sigma <= 0.0 {
        return Err(PosteriorError::ZeroScale);
    }
    let predictive = StudentT::new(nig.predictive_dof(), state.mu, state.sigma)?;
    let threshold = predictive.quantile(quantile)?;
    let filtered = r < threshold;
    let used = if filtered { state.mu } else { r };
    let (mut next, posterior) = absorb_one(state, nig, used)?;
    next.z = state.z.max(r);
    Ok(RobustUpdate {
        state: next,
        posterior,
        filtered,
    })
}

/// Replaces σ by `max(σ, 1e-6)`.
pub fn sigma_floor(state: &SearchState) -> SearchState {
    SearchState {
        sigma: state.sigma.max(SIGMA_FLOOR),
        ..*state
    }
}

/// Standardized best reward `ẑ = (z − μ)/σ`.
pub fn standardize(state: &SearchState) -> Result<f64> {
    if state.sigma <= 0.0 {
        return Err(PosteriorError::ZeroScale);
    }
    Ok((state.z - state.mu) / state.sigma)
}

/// Sample skewness `γ₁` (biased moment estimator); `None` for fewer than three
/// points or zero spread.
pub fn sample_skewness(values: &[f64]) -> Option<f64> {
    if values.len() < 3 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    (m2 > 0.0).then(|| m3 / m2.powf(1.5))
}

/// Optional gate: only winsorize when the recent rewards are strongly
/// left-skewed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkewGate {
    pub window: usize,
    pub threshold: f64,
}

impl Default for SkewGate {
    fn default() -> Self {
        Self {
            window: 8,
            threshold: -0.5,
        }
    }
}

impl SkewGate {
    /// `recent` is the full reward history; only the trailing window counts.
    /// The incoming reward is included by the caller.
    pub fn allows(&self, recent: &[f64]) -> bool {
        let start = recent.len().saturating_sub(self.window);
        sample_skewness(&recent[start..]).is_some_and(|g| g < self.threshold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn jeffreys_123() -> (SearchState, NigState) {
        SearchState::bootstrap(&NigPrior::jeffreys(), &[1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn minimum_sample_rows() {
        assert_eq!(NigPrior::jeffreys().min_samples(), 3);
        assert_eq!(NigPrior::new(0.0, 0.0, -0.5, 0.0).unwrap().min_samples(), 3);
        assert_eq!(NigPrior::new(0.0, 1.0, 1.0, 1.0).unwrap().min_samples(), 0);
        assert_eq!(NigPrior::new(0.0, 0.0, 1.0, 0.0).unwrap().min_samples(), 2);
        assert_eq!(NigPrior::new(0.0, 2.0, 0.25, 0.0).unwrap().min_samples(), 1);
        assert_eq!(NigPrior::new(0.0, 2.0, 3.0, 0.0).unwrap().min_samples(), 1);
        assert_eq!(NigPrior::new(0.0, 0.0, 2.0, 1.0).unwrap().min_samples(), 1);
        assert_eq!(NigPrior::new(0.0, 0.0, -0.25, 0.0).unwrap().min_samples(), 2);
    }

    #[test]
    fn unsupported_priors_rejected() {
        assert!(NigPrior::new(0.0, 0.0, -1.0, 0.0).is_err());
        assert!(NigPrior::new(0.0, -1.0, 1.0, 1.0).is_err());
        assert!(NigPrior::new(0.0, 1.0, 1.0, -1.0).is_err());
        assert!(NigPrior::new(f64::NAN, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn prior_serde_validates() {
        let json = serde_json::to_string(&NigPrior::jeffreys()).unwrap();
        let back: NigPrior = serde_json::from_str(&json).unwrap();
        assert_eq!(back, NigPrior::jeffreys());
        let bad = r#"{"mu0":0.0,"nu0":0.0,"alpha0":-2.0,"beta0":0.0}"#;
        assert!(serde_json::from_str::<NigPrior>(bad).is_err());
    }

    #[test]
    fn worked_batch_example() {
        let nig = absorb_batch(&NigPrior::jeffreys(), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(nig.alpha, 1.0);
        assert_eq!(nig.nu, 3.0);
        assert_eq!(nig.mu, 2.0);
        assert_eq!(nig.beta, 1.0);
        assert!((nig.sigma().unwrap() - (4.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_rewards_are_degenerate() {
        for c in [-3.5, 0.0, 7.25] {
            let nig = absorb_batch(&NigPrior::jeffreys(), &[c, c, c]).unwrap();
            assert_eq!(nig.beta, 0.0);
            assert!(nig.is_degenerate());
        }
    }

    #[test]
    fn empty_batch_keeps_prior() {
        let prior = NigPrior::new(0.0, 1.0, 1.0, 1.0).unwrap();
        let nig = absorb_batch(&prior, &[]).unwrap();
        assert_eq!(nig, NigState::from_prior(prior));
        assert!((nig.sigma().unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn too_few_rewards() {
        let err = absorb_batch(&NigPrior::jeffreys(), &[1.0, 2.0]).unwrap_err();
        assert_eq!(err, PosteriorError::TooFewRewards { k0: 3, got: 2 });
    }

    #[test]
    fn absorb_one_worked_example() {
        let (state, nig) = jeffreys_123();
        let (next, post) = absorb_one(&state, &nig, 2.0).unwrap();
        assert_eq!(next.mu, 2.0);
        assert_eq!(next.z, 3.0);
        assert_eq!(next.k, 4);
        assert!((next.sigma - (5.0f64 / 6.0).sqrt()).abs() < 1e-12);
        let batch = absorb_batch(&NigPrior::jeffreys(), &[1.0, 2.0, 3.0, 2.0]).unwrap();
        assert!((post.sigma().unwrap() - batch.sigma().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn absorb_one_identities() {
        let (state, nig) = jeffreys_123();
        let (same_z, _) = absorb_one(&state, &nig, state.z).unwrap();
        assert_eq!(same_z.z, state.z);
        let (same_mu, _) = absorb_one(&state, &nig, state.mu).unwrap();
        assert_eq!(same_mu.mu, state.mu);
        assert!(absorb_one(&state, &nig, f64::NAN).is_err());
        let mut stale = state;
        stale.k = 7;
        assert!(matches!(
            absorb_one(&stale, &nig, 1.0),
            Err(PosteriorError::StageMismatch { .. })
        ));
    }

    #[test]
    fn robust_filters_low_outlier() {
        let nig = NigState {
            prior: NigPrior::jeffreys(),
            k: 5,
            alpha: 2.0,
            nu: 5.0,
            mu: 0.0,
            beta: 1.0,
        };
        let state = SearchState {
            k: 5,
            z: 1.0,
            mu: 0.0,
            sigma: 1.0,
        };
        let robust = robust_absorb_one(&state, &nig, -50.0, 0.01).unwrap();
        assert!(robust.filtered);
        assert_eq!(robust.state.mu, 0.0);
        assert_eq!(robust.state.z, 1.0);
        let (plain, _) = absorb_one(&state, &nig, -50.0).unwrap();
        assert!(robust.state.sigma <= plain.sigma);

        let mild = robust_absorb_one(&state, &nig, 0.3, 0.01).unwrap();
        assert!(!mild.filtered);
        let (plain_mild, plain_post) = absorb_one(&state, &nig, 0.3).unwrap();
        assert_eq!(mild.state, plain_mild);
        assert_eq!(mild.posterior, plain_post);
    }

    #[test]
    fn robust_requires_positive_scale() {
        let (mut state, nig) = jeffreys_123();
        state.sigma = 0.0;
        assert_eq!(
            robust_absorb_one(&state, &nig, 1.0, 0.01).unwrap_err(),
            PosteriorError::ZeroScale
        );
        assert!(robust_absorb_one(&sigma_floor(&state), &nig, 1.0, 0.01).is_ok());
    }

    #[test]
    fn floor_and_standardize() {
        let s = SearchState {
            k: 3,
            z: 1.0,
            mu: 1.0,
            sigma: 0.0,
        };
        assert_eq!(sigma_floor(&s).sigma, SIGMA_FLOOR);
        assert_eq!(sigma_floor(&SearchState { sigma: 0.5, ..s }).sigma, 0.5);
        assert_eq!(standardize(&s), Err(PosteriorError::ZeroScale));

        let (state, _) = jeffreys_123();
        assert!((standardize(&state).unwrap() - 0.866_025_403_784_438_6).abs() < 1e-12);
        let at_mean = SearchState { z: state.mu, ..state };
        assert_eq!(standardize(&at_mean).unwrap(), 0.0);
        let scaled = SearchState {
            z: 4.0 * state.z,
            mu: 4.0 * state.mu,
            sigma: 4.0 * state.sigma,
            ..state
        };
        assert!((standardize(&scaled).unwrap() - standardize(&state).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn degenerate_state_floors_to_large_zhat() {
        let (state, nig) = SearchState::bootstrap(&NigPrior::jeffreys(), &[2.0, 2.0, 2.0]).unwrap();
        assert!(nig.is_degenerate());
        assert_eq!(state.sigma, 0.0);
        let floored = sigma_floor(&state);
        assert_eq!(standardize(&floored).unwrap(), 0.0);
        assert_eq!(floored.sigma, SIGMA_FLOOR);
    }

    #[test]
    fn skew_gate() {
        let gate = SkewGate::default();
        assert!(!gate.allows(&[1.0, 2.0]));
        assert!(gate.allows(&[1.0, 1.1, 0.9, 1.05, -6.0]));
        assert!(!gate.allows(&[1.0, 1.1, 0.9, 1.05, 6.0]));
    }

    fn valid_prior() -> impl Strategy<Value = NigPrior> {
        prop_oneof![
            Just(NigPrior::jeffreys()),
            (-2.0f64..2.0, 0.1f64..5.0, 0.6f64..4.0, 0.1f64..3.0)
                .prop_map(|(m, n, a, b)| NigPrior::new(m, n, a, b).unwrap()),
            (-2.0f64..2.0, 0.1f64..5.0, 0.05f64..0.5)
                .prop_map(|(m, n, a)| NigPrior::new(m, n, a, 0.0).unwrap()),
            (0.1f64..4.0, 0.1f64..3.0).prop_map(|(a, b)| NigPrior::new(0.0, 0.0, a, b).unwrap()),
            (0.1f64..4.0).prop_map(|a| NigPrior::new(0.0, 0.0, a, 0.0).unwrap()),
            (-0.49f64..0.0).prop_map(|a| NigPrior::new(0.0, 0.0, a, 0.0).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn incremental_matches_batch(
            prior in valid_prior(),
            rewards in proptest::collection::vec(-10.0f64..10.0, 3..64),
        ) {
            let k0 = prior.min_samples();
            let (mut state, mut nig) = SearchState::bootstrap(&prior, &rewards[..k0]).unwrap_or_else(|_| {
                // k0 = 0: the prior itself is the starting state
                let nig = NigState::from_prior(prior);
                (SearchState::from_posterior(&nig, f64::NEG_INFINITY).unwrap(), nig)
            });
            for (i, &r) in rewards.iter().enumerate().skip(k0) {
                let (s, n) = absorb_one(&state, &nig, r).unwrap();
                state = s;
                nig = n;
                let batch = absorb_batch(&prior, &rewards[..=i]).unwrap();
                prop_assert!((state.mu - batch.mu).abs() < 1e-10);
                prop_assert!((state.sigma - batch.sigma().unwrap()).abs() < 1e-10);
                prop_assert!((nig.beta - batch.beta).abs() < 1e-9 * (1.0 + batch.beta));
                prop_assert_eq!(nig.alpha, batch.alpha);
                prop_assert_eq!(nig.nu, batch.nu);
                let zmax = rewards[..=i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(state.z, zmax);
            }
        }

        #[test]
        fn affine_shift_leaves_sigma_and_zhat(
            rewards in proptest::collection::vec(-5.0f64..5.0, 3..20),
            shift in -100.0f64..100.0,
        ) {
            let prior = NigPrior::jeffreys();
            let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
            let (a, _) = SearchState::bootstrap(&prior, &rewards).unwrap();
            let (b, _) = SearchState::bootstrap(&prior, &shifted).unwrap();
            prop_assert!((b.mu - a.mu - shift).abs() < 1e-9);
            prop_assert!((b.z - a.z - shift).abs() < 1e-9);
            prop_assert!((b.sigma - a.sigma).abs() < 1e-9);
            if a.sigma > 1e-6 {
                let za = standardize(&a).unwrap();
                let zb = standardize(&b).unwrap();
                prop_assert!((za - zb).abs() < 1e-6 * (1.0 + za.abs()));
            }
        }

        #[test]
        fn beta_zero_iff_all_equal(rewards in proptest::collection::vec(-3i32..3, 3..10)) {
            let rewards: Vec<f64> = rewards.into_iter().map(f64::from).collect();
            let nig = absorb_batch(&NigPrior::jeffreys(), &rewards).unwrap();
            let all_equal = rewards.iter().all(|&r| r == rewards[0]);
            prop_assert!(nig.beta >= 0.0);
            prop_assert_eq!(nig.beta == 0.0, all_equal);
        }

        #[test]
        fn robust_never_lowers_z(r in -100.0f64..100.0, sigma in 0.01f64..5.0) {
            let (state, nig) = jeffreys_123();
            let state = SearchState { sigma, ..state };
            let out = robust_absorb_one(&state, &nig, r, 0.01).unwrap();
            prop_assert!(out.state.z >= state.z);
            prop_assert_eq!(out.state.z, state.z.max(r));
        }
    }
}
