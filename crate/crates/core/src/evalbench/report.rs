//! Monte Carlo evaluation of policies on a stream and export of the results.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::baseline::{classical_reservation, run_fixed_n, run_reservation, KnownDist};
use super::stream::{make_stream, StreamSpec, SyntheticStream};
use super::{EvalError, Result};
use crate::hindex::{HTable, HTableSpec, TableRegistry};
use crate::policy::{run_episode_batched, EpisodeResult, PolicyConfig};
use crate::posterior::{NigPrior, SkewGate, DEFAULT_FILTER_QUANTILE};

pub const MIN_EPISODES: usize = 100;

/// Normal quantile for two-sided 95% intervals.
const Z95: f64 = 1.959_963_984_540_054;

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

fn default_quantile() -> f64 {
    DEFAULT_FILTER_QUANTILE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Beacon {
        #[serde(default = "default_true")]
        robust: bool,
        #[serde(default = "default_one")]
        batch_size: usize,
        #[serde(default)]
        skew_gate: Option<SkewGate>,
    },
    FixedN {
        n: usize,
    },
    Classical {
        dist: KnownDist,
    },
}

impl PolicySpec {
    pub fn beacon() -> Self {
        PolicySpec::Beacon {
            robust: true,
            batch_size: 1,
            skew_gate: None,
        }
    }

    pub fn beacon_plain() -> Self {
        PolicySpec::Beacon {
            robust: false,
            batch_size: 1,
            skew_gate: None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            PolicySpec::Beacon {
                robust,
                batch_size,
                skew_gate,
            } => {
                let mut label = String::from("beacon");
                if !robust {
                    label.push_str("-plain");
                } else if skew_gate.is_some() {
                    label.push_str("-gated");
                }
                if *batch_size > 1 {
                    label.push_str(&format!("-b{batch_size}"));
                }
                label
            }
            PolicySpec::FixedN { n } => format!("fixed-n-{n}"),
            PolicySpec::Classical { .. } => "classical".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Standardization {
    /// Mean and sd of every reward drawn in the evaluation.
    #[default]
    Pooled,
    /// Mean and sd of the episode's own draws (pooled when it drew fewer
    /// than two distinct values).
    PerEpisode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub episodes: usize,
    pub cost: f64,
    pub horizon: usize,
    #[serde(default)]
    pub prior: NigPrior,
    /// Every policy sees the same reward sequence in episode `e`.
    #[serde(default)]
    pub common_random_numbers: bool,
    #[serde(default = "default_quantile")]
    pub quantile: f64,
    #[serde(default)]
    pub standardization: Standardization,
    /// Worker threads; the global pool when absent.
    #[serde(default)]
    pub workers: Option<usize>,
}

impl EvalOptions {
    pub fn new(episodes: usize, cost: f64, horizon: usize) -> Self {
        Self {
            episodes,
            cost,
            horizon,
            prior: NigPrior::jeffreys(),
            common_random_numbers: false,
            quantile: DEFAULT_FILTER_QUANTILE,
            standardization: Standardization::Pooled,
            workers: None,
        }
    }

    pub fn with_crn(mut self) -> Self {
        self.common_random_numbers = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EvalError::InvalidOptions(m));
        if self.episodes < MIN_EPISODES {
            return bad(format!("need at least {MIN_EPISODES} episodes, got {}", self.episodes));
        }
        if !(self.cost >= 0.0 && self.cost.is_finite()) {
            return bad(format!("cost must be finite and nonnegative, got {}", self.cost));
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        Ok(())
    }

    fn beacon_config(&self, robust: bool, batch_size: usize, skew_gate: Option<SkewGate>) -> PolicyConfig {
        PolicyConfig {
            cost: self.cost,
            horizon: self.horizon,
            prior: self.prior,
            robust,
            batch_size,
            quantile: self.quantile,
            skew_gate,
        }
    }
}

/// Aggregates of one policy on one stream at one cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub policy: String,
    pub cost: f64,
    pub horizon: usize,
    pub episodes: usize,
    pub common_random_numbers: bool,
    pub standardization: Standardization,
    pub mean_samples: f64,
    pub hw_samples: f64,
    pub mean_best: f64,
    pub hw_best: f64,
    /// `mean_best − cost·mean_samples`.
    pub value: f64,
    pub hw_value: f64,
    pub std_mean_best: f64,
    pub std_value: f64,
    pub hw_std_value: f64,
    /// Mean `|K − K*|` where `K*` maximizes the realized `max r − c·K`;
    /// absent for external streams.
    pub mean_hindsight_gap: Option<f64>,
    pub hw_hindsight_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub stream: StreamSpec,
    pub options: EvalOptions,
    pub pooled_mean: f64,
    pub pooled_sd: f64,
    pub policies: Vec<PolicyReport>,
}

impl BenchReport {
    pub fn policy(&self, label: &str) -> Option<&PolicyReport> {
        self.policies.iter().find(|p| p.policy == label)
    }
}

/// Hindsight-optimal stop: the earliest `K` maximizing `max(r₁..r_K) − c·K`.
pub fn hindsight_stop(rewards: &[f64], c: f64) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut z = f64::NEG_INFINITY;
    let mut at = 0;
    for (i, &r) in rewards.iter().enumerate() {
        z = z.max(r);
        let v = z - c * (i + 1) as f64;
        if v > best {
            best = v;
            at = i + 1;
        }
    }
    at
}

struct Outcome {
    samples: usize,
    best: f64,
    sum: f64,
    sum_sq: f64,
    gap: Option<f64>,
}

enum Runner {
    Beacon(Arc<HTable>, PolicyConfig),
    FixedN(usize),
    Reservation(f64),
}

fn mean_hw(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Z95 * (var / n).sqrt())
}

fn run_one(runner: &Runner, stream: &StreamSpec, opts: &EvalOptions, stream_id: u64) -> Result<Outcome> {
    let mut source = make_stream(stream, stream_id)?;
    let result: EpisodeResult = match runner {
        Runner::Beacon(table, cfg) => run_episode_batched(&mut *source, table, cfg)?,
        Runner::FixedN(n) => run_fixed_n(&mut *source, *n)?,
        Runner::Reservation(r) => run_reservation(&mut *source, *r, opts.horizon)?,
    };
    let (sum, sum_sq) = result.trace.rewards().fold((0.0, 0.0), |(s, q), r| (s + r, q + r * r));
    let gap = if stream.kind.is_synthetic() {
        let rewards = SyntheticStream::new(stream, stream_id)?.take(opts.horizon.max(result.samples));
        let k_star = hindsight_stop(&rewards, opts.cost);
        Some((result.samples as f64 - k_star as f64).abs())
    } else {
        None
    };
    Ok(Outcome {
        samples: result.samples,
        best: result.best_reward,
        sum,
        sum_sq,
        gap,
    })
}

fn run_policy(
    index: usize,
    policy: &PolicySpec,
    runner: &Runner,
    stream: &StreamSpec,
    opts: &EvalOptions,
) -> Result<Vec<Outcome>> {
    let results: Vec<Result<Outcome>> = (0..opts.episodes)
        .into_par_iter()
        .map(|e| {
            let id = if opts.common_random_numbers {
                e as u64
            } else {
                ((index as u64 + 1) << 32) | e as u64
            };
            run_one(runner, stream, opts, id)
        })
        .collect();
    let mut outcomes = Vec::with_capacity(results.len());
    for (e, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => outcomes.push(o),
            Err(source) => {
                return Err(EvalError::Episode {
                    policy: policy.label(),
                    episode: e,
                    completed: outcomes.len(),
                    source: Box::new(source),
                })
            }
        }
    }
    Ok(outcomes)
}

fn summarize(
    policy: &PolicySpec,
    outcomes: &[Outcome],
    opts: &EvalOptions,
    pooled: (f64, f64),
) -> PolicyReport {
    let c = opts.cost;
    let samples: Vec<f64> = outcomes.iter().map(|o| o.samples as f64).collect();
    let best: Vec<f64> = outcomes.iter().map(|o| o.best).collect();
    let values: Vec<f64> = outcomes.iter().map(|o| o.best - c * o.samples as f64).collect();
    let scale_of = |o: &Outcome| -> (f64, f64) {
        if opts.standardization == Standardization::PerEpisode && o.samples >= 2 {
            let n = o.samples as f64;
            let m = o.sum / n;
            let var = (o.sum_sq - n * m * m) / (n - 1.0);
            if var > 0.0 {
                return (m, var.sqrt());
            }
        }
        pooled
    };
    let (std_best, std_values): (Vec<f64>, Vec<f64>) = outcomes
        .iter()
        .map(|o| {
            let (m, s) = scale_of(o);
            let zb = (o.best - m) / s;
            (zb, zb - c / s * o.samples as f64)
        })
        .unzip();
    let (mean_samples, hw_samples) = mean_hw(&samples);
    let (mean_best, hw_best) = mean_hw(&best);
    let (_, hw_value) = mean_hw(&values);
    let (std_mean_best, _) = mean_hw(&std_best);
    let (std_value, hw_std_value) = mean_hw(&std_values);
    let gaps: Option<Vec<f64>> = outcomes.iter().map(|o| o.gap).collect();
    let gap = gaps.map(|g| mean_hw(&g));
    PolicyReport {
        policy: policy.label(),
        cost: c,
        horizon: opts.horizon,
        episodes: outcomes.len(),
        common_random_numbers: opts.common_random_numbers,
        standardization: opts.standardization,
        mean_samples,
        hw_samples,
        mean_best,
        hw_best,
        value: mean_best - c * mean_samples,
        hw_value,
        std_mean_best,
        std_value,
        hw_std_value,
        mean_hindsight_gap: gap.map(|g| g.0),
        hw_hindsight_gap: gap.map(|g| g.1),
    }
}

fn evaluate_inner(
    policies: &[PolicySpec],
    stream: &StreamSpec,
    opts: &EvalOptions,
    tables: &TableRegistry,
) -> Result<BenchReport> {
    let runners = policies
        .iter()
        .map(|p| -> Result<Runner> {
            Ok(match p {
                PolicySpec::Beacon {
                    robust,
                    batch_size,
                    skew_gate,
                } => {
                    let cfg = opts.beacon_config(*robust, *batch_size, *skew_gate);
                    cfg.validate()?;
                    let table = tables.get_or_build(&HTableSpec::new(opts.horizon, opts.prior)?)?;
                    Runner::Beacon(table, cfg)
                }
                PolicySpec::FixedN { n } => Runner::FixedN(*n),
                PolicySpec::Classical { dist } => Runner::Reservation(classical_reservation(dist, opts.cost)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_policy = Vec::with_capacity(policies.len());
    for (i, (p, runner)) in policies.iter().zip(&runners).enumerate() {
        per_policy.push(run_policy(i, p, runner, stream, opts)?);
    }
    let (mut n, mut sum, mut sum_sq) = (0.0, 0.0, 0.0);
    for o in per_policy.iter().flatten() {
        n += o.samples as f64;
        sum += o.sum;
        sum_sq += o.sum_sq;
    }
    let pooled_mean = sum / n;
    let pooled_var = ((sum_sq - n * pooled_mean * pooled_mean) / (n - 1.0)).max(0.0);
    let pooled_sd = if pooled_var > 0.0 { pooled_var.sqrt() } else { 1.0 };
    let reports = policies
        .iter()
        .zip(&per_policy)
        .map(|(p, o)| summarize(p, o, opts, (pooled_mean, pooled_sd)))
        .collect();
    Ok(BenchReport {
        stream: stream.clone(),
        options: opts.clone(),
        pooled_mean,
        pooled_sd,
        policies: reports,
    })
}

/// Runs every policy for `opts.episodes` episodes. Episodes may run in
/// parallel; aggregation walks them in episode order, so reports are
/// bit-identical for a given seed regardless of the worker count.
pub fn evaluate(
    policies: &[PolicySpec],
    stream: &StreamSpec,
    opts: &EvalOptions,
    tables: &TableRegistry,
) -> Result<BenchReport> {
    opts.validate()?;
    stream.validate()?;
    if policies.is_empty() {
        return Err(EvalError::InvalidOptions("no policies to evaluate".into()));
    }
    match opts.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| EvalError::InvalidOptions(e.to_string()))?
            .install(|| evaluate_inner(policies, stream, opts, tables)),
        None => evaluate_inner(policies, stream, opts, tables),
    }
}

/// One report per cost, all on the same stream seed.
pub fn sweep_cost(
    policies: &[PolicySpec],
    stream: &StreamSpec,
    opts: &EvalOptions,
    costs: &[f64],
    tables: &TableRegistry,
) -> Result<Vec<BenchReport>> {
    costs
        .iter()
        .map(|&cost| {
            let opts = EvalOptions { cost, ..opts.clone() };
            evaluate(policies, stream, &opts, tables)
        })
        .collect()
}

/// One row per (policy, stream, cost) with a header row.
pub fn write_csv(reports: &[BenchReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "policy",
        "stream",
        "seed",
        "cost",
        "horizon",
        "episodes",
        "common_random_numbers",
        "standardization",
        "mean_samples",
        "hw_samples",
        "mean_best",
        "hw_best",
        "value",
        "hw_value",
        "std_mean_best",
        "std_value",
        "hw_std_value",
        "mean_hindsight_gap",
        "hw_hindsight_gap",
    ])?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for b in reports {
        for p in &b.policies {
            w.write_record([
                p.policy.clone(),
                b.stream.kind.name().to_string(),
                b.stream.seed.to_string(),
                p.cost.to_string(),
                p.horizon.to_string(),
                p.episodes.to_string(),
                p.common_random_numbers.to_string(),
                serde_json::to_value(p.standardization)?
                    .as_str()
                    .unwrap_or_default()
                    .to_string(),
                p.mean_samples.to_string(),
                p.hw_samples.to_string(),
                p.mean_best.to_string(),
                p.hw_best.to_string(),
                p.value.to_string(),
                p.hw_value.to_string(),
                p.std_mean_best.to_string(),
                p.std_value.to_string(),
                p.hw_std_value.to_string(),
                opt(p.mean_hindsight_gap),
                opt(p.hw_hindsight_gap),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `sha256:<hex>` of the JSON serialization of `config`.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    Ok(format!("sha256:{}", hex::encode(Sha256::digest(&json))))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRef {
    pub horizon: usize,
    pub checksum: String,
}

/// Everything needed to replay a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub tables: Vec<TableRef>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new<C: Serialize>(config: &C, seed: u64) -> Result<Self> {
        Ok(Self {
            tool: "beacon".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config_hash: config_hash(config)?,
            config: serde_json::to_value(config)?,
            tables: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalbench::stream::StreamKind;

    fn registry() -> TableRegistry {
        TableRegistry::new()
    }

    #[test]
    fn hindsight_stop_examples() {
        assert_eq!(hindsight_stop(&[1.0, 0.5, 3.0], 0.1), 3);
        assert_eq!(hindsight_stop(&[1.0, 1.05, 0.0], 0.1), 1);
        assert_eq!(hindsight_stop(&[2.0, 2.0], 0.0), 1);
    }

    #[test]
    fn value_identity_and_labels() {
        let stream = StreamSpec::normal(0.0, 1.0, 7);
        let opts = EvalOptions::new(200, 0.1, 8);
        let policies = [
            PolicySpec::FixedN { n: 2 },
            PolicySpec::FixedN { n: 5 },
            PolicySpec::Classical {
                dist: KnownDist::Normal { mean: 0.0, sd: 1.0 },
            },
        ];
        let report = evaluate(&policies, &stream, &opts, &registry()).unwrap();
        for p in &report.policies {
            assert!((p.value - (p.mean_best - p.cost * p.mean_samples)).abs() <= 1e-12);
            assert!(p.hw_value > 0.0);
            assert!(p.mean_hindsight_gap.is_some());
        }
        assert_eq!(report.policy("fixed-n-5").unwrap().mean_samples, 5.0);
        assert_eq!(report.policy("fixed-n-5").unwrap().hw_samples, 0.0);
        assert_eq!(PolicySpec::beacon_plain().label(), "beacon-plain");
        let batched = PolicySpec::Beacon {
            robust: true,
            batch_size: 4,
            skew_gate: None,
        };
        assert_eq!(batched.label(), "beacon-b4");
    }

    #[test]
    fn common_random_numbers_share_streams() {
        let stream = StreamSpec::normal(0.0, 1.0, 7);
        let policies = [PolicySpec::FixedN { n: 3 }, PolicySpec::FixedN { n: 3 }];
        let crn = evaluate(&policies, &stream, &EvalOptions::new(100, 0.1, 8).with_crn(), &registry()).unwrap();
        assert_eq!(crn.policies[0].mean_best, crn.policies[1].mean_best);
        let ind = evaluate(&policies, &stream, &EvalOptions::new(100, 0.1, 8), &registry()).unwrap();
        assert_ne!(ind.policies[0].mean_best, ind.policies[1].mean_best);
    }

    #[test]
    fn reports_are_bit_identical_across_runs_and_worker_counts() {
        let stream = StreamSpec::normal(0.0, 1.0, 99);
        let policies = [PolicySpec::FixedN { n: 4 }, PolicySpec::beacon()];
        let opts = EvalOptions::new(150, 0.1, 6);
        let a = evaluate(&policies, &stream, &opts, &registry()).unwrap();
        let b = evaluate(&policies, &stream, &EvalOptions { workers: Some(1), ..opts.clone() }, &registry()).unwrap();
        let c = evaluate(&policies, &stream, &EvalOptions { workers: Some(3), ..opts.clone() }, &registry()).unwrap();
        assert_eq!(serde_json::to_string(&a.policies).unwrap(), serde_json::to_string(&b.policies).unwrap());
        assert_eq!(serde_json::to_string(&a.policies).unwrap(), serde_json::to_string(&c.policies).unwrap());
    }

    #[test]
    fn half_widths_shrink_with_the_square_root_of_episodes() {
        let stream = StreamSpec::normal(0.0, 1.0, 4);
        let policies = [PolicySpec::FixedN { n: 3 }];
        let small = evaluate(&policies, &stream, &EvalOptions::new(2_000, 0.1, 8), &registry()).unwrap();
        let large = evaluate(&policies, &stream, &EvalOptions::new(8_000, 0.1, 8), &registry()).unwrap();
        let ratio = small.policies[0].hw_value / large.policies[0].hw_value;
        assert!((ratio / 2.0 - 1.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn per_episode_standardization_differs_from_pooled() {
        let stream = StreamSpec::normal(5.0, 2.0, 4);
        let policies = [PolicySpec::FixedN { n: 4 }];
        let pooled = evaluate(&policies, &stream, &EvalOptions::new(500, 0.1, 8), &registry()).unwrap();
        assert!((pooled.pooled_mean - 5.0).abs() < 0.2);
        assert!((pooled.pooled_sd - 2.0).abs() < 0.2);
        let p = &pooled.policies[0];
        assert!((p.std_mean_best - (p.mean_best - pooled.pooled_mean) / pooled.pooled_sd).abs() < 1e-9);
        let per = evaluate(
            &policies,
            &stream,
            &EvalOptions {
                standardization: Standardization::PerEpisode,
                ..EvalOptions::new(500, 0.1, 8)
            },
            &registry(),
        )
        .unwrap();
        assert_ne!(per.policies[0].std_value, p.std_value);
    }

    #[test]
    fn invalid_options_and_episode_errors() {
        let stream = StreamSpec::normal(0.0, 1.0, 1);
        let policies = [PolicySpec::FixedN { n: 2 }];
        assert!(evaluate(&policies, &stream, &EvalOptions::new(10, 0.1, 8), &registry()).is_err());
        assert!(evaluate(&[], &stream, &EvalOptions::new(100, 0.1, 8), &registry()).is_err());
        let quits = StreamSpec::new(
            StreamKind::External {
                command: vec!["sh".into(), "-c".into(), "exit 0".into()],
                timeout_secs: 5.0,
            },
            0,
        );
        let err = evaluate(&policies, &quits, &EvalOptions::new(100, 0.1, 8), &registry()).unwrap_err();
        assert!(matches!(err, EvalError::Episode { episode: 0, completed: 0, .. }), "{err}");
    }

    #[test]
    fn csv_and_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stream = StreamSpec::normal(0.0, 1.0, 7);
        let opts = EvalOptions::new(100, 0.1, 8);
        let reports = sweep_cost(
            &[PolicySpec::FixedN { n: 2 }, PolicySpec::FixedN { n: 3 }],
            &stream,
            &opts,
            &[0.1, 0.2],
            &registry(),
        )
        .unwrap();
        let csv_path = dir.path().join("results.csv");
        write_csv(&reports, &csv_path).unwrap();
        let text = fs::read_to_string(&csv_path).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("policy,stream,seed,cost"));

        let mut manifest = RunManifest::new(&opts, stream.seed).unwrap();
        manifest.outputs.push(csv_path.display().to_string());
        let path = dir.path().join("manifest.json");
        manifest.write(&path).unwrap();
        let back = RunManifest::read(&path).unwrap();
        assert_eq!(back, manifest);
        assert_eq!(back.config_hash, config_hash(&opts).unwrap());
        let other = EvalOptions { cost: 0.2, ..opts };
        assert_ne!(config_hash(&other).unwrap(), back.config_hash);
    }
}
