//! Reward streams: seeded synthetic distributions and an external sampler
//! speaking a one-line request/response protocol.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StudentT, Uniform};
use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::policy::{RewardSource, SourceError};

pub const DEFAULT_TIMEOUT_SECS: f64 = 60.0;

fn default_outlier_shift() -> f64 {
    -8.0
}

fn default_outlier_sd() -> f64 {
    0.5
}

fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_SECS
}

/// Reward distribution of a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StreamKind {
    Normal {
        mean: f64,
        sd: f64,
    },
    StudentT {
        dof: f64,
        loc: f64,
        scale: f64,
    },
    /// Normal body plus, with probability `weight`, a low outlier drawn from
    /// `N(mean + outlier_shift·sd, (outlier_sd·sd)²)`.
    SkewMixture {
        mean: f64,
        sd: f64,
        weight: f64,
        #[serde(default = "default_outlier_shift")]
        outlier_shift: f64,
        #[serde(default = "default_outlier_sd")]
        outlier_sd: f64,
    },
    Bernoulli {
        p: f64,
    },
    Uniform {
        low: f64,
        high: f64,
    },
    /// A subprocess answering `REQ <episode> <k>` with `REW <float>`.
    External {
        command: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
    },
}

impl StreamKind {
    pub fn name(&self) -> &'static str {
        match self {
            StreamKind::Normal { .. } => "normal",
            StreamKind::StudentT { .. } => "student_t",
            StreamKind::SkewMixture { .. } => "skew_mixture",
            StreamKind::Bernoulli { .. } => "bernoulli",
            StreamKind::Uniform { .. } => "uniform",
            StreamKind::External { .. } => "external",
        }
    }

    pub fn is_synthetic(&self) -> bool {
        !matches!(self, StreamKind::External { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    #[serde(flatten)]
    pub kind: StreamKind,
    #[serde(default)]
    pub seed: u64,
}

impl StreamSpec {
    pub fn new(kind: StreamKind, seed: u64) -> Self {
        Self { kind, seed }
    }

    pub fn normal(mean: f64, sd: f64, seed: u64) -> Self {
        Self::new(StreamKind::Normal { mean, sd }, seed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(EvalError::InvalidStream(msg));
        let positive = |x: f64| x > 0.0 && x.is_finite();
        match &self.kind {
            StreamKind::Normal { mean, sd } if !(mean.is_finite() && positive(*sd)) => {
                bad(format!("normal needs finite mean and sd > 0, got ({mean}, {sd})"))
            }
            StreamKind::StudentT { dof, loc, scale }
                if !(positive(*dof) && loc.is_finite() && positive(*scale)) =>
            {
                bad(format!("student_t needs dof > 0 and scale > 0, got ({dof}, {loc}, {scale})"))
            }
            StreamKind::SkewMixture {
                mean,
                sd,
                weight,
                outlier_shift,
                outlier_sd,
            } if !(mean.is_finite()
                && positive(*sd)
                && (0.0..1.0).contains(weight)
                && outlier_shift.is_finite()
                && positive(*outlier_sd)) =>
            {
                bad(format!(
                    "skew_mixture needs sd > 0, weight in [0, 1) and outlier_sd > 0, got sd={sd}, weight={weight}, outlier_sd={outlier_sd}"
                ))
            }
            StreamKind::Bernoulli { p } if !(0.0..=1.0).contains(p) => {
                bad(format!("bernoulli p must lie in [0, 1], got {p}"))
            }
            StreamKind::Uniform { low, high } if !(low.is_finite() && high.is_finite() && low < high) => {
                bad(format!("uniform needs low < high, got [{low}, {high}]"))
            }
            StreamKind::External { command, timeout_secs } if command.is_empty() || !positive(*timeout_secs) => {
                bad("external stream needs a command and a positive timeout".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
enum Sampler {
    Normal(Normal<f64>),
    StudentT {
        t: StudentT<f64>,
        loc: f64,
        scale: f64,
    },
    Mixture {
        body: Normal<f64>,
        outlier: Normal<f64>,
        weight: f64,
    },
    Bernoulli(Bernoulli),
    Uniform(Uniform<f64>),
}

impl Sampler {
    fn new(kind: &StreamKind) -> Result<Self> {
        let invalid = |e: &dyn std::fmt::Display| EvalError::InvalidStream(e.to_string());
        Ok(match *kind {
            StreamKind::Normal { mean, sd } => Sampler::Normal(Normal::new(mean, sd).map_err(|e| invalid(&e))?),
            StreamKind::StudentT { dof, loc, scale } => Sampler::StudentT {
                t: StudentT::new(dof).map_err(|e| invalid(&e))?,
                loc,
                scale,
            },
            StreamKind::SkewMixture {
                mean,
                sd,
                weight,
                outlier_shift,
                outlier_sd,
            } => Sampler::Mixture {
                body: Normal::new(mean, sd).map_err(|e| invalid(&e))?,
                outlier: Normal::new(mean + outlier_shift * sd, outlier_sd * sd).map_err(|e| invalid(&e))?,
                weight,
            },
            StreamKind::Bernoulli { p } => Sampler::Bernoulli(Bernoulli::new(p).map_err(|e| invalid(&e))?),
            StreamKind::Uniform { low, high } => Sampler::Uniform(Uniform::new(low, high).map_err(|e| invalid(&e))?),
            StreamKind::External { .. } => {
                return Err(EvalError::InvalidStream("external streams are not synthetic".into()))
            }
        })
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Sampler::Normal(d) => d.sample(rng),
            Sampler::StudentT { t, loc, scale } => loc + scale * t.sample(rng),
            Sampler::Mixture { body, outlier, weight } => {
                if rng.random::<f64>() < *weight {
                    outlier.sample(rng)
                } else {
                    body.sample(rng)
                }
            }
            Sampler::Bernoulli(d) => f64::from(u8::from(d.sample(rng))),
            Sampler::Uniform(d) => d.sample(rng),
        }
    }
}

/// Seeded synthetic stream; `stream_id` selects an independent ChaCha
/// sub-stream of the spec's seed.
#[derive(Debug, Clone)]
pub struct SyntheticStream {
    sampler: Sampler,
    rng: ChaCha8Rng,
}

impl SyntheticStream {
    pub fn new(spec: &StreamSpec, stream_id: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream_id);
        Ok(Self {
            sampler: Sampler::new(&spec.kind)?,
            rng,
        })
    }

    pub fn next_reward(&mut self) -> f64 {
        self.sampler.sample(&mut self.rng)
    }

    pub fn take(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_reward()).collect()
    }
}

impl RewardSource for SyntheticStream {
    fn draw(&mut self, _k: usize) -> std::result::Result<f64, SourceError> {
        Ok(self.next_reward())
    }
}

/// One subprocess per episode. Each draw writes `REQ <episode> <k>` and waits
/// for `REW <float>`; trailing fields on the response are ignored.
#[derive(Debug)]
pub struct ExternalStream {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    episode: u64,
    timeout: Duration,
}

impl ExternalStream {
    pub fn spawn(command: &[String], episode: u64, timeout: Duration) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| EvalError::InvalidStream("empty external command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| EvalError::Spawn {
                command: command.join(" "),
                source,
            })?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines,
            episode,
            timeout,
        })
    }
}

pub(crate) fn parse_response(line: &str) -> std::result::Result<f64, SourceError> {
    let mut fields = line.split_whitespace();
    match fields.next() {
        Some("REW") => fields
            .next()
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| SourceError::Parse(line.to_string())),
        _ => Err(SourceError::Protocol(line.to_string())),
    }
}

impl RewardSource for ExternalStream {
    fn draw(&mut self, k: usize) -> std::result::Result<f64, SourceError> {
        let stdin = self.stdin.as_mut().ok_or(SourceError::Eof)?;
        writeln!(stdin, "REQ {} {}", self.episode, k)
            .and_then(|_| stdin.flush())
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::BrokenPipe => SourceError::Eof,
                _ => SourceError::Io(e),
            })?;
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => parse_response(&line),
            Ok(Err(e)) => Err(SourceError::Io(e)),
            Err(RecvTimeoutError::Timeout) => Err(SourceError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(SourceError::Eof),
        }
    }
}

impl Drop for ExternalStream {
    fn drop(&mut self) {
        drop(self.stdin.take());
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Opens the reward source of one episode.
pub fn make_stream(spec: &StreamSpec, stream_id: u64) -> Result<Box<dyn RewardSource + Send>> {
    spec.validate()?;
    Ok(match &spec.kind {
        StreamKind::External { command, timeout_secs } => Box::new(ExternalStream::spawn(
            command,
            stream_id,
            Duration::from_secs_f64(*timeout_secs),
        )?),
        _ => Box::new(SyntheticStream::new(spec, stream_id)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws(spec: &StreamSpec, id: u64, n: usize) -> Vec<f64> {
        SyntheticStream::new(spec, id).unwrap().take(n)
    }

    fn sh(script: &str) -> Vec<String> {
        vec!["sh".into(), "-c".into(), script.into()]
    }

    #[test]
    fn replay_is_deterministic_and_substreams_differ() {
        let spec = StreamSpec::normal(0.0, 1.0, 42);
        assert_eq!(draws(&spec, 0, 10), draws(&spec, 0, 10));
        assert_ne!(draws(&spec, 0, 10), draws(&spec, 1, 10));
        let other_seed = StreamSpec::normal(0.0, 1.0, 43);
        assert_ne!(draws(&spec, 0, 10), draws(&other_seed, 0, 10));
    }

    #[test]
    fn certain_bernoulli_is_all_ones() {
        let spec = StreamSpec::new(StreamKind::Bernoulli { p: 1.0 }, 1);
        assert!(draws(&spec, 3, 100).iter().all(|&r| r == 1.0));
        let half = StreamSpec::new(StreamKind::Bernoulli { p: 0.5 }, 1);
        assert!(draws(&half, 0, 100).iter().all(|&r| r == 0.0 || r == 1.0));
    }

    #[test]
    fn mixture_without_outliers_matches_body_moments() {
        let spec = StreamSpec::new(
            StreamKind::SkewMixture {
                mean: 1.0,
                sd: 2.0,
                weight: 0.0,
                outlier_shift: -8.0,
                outlier_sd: 0.5,
            },
            5,
        );
        let xs = draws(&spec, 0, 200_000);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 2.0).abs() < 0.02, "sd {}", var.sqrt());
    }

    #[test]
    fn mixture_outliers_pull_the_mean_down() {
        let spec = StreamSpec::new(
            StreamKind::SkewMixture {
                mean: 0.0,
                sd: 1.0,
                weight: 0.1,
                outlier_shift: -8.0,
                outlier_sd: 0.5,
            },
            5,
        );
        let xs = draws(&spec, 0, 100_000);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((mean + 0.8).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        for kind in [
            StreamKind::Normal { mean: 0.0, sd: 0.0 },
            StreamKind::Bernoulli { p: 1.5 },
            StreamKind::Uniform { low: 1.0, high: 1.0 },
            StreamKind::StudentT { dof: -1.0, loc: 0.0, scale: 1.0 },
            StreamKind::External {
                command: vec![],
                timeout_secs: 1.0,
            },
        ] {
            assert!(StreamSpec::new(kind, 0).validate().is_err());
        }
    }

    #[test]
    fn spec_reads_from_json_with_defaults() {
        let spec: StreamSpec =
            serde_json::from_str(r#"{"kind":"skew_mixture","mean":0,"sd":1,"weight":0.05}"#).unwrap();
        assert_eq!(spec.seed, 0);
        match spec.kind {
            StreamKind::SkewMixture {
                outlier_shift,
                outlier_sd,
                ..
            } => assert_eq!((outlier_shift, outlier_sd), (-8.0, 0.5)),
            other => panic!("wrong kind {other:?}"),
        }
    }

    #[test]
    fn response_parsing() {
        assert_eq!(parse_response("REW 1.5").unwrap(), 1.5);
        assert_eq!(parse_response("REW -2e-3 id=7 extra").unwrap(), -2e-3);
        assert!(matches!(parse_response("REW abc"), Err(SourceError::Parse(l)) if l == "REW abc"));
        assert!(matches!(parse_response("ERR 1"), Err(SourceError::Protocol(_))));
        assert!(matches!(parse_response(""), Err(SourceError::Protocol(_))));
    }

    #[test]
    fn external_constant_stub() {
        let cmd = sh("while read req; do echo 'REW 1.5'; done");
        let mut s = ExternalStream::spawn(&cmd, 0, Duration::from_secs(10)).unwrap();
        for k in 0..5 {
            assert_eq!(s.draw(k).unwrap(), 1.5);
        }
    }

    #[test]
    fn external_stub_sees_requests_and_replays_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("rewards.txt");
        std::fs::write(&file, "0.5\n-1\n2.25\n").unwrap();
        let script = format!(
            "exec 3<{}; while read tag ep k; do read r <&3 || exit 0; echo \"REW $r $tag-$ep-$k\"; done",
            file.display()
        );
        let mut s = ExternalStream::spawn(&sh(&script), 9, Duration::from_secs(10)).unwrap();
        assert_eq!(s.draw(0).unwrap(), 0.5);
        assert_eq!(s.draw(1).unwrap(), -1.0);
        assert_eq!(s.draw(2).unwrap(), 2.25);
        assert!(matches!(s.draw(3), Err(SourceError::Eof)));
    }

    #[test]
    fn external_failures_are_distinct() {
        let garbage = sh("while read req; do echo 'REW nope'; done");
        let mut s = ExternalStream::spawn(&garbage, 0, Duration::from_secs(10)).unwrap();
        assert!(matches!(s.draw(0), Err(SourceError::Parse(l)) if l.contains("nope")));

        let silent = sh("while read req; do sleep 5; done");
        let mut s = ExternalStream::spawn(&silent, 0, Duration::from_millis(100)).unwrap();
        assert!(matches!(s.draw(0), Err(SourceError::Timeout(_))));

        let quits = sh("exit 0");
        let mut s = ExternalStream::spawn(&quits, 0, Duration::from_secs(10)).unwrap();
        assert!(matches!(s.draw(0), Err(SourceError::Eof)));

        let missing = vec!["/nonexistent/sampler".to_string()];
        assert!(matches!(
            ExternalStream::spawn(&missing, 0, Duration::from_secs(1)),
            Err(EvalError::Spawn { .. })
        ));
    }
}
