//! Student-t distribution functions, predictive quadrature and bracketed root
//! finding.
//!
//! The CDF goes through the regularized incomplete beta function and the
//! quantile is obtained by monotone bisection on the CDF, so nothing here
//! depends on an external special-function library.

use std::f64::consts::PI;

use thiserror::Error;

/// Absolute/relative tolerance of the bisection used by [`StudentT::quantile`].
pub const QUANTILE_TOL: f64 = 1e-12;

/// Default number of nodes for [`QuantileRule`].
pub const DEFAULT_QUAD_NODES: usize = 256;

/// Smallest node count accepted by [`QuantileRule`].
pub const MIN_QUAD_NODES: usize = 16;

/// Exponent of the tail-grading map `s -> s^m / (s^m + (1-s)^m)` from the
/// uniform grid into probability space.
const TAIL_GRADING: i32 = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("{what} must be finite, got {value}")]
    NonFinite { what: &'static str, value: f64 },
    #[error("invalid Student-t parameters: dof={dof}, scale={scale}")]
    InvalidDistribution { dof: f64, scale: f64 },
    #[error("probability {0} outside the open interval (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("mean undefined for dof={dof} (need dof > 1)")]
    UndefinedMean { dof: f64 },
    #[error("no sign change on [{lo}, {hi}]: g(lo)={g_lo}, g(hi)={g_hi}")]
    NoSignChange { lo: f64, hi: f64, g_lo: f64, g_hi: f64 },
    #[error("integrand is not finite at x={x} (probability {p})")]
    NonFiniteIntegrand { x: f64, p: f64 },
    #[error("quadrature needs at least {MIN_QUAD_NODES} nodes, got {0}")]
    TooFewNodes(usize),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

fn check_finite(what: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(NumericsError::NonFinite { what, value })
    }
}

/// Location-scale Student-t distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentT {
    dof: f64,
    location: f64,
    scale: f64,
}

impl StudentT {
    pub fn new(dof: f64, location: f64, scale: f64) -> Result<Self> {
        if !(dof > 0.0 && dof.is_finite() && scale > 0.0 && scale.is_finite()) {
            return Err(NumericsError::InvalidDistribution { dof, scale });
        }
        check_finite("location", location)?;
        Ok(Self {
            dof,
            location,
            scale,
        })
    }

    /// Standardized form: location 0, scale 1.
    pub fn standard(dof: f64) -> Result<Self> {
        Self::new(dof, 0.0, 1.0)
    }

    pub fn dof(&self) -> f64 {
        self.dof
    }

    pub fn location(&self) -> f64 {
        self.location
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    fn standardize(&self, x: f64) -> f64 {
        (x - self.location) / self.scale
    }

    pub fn pdf(&self, x: f64) -> Result<f64> {
        check_finite("x", x)?;
        Ok(std_pdf(self.dof, self.standardize(x)) / self.scale)
    }

    pub fn cdf(&self, x: f64) -> Result<f64> {
        check_finite("x", x)?;
        Ok(std_cdf(self.dof, self.standardize(x)))
    }

    /// Upper tail `P(X > x)`, accurate for far right tails.
    pub fn sf(&self, x: f64) -> Result<f64> {
        check_finite("x", x)?;
        Ok(std_cdf(self.dof, -self.standardize(x)))
    }

    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(NumericsError::ProbabilityOutOfRange(p));
        }
        let t = if p < 0.5 {
            -std_tail_quantile(self.dof, p)
        } else if p > 0.5 {
            std_tail_quantile(self.dof, 1.0 - p)
        } else {
            0.0
        };
        Ok(self.location + self.scale * t)
    }

    /// Expected improvement `E[max(X - z, 0)]`.
    pub fn partial_expectation(&self, z: f64) -> Result<f64> {
        check_finite("z", z)?;
        if self.dof <= 1.0 {
            return Err(NumericsError::UndefinedMean { dof: self.dof });
        }
        Ok(self.scale * std_partial_expectation(self.dof, self.standardize(z)))
    }
}

/// Lanczos approximation (g = 7, n = 9), accurate to ~1e-15 for x > 0.
pub(crate) fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 500;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`; `y` must equal `1 - x` and is
/// passed separately so callers can avoid cancellation.
fn beta_inc(a: f64, b: f64, x: f64, y: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if y <= 0.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * y.ln() - ln_beta(a, b);
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, y) / b
    }
}

fn std_pdf(dof: f64, t: f64) -> f64 {
    let ln_norm = ln_gamma(0.5 * (dof + 1.0)) - ln_gamma(0.5 * dof) - 0.5 * (dof * PI).ln();
    (ln_norm - 0.5 * (dof + 1.0) * (t * t / dof).ln_1p()).exp()
}

/// `P(T > |t|)` for the standard t distribution.
fn std_tail(dof: f64, t: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let t2 = t * t;
    let denom = dof + t2;
    0.5 * beta_inc(0.5 * dof, 0.5, dof / denom, t2 / denom)
}

fn std_cdf(dof: f64, t: f64) -> f64 {
    let tail = std_tail(dof, t);
    if t < 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// Solves `P(T > x) = q` for `x >= 0`, with `0 < q <= 0.5`.
fn std_tail_quantile(dof: f64, q: f64) -> f64 {
    if q >= 0.5 {
        return 0.0;
    }
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    while std_tail(dof, hi) > q {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return f64::MAX;
        }
    }
    for _ in 0..400 {
        if hi - lo <= QUANTILE_TOL * hi.max(1.0) {
            break;
        }
        let mid = lo + 0.5 * (hi - lo);
        if mid <= lo || mid >= hi {
            break;
        }
        if std_tail(dof, mid) > q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo + 0.5 * (hi - lo)
}

/// `E[max(T - z, 0)]` for the standard t distribution, dof > 1.
fn std_partial_expectation(dof: f64, z: f64) -> f64 {
    let upper = std_cdf(dof, -z);
    let v = (dof + z * z) / (dof - 1.0) * std_pdf(dof, z) - z * upper;
    v.max(0.0)
}

/// Quadrature against a standardized Student-t law, built in probability
/// space.
///
/// Nodes sit at quantiles of a probability grid obtained from a uniform grid
/// `s_i = (i + 1/2)/N` through the tail-grading map
/// `p(s) = s^m / (s^m + (1 - s)^m)`; weights are `p'(s_i)/N`, renormalized to
/// sum to one. The grading pushes nodes far into both tails so that integrands
/// growing linearly against low-dof tails are still integrated without
/// truncation. Nodes are exactly antisymmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileRule {
    dof: f64,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl QuantileRule {
    pub fn new(dof: f64, nodes: usize) -> Result<Self> {
        if nodes < MIN_QUAD_NODES {
            return Err(NumericsError::TooFewNodes(nodes));
        }
        if !(dof > 0.0 && dof.is_finite()) {
            return Err(NumericsError::InvalidDistribution { dof, scale: 1.0 });
        }
        let m = TAIL_GRADING;
        let n = nodes as f64;
        let mut points = vec![0.0; nodes];
        let mut weights = vec![0.0; nodes];
        for i in 0..nodes.div_ceil(2) {
            let s = (i as f64 + 0.5) / n;
            let a = s.powi(m);
            let b = (1.0 - s).powi(m);
            let tail = a / (a + b);
            let x = if 2 * i + 1 == nodes {
                0.0
            } else {
                std_tail_quantile(dof, tail)
            };
            let dens = f64::from(m) * s.powi(m - 1) * (1.0 - s).powi(m - 1) / ((a + b) * (a + b));
            points[i] = -x;
            points[nodes - 1 - i] = x;
            weights[i] = dens;
            weights[nodes - 1 - i] = dens;
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Ok(Self {
            dof,
            points,
            weights,
        })
    }

    pub fn dof(&self) -> f64 {
        self.dof
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Standardized node locations, increasing.
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Approximates `E[f(T)]` for `T` standard t.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> Result<f64> {
        let mut acc = 0.0;
        for (i, (&x, &w)) in self.points.iter().zip(&self.weights).enumerate() {
            let v = f(x);
            if !v.is_finite() {
                let p = (i as f64 + 0.5) / self.points.len() as f64;
                return Err(NumericsError::NonFiniteIntegrand { x, p });
            }
            acc += w * v;
        }
        Ok(acc)
    }
}

/// Approximates `∫ f dF` where `F` is the law `d`.
pub fn integrate_predictive<F: FnMut(f64) -> f64>(
    mut f: F,
    d: &StudentT,
    nodes: usize,
) -> Result<f64> {
    let rule = QuantileRule::new(d.dof, nodes)?;
    rule.integrate(|u| f(d.location + d.scale * u))
}

/// Bisection on a sign-changing bracket. Stops when the bracket is narrower
/// than `tol` (or cannot shrink further) and returns its midpoint.
pub fn bisect_root<G: FnMut(f64) -> f64>(mut g: G, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    let (mut lo, mut hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    let g_lo = g(lo);
    let g_hi = g(hi);
    if g_lo == 0.0 {
        return Ok(lo);
    }
    if g_hi == 0.0 {
        return Ok(hi);
    }
    if !(g_lo.is_finite() && g_hi.is_finite()) || g_lo.signum() == g_hi.signum() {
        return Err(NumericsError::NoSignChange { lo, hi, g_lo, g_hi });
    }
    let lo_sign = g_lo.signum();
    while hi - lo > tol {
        let mid = lo + 0.5 * (hi - lo);
        if mid <= lo || mid >= hi {
            break;
        }
        let g_mid = g(mid);
        if g_mid == 0.0 {
            return Ok(mid);
        }
        if g_mid.signum() == lo_sign {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo + 0.5 * (hi - lo))
}
