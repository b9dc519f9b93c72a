//! Index tables `h_{n,k}(ẑ)`: the cost, in units of the predictive scale, at
//! which taking one more draw and stopping are indifferent.
//!
//! Tables are built by backward induction on the standardized value
//! recursion. For each stage the expected marginal gain `H_{n,k}(ẑ; c)` is
//! tabulated on a (ẑ × c) grid; the next stage down integrates against the
//! stage predictive, evaluating the tabulated surface at the post-draw
//! standardized state by bilinear interpolation.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numerics::{NumericsError, QuantileRule, StudentT, DEFAULT_QUAD_NODES};
use crate::posterior::NigPrior;

pub const TABLE_FORMAT: &str = "beacon-htable";
pub const TABLE_VERSION: u32 = 1;

/// Half-width of the standardized best-reward grid.
pub const ZHAT_BOUND: f64 = 30.0;
pub const DEFAULT_GRID_SIZE: usize = 100;
pub const MIN_GRID_SIZE: usize = 50;
/// Scale `a` of the sinh spacing law `ẑ = a·sinh(s·asinh(30/a))`.
pub const DEFAULT_SINH_SCALE: f64 = 1.0;
pub const DEFAULT_SURFACE_REFINEMENT: usize = 2;
pub const DEFAULT_COST_POINTS: usize = 256;
pub const DEFAULT_COST_MIN: f64 = 1e-4;
pub const DEFAULT_COST_MAX: f64 = 100.0;
/// Relative width at which the index root search stops.
pub const ROOT_REL_TOL: f64 = 1e-14;

/// Tolerance on the divided second difference when checking convexity.
pub const CONVEXITY_TOL: f64 = 1e-8;

/// Relative slack in the stage-monotonicity check. Far left every stage's
/// index approaches `−ẑ`, so neighbouring stages agree to the last bit.
pub const STAGE_REL_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum HIndexError {
    #[error("horizon {horizon} must exceed the minimum sample size k0={k0}")]
    HorizonTooShort { horizon: usize, k0: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("predictive dof {dof} at stage {k} is not above 1")]
    BadDof { k: usize, dof: f64 },
    #[error("no root bracket for the index at stage {k}, zhat={zhat}")]
    Bracket { k: usize, zhat: f64 },
    #[error("built table violates {property} at stage {k}, zhat={zhat}: {detail}")]
    Invariant {
        property: &'static str,
        k: usize,
        zhat: f64,
        detail: String,
    },
    #[error("stage {k} outside [{k0}, {horizon})")]
    StageOutOfRange { k: usize, k0: usize, horizon: usize },
    #[error("unsupported table format {format:?} version {version}")]
    VersionMismatch { format: String, version: u32 },
    #[error("checksum mismatch: header {expected}, payload {actual}")]
    Checksum { expected: String, actual: String },
    #[error("malformed table file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, HIndexError>;

/// Spacing law of the ẑ grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum GridSpacing {
    /// Symmetric, dense near zero: `ẑ_i = a·sinh(s_i·asinh(B/a))`, `s_i` uniform on [−1, 1].
    Sinh { scale: f64 },
    Uniform,
}

/// `size` points on `[-bound, bound]` following `spacing`.
pub fn zhat_grid(size: usize, bound: f64, spacing: GridSpacing) -> Vec<f64> {
    let last = (size - 1) as f64;
    (0..size)
        .map(|i| {
            if i == 0 {
                return -bound;
            }
            if i == size - 1 {
                return bound;
            }
            let s = -1.0 + 2.0 * i as f64 / last;
            match spacing {
                GridSpacing::Sinh { scale } => scale * (s * (bound / scale).asinh()).sinh(),
                GridSpacing::Uniform => s * bound,
            }
        })
        .map(|z| if z.abs() < 1e-15 { 0.0 } else { z })
        .collect()
}

/// `{0} ∪ points` log-spaced on `[min, max]`.
pub fn cost_grid(points: usize, min: f64, max: f64) -> Vec<f64> {
    let (lmin, lmax) = (min.ln(), max.ln());
    let last = (points - 1) as f64;
    std::iter::once(0.0)
        .chain((0..points).map(|j| (lmin + (lmax - lmin) * j as f64 / last).exp()))
        .collect()
}

/// Everything that determines a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HTableSpec {
    pub horizon: usize,
    pub prior: NigPrior,
    pub spacing: GridSpacing,
    pub zhat_grid: Vec<f64>,
    pub cost_grid: Vec<f64>,
    pub quad_nodes: usize,
    /// The gain surfaces use the ẑ grid with `surface_refinement − 1` points
    /// inserted in every interval.
    #[serde(default = "default_refinement")]
    pub surface_refinement: usize,
}

fn default_refinement() -> usize {
    DEFAULT_SURFACE_REFINEMENT
}

impl HTableSpec {
    /// Default grids: 100-point sinh grid on [−30, 30], 256 log-spaced costs on
    /// [1e−4, 100] plus zero, 256 quadrature nodes.
    pub fn new(horizon: usize, prior: NigPrior) -> Result<Self> {
        Self::with_resolution(horizon, prior, DEFAULT_GRID_SIZE, DEFAULT_QUAD_NODES)
    }

    pub fn with_resolution(
        horizon: usize,
        prior: NigPrior,
        grid_size: usize,
        quad_nodes: usize,
    ) -> Result<Self> {
        let spacing = GridSpacing::Sinh {
            scale: DEFAULT_SINH_SCALE,
        };
        let spec = Self {
            horizon,
            prior,
            spacing,
            zhat_grid: zhat_grid(grid_size, ZHAT_BOUND, spacing),
            cost_grid: cost_grid(DEFAULT_COST_POINTS, DEFAULT_COST_MIN, DEFAULT_COST_MAX),
            quad_nodes,
            surface_refinement: DEFAULT_SURFACE_REFINEMENT,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn jeffreys(horizon: usize) -> Result<Self> {
        Self::new(horizon, NigPrior::jeffreys())
    }

    pub fn k0(&self) -> usize {
        self.prior.min_samples()
    }

    pub fn grid_size(&self) -> usize {
        self.zhat_grid.len()
    }

    /// Stages with a tabulated index, `k0..horizon`.
    pub fn stages(&self) -> std::ops::Range<usize> {
        self.k0()..self.horizon
    }

    /// ẑ grid of the internal gain surfaces.
    pub fn surface_grid(&self) -> Vec<f64> {
        let r = self.surface_refinement.max(1);
        let g = &self.zhat_grid;
        let mut out = Vec::with_capacity((g.len() - 1) * r + 1);
        for w in g.windows(2) {
            for m in 0..r {
                out.push(w[0] + (w[1] - w[0]) * m as f64 / r as f64);
            }
        }
        out.push(g[g.len() - 1]);
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.surface_refinement == 0 {
            return Err(HIndexError::InvalidGrid("surface refinement must be positive".into()));
        }
        let k0 = self.k0();
        if self.horizon < k0 + 1 {
            return Err(HIndexError::HorizonTooShort {
                horizon: self.horizon,
                k0,
            });
        }
        let g = &self.zhat_grid;
        if g.len() < MIN_GRID_SIZE {
            return Err(HIndexError::InvalidGrid(format!(
                "need at least {MIN_GRID_SIZE} zhat points, got {}",
                g.len()
            )));
        }
        if !g.windows(2).all(|w| w[0] < w[1]) {
            return Err(HIndexError::InvalidGrid("zhat grid not strictly increasing".into()));
        }
        if g[0] > -ZHAT_BOUND || g[g.len() - 1] < ZHAT_BOUND {
            return Err(HIndexError::InvalidGrid(format!(
                "zhat grid must cover [-{ZHAT_BOUND}, {ZHAT_BOUND}]"
            )));
        }
        let c = &self.cost_grid;
        if c.len() < 2 || c[0] < 0.0 || !c.windows(2).all(|w| w[0] < w[1]) {
            return Err(HIndexError::InvalidGrid(
                "cost grid must be nonnegative and strictly increasing".into(),
            ));
        }
        if self.quad_nodes < crate::numerics::MIN_QUAD_NODES {
            return Err(NumericsError::TooFewNodes(self.quad_nodes).into());
        }
        for k in self.stages() {
            let dof = self.prior.predictive_dof(k);
            if dof <= 1.0 {
                return Err(HIndexError::BadDof { k, dof });
            }
        }
        Ok(())
    }

    /// Human-readable differences against another spec; empty when equal.
    pub fn mismatches(&self, other: &HTableSpec) -> Vec<String> {
        let mut out = Vec::new();
        if self.horizon != other.horizon {
            out.push(format!("horizon {} vs {}", self.horizon, other.horizon));
        }
        if self.prior.key() != other.prior.key() {
            out.push(format!("prior {:?} vs {:?}", self.prior, other.prior));
        }
        if self.spacing != other.spacing || self.zhat_grid != other.zhat_grid {
            out.push("zhat grid differs".to_string());
        }
        if self.cost_grid != other.cost_grid {
            out.push("cost grid differs".to_string());
        }
        if self.quad_nodes != other.quad_nodes {
            out.push(format!("quad nodes {} vs {}", self.quad_nodes, other.quad_nodes));
        }
        if self.surface_refinement != other.surface_refinement {
            out.push(format!(
                "surface refinement {} vs {}",
                self.surface_refinement, other.surface_refinement
            ));
        }
        out
    }

    /// Stable identifier for caching: SHA-256 of the canonical JSON encoding.
    pub fn cache_key(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }
}

/// Stage-local constants of the standardized transition `(ẑ, 0, 1) → (ẑ_u, μ_u, σ_u)`
/// after a draw `u` from the stage predictive.
#[derive(Debug, Clone)]
struct Transition {
    dof: f64,
    predictive: StudentT,
    rule: QuantileRule,
    /// `(u, w, μ_u, σ_u)` per quadrature node.
    nodes: Vec<(f64, f64, f64, f64)>,
}

impl Transition {
    fn new(prior: &NigPrior, k: usize, quad_nodes: usize) -> Result<Self> {
        let dof = prior.predictive_dof(k);
        if dof <= 1.0 {
            return Err(HIndexError::BadDof { k, dof });
        }
        let n1 = prior.nu0() + k as f64 + 1.0;
        let shrink = (1.0 - 1.0 / (n1 * n1)) / (dof + 1.0);
        let rule = QuantileRule::new(dof, quad_nodes)?;
        let nodes = rule
            .points()
            .iter()
            .zip(rule.weights())
            .map(|(&u, &w)| (u, w, u / n1, (shrink * (dof + u * u)).sqrt()))
            .collect();
        Ok(Self {
            dof,
            predictive: StudentT::standard(dof)?,
            rule,
            nodes,
        })
    }

    /// One-step expected improvement `E[(u − ẑ)⁺]`.
    fn kernel(&self, zhat: f64) -> f64 {
        self.predictive
            .partial_expectation(zhat)
            .expect("dof > 1 and finite zhat")
    }
}

/// Tabulated `ln H_{n,k}(ẑ_i; c_j)` for one stage, row-major in ẑ.
#[derive(Debug, Clone, PartialEq)]
struct StageSurface {
    logs: Vec<f64>,
}

/// The memoized gain surfaces of every stage of a horizon.
#[derive(Debug, Clone)]
pub struct GainSurface {
    spec: HTableSpec,
    zgrid: Vec<f64>,
    /// Indexed by `k - k0`.
    stages: Vec<StageSurface>,
    transitions: Vec<Transition>,
}

fn bracket(grid: &[f64], x: f64) -> (usize, f64) {
    let n = grid.len();
    if x <= grid[0] {
        return (0, 0.0);
    }
    if x >= grid[n - 1] {
        return (n - 2, 1.0);
    }
    let i = grid.partition_point(|&g| g <= x) - 1;
    let i = i.min(n - 2);
    (i, (x - grid[i]) / (grid[i + 1] - grid[i]))
}

/// Cubic Hermite through `(grid[i], l(i))`, `(grid[i+1], l(i+1))` with
/// three-point node slopes, evaluated at fraction `t` of the interval.
fn hermite<L: Fn(usize) -> f64>(grid: &[f64], i: usize, t: f64, l: L) -> f64 {
    let h = grid[i + 1] - grid[i];
    let (la, lb) = (l(i), l(i + 1));
    let mid = (lb - la) / h;
    let da = if i > 0 {
        let hl = grid[i] - grid[i - 1];
        (h * (la - l(i - 1)) / hl + hl * mid) / (h + hl)
    } else {
        mid
    };
    let db = if i + 2 < grid.len() {
        let hr = grid[i + 2] - grid[i + 1];
        (h * (l(i + 2) - lb) / hr + hr * mid) / (h + hr)
    } else {
        mid
    };
    let (t2, t3) = (t * t, t * t * t);
    (2.0 * t3 - 3.0 * t2 + 1.0) * la
        + (t3 - 2.0 * t2 + t) * h * da
        + (-2.0 * t3 + 3.0 * t2) * lb
        + (t3 - t2) * h * db
}

/// Interpolation weights in ẑ for one query point; they do not depend on c.
#[derive(Debug, Clone, Copy)]
enum Stencil {
    /// Left of the grid: `H(ẑ_0; c) + offset`.
    Left(f64),
    /// `ln H = Σ_m w_m · ln H(ẑ_{first+m}; c)`.
    Log { first: usize, w: [f64; 4] },
}

impl Stencil {
    fn new(grid: &[f64], z: f64) -> Self {
        let last = grid.len() - 1;
        if z <= grid[0] {
            return Stencil::Left(grid[0] - z);
        }
        if z >= grid[last] {
            // power-law continuation through the last two points
            let r = (z / grid[last]).ln() / (grid[last] / grid[last - 1]).ln();
            return Stencil::Log {
                first: last - 3,
                w: [0.0, 0.0, -r, 1.0 + r],
            };
        }
        let (i, t) = bracket(grid, z);
        let first = i.saturating_sub(1).min(last - 3);
        let mut w = [0.0; 4];
        for (m, wm) in w.iter_mut().enumerate() {
            *wm = hermite(grid, i, t, |row| if row == first + m { 1.0 } else { 0.0 });
        }
        Stencil::Log { first, w }
    }

    fn eval(&self, logs: &[f64], nc: usize, j: usize, tc: f64) -> f64 {
        let at = |row: usize| {
            let b = row * nc + j;
            logs[b] + tc * (logs[b + 1] - logs[b])
        };
        match *self {
            Stencil::Left(offset) => at(0).exp() + offset,
            Stencil::Log { first, w } => (w[0] * at(first)
                + w[1] * at(first + 1)
                + w[2] * at(first + 2)
                + w[3] * at(first + 3))
                .exp(),
        }
    }
}

/// `H_{n,k}(ẑ; c)` at a fixed ẑ as a function of the cost:
///
/// `E[(u − ẑ)⁺] + E[σ_u · max{0, H_{n,k+1}(ẑ_u; c/σ_u) − c/σ_u}]`
/// with `ẑ_u = (max(ẑ, u) − μ_u)/σ_u`; the last stage has no continuation.
struct GainAt<'a> {
    cost_grid: &'a [f64],
    kernel: f64,
    next: Option<&'a StageSurface>,
    /// `(w·σ_u, 1/σ_u, stencil of ẑ_u)` per node.
    nodes: Vec<(f64, f64, Stencil)>,
}

impl<'a> GainAt<'a> {
    fn new(
        spec: &'a HTableSpec,
        zgrid: &'a [f64],
        tr: &Transition,
        next: Option<&'a StageSurface>,
        zhat: f64,
    ) -> Self {
        let nodes = match next {
            Some(_) => tr
                .nodes
                .iter()
                .map(|&(u, w, mu_u, sigma_u)| {
                    let z_next = (zhat.max(u) - mu_u) / sigma_u;
                    (w * sigma_u, 1.0 / sigma_u, Stencil::new(zgrid, z_next))
                })
                .collect(),
            None => Vec::new(),
        };
        Self {
            cost_grid: &spec.cost_grid,
            kernel: tr.kernel(zhat),
            next,
            nodes,
        }
    }

    fn eval(&self, c: f64) -> f64 {
        let Some(next) = self.next else {
            return self.kernel;
        };
        let cg = self.cost_grid;
        let nc = cg.len();
        let mut cont = 0.0;
        for &(ws, inv, st) in &self.nodes {
            let c_next = c * inv;
            let (j, tc) = bracket(cg, c_next);
            let excess = st.eval(&next.logs, nc, j, tc) - c_next;
            if excess > 0.0 {
                cont += ws * excess;
            }
        }
        self.kernel + cont
    }

    /// Values at every point of the cost grid.
    fn eval_grid(&self) -> Vec<f64> {
        let cg = self.cost_grid;
        let nc = cg.len();
        let mut out = vec![0.0; nc];
        if let Some(next) = self.next {
            for &(ws, inv, st) in &self.nodes {
                let mut j = 0;
                for (slot, &c) in out.iter_mut().zip(cg) {
                    let c_next = c * inv;
                    while j + 2 < nc && cg[j + 1] <= c_next {
                        j += 1;
                    }
                    let x = c_next.clamp(cg[0], cg[nc - 1]);
                    let tc = (x - cg[j]) / (cg[j + 1] - cg[j]);
                    let excess = st.eval(&next.logs, nc, j, tc) - c_next;
                    if excess > 0.0 {
                        *slot += ws * excess;
                    }
                }
            }
        }
        out.iter().map(|v| self.kernel + v).collect()
    }
}

impl GainSurface {
    pub fn spec(&self) -> &HTableSpec {
        &self.spec
    }

    fn stage(&self, k: usize) -> Option<&StageSurface> {
        k.checked_sub(self.spec.k0()).and_then(|i| self.stages.get(i))
    }

    fn check_stage(&self, k: usize) -> Result<()> {
        let k0 = self.spec.k0();
        if k < k0 || k >= self.spec.horizon {
            return Err(HIndexError::StageOutOfRange {
                k,
                k0,
                horizon: self.spec.horizon,
            });
        }
        Ok(())
    }

    /// ẑ grid of the surfaces.
    pub fn zhat_grid(&self) -> &[f64] {
        &self.zgrid
    }

    /// Tabulated value at surface grid point `(i, j)` of stage `k`.
    pub fn grid_value(&self, k: usize, i: usize, j: usize) -> Option<f64> {
        let c = self.spec.cost_grid.len();
        if j >= c || i >= self.zgrid.len() {
            return None;
        }
        self.stage(k).and_then(|s| s.logs.get(i * c + j)).map(|l| l.exp())
    }

    /// Interpolates the stage-`k` surface: cubic in ln H over ẑ, linear in
    /// ln H over c (clamped to the cost grid). Beyond the ẑ grid the surface
    /// continues with slope −1 on the left and as a power law on the right.
    pub fn interpolate(&self, k: usize, zhat: f64, c: f64) -> Option<f64> {
        let s = self.stage(k)?;
        let cg = &self.spec.cost_grid;
        let (j, tc) = bracket(cg, c);
        Some(Stencil::new(&self.zgrid, zhat).eval(&s.logs, cg.len(), j, tc))
    }

    /// `H_{n,k}(ẑ; c)` evaluated from the recursion against the stage-(k+1) surface.
    pub fn gain(&self, k: usize, zhat: f64, c: f64) -> Result<f64> {
        self.check_stage(k)?;
        let tr = &self.transitions[k - self.spec.k0()];
        Ok(GainAt::new(&self.spec, &self.zgrid, tr, self.stage(k + 1), zhat).eval(c))
    }

    /// Solves `H_{n,k}(ẑ; c) = c` for `c`.
    pub fn index(&self, k: usize, zhat: f64) -> Result<f64> {
        self.check_stage(k)?;
        let tr = &self.transitions[k - self.spec.k0()];
        let g = GainAt::new(&self.spec, &self.zgrid, tr, self.stage(k + 1), zhat);
        solve_index(|c| g.eval(c) - c, k, zhat)
    }

    /// Predictive dof used at stage `k`.
    pub fn dof(&self, k: usize) -> Option<f64> {
        k.checked_sub(self.spec.k0())
            .and_then(|i| self.transitions.get(i))
            .map(|t| t.dof)
    }

    /// Standardized quadrature nodes `(u, w)` of stage `k`.
    pub fn nodes(&self, k: usize) -> Option<(&[f64], &[f64])> {
        k.checked_sub(self.spec.k0())
            .and_then(|i| self.transitions.get(i))
            .map(|t| (t.rule.points(), t.rule.weights()))
    }
}

/// Backward induction over all stages, from `n − 1` down to `k0`.
pub fn gain_surface(spec: &HTableSpec) -> Result<GainSurface> {
    spec.validate()?;
    let k0 = spec.k0();
    let transitions = spec
        .stages()
        .map(|k| Transition::new(&spec.prior, k, spec.quad_nodes))
        .collect::<Result<Vec<_>>>()?;
    let zgrid = spec.surface_grid();
    let mut stages: Vec<StageSurface> = Vec::with_capacity(transitions.len());
    for k in spec.stages().rev() {
        let tr = &transitions[k - k0];
        let next = stages.last();
        let logs: Vec<f64> = zgrid
            .par_iter()
            .flat_map_iter(|&z| {
                GainAt::new(spec, &zgrid, tr, next, z)
                    .eval_grid()
                    .into_iter()
                    .map(|v| v.max(f64::MIN_POSITIVE).ln())
            })
            .collect();
        stages.push(StageSurface { logs });
    }
    stages.reverse();
    Ok(GainSurface {
        spec: spec.clone(),
        zgrid,
        stages,
        transitions,
    })
}

/// Build-time settings recorded alongside the values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildMeta {
    pub root_rel_tol: f64,
    pub quad_nodes: usize,
    pub grid_size: usize,
    pub cost_points: usize,
    /// SHA-256 of the serialized value payload.
    pub checksum: String,
}

/// Immutable index table `h_{n,k}(ẑ)` for `k0 ≤ k < n`.
#[derive(Debug, Clone, PartialEq)]
pub struct HTable {
    spec: HTableSpec,
    /// Stage-major: `values[k - k0][i]`.
    values: Vec<Vec<f64>>,
    meta: BuildMeta,
}

/// Root of `phi(c) = H(ẑ; c) − c`, which is strictly decreasing with
/// `phi(0) > 0`. Bracketed by geometric descent, then refined by
/// Illinois-modified regula falsi to a relative width of [`ROOT_REL_TOL`].
fn solve_index<F: FnMut(f64) -> f64>(mut phi: F, k: usize, zhat: f64) -> Result<f64> {
    let fail = || HIndexError::Bracket { k, zhat };
    let at_zero = phi(0.0);
    if !(at_zero > 0.0) {
        return Err(fail());
    }
    let mut hi = at_zero + 1.0;
    let mut f_hi = phi(hi);
    if f_hi > 0.0 {
        return Err(fail());
    }
    let mut lo = hi;
    let mut f_lo;
    loop {
        lo *= 0.25;
        if lo < f64::MIN_POSITIVE {
            return Err(fail());
        }
        f_lo = phi(lo);
        if f_lo > 0.0 {
            break;
        }
        hi = lo;
        f_hi = f_lo;
    }
    let mut side = 0i8;
    let mut width = hi - lo;
    for iter in 0..400 {
        if hi - lo <= ROOT_REL_TOL * lo {
            break;
        }
        let mut x = (lo * f_hi - hi * f_lo) / (f_hi - f_lo);
        // fall back to bisection when the secant stalls
        if iter % 4 == 3 {
            if hi - lo > 0.5 * width {
                x = lo + 0.5 * (hi - lo);
            }
            width = hi - lo;
        }
        if !(x > lo && x < hi) {
            x = lo + 0.5 * (hi - lo);
            if !(x > lo && x < hi) {
                break;
            }
        }
        let fx = phi(x);
        if fx == 0.0 {
            return Ok(x);
        }
        if fx > 0.0 {
            lo = x;
            f_lo = fx;
            if side == -1 {
                f_hi *= 0.5;
            }
            side = -1;
        } else {
            hi = x;
            f_hi = fx;
            if side == 1 {
                f_lo *= 0.5;
            }
            side = 1;
        }
    }
    Ok(lo + 0.5 * (hi - lo))
}

/// Solves for the index at every stage and grid point, then checks the table
/// invariants.
pub fn build_table(spec: &HTableSpec) -> Result<HTable> {
    let surface = gain_surface(spec)?;
    build_from_surface(&surface)
}

pub fn build_from_surface(surface: &GainSurface) -> Result<HTable> {
    let spec = &surface.spec;
    let values = spec
        .stages()
        .map(|k| {
            spec.zhat_grid
                .par_iter()
                .map(|&z| surface.index(k, z))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let table = HTable::from_parts(spec.clone(), values)?;
    table.check_invariants()?;
    Ok(table)
}

fn payload_text(values: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in values {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{v:.16e}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

fn checksum(payload: &str) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(payload.as_bytes())))
}

impl HTable {
    fn from_parts(spec: HTableSpec, values: Vec<Vec<f64>>) -> Result<Self> {
        let meta = BuildMeta {
            root_rel_tol: ROOT_REL_TOL,
            quad_nodes: spec.quad_nodes,
            grid_size: spec.grid_size(),
            cost_points: spec.cost_grid.len(),
            checksum: checksum(&payload_text(&values)),
        };
        Ok(Self { spec, values, meta })
    }

    pub fn spec(&self) -> &HTableSpec {
        &self.spec
    }

    pub fn meta(&self) -> &BuildMeta {
        &self.meta
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    pub fn k0(&self) -> usize {
        self.spec.k0()
    }

    pub fn checksum(&self) -> &str {
        &self.meta.checksum
    }

    /// Tabulated values of stage `k` on the ẑ grid.
    pub fn stage_values(&self, k: usize) -> Result<&[f64]> {
        let k0 = self.k0();
        if k < k0 || k >= self.horizon() {
            return Err(HIndexError::StageOutOfRange {
                k,
                k0,
                horizon: self.horizon(),
            });
        }
        Ok(&self.values[k - k0])
    }

    /// `h_{n,k}(ẑ)` by linear interpolation; ẑ is clamped to the grid range.
    pub fn lookup(&self, k: usize, zhat: f64) -> Result<f64> {
        let row = self.stage_values(k)?;
        let grid = &self.spec.zhat_grid;
        let z = if zhat.is_nan() { grid[0] } else { zhat };
        let (i, t) = bracket(grid, z);
        Ok(row[i] + t * (row[i + 1] - row[i]))
    }

    /// Largest tabulated index (at the left end of the grid) over all stages.
    pub fn max_value(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|r| r.iter().copied())
            .fold(0.0, f64::max)
    }

    /// Positivity, strict decrease and convexity in ẑ, and stage monotonicity.
    pub fn check_invariants(&self) -> Result<()> {
        let grid = &self.spec.zhat_grid;
        let k0 = self.k0();
        for (s, row) in self.values.iter().enumerate() {
            let k = k0 + s;
            for (i, &v) in row.iter().enumerate() {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(HIndexError::Invariant {
                        property: "positivity",
                        k,
                        zhat: grid[i],
                        detail: format!("h={v}"),
                    });
                }
            }
            for i in 1..row.len() {
                if row[i] >= row[i - 1] {
                    return Err(HIndexError::Invariant {
                        property: "strict decrease",
                        k,
                        zhat: grid[i],
                        detail: format!("h[{}]={} >= h[{}]={}", i, row[i], i - 1, row[i - 1]),
                    });
                }
            }
            for (i, d2) in second_differences(grid, row).into_iter().enumerate() {
                if d2 < -CONVEXITY_TOL {
                    return Err(HIndexError::Invariant {
                        property: "convexity",
                        k,
                        zhat: grid[i + 1],
                        detail: format!("second difference {d2:e}"),
                    });
                }
            }
            if let Some(next) = self.values.get(s + 1) {
                for (i, (&a, &b)) in row.iter().zip(next).enumerate() {
                    if a < b * (1.0 - STAGE_REL_TOL) {
                        return Err(HIndexError::Invariant {
                            property: "stage monotonicity",
                            k,
                            zhat: grid[i],
                            detail: format!("h_k={a} < h_(k+1)={b}"),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes the table as a JSON header line followed by one line of values
    /// per stage.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = TableHeader::new(self);
        let mut text = serde_json::to_string(&header).map_err(|e| HIndexError::Malformed(e.to_string()))?;
        text.push('\n');
        text.push_str(&payload_text(&self.values));
        let mut file = fs::File::create(path)?;
        file.write_all(text.as_bytes())?;
        file.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (head, payload) = text
            .split_once('\n')
            .ok_or_else(|| HIndexError::Malformed("missing header line".into()))?;
        let probe: serde_json::Value =
            serde_json::from_str(head).map_err(|e| HIndexError::Malformed(e.to_string()))?;
        let format = probe.get("format").and_then(|v| v.as_str()).unwrap_or("");
        let version = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if format != TABLE_FORMAT || version != TABLE_VERSION {
            return Err(HIndexError::VersionMismatch {
                format: format.to_string(),
                version,
            });
        }
        let header: TableHeader =
            serde_json::from_value(probe).map_err(|e| HIndexError::Malformed(e.to_string()))?;
        let actual = checksum(payload);
        if actual != header.checksum {
            return Err(HIndexError::Checksum {
                expected: header.checksum,
                actual,
            });
        }
        let spec = header.spec()?;
        let values = payload
            .lines()
            .map(|line| {
                line.split(' ')
                    .map(|t| t.parse::<f64>().map_err(|e| HIndexError::Malformed(format!("{t:?}: {e}"))))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != spec.horizon - spec.k0() || values.iter().any(|r| r.len() != spec.grid_size()) {
            return Err(HIndexError::Malformed("payload shape does not match header".into()));
        }
        let table = Self::from_parts(spec, values)?;
        if table.meta.root_rel_tol != header.root_rel_tol {
            return Ok(Self {
                meta: BuildMeta {
                    root_rel_tol: header.root_rel_tol,
                    ..table.meta
                },
                ..table
            });
        }
        Ok(table)
    }
}

/// Divided second differences of `values` over a nonuniform `grid`.
pub fn second_differences(grid: &[f64], values: &[f64]) -> Vec<f64> {
    (1..grid.len() - 1)
        .map(|i| {
            let left = (values[i] - values[i - 1]) / (grid[i] - grid[i - 1]);
            let right = (values[i + 1] - values[i]) / (grid[i + 1] - grid[i]);
            2.0 * (right - left) / (grid[i + 1] - grid[i - 1])
        })
        .collect()
}

/// Self-describing file header.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableHeader {
    format: String,
    version: u32,
    horizon: usize,
    k0: usize,
    grid_size: usize,
    zhat_bounds: [f64; 2],
    spacing: GridSpacing,
    zhat_grid: Vec<f64>,
    prior: NigPrior,
    cost_grid: Vec<f64>,
    quad_nodes: usize,
    surface_refinement: usize,
    root_rel_tol: f64,
    checksum: String,
}

impl TableHeader {
    fn new(table: &HTable) -> Self {
        let spec = &table.spec;
        Self {
            format: TABLE_FORMAT.to_string(),
            version: TABLE_VERSION,
            horizon: spec.horizon,
            k0: spec.k0(),
            grid_size: spec.grid_size(),
            zhat_bounds: [spec.zhat_grid[0], spec.zhat_grid[spec.grid_size() - 1]],
            spacing: spec.spacing,
            zhat_grid: spec.zhat_grid.clone(),
            prior: spec.prior,
            cost_grid: spec.cost_grid.clone(),
            quad_nodes: spec.quad_nodes,
            surface_refinement: spec.surface_refinement,
            root_rel_tol: table.meta.root_rel_tol,
            checksum: table.meta.checksum.clone(),
        }
    }

    fn spec(&self) -> Result<HTableSpec> {
        let spec = HTableSpec {
            horizon: self.horizon,
            prior: self.prior,
            spacing: self.spacing,
            zhat_grid: self.zhat_grid.clone(),
            cost_grid: self.cost_grid.clone(),
            quad_nodes: self.quad_nodes,
            surface_refinement: self.surface_refinement,
        };
        if spec.k0() != self.k0 || spec.grid_size() != self.grid_size {
            return Err(HIndexError::Malformed("header fields disagree".into()));
        }
        spec.validate().map_err(|e| HIndexError::Malformed(e.to_string()))?;
        Ok(spec)
    }
}

/// Shares built tables across callers, keyed by spec; optionally backed by an
/// on-disk cache directory.
#[derive(Debug, Default)]
pub struct TableRegistry {
    tables: Mutex<HashMap<String, Arc<HTable>>>,
    cache_dir: Option<PathBuf>,
}

impl TableRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_cache_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            tables: Mutex::default(),
            cache_dir: Some(dir.into()),
        }
    }

    pub fn cache_path(&self, spec: &HTableSpec) -> Option<PathBuf> {
        self.cache_dir
            .as_ref()
            .map(|d| d.join(format!("htable-n{}-{}.txt", spec.horizon, spec.cache_key())))
    }

    /// Returns the table for `spec`, loading or building it on first use.
    pub fn get_or_build(&self, spec: &HTableSpec) -> Result<Arc<HTable>> {
        let key = spec.cache_key();
        if let Some(t) = self.tables.lock().expect("registry lock").get(&key) {
            return Ok(Arc::clone(t));
        }
        let table = match self.cache_path(spec) {
            Some(path) if path.exists() => match HTable::load(&path) {
                Ok(t) if t.spec().mismatches(spec).is_empty() => t,
                _ => self.build_and_store(spec, &path)?,
            },
            Some(path) => self.build_and_store(spec, &path)?,
            None => build_table(spec)?,
        };
        let table = Arc::new(table);
        self.tables
            .lock()
            .expect("registry lock")
            .entry(key)
            .or_insert_with(|| Arc::clone(&table));
        Ok(table)
    }

    fn build_and_store(&self, spec: &HTableSpec, path: &Path) -> Result<HTable> {
        let table = build_table(spec)?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        table.save(path)?;
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.tables.lock().expect("registry lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posterior::NigState;
    use proptest::prelude::*;
    use statrs::distribution::{Continuous, ContinuousCDF, StudentsT};
    use std::sync::OnceLock;

    fn table8() -> &'static HTable {
        static TABLE: OnceLock<HTable> = OnceLock::new();
        TABLE.get_or_init(|| build_table(&HTableSpec::jeffreys(8).unwrap()).unwrap())
    }

    fn surface8() -> &'static GainSurface {
        static SURFACE: OnceLock<GainSurface> = OnceLock::new();
        SURFACE.get_or_init(|| gain_surface(&HTableSpec::jeffreys(8).unwrap()).unwrap())
    }

    /// `E[(T − z)⁺]` for a standard t via statrs.
    fn oracle_kernel(dof: f64, z: f64) -> f64 {
        let t = StudentsT::new(0.0, 1.0, dof).unwrap();
        (dof + z * z) / (dof - 1.0) * t.pdf(z) - z * t.sf(z)
    }

    /// Composite Simpson on `[a, b]` after `u = centre + sinh(s)`.
    fn simpson_sinh<F: Fn(f64) -> f64>(f: F, centre: f64, a: f64, b: f64, panels: usize) -> f64 {
        let (sa, sb) = ((a - centre).asinh(), (b - centre).asinh());
        let h = (sb - sa) / panels as f64;
        let g = |s: f64| f(centre + s.sinh()) * s.cosh();
        let mut acc = g(sa) + g(sb);
        for i in 1..panels {
            let s = sa + h * i as f64;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * g(s);
        }
        acc * h / 3.0
    }

    /// Second-to-last stage gain by brute force: the transition comes from an
    /// explicit posterior update of a standardized state, expectations from
    /// Simpson's rule against statrs densities.
    fn oracle_penultimate(prior: NigPrior, n: usize, zhat: f64, c: f64) -> f64 {
        let k = n - 2;
        let alpha = prior.alpha0() + 0.5 * k as f64;
        let nu = prior.nu0() + k as f64;
        let state = NigState {
            prior,
            k,
            alpha,
            nu,
            mu: 0.0,
            beta: nu * alpha / (nu + 1.0),
        };
        assert!((state.sigma().unwrap() - 1.0).abs() < 1e-14);
        let dof = 2.0 * alpha;
        let density = StudentsT::new(0.0, 1.0, dof).unwrap();
        let integrand = |u: f64| {
            let next = state.observe(u).unwrap();
            let sigma_u = next.sigma().unwrap();
            let z_u = (zhat.max(u) - next.mu) / sigma_u;
            let cont = (oracle_kernel(dof + 1.0, z_u) - c / sigma_u).max(0.0);
            density.pdf(u) * ((u - zhat).max(0.0) + sigma_u * cont)
        };
        let wide = 1e4;
        simpson_sinh(&integrand, zhat, -wide, zhat, 40_000) + simpson_sinh(&integrand, zhat, zhat, wide, 40_000)
    }

    fn oracle_penultimate_index(prior: NigPrior, n: usize, zhat: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, oracle_penultimate(prior, n, zhat, 0.0) + 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if oracle_penultimate(prior, n, zhat, mid) > mid {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn last_stage_is_one_step_kernel() {
        let t = table8();
        let row = t.stage_values(7).unwrap();
        for (&z, &h) in t.spec().zhat_grid.iter().zip(row) {
            let kernel = oracle_kernel(6.0, z);
            assert!((h - kernel).abs() <= 2e-6 * kernel.max(1e-300), "z={z} h={h} kernel={kernel}");
        }
    }

    #[test]
    fn penultimate_gain_matches_brute_force() {
        let s = surface8();
        for &z in &[-3.0, -1.0, 0.0, 0.5, 1.0, 2.0, 4.0] {
            for &c in &[0.0, 0.05, 0.3, 1.0] {
                let got = s.gain(6, z, c).unwrap();
                let want = oracle_penultimate(NigPrior::jeffreys(), 8, z, c);
                assert!((got - want).abs() < 2e-4 * want, "z={z} c={c} got={got} want={want}");
            }
        }
    }

    #[test]
    fn penultimate_gain_matches_brute_force_proper_prior() {
        let prior = NigPrior::new(0.3, 1.0, 2.0, 0.5).unwrap();
        let spec = HTableSpec::new(4, prior).unwrap();
        let s = gain_surface(&spec).unwrap();
        for &z in &[-2.0, 0.0, 1.5] {
            for &c in &[0.0, 0.1, 0.5] {
                let got = s.gain(2, z, c).unwrap();
                let want = oracle_penultimate(prior, 4, z, c);
                assert!((got - want).abs() < 2e-4 * want, "z={z} c={c} got={got} want={want}");
            }
        }
    }

    #[test]
    fn penultimate_index_matches_brute_force() {
        let t = table8();
        for &z in &[-2.0, 0.0, 1.0, 3.0] {
            let want = oracle_penultimate_index(NigPrior::jeffreys(), 8, z);
            let got = surface8().index(6, z).unwrap();
            assert!((got - want).abs() < 2e-4 * want, "z={z} got={got} want={want}");
            let row = t.stage_values(6).unwrap();
            let grid = &t.spec().zhat_grid;
            let i = grid.partition_point(|&g| g < z);
            if (grid[i] - z).abs() < 1e-12 {
                assert_eq!(row[i], got);
            }
        }
    }

    #[test]
    fn table_shape_properties() {
        let t = table8();
        t.check_invariants().unwrap();
        let grid = &t.spec().zhat_grid;
        for k in t.k0()..t.horizon() {
            let row = t.stage_values(k).unwrap();
            assert!(row.windows(2).all(|w| w[1] < w[0]));
            assert!(second_differences(grid, row).iter().all(|&d| d >= -CONVEXITY_TOL));
            // far left the index approaches the distance to the best reward
            assert!(row[0] >= 30.0 && row[0] < 30.1, "k={k} h(-30)={}", row[0]);
            // the index is at least the one-step gain
            let dof = t.spec().prior.predictive_dof(k);
            for (&z, &h) in grid.iter().zip(row) {
                assert!(h >= oracle_kernel(dof, z) * (1.0 - 1e-9));
            }
            if k + 1 < t.horizon() {
                let next = t.stage_values(k + 1).unwrap();
                assert!(row.iter().zip(next).all(|(a, b)| a >= b));
            }
        }
    }

    #[test]
    fn index_root_has_relative_precision() {
        for &root in &[1e-20, 3e-9, 0.7, 42.0] {
            let got = solve_index(|c| root - c, 0, 0.0).unwrap();
            assert!((got - root).abs() <= 1e-13 * root, "root={root} got={got}");
        }
        let kinked = solve_index(|c| (2e-12 - c).min(0.5 * (2e-12 - c)), 0, 0.0).unwrap();
        assert!((kinked - 2e-12).abs() < 1e-25);
        assert!(matches!(solve_index(|c| -1.0 - c, 3, 1.0), Err(HIndexError::Bracket { .. })));
    }

    #[test]
    fn stencil_reproduces_nodes_and_quadratics() {
        let grid: Vec<f64> = (0..11).map(|i| i as f64 * 0.5).collect();
        let nc = 2;
        let ln_h = |z: f64| -0.3 * z * z + 0.2 * z - 1.0;
        let logs: Vec<f64> = grid.iter().flat_map(|&z| [ln_h(z), ln_h(z)]).collect();
        for &z in &[0.5, 0.77, 2.5, 4.2, 4.5] {
            let v = Stencil::new(&grid, z).eval(&logs, nc, 0, 0.3);
            assert!((v.ln() - ln_h(z)).abs() < 1e-12, "z={z}");
        }
        for (i, &z) in grid.iter().enumerate() {
            let v = Stencil::new(&grid, z).eval(&logs, nc, 0, 0.0);
            assert!((v.ln() - logs[i * nc]).abs() < 1e-14);
        }
        let left = Stencil::new(&grid, -2.0).eval(&logs, nc, 0, 0.0);
        assert!((left - (ln_h(0.0).exp() + 2.0)).abs() < 1e-15);
    }

    #[test]
    fn grids_are_symmetric_and_nested() {
        let g = zhat_grid(100, ZHAT_BOUND, GridSpacing::Sinh { scale: 1.0 });
        assert_eq!(g[0], -30.0);
        assert_eq!(g[99], 30.0);
        for i in 0..50 {
            assert!((g[i] + g[99 - i]).abs() < 1e-12);
        }
        let fine = zhat_grid(199, ZHAT_BOUND, GridSpacing::Sinh { scale: 1.0 });
        for (i, &z) in g.iter().enumerate() {
            assert!((fine[2 * i] - z).abs() < 1e-12);
        }
        let spec = HTableSpec::jeffreys(6).unwrap();
        let sg = spec.surface_grid();
        assert_eq!(sg.len(), 199);
        assert!(sg.windows(2).all(|w| w[0] < w[1]));
        let c = cost_grid(5, 1e-2, 1e2);
        assert_eq!(c[0], 0.0);
        assert!((c[4] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        assert!(matches!(
            HTableSpec::jeffreys(3),
            Err(HIndexError::HorizonTooShort { horizon: 3, k0: 3 })
        ));
        assert!(HTableSpec::jeffreys(4).is_ok());
        let mut s = HTableSpec::jeffreys(6).unwrap();
        s.zhat_grid.truncate(40);
        assert!(matches!(s.validate(), Err(HIndexError::InvalidGrid(_))));
        let mut s = HTableSpec::jeffreys(6).unwrap();
        s.zhat_grid.swap(3, 4);
        assert!(matches!(s.validate(), Err(HIndexError::InvalidGrid(_))));
        let mut s = HTableSpec::jeffreys(6).unwrap();
        s.cost_grid[0] = -1.0;
        assert!(matches!(s.validate(), Err(HIndexError::InvalidGrid(_))));
        let a = HTableSpec::jeffreys(6).unwrap();
        let b = HTableSpec::with_resolution(8, NigPrior::jeffreys(), 100, 128).unwrap();
        let diff = a.mismatches(&b);
        assert_eq!(diff.len(), 2, "{diff:?}");
        assert!(a.mismatches(&a.clone()).is_empty());
        assert_ne!(a.cache_key(), b.cache_key());
    }

    #[test]
    fn lookup_clamps_and_rejects_bad_stages() {
        let t = table8();
        let row = t.stage_values(4).unwrap();
        assert_eq!(t.lookup(4, -1e6).unwrap(), row[0]);
        assert_eq!(t.lookup(4, 1e6).unwrap(), row[row.len() - 1]);
        assert_eq!(t.lookup(4, t.spec().zhat_grid[17]).unwrap(), row[17]);
        assert!(matches!(t.lookup(2, 0.0), Err(HIndexError::StageOutOfRange { .. })));
        assert!(matches!(t.lookup(8, 0.0), Err(HIndexError::StageOutOfRange { .. })));
    }

    #[test]
    fn builds_are_deterministic() {
        let spec = HTableSpec::jeffreys(6).unwrap();
        let a = build_table(&spec).unwrap();
        let b = build_table(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.txt");
        let t = table8();
        t.save(&path).unwrap();
        let back = HTable::load(&path).unwrap();
        assert_eq!(&back, t);
        for k in t.k0()..t.horizon() {
            let (a, b) = (t.stage_values(k).unwrap(), back.stage_values(k).unwrap());
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn load_reports_distinct_errors() {
        let text = {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("h.txt");
            table8().save(&path).unwrap();
            fs::read_to_string(&path).unwrap()
        };
        let (head, payload) = text.split_once('\n').unwrap();

        let truncated = &text[..text.len() - 40];
        assert!(matches!(HTable::parse(truncated), Err(HIndexError::Checksum { .. })));

        let flipped = format!("{head}\n{}", payload.replacen('1', "2", 1));
        assert!(matches!(HTable::parse(&flipped), Err(HIndexError::Checksum { .. })));

        let bumped = format!("{}\n{payload}", head.replace("\"version\":1", "\"version\":2"));
        assert!(matches!(
            HTable::parse(&bumped),
            Err(HIndexError::VersionMismatch { version: 2, .. })
        ));

        assert!(matches!(HTable::parse(&text[..20]), Err(HIndexError::Malformed(_))));
        let broken = format!("{{\"format\":\"beacon-htable\",\"version\":1}}\n{payload}");
        assert!(matches!(HTable::parse(&broken), Err(HIndexError::Malformed(_))));
        assert!(matches!(
            HTable::load(Path::new("/nonexistent/h.txt")),
            Err(HIndexError::Io(_))
        ));
    }

    #[test]
    fn registry_shares_and_caches() {
        let dir = tempfile::tempdir().unwrap();
        let spec = HTableSpec::jeffreys(5).unwrap();
        let reg = TableRegistry::with_cache_dir(dir.path());
        let a = reg.get_or_build(&spec).unwrap();
        let b = reg.get_or_build(&spec).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(reg.len(), 1);
        let path = reg.cache_path(&spec).unwrap();
        assert!(path.exists());
        let fresh = TableRegistry::with_cache_dir(dir.path());
        let c = fresh.get_or_build(&spec).unwrap();
        assert_eq!(*a, *c);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn lookup_is_nonincreasing_in_zhat(a in -40.0f64..40.0, b in -40.0f64..40.0, k in 3usize..8) {
            let t = table8();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(t.lookup(k, lo).unwrap() >= t.lookup(k, hi).unwrap());
        }

        #[test]
        fn lookup_is_patient(z in -40.0f64..40.0, k in 3usize..7) {
            let t = table8();
            prop_assert!(t.lookup(k, z).unwrap() >= t.lookup(k + 1, z).unwrap());
        }

        #[test]
        fn gain_is_nonincreasing_in_cost(z in -10.0f64..10.0, c1 in 0.0f64..3.0, c2 in 0.0f64..3.0, k in 3usize..7) {
            let s = surface8();
            let (lo, hi) = if c1 < c2 { (c1, c2) } else { (c2, c1) };
            prop_assert!(s.gain(k, z, lo).unwrap() >= s.gain(k, z, hi).unwrap());
        }
    }
}
