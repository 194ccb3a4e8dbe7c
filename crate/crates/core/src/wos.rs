//! Walk-on-spheres for the exterior Dirichlet problem `L u = 0` in a domain,
//! `u = g` on its complement, stepping with mean-kernel jumps.
//!
//! For the isotropic measure the jump law is the exact exit distribution
//! from the ball, so the estimator is unbiased. For any other measure each
//! step carries the `O(r^{2+2s})` bias of the small-radius expansion;
//! [`bias_scan`] measures it against the radius cap.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::funcs::TestFunction;
use crate::meankernel::JumpSampler;
use crate::measure::SpectralMeasure;
use crate::operator::check_order;

/// Relative offset used to push a projected point off the boundary.
const EXTERIOR_NUDGE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Domain {
    Ball { center: Vec<f64>, radius: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl Domain {
    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        if center.is_empty() || !(radius > 0.0 && radius.is_finite()) || center.iter().any(|c| !c.is_finite()) {
            return Err(Error::BadParameter("ball needs a finite center and a positive radius".into()));
        }
        Ok(Self::Ball { center, radius })
    }

    pub fn boxed(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::BadParameter("box corners must have equal, nonzero length".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::BadParameter("box needs lo < hi in every coordinate".into()));
        }
        Ok(Self::Box { lo, hi })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Ball { center, .. } => center.len(),
            Self::Box { lo, .. } => lo.len(),
        }
    }

    /// Negative inside, positive outside, zero on the boundary.
    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        match self {
            Self::Ball { center, radius } => {
                x.iter().zip(center).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt() - radius
            }
            Self::Box { lo, hi } => {
                let mut outside = 0.0;
                let mut inside = f64::NEG_INFINITY;
                for i in 0..x.len() {
                    let d = (lo[i] - x[i]).max(x[i] - hi[i]);
                    outside += d.max(0.0).powi(2);
                    inside = inside.max(d);
                }
                if outside > 0.0 {
                    outside.sqrt()
                } else {
                    inside
                }
            }
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.signed_distance(x) < 0.0
    }

    /// Nearest boundary point, moved just outside the domain.
    pub fn exterior_projection(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Self::Ball { center, radius } => {
                let d: Vec<f64> = x.iter().zip(center).map(|(a, c)| a - c).collect();
                let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                let scale = radius * (1.0 + EXTERIOR_NUDGE);
                if norm == 0.0 {
                    let mut p = center.clone();
                    p[0] += scale;
                    return p;
                }
                center.iter().zip(&d).map(|(c, v)| c + v / norm * scale).collect()
            }
            Self::Box { lo, hi } => {
                let mut p = x.to_vec();
                if !self.contains(x) {
                    return p;
                }
                let (mut best, mut axis, mut upper) = (f64::INFINITY, 0, false);
                for i in 0..x.len() {
                    for (gap, up) in [(x[i] - lo[i], false), (hi[i] - x[i], true)] {
                        if gap < best {
                            best = gap;
                            axis = i;
                            upper = up;
                        }
                    }
                }
                let width = hi[axis] - lo[axis];
                p[axis] = if upper { hi[axis] + EXTERIOR_NUDGE * width } else { lo[axis] - EXTERIOR_NUDGE * width };
                p
            }
        }
    }
}

/// `ball:center=0,0;radius=1` or `box:lo=-1,-1;hi=1,1`.
impl FromStr for Domain {
    type Err = Error;

    fn from_str(spec: &str) -> Result<Self> {
        let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
        let mut center = None;
        let mut radius = None;
        let mut lo = None;
        let mut hi = None;
        for part in rest.split(';').filter(|p| !p.trim().is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key=value in domain spec, got '{part}'")))?;
            let numbers = || -> Result<Vec<f64>> {
                value
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Parse(format!("domain {key}: {e}"))))
                    .collect()
            };
            match (kind.trim(), key.trim()) {
                ("ball", "center") => center = Some(numbers()?),
                ("ball", "radius") => radius = Some(value.trim().parse::<f64>().map_err(|e| Error::Parse(format!("domain radius: {e}")))?),
                ("box", "lo") => lo = Some(numbers()?),
                ("box", "hi") => hi = Some(numbers()?),
                (_, other) => return Err(Error::BadParameter(format!("unknown domain parameter '{other}' for '{kind}'"))),
            }
        }
        let missing = |name: &str| Error::Parse(format!("domain spec is missing '{name}'"));
        match kind.trim() {
            "ball" => Self::ball(center.ok_or_else(|| missing("center"))?, radius.ok_or_else(|| missing("radius"))?),
            "box" => Self::boxed(lo.ok_or_else(|| missing("lo"))?, hi.ok_or_else(|| missing("hi"))?),
            other => Err(Error::Parse(format!("unknown domain kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WalkConfig {
    pub walks: usize,
    pub max_steps: usize,
    /// Step radius is `theta * dist(x, boundary)`, in `(0, 1]`.
    pub theta: f64,
    /// Optional cap on the step radius.
    pub h_max: Option<f64>,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self { walks: 10_000, max_steps: 10_000, theta: 1.0, h_max: None, seed: 0 }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.walks == 0 {
            return Err(Error::BadParameter("walk count must be at least 1".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::BadParameter("max steps must be at least 1".into()));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::BadParameter(format!("theta must lie in (0, 1], got {}", self.theta)));
        }
        if let Some(h) = self.h_max {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::BadParameter(format!("radius cap must be positive, got {h}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WalkStats {
    pub estimate: f64,
    /// Sample standard deviation over `sqrt(walks)`.
    pub stderr: f64,
    pub mean_len: f64,
    pub truncated_frac: f64,
    pub walks: usize,
}

struct Walk {
    score: f64,
    steps: usize,
    truncated: bool,
}

pub fn run_walks(
    x0: &[f64],
    s: f64,
    measure: &SpectralMeasure,
    domain: &Domain,
    g: &dyn TestFunction,
    config: &WalkConfig,
) -> Result<WalkStats> {
    Ok(summarize(&simulate(x0, s, measure, domain, g, config)?))
}

fn simulate(
    x0: &[f64],
    s: f64,
    measure: &SpectralMeasure,
    domain: &Domain,
    g: &dyn TestFunction,
    config: &WalkConfig,
) -> Result<Vec<Walk>> {
    check_order(s)?;
    config.validate()?;
    let n = domain.dim();
    for found in [x0.len(), measure.dim(), g.dim()] {
        if found != n {
            return Err(Error::DimensionMismatch { expected: n, found });
        }
    }
    let start = domain.signed_distance(x0);
    if start > 0.0 || start.is_nan() {
        return Err(Error::StartOutsideDomain);
    }
    if start == 0.0 {
        return Err(Error::DegenerateRadius(0.0));
    }
    let sampler = JumpSampler::new(s, measure)?;
    Ok((0..config.walks)
        .into_par_iter()
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(index as u64);
            walk(x0, domain, g, &sampler, config, &mut rng)
        })
        .collect())
}

fn summarize(walks: &[Walk]) -> WalkStats {
    let count = walks.len() as f64;
    let mean = walks.iter().map(|w| w.score).sum::<f64>() / count;
    let var = if walks.len() > 1 {
        walks.iter().map(|w| (w.score - mean).powi(2)).sum::<f64>() / (count - 1.0)
    } else {
        0.0
    };
    WalkStats {
        estimate: mean,
        stderr: (var / count).sqrt(),
        mean_len: walks.iter().map(|w| w.steps as f64).sum::<f64>() / count,
        truncated_frac: walks.iter().filter(|w| w.truncated).count() as f64 / count,
        walks: walks.len(),
    }
}

fn walk(x0: &[f64], domain: &Domain, g: &dyn TestFunction, sampler: &JumpSampler<'_>, config: &WalkConfig, rng: &mut ChaCha8Rng) -> Walk {
    let mut x = x0.to_vec();
    for step in 1..=config.max_steps {
        let dist = -domain.signed_distance(&x);
        let mut r = config.theta * dist;
        if let Some(h) = config.h_max {
            r = r.min(h);
        }
        let jump = sampler.sample(r, rng);
        for (xi, d) in x.iter_mut().zip(&jump.direction) {
            *xi += jump.sign * jump.rho * d;
        }
        if !domain.contains(&x) {
            return Walk { score: g.evaluate(&x), steps: step, truncated: false };
        }
    }
    let exit = domain.exterior_projection(&x);
    Walk { score: g.evaluate(&exit), steps: config.max_steps, truncated: true }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasRow {
    pub h_max: f64,
    pub stats: WalkStats,
    /// Estimate minus the previous row's estimate.
    pub difference: Option<f64>,
    /// Standard error of `difference`, from paired per-walk scores.
    pub difference_stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasScan {
    pub rows: Vec<BiasRow>,
}

impl BiasScan {
    /// Every difference within `sigmas` standard errors of zero.
    pub fn statistically_zero(&self, sigmas: f64) -> bool {
        self.rows.iter().filter_map(|r| Some((r.difference?, r.difference_stderr?))).all(|(d, e)| d.abs() <= sigmas * e)
    }

    /// Successive differences shrink, allowing each to exceed its
    /// predecessor by at most `sigmas` standard errors.
    pub fn shrinking(&self, sigmas: f64) -> bool {
        let diffs: Vec<(f64, f64)> = self.rows.iter().filter_map(|r| Some((r.difference?, r.difference_stderr?))).collect();
        diffs.windows(2).all(|w| w[1].0.abs() <= w[0].0.abs() + sigmas * (w[0].1 + w[1].1))
    }
}

/// Runs [`run_walks`] once per radius cap with a shared seed, so successive
/// estimates use common random numbers.
pub fn bias_scan(
    x0: &[f64],
    s: f64,
    measure: &SpectralMeasure,
    domain: &Domain,
    g: &dyn TestFunction,
    config: &WalkConfig,
    caps: &[f64],
) -> Result<BiasScan> {
    if caps.is_empty() {
        return Err(Error::BadParameter("bias scan needs at least one cap".into()));
    }
    let mut rows: Vec<BiasRow> = Vec::with_capacity(caps.len());
    let mut previous: Option<Vec<f64>> = None;
    for &h in caps {
        let cfg = WalkConfig { h_max: Some(h), ..*config };
        let walks = simulate(x0, s, measure, domain, g, &cfg)?;
        let stats = summarize(&walks);
        let scores: Vec<f64> = walks.iter().map(|w| w.score).collect();
        let (difference, difference_stderr) = match &previous {
            Some(prev) => {
                let d: Vec<f64> = scores.iter().zip(prev).map(|(a, b)| a - b).collect();
                let m = d.len() as f64;
                let mean = d.iter().sum::<f64>() / m;
                let var = if d.len() > 1 { d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0) } else { 0.0 };
                (Some(mean), Some((var / m).sqrt()))
            }
            None => (None, None),
        };
        rows.push(BiasRow { h_max: h, stats, difference, difference_stderr });
        previous = Some(scores);
    }
    Ok(BiasScan { rows })
}
