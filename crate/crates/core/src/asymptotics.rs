//! Small-radius expansion of the mean kernel, `s -> 1` limits, and the
//! anisotropic seminorms with their Bourgain-Brezis-Mironescu limit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::funcs::{FarField, TestFunction};
use crate::meankernel::{mean_value, MeanKernel, MeanLayout};
use crate::measure::{Atom, SpectralMeasure};
use crate::operator::{check_dims, check_order, eval_operator, finite, EvalResult, Level, Pieces, QuadratureSpec};
use crate::quadrature::{gauss_legendre, JacobiRule};
use crate::radial::{angular_nodes, breakpoints, composite, kernel_tail, wave_kernel_tail, Reach};

/// `u(x) - M^s_r u(x) - c r^{2s} L u(x)`.
///
/// The three terms cancel to `O(r^{2+2s})`, so the residual is computed as
/// one integral against the kernel difference rather than by subtraction.
pub fn expansion_residual(
    u: &dyn TestFunction,
    x: &[f64],
    r: f64,
    s: f64,
    measure: &SpectralMeasure,
    quad: &QuadratureSpec,
) -> Result<EvalResult> {
    check_order(s)?;
    check_dims(u, x, measure)?;
    quad.validate()?;
    let params = MeanKernel::new(r, s, measure)?;
    if !u.c2_near(x) {
        return Err(Error::NotC2AtPoint);
    }
    let [coarse, fine] = quad.levels();
    let a = residual_pieces(u, x, &params, coarse)?;
    let b = residual_pieces(u, x, &params, fine)?;
    let scale = 1.0 / (2.0 * params.total_mass() * params.radial_mass());
    let value = finite(scale * (b.0 + b.1), "expansion residual")?;
    Ok(EvalResult {
        value,
        error_estimate: scale * ((a.0 - b.0).abs() + (a.1 - b.1).abs()),
        pieces: Pieces { inner: scale * b.0, tail: scale * b.1, truncation_bound: 0.0 },
    })
}

/// The residual assembled literally from [`mean_value`] and [`eval_operator`].
pub fn expansion_residual_composed(
    u: &dyn TestFunction,
    x: &[f64],
    r: f64,
    s: f64,
    measure: &SpectralMeasure,
    quad: &QuadratureSpec,
) -> Result<EvalResult> {
    let params = MeanKernel::new(r, s, measure)?;
    let m = mean_value(u, x, &params, quad)?;
    let l = eval_operator(u, x, s, measure, 1.0, quad)?;
    let c = params.normalization() * r.powf(2.0 * s);
    Ok(EvalResult {
        value: u.evaluate(x) - m.value - c * l.value,
        error_estimate: m.error_estimate + c * l.error_estimate,
        pieces: Pieces { inner: m.value, tail: c * l.value, truncation_bound: 0.0 },
    })
}

/// `(int_0^{2r}, int_{2r}^inf)` pieces of
/// `int da [int_r^inf delta (k - r^{2s} rho^{-1-2s}) - int_0^r delta r^{2s} rho^{-1-2s}]`.
fn residual_pieces(u: &dyn TestFunction, x: &[f64], params: &MeanKernel<'_>, level: Level) -> Result<(f64, f64)> {
    let s = params.order();
    let r = params.radius();
    let p = 1.0 + 2.0 * s;
    let ell = u.length_scale();
    let layout = MeanLayout::new(u, x, r)?;
    let nodes = angular_nodes(params.measure(), &layout.far, level.sphere)?;
    let zone = match layout.far {
        Reach::Finite { lo, hi } => (lo, hi),
        _ => (0.0, f64::INFINITY),
    };
    let r1 = r.min(ell);
    let origin = JacobiRule::cached(0.0, 1.0 - 2.0 * s, level.jacobi)?;
    let inside_cuts = breakpoints(r1, r, 0.0, 0.5 * ell, zone)?;
    let edge = JacobiRule::cached(0.0, -s, level.jacobi)?;
    let tau = layout.tau;
    let edge_cuts = [r, r * (1.0 + tau)];
    let far_rule = match layout.far {
        Reach::Unbounded => Some(JacobiRule::cached(0.0, 2.0 * s - 1.0, level.jacobi)?),
        _ => None,
    };
    let big_r = layout.end;
    let z = (r / big_r).powi(2);
    let ux = u.evaluate(x);
    let r2s = r.powf(2.0 * s);
    let excess = |rho: f64| r2s * rho.powf(-p) * (-s * (-(r / rho).powi(2)).ln_1p()).exp_m1();

    let mut y = vec![0.0; x.len()];
    let (mut near, mut far) = (0.0, 0.0);
    for atom in &nodes {
        let dir = &atom.direction;
        let mut delta = |rho: f64| {
            for i in 0..y.len() {
                y[i] = rho * dir[i];
            }
            u.second_difference(x, &y)
        };
        // int_0^r delta r^{2s} rho^{-1-2s}
        let ball = r2s
            * (r1.powf(2.0 - 2.0 * s)
                * origin.integrate(|t| {
                    let rho = r1 * t;
                    delta(rho) / (rho * rho)
                })
                + composite(&inside_cuts, level.panel, |rho| delta(rho) * rho.powf(-p))?);
        // int_r^{r(1+tau)} delta (k - r^{2s} rho^{-1-2s})
        let with_kernel = tau.powf(1.0 - s)
            * edge.integrate(|v| {
                let t = tau * v;
                (2.0 + t).powf(-s) / (1.0 + t) * delta(r * (1.0 + t))
            });
        let plain = composite(&edge_cuts, level.panel, |rho| r2s * rho.powf(-p) * delta(rho))?;
        let body = composite(&layout.cuts, level.panel, |rho| excess(rho) * delta(rho))?;
        let tail = match &layout.far {
            Reach::Finite { .. } => 2.0 * ux * kernel_tail(z, s, true),
            Reach::Wave { wavevector } => {
                let q = dir.iter().zip(wavevector).map(|(a, b)| a * b).sum::<f64>().abs();
                2.0 * ux * (kernel_tail(z, s, true) - wave_kernel_tail(r, big_r, q, s, true)?)
            }
            Reach::Unbounded => {
                let rule = far_rule.as_ref().expect("tail rule");
                let ratio = r / big_r;
                ratio.powf(2.0 * s)
                    * rule.integrate(|v| {
                        let w = (ratio * v).powi(2);
                        (-s * (-w).ln_1p()).exp_m1() * delta(big_r / v)
                    })
            }
        };
        near += atom.weight * (with_kernel - plain - ball);
        far += atom.weight * (body + tail);
    }
    Ok((near, far))
}

/// Least-squares fit of `log |residual|` against `log r`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderFit {
    pub radii: Vec<f64>,
    pub residuals: Vec<f64>,
    pub error_estimates: Vec<f64>,
    /// Fitted exponent; `None` when fewer than two residuals clear the noise floor.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    /// Root-mean-square deviation of the fit in log space.
    pub fit_residual: f64,
    pub noise_floor: f64,
    /// All residuals sat below the noise floor.
    pub vacuous: bool,
    pub pass: bool,
}

/// Minimum slope accepted by [`fit_expansion_order`].
pub const ORDER_THRESHOLD: f64 = 1.9;

pub fn fit_expansion_order(
    u: &dyn TestFunction,
    x: &[f64],
    s: f64,
    measure: &SpectralMeasure,
    ladder: &[f64],
    quad: &QuadratureSpec,
) -> Result<OrderFit> {
    if ladder.is_empty() || ladder.iter().any(|r| !(*r > 0.0)) || ladder.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::BadParameter("radius ladder must be positive and strictly decreasing".into()));
    }
    let results: Vec<EvalResult> = ladder
        .par_iter()
        .map(|&r| expansion_residual(u, x, r, s, measure, quad))
        .collect::<Result<_>>()?;
    let sup = u.sup_bound();
    let scale = if sup.is_finite() { sup } else { u.evaluate(x).abs().max(1.0) };
    let noise_floor = 100.0 * f64::EPSILON * scale;
    let points: Vec<(f64, f64)> = ladder
        .iter()
        .zip(&results)
        .filter(|(_, e)| e.value.abs() > noise_floor)
        .map(|(r, e)| (r.ln(), e.value.abs().ln()))
        .collect();
    let residuals = results.iter().map(|e| e.value).collect();
    let error_estimates = results.iter().map(|e| e.error_estimate).collect();
    if points.len() < 2 {
        return Ok(OrderFit {
            radii: ladder.to_vec(),
            residuals,
            error_estimates,
            slope: None,
            intercept: None,
            fit_residual: 0.0,
            noise_floor,
            vacuous: true,
            pass: true,
        });
    }
    let (slope, intercept, rms) = least_squares(&points);
    Ok(OrderFit {
        radii: ladder.to_vec(),
        residuals,
        error_estimates,
        slope: Some(slope),
        intercept: Some(intercept),
        fit_residual: rms,
        noise_floor,
        vacuous: false,
        pass: slope >= ORDER_THRESHOLD,
    })
}

fn least_squares(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>() / n).sqrt();
    (slope, intercept, rms)
}

/// Halving ladder `r0, r0/2, ...` down to `r_min` inclusive.
pub fn halving_ladder(r0: f64, r_min: f64) -> Vec<f64> {
    let mut out = vec![r0];
    while *out.last().expect("nonempty") / 2.0 >= r_min * (1.0 - 1e-12) {
        let next = out.last().expect("nonempty") / 2.0;
        out.push(next);
    }
    out
}

/// One ladder entry: computed value against its limit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitRow {
    pub ladder: f64,
    pub computed: f64,
    pub target: f64,
    pub abs_error: f64,
    pub rel_error: f64,
}

impl LimitRow {
    fn new(ladder: f64, computed: f64, target: f64) -> Self {
        let abs_error = (computed - target).abs();
        let rel_error = if target != 0.0 { abs_error / target.abs() } else { abs_error };
        Self { ladder, computed, target, abs_error, rel_error }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitReport {
    pub rows: Vec<LimitRow>,
    /// Errors strictly decrease along the ladder.
    pub monotone: bool,
    pub final_rel_error: f64,
}

impl LimitReport {
    fn from_rows(rows: Vec<LimitRow>) -> Self {
        let monotone = rows.windows(2).all(|w| w[1].abs_error < w[0].abs_error || w[1].abs_error == 0.0);
        let final_rel_error = rows.last().map_or(0.0, |r| r.rel_error);
        Self { rows, monotone, final_rel_error }
    }

    /// Monotone decay and final relative error within `tol`.
    pub fn passes(&self, tol: f64) -> bool {
        self.monotone && self.final_rel_error <= tol
    }
}

/// Default `s -> 1` ladder.
pub const S_LADDER: [f64; 4] = [0.9, 0.99, 0.999, 0.9999];

fn check_ladder(ladder: &[f64]) -> Result<()> {
    if ladder.is_empty() {
        return Err(Error::BadParameter("empty s ladder".into()));
    }
    for &s in ladder {
        check_order(s)?;
    }
    Ok(())
}

/// `(1 - s) L u(x)` against `-1/2 <m, D^2 u(x)>`.
pub fn local_limit_operator(
    u: &dyn TestFunction,
    x: &[f64],
    measure: &SpectralMeasure,
    ladder: &[f64],
    quad: &QuadratureSpec,
) -> Result<LimitReport> {
    check_ladder(ladder)?;
    check_dims(u, x, measure)?;
    let m = measure.second_moment()?;
    let target = -0.5 * m.pair(&u.hessian(x));
    let rows = ladder
        .par_iter()
        .map(|&s| {
            let l = eval_operator(u, x, s, measure, 1.0, quad)?;
            Ok(LimitRow::new(s, (1.0 - s) * l.value, target))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LimitReport::from_rows(rows))
}

/// `(2 Lambda)^{-1} int (u(x + r omega) + u(x - r omega)) da`.
pub fn spherical_average(u: &dyn TestFunction, x: &[f64], r: f64, measure: &SpectralMeasure, resolution: usize) -> Result<f64> {
    check_dims(u, x, measure)?;
    let mass = measure.total_mass()?;
    let mut y = vec![0.0; x.len()];
    let mut total = 0.0;
    for atom in measure.nodes(resolution)? {
        for (yi, d) in y.iter_mut().zip(&atom.direction) {
            *yi = r * d;
        }
        total += atom.weight * u.pair_sum(x, &y);
    }
    Ok(total / (2.0 * mass))
}

/// `M^s_r u(x)` against the symmetric spherical average at radius `r`.
pub fn local_limit_mean(
    u: &dyn TestFunction,
    x: &[f64],
    r: f64,
    measure: &SpectralMeasure,
    ladder: &[f64],
    quad: &QuadratureSpec,
) -> Result<LimitReport> {
    check_ladder(ladder)?;
    let target = spherical_average(u, x, r, measure, 2 * quad.sphere_resolution)?;
    let rows = ladder
        .par_iter()
        .map(|&s| {
            let params = MeanKernel::new(r, s, measure)?;
            let m = mean_value(u, x, &params, quad)?;
            Ok(LimitRow::new(s, m.value, target))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LimitReport::from_rows(rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodTag {
    TensorQuadrature,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SeminormMethod {
    TensorQuadrature,
    MonteCarlo { samples: usize, seed: u64 },
}

/// Resolution of the `x`-grid and radial rules for seminorm integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeminormSpec {
    /// Gauss-Legendre nodes per `x`-panel in each coordinate.
    pub grid_nodes: usize,
    pub quad: QuadratureSpec,
}

impl Default for SeminormSpec {
    fn default() -> Self {
        Self { grid_nodes: 8, quad: QuadratureSpec { jacobi_nodes: 20, panel_nodes: 10, sphere_resolution: 16, tail_cap: None } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeminormResult {
    /// The seminorm itself.
    pub value: f64,
    /// Its square, the quantity that is actually integrated.
    pub squared: f64,
    pub method: MethodTag,
    /// Error estimate for `squared`.
    pub error_estimate: f64,
    /// Estimated contribution of the region outside the `x`-grid.
    pub truncation_estimate: f64,
}

impl SeminormResult {
    fn new(squared: f64, method: MethodTag, error_estimate: f64, truncation_estimate: f64) -> Self {
        let squared = squared.max(0.0);
        Self { value: squared.sqrt(), squared, method, error_estimate, truncation_estimate }
    }
}

/// Gaussian widths kept on each side of the centre by the `x`-grid.
pub const GAUSSIAN_GRID_WIDTHS: f64 = 6.0;

/// Axis box containing the (effective) support of `u`, with the estimated
/// `L^2` mass and gradient mass of `u` outside it.
#[derive(Debug, Clone)]
struct SupportBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
    outside_mass: f64,
    outside_gradient: f64,
}

impl SupportBox {
    fn of(u: &dyn TestFunction) -> Result<Self> {
        match u.far_field() {
            FarField::Compact { center, radius } => Ok(Self {
                lo: center.iter().map(|c| c - radius).collect(),
                hi: center.iter().map(|c| c + radius).collect(),
                outside_mass: 0.0,
                outside_gradient: 0.0,
            }),
            FarField::Gaussian { center, width } => {
                let n = center.len() as f64;
                let k = GAUSSIAN_GRID_WIDTHS;
                let a = u.sup_bound();
                // int over {|x_i - c_i| > k w for some i} of a^2 e^{-|x-c|^2/w^2}
                let mass = a * a * (std::f64::consts::PI.sqrt() * width).powf(n) * n * statrs::function::erf::erfc(k);
                Ok(Self {
                    lo: center.iter().map(|c| c - k * width).collect(),
                    hi: center.iter().map(|c| c + k * width).collect(),
                    outside_mass: mass,
                    outside_gradient: mass * (2.0 * k * k + n) / (width * width),
                })
            }
            FarField::PlaneWave { .. } | FarField::Unbounded => Err(Error::UnboundedSupport),
        }
    }

    fn grown(&self, margin: f64) -> Self {
        Self {
            lo: self.lo.iter().map(|v| v - margin).collect(),
            hi: self.hi.iter().map(|v| v + margin).collect(),
            ..self.clone()
        }
    }

    fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    fn diameter(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt()
    }

    /// Tensor Gauss-Legendre grid with panels no wider than `panel`.
    fn grid(&self, panel: f64, nodes: usize) -> Result<Grid> {
        let rule = gauss_legendre(nodes)?;
        let axes: Vec<Vec<(f64, f64)>> = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(&a, &b)| {
                let count = ((b - a) / panel).ceil().max(1.0) as usize;
                let h = (b - a) / count as f64;
                (0..count)
                    .flat_map(|j| rule.iter().map(move |(t, w)| (a + h * (j as f64 + t), w * h)).collect::<Vec<_>>())
                    .collect()
            })
            .collect();
        let total: usize = axes.iter().map(Vec::len).product();
        if total > 20_000_000 {
            return Err(Error::BadParameter(format!("x-grid of {total} points is too large")));
        }
        let mut points = Vec::with_capacity(total * axes.len());
        let mut weights = Vec::with_capacity(total);
        let mut index = vec![0usize; axes.len()];
        for _ in 0..total {
            let mut w = 1.0;
            for (d, axis) in axes.iter().enumerate() {
                points.push(axis[index[d]].0);
                w *= axis[index[d]].1;
            }
            weights.push(w);
            for d in (0..axes.len()).rev() {
                index[d] += 1;
                if index[d] < axes[d].len() {
                    break;
                }
                index[d] = 0;
            }
        }
        Ok(Grid { dim: axes.len(), points, weights })
    }
}

struct Grid {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl Grid {
    fn sum<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> f64 {
        self.points.chunks(self.dim).zip(&self.weights).map(|(x, w)| w * f(x)).sum()
    }

    /// `int (u(x) - u(x + y))^2 dx`.
    fn squared_increment(&self, u: &dyn TestFunction, y: &[f64]) -> f64 {
        let mut shifted = vec![0.0; self.dim];
        self.sum(|x| {
            for i in 0..x.len() {
                shifted[i] = x[i] + y[i];
            }
            let d = u.evaluate(x) - u.evaluate(&shifted);
            d * d
        })
    }

    /// `int u(x) u(x + y) dx`.
    fn correlation(&self, u: &dyn TestFunction, y: &[f64]) -> f64 {
        let mut shifted = vec![0.0; self.dim];
        self.sum(|x| {
            let ux = u.evaluate(x);
            if ux == 0.0 {
                return 0.0;
            }
            for i in 0..x.len() {
                shifted[i] = x[i] + y[i];
            }
            ux * u.evaluate(&shifted)
        })
    }
}

/// `[u]^2_{H^s_a} = int dx int_R d rho int da (u(x) - u(x + rho omega))^2 / |rho|^{1+2s}`.
pub fn hs_seminorm(u: &dyn TestFunction, s: f64, measure: &SpectralMeasure, method: SeminormMethod, spec: &SeminormSpec) -> Result<SeminormResult> {
    check_order(s)?;
    if u.dim() != measure.dim() {
        return Err(Error::DimensionMismatch { expected: measure.dim(), found: u.dim() });
    }
    let mass = measure.total_mass()?;
    let support = SupportBox::of(u)?;
    let rho0 = u.length_scale();
    let truncation = 2.0
        * mass
        * (support.outside_gradient * rho0.powf(2.0 - 2.0 * s) / (2.0 - 2.0 * s)
            + 4.0 * support.outside_mass * rho0.powf(-2.0 * s) / (2.0 * s));
    match method {
        SeminormMethod::TensorQuadrature => {
            let [coarse, fine] = spec.quad.levels();
            let a = hs_tensor(u, s, measure, &support, rho0, coarse, spec.grid_nodes)?;
            let b = hs_tensor(u, s, measure, &support, rho0, fine, spec.grid_nodes + spec.grid_nodes / 2)?;
            Ok(SeminormResult::new(finite(b, "seminorm")?, MethodTag::TensorQuadrature, (a - b).abs() + truncation, truncation))
        }
        SeminormMethod::MonteCarlo { samples, seed } => {
            let (mean, stderr) = hs_monte_carlo(u, s, measure, &support, rho0, samples, seed)?;
            Ok(SeminormResult::new(finite(mean, "seminorm")?, MethodTag::MonteCarlo, stderr + truncation, truncation))
        }
    }
}

fn hs_tensor(
    u: &dyn TestFunction,
    s: f64,
    measure: &SpectralMeasure,
    support: &SupportBox,
    rho0: f64,
    level: Level,
    grid_nodes: usize,
) -> Result<f64> {
    let panel = 0.5 * u.length_scale();
    let wide = support.grown(rho0).grid(panel, grid_nodes)?;
    let narrow = support.grid(panel, grid_nodes)?;
    let norm2 = narrow.sum(|x| u.evaluate(x).powi(2));
    let near = JacobiRule::cached(0.0, 1.0 - 2.0 * s, level.jacobi)?;
    let reach = support.diameter().max(rho0);
    let cuts = breakpoints(rho0, reach, 0.0, panel, (0.0, reach))?;
    let p = 1.0 + 2.0 * s;
    let nodes: Vec<Atom> = measure.nodes(level.sphere)?;
    let per_direction: Vec<f64> = nodes
        .par_iter()
        .map(|atom| {
            let dir = &atom.direction;
            let at = |rho: f64| dir.iter().map(|d| rho * d).collect::<Vec<f64>>();
            let inner = rho0.powf(2.0 - 2.0 * s)
                * near.integrate(|t| {
                    let rho = rho0 * t;
                    wide.squared_increment(u, &at(rho)) / (rho * rho)
                });
            // D(y) = 2 |u|^2 - 2 A(y), with A vanishing beyond the support diameter.
            let outer = 2.0 * norm2 * rho0.powf(-2.0 * s) / (2.0 * s)
                - 2.0 * composite(&cuts, level.panel, |rho| narrow.correlation(u, &at(rho)) * rho.powf(-p))?;
            Ok(atom.weight * (inner + outer))
        })
        .collect::<Result<_>>()?;
    Ok(2.0 * per_direction.iter().sum::<f64>())
}

const MC_CHUNK: usize = 4096;

/// Importance-sampled `[u]^2`: half the draws on `rho < rho0` with density
/// proportional to `rho^{1-2s}`, half on `rho > rho0` with a Pareto law.
fn hs_monte_carlo(
    u: &dyn TestFunction,
    s: f64,
    measure: &SpectralMeasure,
    support: &SupportBox,
    rho0: f64,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if samples < 2 {
        return Err(Error::BadParameter("Monte Carlo needs at least two samples".into()));
    }
    let mass = measure.total_mass()?;
    let sampler = measure.sampler()?;
    let wide = support.grown(rho0);
    let (vw, vn) = (wide.volume(), support.volume());
    let n = support.lo.len();
    let half = samples / 2;
    let chunks = half.div_ceil(MC_CHUNK);
    let sums: Vec<[f64; 4]> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let count = MC_CHUNK.min(half - c * MC_CHUNK);
            let mut acc = [0.0; 4];
            let mut x = vec![0.0; n];
            let mut xs = vec![0.0; n];
            for _ in 0..count {
                // rho < rho0
                for ((xi, lo), hi) in x.iter_mut().zip(&wide.lo).zip(&wide.hi) {
                    *xi = lo + (hi - lo) * rng.random::<f64>();
                }
                let dir = sampler.sample(&mut rng);
                let rho = rho0 * rng.random::<f64>().powf(1.0 / (2.0 - 2.0 * s));
                for i in 0..n {
                    xs[i] = x[i] + rho * dir[i];
                }
                let d = u.evaluate(&x) - u.evaluate(&xs);
                let v = if rho > 0.0 {
                    2.0 * mass * vw * d * d / (rho * rho) * rho0.powf(2.0 - 2.0 * s) / (2.0 - 2.0 * s)
                } else {
                    0.0
                };
                acc[0] += v;
                acc[1] += v * v;
                // rho > rho0
                for ((xi, lo), hi) in x.iter_mut().zip(&support.lo).zip(&support.hi) {
                    *xi = lo + (hi - lo) * rng.random::<f64>();
                }
                let dir = sampler.sample(&mut rng);
                let rho = rho0 * (1.0 - rng.random::<f64>()).powf(-0.5 / s);
                for i in 0..n {
                    xs[i] = x[i] + rho * dir[i];
                }
                let ux = u.evaluate(&x);
                let v = 2.0 * mass * vn * 2.0 * ux * (ux - u.evaluate(&xs)) * rho0.powf(-2.0 * s) / (2.0 * s);
                acc[2] += v;
                acc[3] += v * v;
            }
            acc
        })
        .collect();
    let mut total = [0.0; 4];
    for a in &sums {
        for i in 0..4 {
            total[i] += a[i];
        }
    }
    let m = half as f64;
    let mean_in = total[0] / m;
    let mean_out = total[2] / m;
    let var_in = (total[1] / m - mean_in * mean_in).max(0.0) * m / (m - 1.0);
    let var_out = (total[3] / m - mean_out * mean_out).max(0.0) * m / (m - 1.0);
    Ok((mean_in + mean_out, (var_in / m + var_out / m).sqrt()))
}

/// `[u]^2_{H^1_a} = int dx int da (grad u . omega)^2 = int <m, grad u grad u^T> dx`.
pub fn h1_seminorm(u: &dyn TestFunction, measure: &SpectralMeasure, spec: &SeminormSpec) -> Result<SeminormResult> {
    if u.dim() != measure.dim() {
        return Err(Error::DimensionMismatch { expected: measure.dim(), found: u.dim() });
    }
    measure.total_mass()?;
    let m = measure.second_moment()?;
    let support = SupportBox::of(u)?;
    let panel = 0.5 * u.length_scale();
    let integrate = |nodes: usize| -> Result<f64> {
        let grid = support.grid(panel, nodes)?;
        Ok(grid.sum(|x| {
            let g = u.gradient(x);
            let mut q = 0.0;
            for i in 0..g.len() {
                for j in 0..g.len() {
                    q += m.0[(i, j)] * g[i] * g[j];
                }
            }
            q
        }))
    };
    let a = integrate(spec.grid_nodes)?;
    let b = integrate(spec.grid_nodes + spec.grid_nodes / 2)?;
    let truncation = m.0.amax() * support.outside_gradient;
    Ok(SeminormResult::new(b, MethodTag::TensorQuadrature, (a - b).abs() + truncation, truncation))
}

/// `|u|^2_{L^2}` on the same grid.
pub fn l2_norm_squared(u: &dyn TestFunction, spec: &SeminormSpec) -> Result<f64> {
    let support = SupportBox::of(u)?;
    let grid = support.grid(0.5 * u.length_scale(), spec.grid_nodes + spec.grid_nodes / 2)?;
    Ok(grid.sum(|x| u.evaluate(x).powi(2)))
}

/// `E(u) = [u]^2_{H^s_a} / 4`.
pub fn energy(u: &dyn TestFunction, s: f64, measure: &SpectralMeasure, spec: &SeminormSpec) -> Result<f64> {
    Ok(hs_seminorm(u, s, measure, SeminormMethod::TensorQuadrature, spec)?.squared / 4.0)
}

/// Default `s` grid for the uniform bound check.
pub const UNIFORM_BOUND_GRID: [f64; 5] = [0.55, 0.65, 0.75, 0.85, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub s: f64,
    /// `(1 - s) [u]^2_{H^s_a} / |u|^2_{H^1_a}`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BbmReport {
    /// `(1 - s) [u]^2_{H^s_a}` against `[u]^2_{H^1_a}`.
    pub limit: LimitReport,
    pub bound: Vec<BoundRow>,
    /// Largest observed ratio on the bound grid.
    pub empirical_constant: f64,
    /// `max(1, 4 Lambda)`: splitting the `rho` integral at 1 bounds every
    /// ratio by this for `s > 1/2`.
    pub reference_constant: f64,
    pub bounded: bool,
    pub h1_squared: f64,
    /// `|u|_{H^1_a} = [u]_{H^1_a} + |u|_{L^2}`.
    pub h1_norm: f64,
}

pub fn bbm_check(
    u: &dyn TestFunction,
    measure: &SpectralMeasure,
    ladder: &[f64],
    bound_grid: &[f64],
    spec: &SeminormSpec,
) -> Result<BbmReport> {
    check_ladder(ladder)?;
    for &s in bound_grid {
        check_order(s)?;
    }
    let mass = measure.total_mass()?;
    let h1 = h1_seminorm(u, measure, spec)?;
    let l2 = l2_norm_squared(u, spec)?;
    let h1_norm = h1.value + l2.sqrt();
    let scaled = |s: f64| -> Result<f64> {
        Ok((1.0 - s) * hs_seminorm(u, s, measure, SeminormMethod::TensorQuadrature, spec)?.squared)
    };
    let rows = ladder
        .par_iter()
        .map(|&s| Ok(LimitRow::new(s, scaled(s)?, h1.squared)))
        .collect::<Result<Vec<_>>>()?;
    let bound = bound_grid
        .par_iter()
        .map(|&s| {
            let v = scaled(s)?;
            Ok(BoundRow { s, ratio: if h1_norm > 0.0 { v / (h1_norm * h1_norm) } else { 0.0 } })
        })
        .collect::<Result<Vec<_>>>()?;
    let empirical_constant = bound.iter().map(|b| b.ratio).fold(0.0, f64::max);
    let reference_constant = (4.0 * mass).max(1.0);
    Ok(BbmReport {
        limit: LimitReport::from_rows(rows),
        bounded: bound.iter().all(|b| b.ratio.is_finite() && b.ratio <= reference_constant),
        bound,
        empirical_constant,
        reference_constant,
        h1_squared: h1.squared,
        h1_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcs::{parse_function, Affine, Gaussian};
    use approx::assert_relative_eq;
    use statrs::function::gamma::gamma;
    use std::f64::consts::PI;

    fn pm1() -> SpectralMeasure {
        SpectralMeasure::atomic(1, vec![(vec![1.0], 1.0), (vec![-1.0], 1.0)]).unwrap()
    }

    #[test]
    fn fused_residual_matches_composition() {
        let m = SpectralMeasure::uniform(2).unwrap();
        let q = QuadratureSpec::default();
        for f in ["gaussian:center=0.1,0.2;width=0.8", "bump:center=0,0;radius=1", "plane-wave-cos:k=1,0.5;phase=0.2"] {
            let u = parse_function(f, None).unwrap();
            for r in [0.3, 0.1] {
                let a = expansion_residual(u.as_ref(), &[0.05, -0.1], r, 0.4, &m, &q).unwrap();
                let b = expansion_residual_composed(u.as_ref(), &[0.05, -0.1], r, 0.4, &m, &q).unwrap();
                assert!((a.value - b.value).abs() < 1e-9, "{f} r={r}: {} vs {}", a.value, b.value);
            }
        }
    }

    #[test]
    fn residual_trivial_cases() {
        let m = SpectralMeasure::uniform(2).unwrap();
        let q = QuadratureSpec::default();
        let one = Affine::constant(2, 1.0);
        assert!(expansion_residual(&one, &[0.0, 0.0], 0.1, 0.5, &m, &q).unwrap().value.abs() < 1e-12);
        let lin = Affine::linear(vec![1.0, 2.0], -1.0);
        assert!(expansion_residual(&lin, &[0.3, 0.0], 0.1, 0.5, &m, &q).unwrap().value.abs() < 1e-12);
        let fit = fit_expansion_order(&one, &[0.0, 0.0], 0.5, &m, &halving_ladder(0.1, 0.00625), &q).unwrap();
        assert!(fit.vacuous && fit.pass);
    }

    #[test]
    fn gaussian_residual_order() {
        let m = SpectralMeasure::uniform(2).unwrap();
        let g = Gaussian::new(vec![0.0, 0.0], 1.0).unwrap();
        let fit = fit_expansion_order(&g, &[0.0, 0.0], 0.5, &m, &halving_ladder(0.1, 0.00625), &QuadratureSpec::default()).unwrap();
        assert!(fit.pass, "{fit:?}");
        let slope = fit.slope.unwrap();
        assert!((slope - 3.0).abs() < 0.1, "slope {slope}");
    }

    #[test]
    fn local_limits() {
        let q = QuadratureSpec::default();
        let g = Gaussian::new(vec![0.0, 0.0], 1.0).unwrap();
        let rep = local_limit_operator(&g, &[0.0, 0.0], &SpectralMeasure::uniform(2).unwrap(), &S_LADDER, &q).unwrap();
        assert_relative_eq!(rep.rows[0].target, PI, max_relative = 1e-14);
        assert!(rep.passes(1e-2), "{rep:?}");
        let atoms = SpectralMeasure::atomic(2, vec![(vec![1.0, 0.0], 1.0), (vec![-1.0, 0.0], 1.0)]).unwrap();
        let rep = local_limit_operator(&g, &[0.0, 0.0], &atoms, &S_LADDER, &q).unwrap();
        assert_relative_eq!(rep.rows[0].target, 1.0, max_relative = 1e-14);
        assert!(rep.passes(1e-2), "{rep:?}");

        let rep = local_limit_mean(&g, &[0.0, 0.0], 0.5, &SpectralMeasure::uniform(2).unwrap(), &S_LADDER, &q).unwrap();
        assert!(rep.passes(1e-2), "{rep:?}");
    }

    #[test]
    fn gaussian_seminorms_in_one_dimension() {
        let g = Gaussian::new(vec![0.0], 1.0).unwrap();
        let spec = SeminormSpec::default();
        let h1 = h1_seminorm(&g, &pm1(), &spec).unwrap();
        assert_relative_eq!(h1.squared, PI.sqrt(), max_relative = 1e-10);
        for s in [0.3, 0.5, 0.8] {
            let k = crate::operator::symbol_constant_closed_form(s);
            let exact = 4.0 * k * gamma(s + 0.5);
            let hs = hs_seminorm(&g, s, &pm1(), SeminormMethod::TensorQuadrature, &spec).unwrap();
            assert_relative_eq!(hs.squared, exact, max_relative = 1e-8);
            assert_relative_eq!(energy(&g, s, &pm1(), &spec).unwrap(), hs.squared / 4.0);
        }
    }

    #[test]
    fn monte_carlo_agrees_with_tensor() {
        let g = Gaussian::new(vec![0.0], 1.0).unwrap();
        let spec = SeminormSpec::default();
        let t = hs_seminorm(&g, 0.5, &pm1(), SeminormMethod::TensorQuadrature, &spec).unwrap();
        let mc = hs_seminorm(&g, 0.5, &pm1(), SeminormMethod::MonteCarlo { samples: 400_000, seed: 3 }, &spec).unwrap();
        assert!((t.squared - mc.squared).abs() < 3.0 * mc.error_estimate, "{t:?} {mc:?}");
        let again = hs_seminorm(&g, 0.5, &pm1(), SeminormMethod::MonteCarlo { samples: 400_000, seed: 3 }, &spec).unwrap();
        assert_eq!(mc.squared.to_bits(), again.squared.to_bits());
    }

    #[test]
    fn unbounded_support_is_rejected() {
        let u = parse_function("cos:k=1", None).unwrap();
        assert_eq!(
            hs_seminorm(u.as_ref(), 0.5, &pm1(), SeminormMethod::TensorQuadrature, &SeminormSpec::default()).unwrap_err(),
            Error::UnboundedSupport
        );
    }
}
