//! Radial integration helpers shared by the operator, the mean kernel and
//! the expansion residual.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::funcs::{FarField, TestFunction};
use crate::measure::{Atom, MeasureKind, SpectralMeasure};
use crate::quadrature::{gauss_legendre, split_sphere_rule};

const MAX_PANELS: usize = 20_000;

/// Gaussian tails beyond this many widths are below double precision.
pub(crate) const GAUSSIAN_REACH: f64 = 8.6;

/// Where `rho -> u(x +- rho omega)` can be nonzero, seen from `x`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Reach {
    /// `u(x +- rho omega) = 0` for `rho > hi`; features live in `[lo, hi]`.
    Finite { lo: f64, hi: f64 },
    Wave { wavevector: Vec<f64> },
    Unbounded,
}

pub(crate) fn reach(u: &dyn TestFunction, x: &[f64]) -> Reach {
    let dist = |c: &[f64]| x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    match u.far_field() {
        FarField::Compact { center, radius } => {
            let d = dist(&center);
            Reach::Finite { lo: (d - radius).max(0.0), hi: d + radius }
        }
        FarField::Gaussian { center, width } => {
            let d = dist(&center);
            Reach::Finite { lo: (d - GAUSSIAN_REACH * width).max(0.0), hi: d + GAUSSIAN_REACH * width }
        }
        FarField::PlaneWave { wavevector, .. } => Reach::Wave { wavevector },
        FarField::Unbounded => Reach::Unbounded,
    }
}

/// Angular nodes for `measure`. A plane wave seen through the uniform
/// measure has a `|k . omega|^{2s}` kink, so the sphere is split there.
pub(crate) fn angular_nodes(measure: &SpectralMeasure, far: &Reach, resolution: usize) -> Result<Vec<Atom>> {
    match (measure.kind(), far) {
        (MeasureKind::Uniform, Reach::Wave { wavevector }) if measure.dim() >= 2 && wavevector.iter().any(|k| *k != 0.0) => {
            let rule = split_sphere_rule(wavevector, resolution.max(2))?;
            Ok(rule
                .directions()
                .iter()
                .zip(rule.weights())
                .map(|(d, &w)| Atom { direction: d.clone(), weight: w })
                .collect())
        }
        _ => measure.nodes(resolution),
    }
}

/// Panel breakpoints on `[start, end]` for an integrand singular at `sing`
/// (`sing < start`): each panel is no wider than its distance to `sing`,
/// and no wider than `feature` where it meets `[zone_lo, zone_hi]`.
pub(crate) fn breakpoints(start: f64, end: f64, sing: f64, feature: f64, zone: (f64, f64)) -> Result<Vec<f64>> {
    let mut out = vec![start];
    let mut a = start;
    while a < end {
        let mut w = a - sing;
        let in_zone = a + w > zone.0 && a < zone.1;
        if in_zone {
            w = w.min(feature);
        }
        let mut b = a + w;
        if a < zone.0 && b > zone.0 {
            b = zone.0;
        }
        if b >= end || (end - b) < 1e-12 * end {
            b = end;
        }
        out.push(b);
        a = b;
        if out.len() > MAX_PANELS {
            return Err(Error::BadParameter(format!(
                "radial grid on [{start}, {end}] needs more than {MAX_PANELS} panels"
            )));
        }
    }
    Ok(out)
}

/// Composite Gauss-Legendre sum over consecutive breakpoints.
pub(crate) fn composite<F: FnMut(f64) -> f64>(cuts: &[f64], nodes: usize, mut f: F) -> Result<f64> {
    let rule = gauss_legendre(nodes)?;
    let mut total = 0.0;
    for pair in cuts.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let h = b - a;
        let mut panel = 0.0;
        for (t, w) in rule.iter() {
            panel += w * f(a + h * t);
        }
        total += h * panel;
    }
    Ok(total)
}

/// `int_start^inf cos(q rho) rho^{-p} d rho` for `start > 0`, `q >= 0`, `p > 1`.
pub(crate) fn cos_tail(start: f64, q: f64, p: f64) -> Result<f64> {
    let scale = start.powf(1.0 - p);
    if q == 0.0 {
        return Ok(scale / (p - 1.0));
    }
    Ok(scale * unit_cos_tail(q * start, p)?)
}

/// `J(a, p) = int_1^inf cos(a tau) tau^{-p} d tau`.
fn unit_cos_tail(a: f64, p: f64) -> Result<f64> {
    let rule = gauss_legendre(20)?;
    let panel = |lo: f64, hi: f64| -> f64 {
        let h = hi - lo;
        rule.iter().map(|(t, w)| {
            let tau = lo + h * t;
            w * (a * tau).cos() * tau.powf(-p)
        }).sum::<f64>() * h
    };
    let mut sum = 0.0;
    let mut tau = 1.0;
    // Geometric panels until the first half period, then half periods.
    let first = PI / a;
    while tau < first {
        let next = (2.0 * tau).min(first);
        sum += panel(tau, next);
        tau = next;
        if tau.powf(1.0 - p) / (p - 1.0) < 1e-30 * sum.abs() {
            return Ok(sum);
        }
    }
    let big = 64.0_f64.max(p + 60.0);
    let step = first;
    while a * tau < big {
        sum += panel(tau, tau + step);
        tau += step;
    }
    // int_A^inf e^{it} t^{-p} dt = i e^{iA} A^{-p} sum_k (p)_k (-i/A)^k, A = a tau.
    let big_a = a * tau;
    let (mut re, mut im) = (1.0, 0.0);
    let (mut tr, mut ti) = (1.0_f64, 0.0_f64);
    let mut last = f64::INFINITY;
    for k in 0..200 {
        let f = (p + k as f64) / big_a;
        if f >= 1.0 || tr.abs() + ti.abs() > last {
            break;
        }
        last = tr.abs() + ti.abs();
        // term *= -i f
        let (nr, ni) = (ti * f, -tr * f);
        tr = nr;
        ti = ni;
        re += tr;
        im += ti;
        if (tr.abs() + ti.abs()) < 1e-18 {
            break;
        }
    }
    // i e^{iA} (re + i im), real part.
    let (c, s) = (big_a.cos(), big_a.sin());
    let real = -(s * re + c * im);
    // back to tau: int_T^inf cos(a tau) tau^{-p} = a^{p-1} int_A^inf cos t t^{-p} dt = T^{-p} / a * (...)
    sum += tau.powf(-p) / a * real;
    Ok(sum)
}

/// Pochhammer-series terms `(s)_k / k!` for `k = 0, 1, ...`.
pub(crate) struct RisingRatio {
    s: f64,
    k: usize,
    value: f64,
}

impl RisingRatio {
    pub(crate) fn new(s: f64) -> Self {
        Self { s, k: 0, value: 1.0 }
    }
}

impl Iterator for RisingRatio {
    type Item = (usize, f64);
    fn next(&mut self) -> Option<(usize, f64)> {
        let out = (self.k, self.value);
        self.value *= (self.s + self.k as f64) / (self.k + 1) as f64;
        self.k += 1;
        Some(out)
    }
}

/// `int_R^inf r^{2s} rho^{-1-2s} (1 - r^2/rho^2)^{-s} d rho` with
/// `z = (r/R)^2 <= 1/4`, summed termwise; `skip_leading` drops the
/// `r^{2s} rho^{-1-2s}` term.
pub(crate) fn kernel_tail(z: f64, s: f64, skip_leading: bool) -> f64 {
    let mut total = 0.0;
    for (k, c) in RisingRatio::new(s) {
        if k == 0 && skip_leading {
            continue;
        }
        let term = 0.5 * c * z.powf(k as f64 + s) / (k as f64 + s);
        total += term;
        if term.abs() < 1e-18 * total.abs() || k > 400 {
            break;
        }
    }
    total
}

/// `int_R^inf cos(q rho) r^{2s} rho^{-1-2s} (1 - r^2/rho^2)^{-s} d rho` by
/// expanding the kernel in powers of `(r/rho)^2`; `skip_leading` as in
/// [`kernel_tail`].
pub(crate) fn wave_kernel_tail(r: f64, big_r: f64, q: f64, s: f64, skip_leading: bool) -> Result<f64> {
    let z = (r / big_r).powi(2);
    let mut total = 0.0;
    for (k, c) in RisingRatio::new(s) {
        if k == 0 && skip_leading {
            continue;
        }
        let p = 1.0 + 2.0 * s + 2.0 * k as f64;
        // r^{2s + 2k} int_R^inf cos(q rho) rho^{-p} = (r/R)^{2s + 2k} J(q R, p)
        let unit = if q == 0.0 { 1.0 / (p - 1.0) } else { unit_cos_tail(q * big_r, p)? };
        let term = c * z.powf(s + k as f64) * unit;
        total += term;
        if c * z.powf(s + k as f64) < 1e-18 * total.abs().max(f64::MIN_POSITIVE) || k > 400 {
            break;
        }
    }
    Ok(total)
}
