//! The anisotropic nonlocal operator
//! `L u(x) = int_0^inf d rho int da(omega) delta(u, x, rho omega) / rho^{1+2s}`
//! and its Fourier symbol.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Mutex, OnceLock};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::funcs::TestFunction;
use crate::measure::SpectralMeasure;
use crate::quadrature::{integrate_adaptive, JacobiRule};
use crate::radial::{angular_nodes, breakpoints, composite, cos_tail, reach, Reach};

/// Radial and spherical resolution. Each evaluation runs at this level and
/// at twice the resolution; the finer result is reported and the difference
/// is the error estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadratureSpec {
    /// Gauss-Jacobi nodes for endpoint-singular pieces.
    pub jacobi_nodes: usize,
    /// Gauss-Legendre nodes per radial panel.
    pub panel_nodes: usize,
    /// Sphere rule resolution for uniform measures.
    pub sphere_resolution: usize,
    /// Optional cap `R` on the radial integral; the dropped tail is bounded
    /// by `2 |u|_inf Lambda R^{-2s} / s`.
    pub tail_cap: Option<f64>,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self { jacobi_nodes: 24, panel_nodes: 12, sphere_resolution: 32, tail_cap: None }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Level {
    pub jacobi: usize,
    pub panel: usize,
    pub sphere: usize,
}

impl QuadratureSpec {
    pub(crate) fn levels(&self) -> [Level; 2] {
        let coarse = Level { jacobi: self.jacobi_nodes, panel: self.panel_nodes, sphere: self.sphere_resolution };
        let fine = Level { jacobi: 2 * self.jacobi_nodes, panel: 2 * self.panel_nodes, sphere: 2 * self.sphere_resolution };
        [coarse, fine]
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.jacobi_nodes == 0 || self.panel_nodes == 0 || self.sphere_resolution == 0 {
            return Err(Error::BadParameter("quadrature sizes must be positive".into()));
        }
        if let Some(cap) = self.tail_cap {
            if !(cap > 0.0) {
                return Err(Error::BadParameter(format!("tail cap {cap} must be positive")));
            }
        }
        Ok(())
    }
}

/// Breakdown of an operator evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Pieces {
    /// `int_0^{rho_0}`.
    pub inner: f64,
    /// `int_{rho_0}^inf`, or up to the cap when one is set.
    pub tail: f64,
    /// Bound on the part dropped by a tail cap (zero without a cap).
    pub truncation_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    pub value: f64,
    pub error_estimate: f64,
    pub pieces: Pieces,
}

/// `delta(u, x, y) = 2 u(x) - u(x - y) - u(x + y)`.
pub fn second_difference(u: &dyn TestFunction, x: &[f64], y: &[f64]) -> f64 {
    u.second_difference(x, y)
}

pub(crate) fn check_order(s: f64) -> Result<()> {
    if s > 0.0 && s < 1.0 {
        Ok(())
    } else {
        Err(Error::BadParameter(format!("s = {s} must lie in (0, 1)")))
    }
}

pub(crate) fn check_dims(u: &dyn TestFunction, x: &[f64], measure: &SpectralMeasure) -> Result<()> {
    if u.dim() != measure.dim() {
        return Err(Error::DimensionMismatch { expected: measure.dim(), found: u.dim() });
    }
    if x.len() != measure.dim() {
        return Err(Error::DimensionMismatch { expected: measure.dim(), found: x.len() });
    }
    Ok(())
}

pub(crate) fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonfiniteValue(what.to_string()))
    }
}

/// Evaluates `L u(x)` with the radial integral split at `rho0`.
pub fn eval_operator(
    u: &dyn TestFunction,
    x: &[f64],
    s: f64,
    measure: &SpectralMeasure,
    rho0: f64,
    quad: &QuadratureSpec,
) -> Result<EvalResult> {
    check_order(s)?;
    check_dims(u, x, measure)?;
    quad.validate()?;
    if !(rho0 > 0.0) || !rho0.is_finite() {
        return Err(Error::BadParameter(format!("split radius {rho0} must be positive")));
    }
    let mass = measure.total_mass()?;
    if !u.c2_near(x) {
        return Err(Error::NotC2AtPoint);
    }
    let [coarse, fine] = quad.levels();
    let a = operator_pieces(u, x, s, measure, rho0, quad.tail_cap, coarse)?;
    let b = operator_pieces(u, x, s, measure, rho0, quad.tail_cap, fine)?;
    let truncation_bound = match quad.tail_cap {
        Some(cap) if cap > rho0 => 2.0 * u.sup_bound() * mass * cap.powf(-2.0 * s) / s,
        Some(_) => 2.0 * u.sup_bound() * mass * rho0.powf(-2.0 * s) / s,
        None => 0.0,
    };
    let value = finite(b.0 + b.1, "operator value")?;
    Ok(EvalResult {
        value,
        error_estimate: (a.0 - b.0).abs() + (a.1 - b.1).abs() + truncation_bound,
        pieces: Pieces { inner: b.0, tail: b.1, truncation_bound },
    })
}

/// `(inner, tail)` at one resolution level.
fn operator_pieces(
    u: &dyn TestFunction,
    x: &[f64],
    s: f64,
    measure: &SpectralMeasure,
    rho0: f64,
    cap: Option<f64>,
    level: Level,
) -> Result<(f64, f64)> {
    let ell = u.length_scale();
    let feature = 0.5 * ell;
    let far = reach(u, x);
    let nodes = angular_nodes(measure, &far, level.sphere)?;
    let zone = match far {
        Reach::Finite { lo, hi } => (lo, hi),
        _ => (0.0, f64::INFINITY),
    };
    let rho1 = rho0.min(ell);
    let near = JacobiRule::cached(0.0, 1.0 - 2.0 * s, level.jacobi)?;
    let inner_cuts = breakpoints(rho1, rho0, 0.0, feature, zone)?;
    let ux = u.evaluate(x);
    let p = 1.0 + 2.0 * s;

    let tail_cuts = match (cap, &far) {
        (Some(c), _) => Some(if c > rho0 { breakpoints(rho0, c, 0.0, feature, zone)? } else { vec![rho0] }),
        (None, Reach::Finite { hi, .. }) => Some(breakpoints(rho0, hi.max(rho0), 0.0, feature, zone)?),
        _ => None,
    };
    let far_rule = match (cap, &far) {
        (None, Reach::Unbounded) => Some(JacobiRule::cached(0.0, 2.0 * s - 1.0, level.jacobi)?),
        _ => None,
    };

    let mut y = vec![0.0; x.len()];
    let (mut inner, mut tail) = (0.0, 0.0);
    for atom in &nodes {
        let dir = &atom.direction;
        let mut delta = |rho: f64| {
            for i in 0..y.len() {
                y[i] = rho * dir[i];
            }
            u.second_difference(x, &y)
        };
        let head = rho1.powf(2.0 - 2.0 * s) * near.integrate(|t| {
            let rho = rho1 * t;
            delta(rho) / (rho * rho)
        });
        let body = composite(&inner_cuts, level.panel, |rho| delta(rho) * rho.powf(-p))?;
        let mut far_part = match &tail_cuts {
            Some(cuts) => composite(cuts, level.panel, |rho| delta(rho) * rho.powf(-p))?,
            None => 0.0,
        };
        if cap.is_none() {
            far_part += match &far {
                Reach::Finite { hi, .. } => 2.0 * ux * hi.max(rho0).powf(-2.0 * s) / (2.0 * s),
                Reach::Wave { wavevector } => {
                    let q = dir.iter().zip(wavevector).map(|(a, b)| a * b).sum::<f64>().abs();
                    if q == 0.0 {
                        0.0
                    } else {
                        2.0 * ux * (rho0.powf(-2.0 * s) / (2.0 * s) - cos_tail(rho0, q, p)?)
                    }
                }
                Reach::Unbounded => {
                    let rule = far_rule.as_ref().expect("tail rule");
                    rho0.powf(-2.0 * s) * rule.integrate(|v| delta(rho0 / v))
                }
            };
        }
        inner += atom.weight * (head + body);
        tail += atom.weight * far_part;
    }
    Ok((inner, tail))
}

/// `K(s) = 2 int_0^inf (1 - cos t) t^{-1-2s} dt`, so that `L cos(k . x)`
/// equals `K(s) int |k . omega|^{2s} da(omega) cos(k . x)`.
pub fn symbol_constant(s: f64) -> Result<f64> {
    check_order(s)?;
    static CACHE: OnceLock<Mutex<HashMap<u64, f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(v) = cache.lock().expect("symbol cache").get(&s.to_bits()) {
        return Ok(*v);
    }
    // int_0^1 (1 - cos t) t^{-1-2s} dt with t = v^m, m = 1/(2 - 2s), which
    // turns the weight t^{1-2s} dt into m dv.
    let m = 1.0 / (2.0 - 2.0 * s);
    let head = integrate_adaptive(
        |v: f64| {
            let t = v.powf(m);
            if t == 0.0 {
                return 0.5 * m;
            }
            let h = (0.5 * t).sin();
            m * 2.0 * h * h / (t * t)
        },
        0.0,
        1.0,
        1e-16,
        1e-15,
        2000,
    );
    // int_1^inf cos t t^{-1-2s} dt along t = 1 + iy.
    let p = 1.0 + 2.0 * s;
    let re = integrate_adaptive(
        |y: f64| (-y).exp() * num_complex::Complex64::new(1.0, y).powf(-p).re,
        0.0,
        60.0,
        1e-17,
        1e-15,
        2000,
    );
    let im = integrate_adaptive(
        |y: f64| (-y).exp() * num_complex::Complex64::new(1.0, y).powf(-p).im,
        0.0,
        60.0,
        1e-17,
        1e-15,
        2000,
    );
    let cos_part = -(1.0_f64.sin()) * re.value - 1.0_f64.cos() * im.value;
    let k = 2.0 * (head.value + 1.0 / (2.0 * s) - cos_part);
    cache.lock().expect("symbol cache").insert(s.to_bits(), k);
    Ok(k)
}

/// `psi(k) = K(s) int |k . omega|^{2s} da(omega)`.
pub fn symbol(k: &[f64], s: f64, measure: &SpectralMeasure) -> Result<f64> {
    let moment = measure.abs_moment(k, s, 2 * crate::measure::DEFAULT_SPHERE_RESOLUTION)?;
    Ok(symbol_constant(s)? * moment)
}

/// `K(s)` in closed form, `Gamma(1 - 2s) cos(pi s) / s`, with the limit
/// `pi` at `s = 1/2`.
pub fn symbol_constant_closed_form(s: f64) -> f64 {
    if (s - 0.5).abs() < 1e-12 {
        return PI;
    }
    statrs::function::gamma::gamma(1.0 - 2.0 * s) * (PI * s).cos() / s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcs::{parse_function, Affine, Gaussian, Indicator, PlaneWave};
    use approx::assert_relative_eq;
    use statrs::function::gamma::gamma;

    fn pm_e1() -> SpectralMeasure {
        SpectralMeasure::atomic(2, vec![(vec![1.0, 0.0], 1.0), (vec![-1.0, 0.0], 1.0)]).unwrap()
    }

    fn quad() -> QuadratureSpec {
        QuadratureSpec::default()
    }

    #[test]
    fn second_difference_examples() {
        let lin = Affine::linear(vec![1.0, -2.0], 0.5);
        assert_eq!(second_difference(&lin, &[0.3, 0.1], &[0.7, 0.2]), 0.0);
        let c = PlaneWave::new(vec![1.0, 2.0], 1.0, 0.0).unwrap();
        let y = [0.3, -0.4];
        assert_relative_eq!(second_difference(&c, &[0.0, 0.0], &y), 2.0 * (1.0 - (0.3_f64 - 0.8).cos()), max_relative = 1e-14);
        let g = Gaussian::new(vec![0.0, 0.0], 1.0).unwrap();
        assert_relative_eq!(second_difference(&g, &[0.0, 0.0], &[1.0, 0.0]), 2.0 - 2.0 * (-0.5_f64).exp(), max_relative = 1e-14);
    }

    #[test]
    fn constant_gives_zero() {
        let one = Affine::constant(2, 1.0);
        let r = eval_operator(&one, &[0.2, 0.3], 0.4, &SpectralMeasure::uniform(2).unwrap(), 1.0, &quad()).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.error_estimate, 0.0);
    }

    #[test]
    fn symbol_constant_matches_gamma_form() {
        for s in [0.05, 0.2, 0.3, 0.5, 0.7, 0.9, 0.99] {
            assert_relative_eq!(symbol_constant(s).unwrap(), symbol_constant_closed_form(s), max_relative = 1e-11);
        }
        assert_relative_eq!(symbol_constant(0.5).unwrap(), PI, max_relative = 1e-12);
    }

    #[test]
    fn plane_wave_matches_symbol() {
        let m = pm_e1();
        let u = PlaneWave::new(vec![1.0, 0.0], 1.0, 0.0).unwrap();
        let r = eval_operator(&u, &[0.0, 0.0], 0.5, &m, 1.0, &quad()).unwrap();
        assert!((r.value - 2.0 * PI).abs() < 1e-8_f64.max(3.0 * r.error_estimate));
        assert!((r.value - 2.0 * PI).abs() < 1e-10);

        let m = SpectralMeasure::atomic(2, vec![(vec![0.6, 0.8], 0.7), (vec![-0.6, -0.8], 0.7), (vec![0.0, 1.0], 0.3)]).unwrap();
        for s in [0.1, 0.3, 0.7, 0.95] {
            let u = PlaneWave::new(vec![2.0, -0.5], 1.5, 0.4).unwrap();
            let x = [0.3, -0.2];
            let r = eval_operator(&u, &x, s, &m, 1.0, &quad()).unwrap();
            let target = symbol(&[2.0, -0.5], s, &m).unwrap() * u.evaluate(&x);
            assert!((r.value - target).abs() < 1e-8_f64.max(3.0 * r.error_estimate), "s={s}: {} vs {target}", r.value);
        }
    }

    #[test]
    fn gaussian_closed_forms() {
        for s in [0.2, 0.5, 0.8] {
            let g = Gaussian::new(vec![0.0, 0.0], 1.0).unwrap();
            let exact = 4.0 * PI * 2f64.powf(-1.0 - s) * gamma(1.0 - s) / s;
            let r = eval_operator(&g, &[0.0, 0.0], s, &SpectralMeasure::uniform(2).unwrap(), 1.0, &quad()).unwrap();
            assert_relative_eq!(r.value, exact, max_relative = 1e-11);
            let r = eval_operator(&g, &[0.0, 0.0], s, &pm_e1(), 1.0, &quad()).unwrap();
            assert_relative_eq!(r.value, exact / PI, max_relative = 1e-11);
        }
    }

    #[test]
    fn split_radius_does_not_matter() {
        let g = parse_function("bump:center=0.2,0;radius=0.8", None).unwrap();
        let m = SpectralMeasure::uniform(2).unwrap();
        let a = eval_operator(g.as_ref(), &[0.1, 0.1], 0.6, &m, 1.0, &quad()).unwrap();
        let b = eval_operator(g.as_ref(), &[0.1, 0.1], 0.6, &m, 0.3, &quad()).unwrap();
        assert!((a.value - b.value).abs() < 1e-9 + a.error_estimate + b.error_estimate);
    }

    #[test]
    fn tail_cap_reports_bound() {
        let g = Gaussian::new(vec![0.0, 0.0], 1.0).unwrap();
        let m = pm_e1();
        let spec = QuadratureSpec { tail_cap: Some(20.0), ..quad() };
        let r = eval_operator(&g, &[0.0, 0.0], 0.5, &m, 1.0, &spec).unwrap();
        assert_relative_eq!(r.pieces.truncation_bound, 2.0 * 1.0 * 2.0 * 20f64.powf(-1.0) / 0.5);
        let full = eval_operator(&g, &[0.0, 0.0], 0.5, &m, 1.0, &quad()).unwrap();
        assert!((r.value - full.value).abs() <= r.error_estimate);
    }

    #[test]
    fn rejects_nonsmooth_points() {
        let f = Indicator::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let m = pm_e1();
        assert_eq!(eval_operator(&f, &[1.0, 0.0], 0.5, &m, 1.0, &quad()).unwrap_err(), Error::NotC2AtPoint);
        let null = SpectralMeasure::atomic(2, vec![(vec![1.0, 0.0], 0.0)]).unwrap();
        let g = Gaussian::new(vec![0.0, 0.0], 1.0).unwrap();
        assert_eq!(eval_operator(&g, &[0.0, 0.0], 0.5, &null, 1.0, &quad()).unwrap_err(), Error::NullMeasure);
    }

    #[test]
    fn symbol_properties() {
        let m = SpectralMeasure::uniform(2).unwrap();
        assert_eq!(symbol(&[0.0, 0.0], 0.4, &m).unwrap(), 0.0);
        let a = symbol(&[1.0, 0.0], 0.4, &m).unwrap();
        let b = symbol(&[0.6, 0.8], 0.4, &m).unwrap();
        assert!((a - b).abs() < 1e-10 * a);
        let atoms = SpectralMeasure::atomic(2, vec![(vec![0.6, 0.8], 1.0), (vec![1.0, 0.0], 2.0)]).unwrap();
        assert_eq!(symbol(&[0.3, -1.1], 0.4, &atoms).unwrap(), symbol(&[-0.3, 1.1], 0.4, &atoms).unwrap());
    }
}
