//! The mean kernel
//! `M^s_r u(x) = c r^{2s} int_r^inf d rho int da(omega)
//!     (u(x + rho omega) + u(x - rho omega)) / ((rho^2 - r^2)^s rho)`
//! with `c = sin(pi s) / (pi Lambda)`, and sampling from its jump law.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::funcs::TestFunction;
use crate::measure::{DirectionSampler, SpectralMeasure};
use crate::operator::{check_dims, check_order, finite, EvalResult, Level, Pieces, QuadratureSpec};
use crate::quadrature::JacobiRule;
use crate::radial::{angular_nodes, breakpoints, composite, reach, wave_kernel_tail, Reach};

/// Radius, order and measure of one mean-kernel average.
#[derive(Debug, Clone, Copy)]
pub struct MeanKernel<'a> {
    radius: f64,
    s: f64,
    measure: &'a SpectralMeasure,
    mass: f64,
}

impl<'a> MeanKernel<'a> {
    pub fn new(radius: f64, s: f64, measure: &'a SpectralMeasure) -> Result<Self> {
        check_order(s)?;
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::DegenerateRadius(radius));
        }
        let mass = measure.total_mass()?;
        Ok(Self { radius, s, measure, mass })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn order(&self) -> f64 {
        self.s
    }

    pub fn measure(&self) -> &'a SpectralMeasure {
        self.measure
    }

    pub fn total_mass(&self) -> f64 {
        self.mass
    }

    /// `c(n, s, a) = sin(pi s) / (pi Lambda)`.
    pub fn normalization(&self) -> f64 {
        (PI * self.s).sin() / (PI * self.mass)
    }

    /// `r^{2s} int_r^inf (rho^2 - r^2)^{-s} rho^{-1} d rho = pi / (2 sin(pi s))`.
    pub fn radial_mass(&self) -> f64 {
        PI / (2.0 * (PI * self.s).sin())
    }

    /// Radial kernel `r^{2s} (rho^2 - r^2)^{-s} / rho` before normalization.
    pub(crate) fn kernel(&self, rho: f64) -> f64 {
        let r = self.radius;
        r.powf(2.0 * self.s) * ((rho - r) * (rho + r)).powf(-self.s) / rho
    }

    pub fn sampler(&self) -> Result<JumpSampler<'a>> {
        JumpSampler::new(self.s, self.measure)
    }
}

/// Probability density of the jump length `rho`,
/// `(2 sin(pi s) / pi) r^{2s} (rho^2 - r^2)^{-s} / rho` on `(r, inf)`.
pub fn kernel_density(rho: f64, params: &MeanKernel<'_>) -> Result<f64> {
    if !(rho > params.radius) {
        return Err(Error::DomainError(format!("rho = {rho} must exceed r = {}", params.radius)));
    }
    Ok(params.kernel(rho) / params.radial_mass())
}

/// One draw from the mean-kernel jump law.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Jump {
    pub rho: f64,
    pub direction: Vec<f64>,
    /// `+1` or `-1`; the step is `sign * rho * direction`.
    pub sign: f64,
}

/// Reusable sampler: `omega ~ da / Lambda`, `w ~ Beta(1 - s, s)` from two
/// Gamma draws, `rho = r (1 - w)^{-1/2}`, fair sign.
pub struct JumpSampler<'a> {
    directions: DirectionSampler<'a>,
    numerator: Gamma<f64>,
    denominator: Gamma<f64>,
}

impl<'a> JumpSampler<'a> {
    pub fn new(s: f64, measure: &'a SpectralMeasure) -> Result<Self> {
        check_order(s)?;
        let numerator = Gamma::new(1.0 - s, 1.0).map_err(|e| Error::BadParameter(e.to_string()))?;
        let denominator = Gamma::new(s, 1.0).map_err(|e| Error::BadParameter(e.to_string()))?;
        Ok(Self { directions: measure.sampler()?, numerator, denominator })
    }

    /// `rho / r = sqrt((X + Y) / Y)` with `X ~ Gamma(1 - s)`, `Y ~ Gamma(s)`.
    pub fn radius_factor<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let x = self.numerator.sample(rng);
            let y = self.denominator.sample(rng);
            let f = ((x + y) / y).sqrt();
            if y > 0.0 && f.is_finite() {
                return f;
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, r: f64, rng: &mut R) -> Jump {
        let mut rho = r * self.radius_factor(rng);
        if rho <= r {
            rho = r.next_up();
        }
        let direction = self.directions.sample(rng);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        Jump { rho, direction, sign }
    }
}

pub fn sample_jump<R: Rng + ?Sized>(params: &MeanKernel<'_>, rng: &mut R) -> Result<Jump> {
    Ok(params.sampler()?.sample(params.radius, rng))
}

/// `M^s_r u(x)` by graded radial quadrature.
pub fn mean_value(u: &dyn TestFunction, x: &[f64], params: &MeanKernel<'_>, quad: &QuadratureSpec) -> Result<EvalResult> {
    check_dims(u, x, params.measure)?;
    quad.validate()?;
    let [coarse, fine] = quad.levels();
    let a = mean_pieces(u, x, params, coarse)?;
    let b = mean_pieces(u, x, params, fine)?;
    let scale = 1.0 / (2.0 * params.mass * params.radial_mass());
    let value = finite(scale * (b.0 + b.1), "mean value")?;
    Ok(EvalResult {
        value,
        error_estimate: scale * ((a.0 - b.0).abs() + (a.1 - b.1).abs()),
        pieces: Pieces { inner: scale * b.0, tail: scale * b.1, truncation_bound: 0.0 },
    })
}

/// Shared radial layout for integrals over `rho > r` against the mean kernel:
/// a Gauss-Jacobi panel at `r`, graded panels, then a far-field tail from `end`.
pub(crate) struct MeanLayout {
    pub tau: f64,
    pub cuts: Vec<f64>,
    pub end: f64,
    pub far: Reach,
}

impl MeanLayout {
    pub(crate) fn new(u: &dyn TestFunction, x: &[f64], r: f64) -> Result<Self> {
        let ell = u.length_scale();
        let far = reach(u, x);
        let zone = match far {
            Reach::Finite { lo, hi } => (lo, hi),
            _ => (0.0, f64::INFINITY),
        };
        let tau = (0.5 * ell / r).min(1.0);
        let after = r * (1.0 + tau);
        let end = match far {
            Reach::Finite { hi, .. } => hi.max(2.0 * r),
            _ => 2.0 * r,
        }
        .max(after);
        let cuts = breakpoints(after, end, r, 0.5 * ell, zone)?;
        Ok(Self { tau, cuts, end, far })
    }
}

/// `(int_r^end k F, int_end^inf k F)` summed over directions, with
/// `F(rho) = u(x + rho omega) + u(x - rho omega)`.
fn mean_pieces(u: &dyn TestFunction, x: &[f64], params: &MeanKernel<'_>, level: Level) -> Result<(f64, f64)> {
    let s = params.s;
    let r = params.radius;
    let layout = MeanLayout::new(u, x, r)?;
    let nodes = angular_nodes(params.measure, &layout.far, level.sphere)?;
    let tau = layout.tau;
    let near = JacobiRule::cached(0.0, -s, level.jacobi)?;
    let far_rule = match layout.far {
        Reach::Unbounded => Some(JacobiRule::cached(0.0, 2.0 * s - 1.0, level.jacobi)?),
        _ => None,
    };
    let ux = u.evaluate(x);
    let big_r = layout.end;

    let mut y = vec![0.0; x.len()];
    let (mut body, mut tail) = (0.0, 0.0);
    for atom in &nodes {
        let dir = &atom.direction;
        let mut pair = |rho: f64| {
            for i in 0..y.len() {
                y[i] = rho * dir[i];
            }
            u.pair_sum(x, &y)
        };
        // rho = r (1 + tau v): k d rho = tau^{1-s} v^{-s} (2 + tau v)^{-s} (1 + tau v)^{-1} dv
        let head = tau.powf(1.0 - s)
            * near.integrate(|v| {
                let t = tau * v;
                (2.0 + t).powf(-s) / (1.0 + t) * pair(r * (1.0 + t))
            });
        let mid = composite(&layout.cuts, level.panel, |rho| params.kernel(rho) * pair(rho))?;
        let far = match &layout.far {
            Reach::Finite { .. } => 0.0,
            Reach::Wave { wavevector } => {
                let q = dir.iter().zip(wavevector).map(|(a, b)| a * b).sum::<f64>().abs();
                2.0 * ux * wave_kernel_tail(r, big_r, q, s, false)?
            }
            Reach::Unbounded => {
                let rule = far_rule.as_ref().expect("tail rule");
                let ratio = r / big_r;
                ratio.powf(2.0 * s)
                    * rule.integrate(|v| (1.0 - (ratio * v).powi(2)).powf(-s) * pair(big_r / v))
            }
        };
        body += atom.weight * (head + mid);
        tail += atom.weight * far;
    }
    Ok((body, tail))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcs::{Affine, Gaussian, PlaneWave};
    use crate::quadrature::integrate_adaptive;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{Beta, ContinuousCDF};

    #[test]
    fn normalization_identity() {
        let m = SpectralMeasure::uniform(2).unwrap();
        for s in [0.1, 0.5, 0.9] {
            let k = MeanKernel::new(0.1, s, &m).unwrap();
            let check = k.normalization() * k.total_mass() * PI / (PI * s).sin();
            assert!((check - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_are_exact() {
        let m = SpectralMeasure::uniform(2).unwrap();
        let one = Affine::constant(2, 1.0);
        for r in [1e-3, 1e-2, 1e-1] {
            for i in 1..=9 {
                let s = i as f64 / 10.0;
                let k = MeanKernel::new(r, s, &m).unwrap();
                let v = mean_value(&one, &[0.0, 0.0], &k, &QuadratureSpec::default()).unwrap();
                assert!((v.value - 1.0).abs() < 1e-12, "r={r} s={s}: {}", v.value);
            }
        }
    }

    #[test]
    fn linear_functions_are_exact() {
        let m = SpectralMeasure::atomic(2, vec![(vec![0.6, 0.8], 1.0), (vec![0.0, 1.0], 0.5)]).unwrap();
        let lin = Affine::linear(vec![2.0, -1.0], 0.25);
        let k = MeanKernel::new(0.05, 0.35, &m).unwrap();
        let x = [0.4, 0.9];
        let v = mean_value(&lin, &x, &k, &QuadratureSpec::default()).unwrap();
        assert_relative_eq!(v.value, lin.evaluate(&x), max_relative = 1e-12);
    }

    #[test]
    fn gaussian_against_adaptive_oracle() {
        // Uniform S^1 at x = 0: F(rho) = 2 * 2 pi e^{-rho^2/2}.
        let (r, s) = (0.1, 0.5);
        let m = SpectralMeasure::uniform(2).unwrap();
        let g = Gaussian::new(vec![0.0, 0.0], 1.0).unwrap();
        let k = MeanKernel::new(r, s, &m).unwrap();
        let v = mean_value(&g, &[0.0, 0.0], &k, &QuadratureSpec::default()).unwrap();
        // rho = r cosh(t) removes the endpoint singularity at s = 1/2:
        // (rho^2 - r^2)^{-1/2} d rho = dt.
        let oracle = integrate_adaptive(
            |t: f64| {
                let rho = r * t.cosh();
                r / rho * 2.0 * (-0.5 * rho * rho).exp()
            },
            0.0,
            8.0,
            1e-16,
            1e-14,
            5000,
        );
        assert_relative_eq!(v.value, oracle.value / PI, max_relative = 1e-10);
    }

    #[test]
    fn plane_wave_tail() {
        // M cos(k . x) at x = 0 for atoms +-e1 reduces to one radial integral;
        // compare with an adaptive oracle in w = 1 - (r/rho)^2.
        let m = SpectralMeasure::atomic(2, vec![(vec![1.0, 0.0], 1.0), (vec![-1.0, 0.0], 1.0)]).unwrap();
        let (r, s) = (0.3, 0.4);
        let u = PlaneWave::new(vec![2.0, 0.0], 1.0, 0.0).unwrap();
        let k = MeanKernel::new(r, s, &m).unwrap();
        let v = mean_value(&u, &[0.0, 0.0], &k, &QuadratureSpec::default()).unwrap();
        // Oracle in rho: [r, 2r] with rho = r (1 + t^{1/(1-s)}), adaptive on
        // [2r, T], integration by parts beyond T.
        let e = 1.0 / (1.0 - s);
        let lo = integrate_adaptive(
            |t: f64| {
                if t == 0.0 {
                    return 0.0;
                }
                let rho = r * (1.0 + t.powf(e));
                if rho <= r {
                    return 0.0;
                }
                k.kernel(rho) * (2.0 * rho).cos() * r * e * t.powf(e - 1.0)
            },
            0.0,
            1.0,
            1e-15,
            1e-13,
            10_000,
        );
        let big = 2000.0;
        let hi = integrate_adaptive(|rho: f64| k.kernel(rho) * (2.0 * rho).cos(), 2.0 * r, big, 1e-15, 1e-13, 200_000);
        let rest = -k.kernel(big) * (2.0 * big).sin() / 2.0;
        let oracle = (lo.value + hi.value + rest) / k.radial_mass();
        assert!((v.value - oracle).abs() < 1e-8, "{:?} vs {oracle}", v);
    }

    #[test]
    fn density_examples() {
        let m = SpectralMeasure::uniform(2).unwrap();
        let k = MeanKernel::new(1.0, 0.5, &m).unwrap();
        assert_relative_eq!(kernel_density(2f64.sqrt(), &k).unwrap(), 2f64.sqrt() / PI, max_relative = 1e-14);
        assert!(matches!(kernel_density(1.0, &k), Err(Error::DomainError(_))));

        for s in [0.2, 0.7] {
            let k = MeanKernel::new(0.5, s, &m).unwrap();
            // [r, 1] with rho - r = r t^{1/(1-s)}, written in the offset so
            // that nothing rounds onto the endpoint.
            let e = 1.0 / (1.0 - s);
            let c = 2.0 * (PI * s).sin() / PI;
            let total = integrate_adaptive(
                |t: f64| {
                    let d = 0.5 * t.powf(e);
                    let dd = 0.5 * e * t.powf(e - 1.0);
                    c * 0.5f64.powf(2.0 * s) * (d * (1.0 + d)).powf(-s) / (0.5 + d) * dd
                },
                0.0,
                1.0,
                1e-15,
                1e-13,
                5000,
            );
            assert_relative_eq!(kernel_density(0.75, &k).unwrap(), c * 0.5f64.powf(2.0 * s) * (0.25f64 * 1.25).powf(-s) / 0.75, max_relative = 1e-14);
            // [1, inf) with rho = w^{-1/(2s)}, which flattens the rho^{-1-2s} decay.
            let rest = integrate_adaptive(
                |w: f64| {
                    if w == 0.0 {
                        return 0.0;
                    }
                    let rho = w.powf(-0.5 / s);
                    kernel_density(rho, &k).unwrap() * rho / (2.0 * s * w)
                },
                0.0,
                1.0,
                1e-15,
                1e-13,
                5000,
            );
            assert_relative_eq!(total.value + rest.value, 1.0, max_relative = 1e-9);

            let lim = 2.0 * (PI * s).sin() / PI * 0.5f64.powf(2.0 * s) * 1.0f64.powf(-s) / 0.5;
            let rho = 0.5 + 1e-9;
            assert_relative_eq!(kernel_density(rho, &k).unwrap() * (rho - 0.5).powf(s), lim, max_relative = 1e-6);
        }
    }

    #[test]
    fn jump_law_matches_beta() {
        let m = SpectralMeasure::uniform(2).unwrap();
        for s in [0.25, 0.5, 0.8] {
            let k = MeanKernel::new(0.2, s, &m).unwrap();
            let sampler = k.sampler().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let n = 100_000;
            let mut w: Vec<f64> = (0..n)
                .map(|_| {
                    let j = sampler.sample(0.2, &mut rng);
                    assert!(j.rho > 0.2);
                    1.0 - (0.2 / j.rho).powi(2)
                })
                .collect();
            w.sort_by(f64::total_cmp);
            let beta = Beta::new(1.0 - s, s).unwrap();
            let d = w
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let c = beta.cdf(v);
                    (c - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - c).abs())
                })
                .fold(0.0, f64::max);
            assert!(d < 1.628 / (n as f64).sqrt(), "s={s}: KS {d}");
            // E[(r/rho)^2] = s
            let mean = w.iter().map(|v| 1.0 - v).sum::<f64>() / n as f64;
            assert!((mean - s).abs() < 0.01);
        }
    }
}
