//! Weighted one-dimensional rules and sphere rules.
//!
//! Every singular radial integral in the crate is reduced to `(0, 1)` with
//! explicit endpoint exponents and handed to a [`JacobiRule`], which absorbs
//! the weight `w^beta (1 - w)^alpha` exactly. Smooth pieces use the
//! Gauss-Legendre special case `alpha = beta = 0`.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::function::beta::ln_beta;

use crate::error::{Error, Result};

/// Largest node count accepted by [`JacobiRule::new`].
pub const MAX_NODES: usize = 512;

/// Euler Beta function `B(a, b)` for `a, b > 0`.
pub fn beta_fn(a: f64, b: f64) -> f64 {
    ln_beta(a, b).exp()
}

/// Gauss rule on `(0, 1)` for the weight `w^beta (1 - w)^alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobiRule {
    alpha: f64,
    beta: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl JacobiRule {
    /// Builds the rule from the eigen-decomposition of the Jacobi matrix
    /// (Golub-Welsch).
    ///
    /// `alpha` is the exponent at the right endpoint, `beta` at the left one.
    pub fn new(alpha: f64, beta: f64, n: usize) -> Result<Self> {
        for e in [alpha, beta] {
            if !e.is_finite() || e <= -1.0 {
                return Err(Error::BadExponent(e));
            }
        }
        if n == 0 {
            return Err(Error::BadParameter("node count must be at least 1".into()));
        }
        if n > MAX_NODES {
            return Err(Error::Overflow(n));
        }

        // Recurrence on [-1, 1] with weight (1 - x)^a (1 + x)^b.
        let (a, b) = (alpha, beta);
        let ab = a + b;
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for k in 0..n {
            let kf = k as f64;
            jacobi[(k, k)] = if k == 0 {
                (b - a) / (ab + 2.0)
            } else {
                (b * b - a * a) / ((2.0 * kf + ab) * (2.0 * kf + ab + 2.0))
            };
            if k + 1 < n {
                let m = kf + 1.0;
                // The (m + a + b) factor cancels analytically for m = 1,
                // which matters when a + b = -1.
                let sq = if k == 0 {
                    4.0 * (1.0 + a) * (1.0 + b) / ((2.0 + ab).powi(2) * (3.0 + ab))
                } else {
                    let d = 2.0 * m + ab;
                    4.0 * m * (m + a) * (m + b) * (m + ab) / (d * d * (d + 1.0) * (d - 1.0))
                };
                let off = sq.sqrt();
                jacobi[(k, k + 1)] = off;
                jacobi[(k + 1, k)] = off;
            }
        }

        let mass = beta_fn(beta + 1.0, alpha + 1.0);
        let eigen = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = eigen
            .eigenvalues
            .iter()
            .zip(eigen.eigenvectors.row(0).iter())
            .map(|(&x, &v)| (0.5 * (1.0 + x), v * v * mass))
            .collect();
        pairs.sort_by(|p, q| p.0.total_cmp(&q.0));

        Ok(Self {
            alpha,
            beta,
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        })
    }

    /// Shared, memoized construction. Rules are immutable so callers on
    /// different threads can hold the same instance.
    pub fn cached(alpha: f64, beta: f64, n: usize) -> Result<Arc<Self>> {
        type Key = (u64, u64, usize);
        static CACHE: OnceLock<Mutex<HashMap<Key, Arc<JacobiRule>>>> = OnceLock::new();
        let key = (alpha.to_bits(), beta.to_bits(), n);
        let cache = CACHE.get_or_init(Default::default);
        if let Some(rule) = cache.lock().unwrap().get(&key) {
            return Ok(Arc::clone(rule));
        }
        let rule = Arc::new(Self::new(alpha, beta, n)?);
        cache.lock().unwrap().insert(key, Arc::clone(&rule));
        Ok(rule)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes.iter().copied().zip(self.weights.iter().copied())
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `sum_i w_i f(x_i)`, approximating `int_0^1 w^beta (1-w)^alpha f(w) dw`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.iter().map(|(x, w)| w * f(x)).sum()
    }
}

/// Gauss-Jacobi rule on `(0, 1)`; see [`JacobiRule::new`].
pub fn gauss_jacobi(alpha: f64, beta: f64, n: usize) -> Result<JacobiRule> {
    JacobiRule::new(alpha, beta, n)
}

/// Gauss-Legendre rule on `(0, 1)`.
pub fn gauss_legendre(n: usize) -> Result<Arc<JacobiRule>> {
    JacobiRule::cached(0.0, 0.0, n)
}

/// Quadrature rule on the unit sphere `S^{n-1}` for `n` in `{2, 3}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereRule {
    dim: usize,
    directions: Vec<Vec<f64>>,
    weights: Vec<f64>,
    degree: usize,
}

impl SphereRule {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Highest polynomial (spherical harmonic) degree integrated exactly.
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn directions(&self) -> &[Vec<f64>] {
        &self.directions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn integrate<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> f64 {
        self.directions
            .iter()
            .zip(&self.weights)
            .map(|(d, w)| w * f(d))
            .sum()
    }
}

/// Sphere rule of the given resolution.
///
/// `n = 2`: `resolution` equispaced angles with weight `2 pi / N`.
/// `n = 3`: `resolution` Gauss-Legendre nodes in `cos(theta)` times
/// `2 * resolution` equispaced azimuths.
pub fn sphere_rule(n: usize, resolution: usize) -> Result<SphereRule> {
    if resolution == 0 {
        return Err(Error::BadParameter("sphere resolution must be positive".into()));
    }
    match n {
        2 => {
            let h = 2.0 * PI / resolution as f64;
            let directions = (0..resolution)
                .map(|j| {
                    let t = h * j as f64;
                    vec![t.cos(), t.sin()]
                })
                .collect();
            Ok(SphereRule {
                dim: 2,
                directions,
                weights: vec![h; resolution],
                degree: resolution - 1,
            })
        }
        3 => {
            let gl = gauss_legendre(resolution)?;
            let n_az = 2 * resolution;
            let h = 2.0 * PI / n_az as f64;
            let mut directions = Vec::with_capacity(resolution * n_az);
            let mut weights = Vec::with_capacity(resolution * n_az);
            for (t, w) in gl.iter() {
                let z = 2.0 * t - 1.0;
                let sin_theta = (1.0 - z * z).max(0.0).sqrt();
                for j in 0..n_az {
                    let phi = h * j as f64;
                    directions.push(vec![sin_theta * phi.cos(), sin_theta * phi.sin(), z]);
                    weights.push(2.0 * w * h);
                }
            }
            Ok(SphereRule {
                dim: 3,
                directions,
                weights,
                degree: 2 * resolution - 1,
            })
        }
        other => Err(Error::UnsupportedDimension(other)),
    }
}

/// Sphere rule for integrands with a kink `|axis . omega|^gamma` on the great
/// circle orthogonal to `axis`.
///
/// The sphere is cut along that circle and each half gets Gauss-Legendre
/// nodes in a quintic smoothstep variable, which flattens the kink to high
/// order. `n = 2`: `resolution` angles in total. `n = 3`: `resolution` polar
/// nodes in `axis . omega` times `2 * resolution` azimuths.
pub fn split_sphere_rule(axis: &[f64], resolution: usize) -> Result<SphereRule> {
    let n = axis.len();
    let norm = axis.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::BadParameter("split axis must be a nonzero finite vector".into()));
    }
    if resolution < 2 {
        return Err(Error::BadParameter("split sphere rule needs resolution >= 2".into()));
    }
    let a: Vec<f64> = axis.iter().map(|v| v / norm).collect();
    let half = gauss_legendre(resolution / 2)?;
    // (position in [0, 1], weight) for a smoothstep-mapped half.
    let mapped: Vec<(f64, f64)> = half
        .iter()
        .map(|(t, w)| {
            let step = t * t * t * (10.0 - 15.0 * t + 6.0 * t * t);
            let slope = 30.0 * t * t * (1.0 - t) * (1.0 - t);
            (step, w * slope)
        })
        .collect();
    match n {
        2 => {
            let p = [-a[1], a[0]];
            let mut directions = Vec::with_capacity(2 * mapped.len());
            let mut weights = Vec::with_capacity(2 * mapped.len());
            for offset in [0.0, PI] {
                for &(step, w) in &mapped {
                    let phi = offset + PI * step;
                    let (sin, cos) = phi.sin_cos();
                    directions.push(vec![cos * p[0] + sin * a[0], cos * p[1] + sin * a[1]]);
                    weights.push(PI * w);
                }
            }
            Ok(SphereRule { dim: 2, directions, weights, degree: resolution - 1 })
        }
        3 => {
            // Orthonormal frame (e1, e2, a).
            let pick = if a[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            let d = pick[0] * a[0] + pick[1] * a[1] + pick[2] * a[2];
            let mut e1: Vec<f64> = (0..3).map(|i| pick[i] - d * a[i]).collect();
            let l = e1.iter().map(|v| v * v).sum::<f64>().sqrt();
            e1.iter_mut().for_each(|v| *v /= l);
            let e2 = [a[1] * e1[2] - a[2] * e1[1], a[2] * e1[0] - a[0] * e1[2], a[0] * e1[1] - a[1] * e1[0]];
            let n_az = 2 * resolution;
            let h = 2.0 * PI / n_az as f64;
            let mut directions = Vec::with_capacity(2 * mapped.len() * n_az);
            let mut weights = Vec::with_capacity(2 * mapped.len() * n_az);
            for sign in [-1.0, 1.0] {
                for &(step, w) in &mapped {
                    let z = sign * step;
                    let r = (1.0 - z * z).max(0.0).sqrt();
                    for j in 0..n_az {
                        let (sin, cos) = (h * j as f64).sin_cos();
                        directions.push((0..3).map(|i| r * (cos * e1[i] + sin * e2[i]) + z * a[i]).collect());
                        weights.push(w * h);
                    }
                }
            }
            Ok(SphereRule { dim: 3, directions, weights, degree: resolution - 1 })
        }
        other => Err(Error::UnsupportedDimension(other)),
    }
}

/// Surface area of `S^{n-1}` for `n` in `{1, 2, 3}` (counting measure on `S^0`).
pub fn sphere_area(n: usize) -> Result<f64> {
    match n {
        1 => Ok(2.0),
        2 => Ok(2.0 * PI),
        3 => Ok(4.0 * PI),
        other => Err(Error::UnsupportedDimension(other)),
    }
}

/// Outcome of [`integrate_adaptive`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adaptive {
    pub value: f64,
    pub error: f64,
    pub intervals: usize,
}

// Gauss-Kronrod 7/15 abscissae and weights (QUADPACK qk15).
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for (j, (&x, &wk)) in XGK.iter().zip(&WGK).take(7).enumerate() {
        let pair = f(c - h * x) + f(c + h * x);
        kronrod += wk * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error.total_cmp(&other.error) == Ordering::Equal
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Globally adaptive Gauss-Kronrod integration of `f` over `[a, b]`.
///
/// Bisects the segment with the largest local error until the summed error
/// drops below `max(abs_tol, rel_tol * |value|)` or `max_intervals` is hit.
pub fn integrate_adaptive<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
    max_intervals: usize,
) -> Adaptive {
    let (value, error) = gk15(&f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Segment { a, b, value, error });
    let (mut total, mut total_err) = (value, error);
    while total_err > abs_tol.max(rel_tol * total.abs()) && heap.len() < max_intervals {
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            heap.push(worst);
            break;
        }
        let (v1, e1) = gk15(&f, worst.a, mid);
        let (v2, e2) = gk15(&f, mid, worst.b);
        total += v1 + v2 - worst.value;
        total_err += e1 + e2 - worst.error;
        heap.push(Segment { a: worst.a, b: mid, value: v1, error: e1 });
        heap.push(Segment { a: mid, b: worst.b, value: v2, error: e2 });
    }
    // Re-sum to shed the drift of the running updates.
    let value = heap.iter().map(|s| s.value).sum();
    let error = heap.iter().map(|s| s.error).sum();
    Adaptive { value, error, intervals: heap.len() }
}
