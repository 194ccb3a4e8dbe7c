//! Test functions with exact derivatives and far-field descriptions.
//!
//! Functions are built in code or parsed from strings of the form
//! `kind:key=v1,v2;key=v` such as `gaussian:center=0,0;width=1`.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Regularity class of a test function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Smoothness {
    /// Continuous or worse (indicators).
    C0,
    C2,
    /// Infinitely differentiable.
    CInf,
}

/// How a function behaves far from its features; drives tail quadrature.
#[derive(Debug, Clone, PartialEq)]
pub enum FarField {
    /// Vanishes outside the ball.
    Compact { center: Vec<f64>, radius: f64 },
    /// Gaussian decay `exp(-|x - c|^2 / (2 w^2))`.
    Gaussian { center: Vec<f64>, width: f64 },
    /// `A cos(k . x + phase)`.
    PlaneWave { wavevector: Vec<f64>, amplitude: f64, phase: f64 },
    /// No decay (constants, polynomials).
    Unbounded,
}

pub trait TestFunction: Debug + Send + Sync {
    fn dim(&self) -> usize;
    fn evaluate(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    fn hessian(&self, x: &[f64]) -> DMatrix<f64>;
    /// An upper bound on `sup |u|`.
    fn sup_bound(&self) -> f64;
    fn smoothness(&self) -> Smoothness;
    /// Characteristic length of the features of `u`.
    fn length_scale(&self) -> f64;
    fn far_field(&self) -> FarField;
    /// Canonical string form, parseable by [`parse_function`].
    fn describe(&self) -> String;

    /// Whether `u` is `C^2` in a neighbourhood of `x`.
    fn c2_near(&self, _x: &[f64]) -> bool {
        self.smoothness() >= Smoothness::C2
    }

    /// `u(x + y) + u(x - y)`.
    fn pair_sum(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut p = x.to_vec();
        let mut m = x.to_vec();
        for i in 0..x.len() {
            p[i] += y[i];
            m[i] -= y[i];
        }
        self.evaluate(&p) + self.evaluate(&m)
    }

    /// `2 u(x) - u(x + y) - u(x - y)`, switching to `-y^T H y` for tiny `y`.
    fn second_difference(&self, x: &[f64], y: &[f64]) -> f64 {
        let r2: f64 = y.iter().map(|v| v * v).sum();
        let cut = 2e-4 * self.length_scale();
        if r2 < cut * cut && self.c2_near(x) {
            let h = self.hessian(x);
            let mut q = 0.0;
            for i in 0..y.len() {
                for j in 0..y.len() {
                    q += y[i] * h[(i, j)] * y[j];
                }
            }
            return -q;
        }
        2.0 * self.evaluate(x) - self.pair_sum(x, y)
    }
}

fn sq_dist(x: &[f64], c: &[f64]) -> f64 {
    x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",")
}

/// `A exp(-|x - c|^2 / (2 w^2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub center: Vec<f64>,
    pub width: f64,
    pub amplitude: f64,
}

impl Gaussian {
    pub fn new(center: Vec<f64>, width: f64) -> Result<Self> {
        Self::with_amplitude(center, width, 1.0)
    }

    pub fn with_amplitude(center: Vec<f64>, width: f64, amplitude: f64) -> Result<Self> {
        if center.is_empty() {
            return Err(Error::BadParameter("gaussian center is empty".into()));
        }
        if !(width > 0.0) || !width.is_finite() {
            return Err(Error::BadParameter(format!("gaussian width {width} must be positive")));
        }
        Ok(Self { center, width, amplitude })
    }
}

impl TestFunction for Gaussian {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        self.amplitude * (-0.5 * sq_dist(x, &self.center) / (self.width * self.width)).exp()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let u = self.evaluate(x);
        let w2 = self.width * self.width;
        x.iter().zip(&self.center).map(|(a, c)| -(a - c) / w2 * u).collect()
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let u = self.evaluate(x);
        let w2 = self.width * self.width;
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| {
            let zi = x[i] - self.center[i];
            let zj = x[j] - self.center[j];
            u * (zi * zj / (w2 * w2) - if i == j { 1.0 / w2 } else { 0.0 })
        })
    }

    fn sup_bound(&self) -> f64 {
        self.amplitude.abs()
    }

    fn smoothness(&self) -> Smoothness {
        Smoothness::CInf
    }

    fn length_scale(&self) -> f64 {
        self.width
    }

    fn far_field(&self) -> FarField {
        FarField::Gaussian { center: self.center.clone(), width: self.width }
    }

    fn describe(&self) -> String {
        format!("gaussian:center={};width={};amplitude={}", fmt_list(&self.center), self.width, self.amplitude)
    }

    fn second_difference(&self, x: &[f64], y: &[f64]) -> f64 {
        let w2 = self.width * self.width;
        let z2 = sq_dist(x, &self.center);
        if z2 / (2.0 * w2) > 600.0 {
            return 2.0 * self.evaluate(x) - self.pair_sum(x, y);
        }
        let a = 0.5 * dot(y, y) / w2;
        let b = x.iter().zip(&self.center).zip(y).map(|((xi, ci), yi)| (xi - ci) * yi).sum::<f64>() / w2;
        let half = (0.5 * b).sinh();
        self.evaluate(x) * (-2.0 * (-a).exp_m1() - 4.0 * (-a).exp() * half * half)
    }
}

/// `A cos(k . x + phase)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneWave {
    pub wavevector: Vec<f64>,
    pub amplitude: f64,
    pub phase: f64,
}

impl PlaneWave {
    pub fn new(wavevector: Vec<f64>, amplitude: f64, phase: f64) -> Result<Self> {
        if wavevector.is_empty() {
            return Err(Error::BadParameter("wavevector is empty".into()));
        }
        Ok(Self { wavevector, amplitude, phase })
    }

    fn angle(&self, x: &[f64]) -> f64 {
        dot(&self.wavevector, x) + self.phase
    }
}

impl TestFunction for PlaneWave {
    fn dim(&self) -> usize {
        self.wavevector.len()
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        self.amplitude * self.angle(x).cos()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let s = -self.amplitude * self.angle(x).sin();
        self.wavevector.iter().map(|k| s * k).collect()
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let c = -self.amplitude * self.angle(x).cos();
        let k = &self.wavevector;
        DMatrix::from_fn(k.len(), k.len(), |i, j| c * k[i] * k[j])
    }

    fn sup_bound(&self) -> f64 {
        self.amplitude.abs()
    }

    fn smoothness(&self) -> Smoothness {
        Smoothness::CInf
    }

    fn length_scale(&self) -> f64 {
        let k = dot(&self.wavevector, &self.wavevector).sqrt();
        if k > 0.0 {
            1.0 / k
        } else {
            1.0
        }
    }

    fn far_field(&self) -> FarField {
        FarField::PlaneWave { wavevector: self.wavevector.clone(), amplitude: self.amplitude, phase: self.phase }
    }

    fn describe(&self) -> String {
        format!("plane-wave-cos:k={};amplitude={};phase={}", fmt_list(&self.wavevector), self.amplitude, self.phase)
    }

    fn pair_sum(&self, x: &[f64], y: &[f64]) -> f64 {
        2.0 * self.evaluate(x) * dot(&self.wavevector, y).cos()
    }

    fn second_difference(&self, x: &[f64], y: &[f64]) -> f64 {
        let half = (0.5 * dot(&self.wavevector, y)).sin();
        4.0 * self.evaluate(x) * half * half
    }
}

/// `A exp(1 - 1 / (1 - |x - c|^2 / R^2))` inside the ball, zero outside.
#[derive(Debug, Clone, PartialEq)]
pub struct Bump {
    pub center: Vec<f64>,
    pub radius: f64,
    pub amplitude: f64,
}

impl Bump {
    pub fn new(center: Vec<f64>, radius: f64) -> Result<Self> {
        if center.is_empty() {
            return Err(Error::BadParameter("bump center is empty".into()));
        }
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::BadParameter(format!("bump radius {radius} must be positive")));
        }
        Ok(Self { center, radius, amplitude: 1.0 })
    }

    /// `(e^phi, phi', phi'')` in `q = |z|^2 / R^2`, or `None` where `u`
    /// underflows to zero.
    fn profile(&self, x: &[f64]) -> Option<(f64, f64, f64)> {
        let q = sq_dist(x, &self.center) / (self.radius * self.radius);
        let inv = 1.0 / (1.0 - q);
        if q >= 1.0 || inv > 700.0 {
            return None;
        }
        Some(((1.0 - inv).exp(), -inv * inv, -2.0 * inv * inv * inv))
    }
}

impl TestFunction for Bump {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        self.profile(x).map_or(0.0, |(e, _, _)| self.amplitude * e)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let r2 = self.radius * self.radius;
        match self.profile(x) {
            None => vec![0.0; x.len()],
            Some((e, d1, _)) => {
                x.iter().zip(&self.center).map(|(a, c)| self.amplitude * e * d1 * 2.0 * (a - c) / r2).collect()
            }
        }
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        let r2 = self.radius * self.radius;
        match self.profile(x) {
            None => DMatrix::zeros(n, n),
            Some((e, d1, d2)) => DMatrix::from_fn(n, n, |i, j| {
                let zi = x[i] - self.center[i];
                let zj = x[j] - self.center[j];
                let diag = if i == j { 2.0 * d1 / r2 } else { 0.0 };
                self.amplitude * e * ((d1 * d1 + d2) * 4.0 * zi * zj / (r2 * r2) + diag)
            }),
        }
    }

    fn sup_bound(&self) -> f64 {
        self.amplitude.abs()
    }

    fn smoothness(&self) -> Smoothness {
        Smoothness::CInf
    }

    fn length_scale(&self) -> f64 {
        self.radius
    }

    fn far_field(&self) -> FarField {
        FarField::Compact { center: self.center.clone(), radius: self.radius }
    }

    fn describe(&self) -> String {
        format!("bump:center={};radius={};amplitude={}", fmt_list(&self.center), self.radius, self.amplitude)
    }
}

/// `sum_i a_i (x_i - c_i)^2` times a smooth radial cutoff equal to one on
/// the ball of radius `R` and zero outside radius `2R`.
#[derive(Debug, Clone, PartialEq)]
pub struct CutoffQuadratic {
    pub center: Vec<f64>,
    pub coeffs: Vec<f64>,
    pub radius: f64,
}

impl CutoffQuadratic {
    pub fn new(center: Vec<f64>, coeffs: Vec<f64>, radius: f64) -> Result<Self> {
        if center.is_empty() {
            return Err(Error::BadParameter("cutoff-quadratic center is empty".into()));
        }
        if coeffs.len() != center.len() {
            return Err(Error::DimensionMismatch { expected: center.len(), found: coeffs.len() });
        }
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::BadParameter(format!("cutoff radius {radius} must be positive")));
        }
        Ok(Self { center, coeffs, radius })
    }

    /// Cutoff `chi(r)` and its first two radial derivatives.
    fn cutoff(&self, r: f64) -> (f64, f64, f64) {
        let t = r / self.radius - 1.0;
        if t <= 0.0 {
            return (1.0, 0.0, 0.0);
        }
        if t >= 1.0 {
            return (0.0, 0.0, 0.0);
        }
        // chi = 1 / (1 + e^g) with g = 1/(1-t) - 1/t.
        let g = 1.0 / (1.0 - t) - 1.0 / t;
        if g.abs() > 700.0 {
            return (if g < 0.0 { 1.0 } else { 0.0 }, 0.0, 0.0);
        }
        let eg = g.exp();
        let chi = 1.0 / (1.0 + eg);
        let slope = eg / ((1.0 + eg) * (1.0 + eg));
        let g1 = 1.0 / (t * t) + 1.0 / ((1.0 - t) * (1.0 - t));
        let g2 = -2.0 / (t * t * t) + 2.0 / ((1.0 - t).powi(3));
        let d1 = -slope * g1;
        let d2 = -(d1 * (1.0 - 2.0 * chi) * g1 + slope * g2);
        (chi, d1 / self.radius, d2 / (self.radius * self.radius))
    }

    fn quadratic(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().zip(x.iter().zip(&self.center)).map(|(a, (xi, ci))| a * (xi - ci) * (xi - ci)).sum()
    }
}

impl TestFunction for CutoffQuadratic {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        let r = sq_dist(x, &self.center).sqrt();
        self.quadratic(x) * self.cutoff(r).0
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let r = sq_dist(x, &self.center).sqrt();
        let (chi, d1, _) = self.cutoff(r);
        let q = self.quadratic(x);
        (0..x.len())
            .map(|i| {
                let z = x[i] - self.center[i];
                let radial = if r > 0.0 { d1 * z / r } else { 0.0 };
                2.0 * self.coeffs[i] * z * chi + q * radial
            })
            .collect()
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        let r = sq_dist(x, &self.center).sqrt();
        let (chi, d1, d2) = self.cutoff(r);
        let q = self.quadratic(x);
        let z: Vec<f64> = x.iter().zip(&self.center).map(|(a, c)| a - c).collect();
        DMatrix::from_fn(n, n, |i, j| {
            let qh = if i == j { 2.0 * self.coeffs[i] } else { 0.0 };
            if r == 0.0 || (d1 == 0.0 && d2 == 0.0) {
                return qh * chi;
            }
            let (ui, uj) = (z[i] / r, z[j] / r);
            let grad_chi_i = d1 * ui;
            let grad_chi_j = d1 * uj;
            let hess_chi = d2 * ui * uj + d1 / r * (if i == j { 1.0 } else { 0.0 } - ui * uj);
            qh * chi
                + 2.0 * self.coeffs[i] * z[i] * grad_chi_j
                + 2.0 * self.coeffs[j] * z[j] * grad_chi_i
                + q * hess_chi
        })
    }

    fn sup_bound(&self) -> f64 {
        let a = self.coeffs.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
        4.0 * a * self.radius * self.radius
    }

    fn smoothness(&self) -> Smoothness {
        Smoothness::CInf
    }

    fn length_scale(&self) -> f64 {
        self.radius
    }

    fn far_field(&self) -> FarField {
        FarField::Compact { center: self.center.clone(), radius: 2.0 * self.radius }
    }

    fn describe(&self) -> String {
        format!(
            "cutoff-quadratic:center={};coeffs={};radius={}",
            fmt_list(&self.center),
            fmt_list(&self.coeffs),
            self.radius
        )
    }
}

/// Indicator of the closed axis-aligned box `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Indicator {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Indicator {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch { expected: lo.len(), found: hi.len() });
        }
        if lo.is_empty() || lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(Error::BadParameter("indicator box needs lo < hi in every coordinate".into()));
        }
        Ok(Self { lo, hi })
    }

    fn boundary_distance(&self, x: &[f64]) -> f64 {
        // Distance from x to the box boundary, inside or out.
        let inside = x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *a <= *v && *v <= *b);
        if inside {
            x.iter().zip(self.lo.iter().zip(&self.hi)).map(|(v, (a, b))| (v - a).min(b - v)).fold(f64::INFINITY, f64::min)
        } else {
            x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .map(|(v, (a, b))| (a - v).max(v - b).max(0.0).powi(2))
                .sum::<f64>()
                .sqrt()
        }
    }
}

impl TestFunction for Indicator {
    fn dim(&self) -> usize {
        self.lo.len()
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        let inside = x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *a <= *v && *v <= *b);
        if inside {
            1.0
        } else {
            0.0
        }
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        vec![0.0; x.len()]
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(x.len(), x.len())
    }

    fn sup_bound(&self) -> f64 {
        1.0
    }

    fn smoothness(&self) -> Smoothness {
        Smoothness::C0
    }

    fn c2_near(&self, x: &[f64]) -> bool {
        self.boundary_distance(x) > 0.0
    }

    fn length_scale(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).fold(f64::INFINITY, f64::min)
    }

    fn far_field(&self) -> FarField {
        let center = self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let radius = 0.5 * self.lo.iter().zip(&self.hi).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
        FarField::Compact { center, radius }
    }

    fn describe(&self) -> String {
        format!("indicator:lo={};hi={}", fmt_list(&self.lo), fmt_list(&self.hi))
    }

    fn second_difference(&self, x: &[f64], y: &[f64]) -> f64 {
        2.0 * self.evaluate(x) - self.pair_sum(x, y)
    }
}

/// Affine function `b . x + c` (a constant when `b = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub slope: Vec<f64>,
    pub offset: f64,
}

impl Affine {
    pub fn constant(dim: usize, value: f64) -> Self {
        Self { slope: vec![0.0; dim], offset: value }
    }

    pub fn linear(slope: Vec<f64>, offset: f64) -> Self {
        Self { slope, offset }
    }
}

impl TestFunction for Affine {
    fn dim(&self) -> usize {
        self.slope.len()
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        dot(&self.slope, x) + self.offset
    }

    fn gradient(&self, _x: &[f64]) -> Vec<f64> {
        self.slope.clone()
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(x.len(), x.len())
    }

    fn sup_bound(&self) -> f64 {
        if self.slope.iter().all(|b| *b == 0.0) {
            self.offset.abs()
        } else {
            f64::INFINITY
        }
    }

    fn smoothness(&self) -> Smoothness {
        Smoothness::CInf
    }

    fn length_scale(&self) -> f64 {
        1.0
    }

    fn far_field(&self) -> FarField {
        FarField::Unbounded
    }

    fn describe(&self) -> String {
        if self.slope.iter().all(|b| *b == 0.0) {
            format!("const:value={};dim={}", self.offset, self.dim())
        } else {
            format!("linear:coeffs={};offset={}", fmt_list(&self.slope), self.offset)
        }
    }

    fn pair_sum(&self, x: &[f64], _y: &[f64]) -> f64 {
        2.0 * self.evaluate(x)
    }

    fn second_difference(&self, _x: &[f64], _y: &[f64]) -> f64 {
        0.0
    }
}

struct Params<'a> {
    kind: &'a str,
    pairs: Vec<(&'a str, &'a str)>,
    used: Vec<bool>,
}

impl<'a> Params<'a> {
    fn parse(spec: &'a str) -> Result<Self> {
        let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
        let mut pairs = Vec::new();
        for item in rest.split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key=value in `{item}`")))?;
            pairs.push((k.trim(), v.trim()));
        }
        let used = vec![false; pairs.len()];
        Ok(Self { kind: kind.trim(), pairs, used })
    }

    fn raw(&mut self, key: &str) -> Option<&'a str> {
        let i = self.pairs.iter().position(|(k, _)| *k == key)?;
        self.used[i] = true;
        Some(self.pairs[i].1)
    }

    fn list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{key}: `{t}`: {e}"))))
                    .collect()
            })
            .transpose()
    }

    fn number(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse::<f64>().map_err(|e| Error::Parse(format!("{key}: `{v}`: {e}"))),
        }
    }

    fn required(&mut self, key: &str) -> Result<Vec<f64>> {
        self.list(key)?.ok_or_else(|| Error::BadParameter(format!("`{}` needs `{key}=`", self.kind)))
    }

    fn finish(&self) -> Result<()> {
        match self.pairs.iter().zip(&self.used).find(|(_, u)| !**u) {
            Some(((k, _), _)) => Err(Error::BadParameter(format!("unknown parameter `{k}` for `{}`", self.kind))),
            None => Ok(()),
        }
    }
}

/// Parses a function spec string. `dim` fills in the dimension for kinds
/// whose parameters do not fix it and is checked against the rest.
pub fn parse_function(spec: &str, dim: Option<usize>) -> Result<Arc<dyn TestFunction>> {
    let mut p = Params::parse(spec)?;
    let f: Arc<dyn TestFunction> = match p.kind {
        "gaussian" => {
            let center = match p.list("center")? {
                Some(c) => c,
                None => vec![0.0; dim.ok_or_else(|| Error::BadParameter("gaussian needs center= or a dimension".into()))?],
            };
            let width = p.number("width", 1.0)?;
            let amplitude = p.number("amplitude", 1.0)?;
            Arc::new(Gaussian::with_amplitude(center, width, amplitude)?)
        }
        "plane-wave-cos" | "cos" => {
            let k = p.required("k")?;
            let amplitude = p.number("amplitude", 1.0)?;
            let phase = p.number("phase", 0.0)?;
            Arc::new(PlaneWave::new(k, amplitude, phase)?)
        }
        "bump" => {
            let center = p.required("center")?;
            let radius = p.number("radius", 1.0)?;
            let mut b = Bump::new(center, radius)?;
            b.amplitude = p.number("amplitude", 1.0)?;
            Arc::new(b)
        }
        "cutoff-quadratic" => {
            let center = p.required("center")?;
            let coeffs = match p.list("coeffs")? {
                Some(c) => c,
                None => vec![1.0; center.len()],
            };
            let radius = p.number("radius", 1.0)?;
            Arc::new(CutoffQuadratic::new(center, coeffs, radius)?)
        }
        "indicator" => {
            let lo = p.required("lo")?;
            let hi = p.required("hi")?;
            Arc::new(Indicator::new(lo, hi)?)
        }
        "const" => {
            let value = p.number("value", 1.0)?;
            let n = match p.raw("dim") {
                Some(v) => v.parse::<usize>().map_err(|e| Error::Parse(format!("dim: `{v}`: {e}")))?,
                None => dim.ok_or_else(|| Error::BadParameter("const needs dim= or a dimension".into()))?,
            };
            Arc::new(Affine::constant(n, value))
        }
        "linear" => {
            let b = p.required("coeffs")?;
            let c = p.number("offset", 0.0)?;
            Arc::new(Affine::linear(b, c))
        }
        other => return Err(Error::UnknownFunction(other.to_string())),
    };
    p.finish()?;
    if let Some(n) = dim {
        if f.dim() != n {
            return Err(Error::DimensionMismatch { expected: n, found: f.dim() });
        }
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn central_gradient(f: &dyn TestFunction, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f.evaluate(&p) - f.evaluate(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn central_hessian(f: &dyn TestFunction, x: &[f64]) -> DMatrix<f64> {
        let h = 1e-5;
        let n = x.len();
        DMatrix::from_fn(n, n, |i, j| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[j] += h;
            m[j] -= h;
            (f.gradient(&p)[i] - f.gradient(&m)[i]) / (2.0 * h)
        })
    }

    fn catalog() -> Vec<Arc<dyn TestFunction>> {
        [
            "gaussian:center=0.1,-0.2;width=0.7",
            "plane-wave-cos:k=1.3,-0.4;phase=0.3;amplitude=2",
            "bump:center=0,0;radius=1.5",
            "cutoff-quadratic:center=0,0;coeffs=1,2;radius=0.5",
        ]
        .iter()
        .map(|s| parse_function(s, Some(2)).unwrap())
        .collect()
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let points = [[0.3, 0.4], [0.55, -0.2], [0.8, 0.1], [-0.1, 0.05]];
        for f in catalog() {
            for x in &points {
                let g = f.gradient(x);
                for (a, b) in g.iter().zip(central_gradient(f.as_ref(), x)) {
                    assert!((a - b).abs() < 1e-7, "{}: gradient {a} vs {b}", f.describe());
                }
                let h = f.hessian(x);
                let fd = central_hessian(f.as_ref(), x);
                assert!((&h - &fd).amax() < 1e-5, "{}: hessian {h} vs {fd}", f.describe());
            }
        }
    }

    #[test]
    fn parse_rejects_unknowns() {
        assert_eq!(parse_function("sinc:center=0", None).unwrap_err(), Error::UnknownFunction("sinc".into()));
        assert!(matches!(parse_function("gaussian:center=0;colour=1", None), Err(Error::BadParameter(_))));
        assert!(matches!(parse_function("gaussian:center=0,0", Some(3)), Err(Error::DimensionMismatch { .. })));
        assert_eq!(parse_function("const:value=2", Some(3)).unwrap().dim(), 3);
    }

    #[test]
    fn describe_round_trips() {
        for f in catalog() {
            let again = parse_function(&f.describe(), None).unwrap();
            assert_eq!(again.describe(), f.describe());
        }
    }

    #[test]
    fn cutoff_is_quadratic_inside() {
        let f = CutoffQuadratic::new(vec![0.0, 0.0], vec![1.0, 3.0], 1.0).unwrap();
        assert_eq!(f.evaluate(&[0.5, 0.5]), 0.25 + 0.75);
        assert_eq!(f.evaluate(&[1.5, 1.5]), 0.0);
        let h = f.hessian(&[0.1, 0.2]);
        assert_eq!(h[(0, 0)], 2.0);
        assert_eq!(h[(1, 1)], 6.0);
    }

    #[test]
    fn indicator_regularity() {
        let f = Indicator::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        assert!(f.c2_near(&[0.0, 0.0]));
        assert!(!f.c2_near(&[1.0, 0.0]));
        assert!(f.c2_near(&[2.0, 0.0]));
        assert_eq!(f.second_difference(&[0.9, 0.0], &[0.2, 0.0]), 1.0);
    }

    proptest! {
        #[test]
        fn second_difference_matches_direct(
            x in prop::array::uniform2(-1.5f64..1.5),
            y in prop::array::uniform2(-1.0f64..1.0),
            scale in prop::sample::select(vec![1.0, 1e-2, 1e-4]),
        ) {
            let y = [y[0] * scale, y[1] * scale];
            for f in catalog() {
                let fast = f.second_difference(&x, &y);
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                for i in 0..2 { p[i] += y[i]; m[i] -= y[i]; }
                let direct = 2.0 * f.evaluate(&x) - f.evaluate(&p) - f.evaluate(&m);
                let tol = 1e-12 * f.sup_bound().max(1.0) + 1e-6 * direct.abs();
                prop_assert!((fast - direct).abs() <= tol, "{}: {fast} vs {direct}", f.describe());
            }
        }

        #[test]
        fn symmetric_in_y(x in prop::array::uniform2(-2.0f64..2.0), y in prop::array::uniform2(-1.0f64..1.0)) {
            for f in catalog() {
                let a = f.second_difference(&x, &y);
                let b = f.second_difference(&x, &[-y[0], -y[1]]);
                prop_assert!((a - b).abs() <= 1e-14 * f.sup_bound().max(1.0));
            }
        }
    }

    #[test]
    fn gaussian_difference_far_from_center() {
        let g = Gaussian::new(vec![0.0], 1.0).unwrap();
        let x = [40.0];
        let y = [39.5];
        assert_relative_eq!(g.second_difference(&x, &y), -(-0.125_f64).exp(), max_relative = 1e-14);
    }
}
