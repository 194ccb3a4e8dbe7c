//! Spectral measures on the unit sphere `S^{n-1}`.
//!
//! A measure is either a finite list of weighted atoms (any dimension), a
//! density sampled on a sphere grid (`n = 2` or `3`), or the uniform surface
//! measure. Everything downstream integrates against a measure through
//! [`SpectralMeasure::nodes`], which returns a discrete weighted rule.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::quadrature::{gauss_legendre, sphere_rule};

/// Directions closer than this to unit norm are accepted as-is.
pub const UNIT_TOL: f64 = 1e-12;
/// Directions within this distance of unit norm are renormalized.
pub const RENORMALIZE_TOL: f64 = 1e-9;
/// Relative tolerance of the full-grid / half-grid moment comparison.
pub const MOMENT_REFINE_TOL: f64 = 1e-6;

/// Default sphere resolution used for uniform measures.
pub const DEFAULT_SPHERE_RESOLUTION: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureKind {
    Atomic,
    DensityGrid,
    Uniform,
}

/// On-disk JSON form of a measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureFile {
    pub n: usize,
    pub kind: MeasureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<Vec<AtomFile>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<DensityFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomFile {
    pub dir: Vec<f64>,
    pub w: f64,
}

/// `grid` is `"equiangular"` for `n = 2` or `"gl-trapezoid:PxA"` for `n = 3`
/// (`P` polar Gauss-Legendre nodes, `A` azimuths, values polar-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityFile {
    pub grid: String,
    pub values: Vec<f64>,
}

/// A weighted direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub direction: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum DensityGrid {
    Circle { values: Vec<f64> },
    Sphere { polar: usize, azimuth: usize, values: Vec<f64> },
}

impl DensityGrid {
    fn grid_label(&self) -> String {
        match self {
            DensityGrid::Circle { .. } => "equiangular".into(),
            DensityGrid::Sphere { polar, azimuth, .. } => format!("gl-trapezoid:{polar}x{azimuth}"),
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            DensityGrid::Circle { values } | DensityGrid::Sphere { values, .. } => values,
        }
    }

    /// Grid directions with density times cell weight. `stride > 1` keeps
    /// every `stride`-th angle (azimuth for `n = 3`) with scaled weights.
    fn nodes(&self, stride: usize) -> Result<Vec<Atom>> {
        match self {
            DensityGrid::Circle { values } => {
                let n = values.len();
                let h = 2.0 * PI / n as f64;
                Ok((0..n)
                    .step_by(stride)
                    .map(|j| {
                        let t = h * j as f64;
                        Atom { direction: vec![t.cos(), t.sin()], weight: values[j] * h * stride as f64 }
                    })
                    .collect())
            }
            DensityGrid::Sphere { polar, azimuth, values } => {
                let gl = gauss_legendre(*polar)?;
                let h = 2.0 * PI / *azimuth as f64;
                let mut out = Vec::new();
                for (i, (t, w)) in gl.iter().enumerate() {
                    let z = 2.0 * t - 1.0;
                    let st = (1.0 - z * z).max(0.0).sqrt();
                    for j in (0..*azimuth).step_by(stride) {
                        let phi = h * j as f64;
                        out.push(Atom {
                            direction: vec![st * phi.cos(), st * phi.sin(), z],
                            weight: values[i * azimuth + j] * 2.0 * w * h * stride as f64,
                        });
                    }
                }
                Ok(out)
            }
        }
    }

    fn refinable(&self) -> bool {
        match self {
            DensityGrid::Circle { values } => values.len() % 2 == 0,
            DensityGrid::Sphere { azimuth, .. } => azimuth % 2 == 0,
        }
    }
}

/// A finite nonnegative measure on `S^{n-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMeasure {
    dim: usize,
    kind: MeasureKind,
    atoms: Vec<Atom>,
    density: Option<DensityGrid>,
    total_mass: f64,
}

/// Outcome of [`validate`]: the checked measure and one line per invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub measure: SpectralMeasure,
    /// Indices of atoms whose direction was renormalized.
    pub renormalized: Vec<usize>,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Validates a measure file, optionally against a finite-mass bound `Lambda`.
pub fn validate(file: &MeasureFile, mass_bound: Option<f64>) -> Result<ValidationReport> {
    let mut renormalized = Vec::new();
    let measure = match file.kind {
        MeasureKind::Atomic => {
            let atoms = file
                .atoms
                .as_ref()
                .ok_or_else(|| Error::Parse("atomic measure needs an `atoms` list".into()))?;
            let mut checked = Vec::with_capacity(atoms.len());
            for (index, a) in atoms.iter().enumerate() {
                let (dir, fixed) = unit_direction(index, &a.dir, file.n)?;
                if fixed {
                    renormalized.push(index);
                }
                checked.push((dir, a.w));
            }
            SpectralMeasure::atomic(file.n, checked)?
        }
        MeasureKind::Uniform => SpectralMeasure::uniform(file.n)?,
        MeasureKind::DensityGrid => {
            let d = file
                .density
                .as_ref()
                .ok_or_else(|| Error::Parse("density-grid measure needs a `density` block".into()))?;
            match (file.n, parse_grid(&d.grid)?) {
                (2, None) => SpectralMeasure::density_circle(d.values.clone())?,
                (3, Some((p, a))) => SpectralMeasure::density_sphere(p, a, d.values.clone())?,
                (2, Some(_)) | (3, None) => {
                    return Err(Error::Parse(format!("grid `{}` does not fit n = {}", d.grid, file.n)))
                }
                (n, _) => return Err(Error::UnsupportedDimension(n)),
            }
        }
    };

    let mut checks = vec![
        Check { name: "unit-directions", passed: true, detail: format!("{} renormalized", renormalized.len()) },
        Check { name: "nonnegative-weights", passed: true, detail: String::new() },
    ];
    let recomputed = measure.recompute_mass()?;
    let consistent = (recomputed - measure.total_mass).abs() <= 1e-12 * recomputed.abs().max(1.0);
    checks.push(Check {
        name: "mass-consistent",
        passed: consistent,
        detail: format!("cached {} recomputed {}", measure.total_mass, recomputed),
    });
    if let Some(bound) = mass_bound {
        if measure.total_mass > bound {
            return Err(Error::MassBoundExceeded { mass: measure.total_mass, bound });
        }
        checks.push(Check { name: "mass-bound", passed: true, detail: format!("{} <= {}", measure.total_mass, bound) });
    }
    Ok(ValidationReport { measure, renormalized, checks })
}

fn parse_grid(grid: &str) -> Result<Option<(usize, usize)>> {
    if grid == "equiangular" {
        return Ok(None);
    }
    let dims = grid
        .strip_prefix("gl-trapezoid:")
        .ok_or_else(|| Error::Parse(format!("unknown density grid `{grid}`")))?;
    let (p, a) = dims
        .split_once('x')
        .ok_or_else(|| Error::Parse(format!("grid sizes must read PxA, got `{dims}`")))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| Error::Parse(format!("grid size `{v}`: {e}")));
    Ok(Some((parse(p)?, parse(a)?)))
}

fn unit_direction(index: usize, dir: &[f64], n: usize) -> Result<(Vec<f64>, bool)> {
    if dir.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: dir.len() });
    }
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > RENORMALIZE_TOL {
        return Err(Error::NonUnitDirection { index, norm });
    }
    if (norm - 1.0).abs() <= UNIT_TOL {
        Ok((dir.to_vec(), false))
    } else {
        Ok((dir.iter().map(|v| v / norm).collect(), true))
    }
}

fn check_weights(values: &[f64]) -> Result<()> {
    for (index, &value) in values.iter().enumerate() {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::NegativeWeight { index, value });
        }
    }
    Ok(())
}

/// `int_{S^{n-1}} |omega_1|^{2s} d omega = 2 pi^{(n-1)/2} Gamma(s + 1/2) / Gamma(s + n/2)`.
pub fn uniform_abs_moment(n: usize, s: f64) -> f64 {
    let n = n as f64;
    2.0 * PI.powf(0.5 * (n - 1.0)) * gamma(s + 0.5) / gamma(s + 0.5 * n)
}

/// Surface area of `S^{n-1}`, `2 pi^{n/2} / Gamma(n/2)`.
pub fn unit_sphere_area(n: usize) -> f64 {
    match n {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => 2.0 * PI.powf(n as f64 / 2.0) / gamma(n as f64 / 2.0),
    }
}

impl SpectralMeasure {
    /// Measure made of weighted atoms. Directions must be unit vectors to
    /// within [`RENORMALIZE_TOL`]; near misses are renormalized.
    pub fn atomic(dim: usize, atoms: Vec<(Vec<f64>, f64)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::UnsupportedDimension(0));
        }
        let mut out = Vec::with_capacity(atoms.len());
        for (index, (dir, w)) in atoms.into_iter().enumerate() {
            let (direction, _) = unit_direction(index, &dir, dim)?;
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::NegativeWeight { index, value: w });
            }
            out.push(Atom { direction, weight: w });
        }
        let total_mass = out.iter().map(|a| a.weight).sum();
        Ok(Self { dim, kind: MeasureKind::Atomic, atoms: out, density: None, total_mass })
    }

    /// Uniform (surface) measure on `S^{n-1}`; counting measure on `{-1, 1}`
    /// when `n = 1`.
    pub fn uniform(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::UnsupportedDimension(0));
        }
        Ok(Self {
            dim,
            kind: MeasureKind::Uniform,
            atoms: Vec::new(),
            density: None,
            total_mass: unit_sphere_area(dim),
        })
    }

    /// Density on `S^1` sampled at `N` equispaced angles `2 pi j / N`.
    pub fn density_circle(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::BadParameter("density grid is empty".into()));
        }
        check_weights(&values)?;
        Self::from_density(2, DensityGrid::Circle { values })
    }

    /// Density on `S^2` on a Gauss-Legendre (in `cos theta`) by trapezoid
    /// (in azimuth) grid, values polar-major.
    pub fn density_sphere(polar: usize, azimuth: usize, values: Vec<f64>) -> Result<Self> {
        if polar == 0 || azimuth == 0 {
            return Err(Error::BadParameter("density grid is empty".into()));
        }
        if values.len() != polar * azimuth {
            return Err(Error::DimensionMismatch { expected: polar * azimuth, found: values.len() });
        }
        check_weights(&values)?;
        Self::from_density(3, DensityGrid::Sphere { polar, azimuth, values })
    }

    fn from_density(dim: usize, grid: DensityGrid) -> Result<Self> {
        let total_mass = grid.nodes(1)?.iter().map(|a| a.weight).sum();
        Ok(Self { dim, kind: MeasureKind::DensityGrid, atoms: Vec::new(), density: Some(grid), total_mass })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MeasureFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Ok(validate(&file, None)?.measure)
    }

    pub fn to_file(&self) -> MeasureFile {
        MeasureFile {
            n: self.dim,
            kind: self.kind,
            atoms: (self.kind == MeasureKind::Atomic).then(|| {
                self.atoms.iter().map(|a| AtomFile { dir: a.direction.clone(), w: a.weight }).collect()
            }),
            density: self
                .density
                .as_ref()
                .map(|g| DensityFile { grid: g.grid_label(), values: g.values().to_vec() }),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> MeasureKind {
        self.kind
    }

    /// Atoms of an atomic measure (empty otherwise).
    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    /// `int da`; fails with [`Error::NullMeasure`] on the zero measure.
    pub fn total_mass(&self) -> Result<f64> {
        if self.total_mass > 0.0 {
            Ok(self.total_mass)
        } else {
            Err(Error::NullMeasure)
        }
    }

    fn recompute_mass(&self) -> Result<f64> {
        Ok(match self.kind {
            MeasureKind::Atomic => self.atoms.iter().map(|a| a.weight).sum(),
            MeasureKind::Uniform => unit_sphere_area(self.dim),
            MeasureKind::DensityGrid => self.density.as_ref().expect("density").nodes(1)?.iter().map(|a| a.weight).sum(),
        })
    }

    /// Whether [`nodes`](Self::nodes) depends on the resolution argument.
    pub fn is_resolution_dependent(&self) -> bool {
        self.kind == MeasureKind::Uniform && self.dim >= 2
    }

    /// Discrete rule for `int f(omega) da(omega)`.
    ///
    /// Exact for atomic measures; the stored grid for density measures; a
    /// sphere rule of the given resolution for uniform measures.
    pub fn nodes(&self, resolution: usize) -> Result<Vec<Atom>> {
        match self.kind {
            MeasureKind::Atomic => Ok(self.atoms.clone()),
            MeasureKind::DensityGrid => self.density.as_ref().expect("density").nodes(1),
            MeasureKind::Uniform => match self.dim {
                1 => Ok(vec![
                    Atom { direction: vec![1.0], weight: 1.0 },
                    Atom { direction: vec![-1.0], weight: 1.0 },
                ]),
                n => {
                    let rule = sphere_rule(n, resolution)?;
                    Ok(rule
                        .directions()
                        .iter()
                        .zip(rule.weights())
                        .map(|(d, &w)| Atom { direction: d.clone(), weight: w })
                        .collect())
                }
            },
        }
    }

    /// Moment matrix `m_ij = int omega_i omega_j da(omega)`.
    pub fn second_moment(&self) -> Result<MomentMatrix> {
        let nodes = match self.kind {
            // Degree-2 exactness needs only a handful of nodes.
            MeasureKind::Uniform => self.nodes(8)?,
            MeasureKind::Atomic => self.nodes(0)?,
            MeasureKind::DensityGrid => {
                let grid = self.density.as_ref().expect("density");
                let full = moments(self.dim, &grid.nodes(1)?);
                if grid.refinable() {
                    let half = moments(self.dim, &grid.nodes(2)?);
                    let delta = (&full - &half).abs().max();
                    let tolerance = MOMENT_REFINE_TOL * self.total_mass.max(f64::MIN_POSITIVE);
                    if delta > tolerance {
                        return Err(Error::QuadratureUnderResolved { delta, tolerance });
                    }
                }
                return Ok(MomentMatrix(full));
            }
        };
        Ok(MomentMatrix(moments(self.dim, &nodes)))
    }

    /// Grid approximation of `inf_{|e| = 1} int |omega . e|^{2s} da(omega)`.
    pub fn ellipticity(&self, s: f64, resolution: usize) -> Result<Ellipticity> {
        ellipticity(self, s, resolution)
    }

    /// `int |k . omega|^{2s} da(omega)`; closed form for uniform measures.
    pub fn abs_moment(&self, k: &[f64], s: f64, resolution: usize) -> Result<f64> {
        if k.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: k.len() });
        }
        self.total_mass()?;
        if self.kind == MeasureKind::Uniform {
            let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
            return Ok(uniform_abs_moment(self.dim, s) * norm.powf(2.0 * s));
        }
        Ok(directional_moment(&self.nodes(resolution)?, k, s))
    }

    /// Prepared sampler for directions distributed as `da / Lambda`.
    pub fn sampler(&self) -> Result<DirectionSampler<'_>> {
        self.total_mass()?;
        let table = match self.kind {
            MeasureKind::Uniform => None,
            MeasureKind::Atomic => Some(
                WeightedIndex::new(self.atoms.iter().map(|a| a.weight)).map_err(|_| Error::NullMeasure)?,
            ),
            MeasureKind::DensityGrid => {
                let nodes = self.density.as_ref().expect("density").nodes(1)?;
                Some(WeightedIndex::new(nodes.iter().map(|a| a.weight)).map_err(|_| Error::NullMeasure)?)
            }
        };
        Ok(DirectionSampler { measure: self, table })
    }
}

fn moments(dim: usize, nodes: &[Atom]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(dim, dim);
    for a in nodes {
        for i in 0..dim {
            for j in 0..=i {
                m[(i, j)] += a.weight * a.direction[i] * a.direction[j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            m[(j, i)] = m[(i, j)];
        }
    }
    m
}

/// Draws `omega ~ da / Lambda` for one measure.
pub struct DirectionSampler<'a> {
    measure: &'a SpectralMeasure,
    table: Option<WeightedIndex<f64>>,
}

impl DirectionSampler<'_> {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let m = self.measure;
        match (m.kind, &self.table) {
            (MeasureKind::Atomic, Some(t)) => m.atoms[t.sample(rng)].direction.clone(),
            (MeasureKind::DensityGrid, Some(t)) => jittered(m.density.as_ref().expect("density"), t.sample(rng), rng),
            _ => uniform_direction(m.dim, rng),
        }
    }
}

fn uniform_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    if dim == 1 {
        return vec![if rng.random::<bool>() { 1.0 } else { -1.0 }];
    }
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-300 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn jittered<R: Rng + ?Sized>(grid: &DensityGrid, cell: usize, rng: &mut R) -> Vec<f64> {
    match grid {
        DensityGrid::Circle { values } => {
            let h = 2.0 * PI / values.len() as f64;
            let t = h * (cell as f64 + rng.random::<f64>() - 0.5);
            vec![t.cos(), t.sin()]
        }
        DensityGrid::Sphere { polar, azimuth, .. } => {
            let (i, j) = (cell / azimuth, cell % azimuth);
            // Polar cells partition [-1, 1] by the cumulative Legendre weights.
            let gl = gauss_legendre(*polar).expect("validated grid");
            let lo: f64 = -1.0 + 2.0 * gl.weights()[..i].iter().sum::<f64>();
            let z = (lo + 2.0 * gl.weights()[i] * rng.random::<f64>()).clamp(-1.0, 1.0);
            let h = 2.0 * PI / *azimuth as f64;
            let phi = h * (j as f64 + rng.random::<f64>() - 0.5);
            let st = (1.0 - z * z).max(0.0).sqrt();
            vec![st * phi.cos(), st * phi.sin(), z]
        }
    }
}

/// Samples one direction from `da / Lambda`.
pub fn sample_direction<R: Rng + ?Sized>(measure: &SpectralMeasure, rng: &mut R) -> Result<Vec<f64>> {
    Ok(measure.sampler()?.sample(rng))
}

/// Symmetric positive semidefinite matrix of second angular moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentMatrix(pub DMatrix<f64>);

impl MomentMatrix {
    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// `sum_ij m_ij b_ij`.
    pub fn pair(&self, other: &DMatrix<f64>) -> f64 {
        self.0.component_mul(other).sum()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.0.clone().symmetric_eigenvalues().min()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.0.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

/// Grid estimate of the ellipticity constant.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipticity {
    /// Smallest value found (an upper bound on the true infimum).
    pub lambda: f64,
    /// Coarse-grid minimum minus refined minimum.
    pub refinement_delta: f64,
    pub minimizer: Vec<f64>,
}

fn directional_moment(nodes: &[Atom], e: &[f64], s: f64) -> f64 {
    nodes
        .iter()
        .map(|a| {
            let dot: f64 = a.direction.iter().zip(e).map(|(x, y)| x * y).sum();
            a.weight * dot.abs().powf(2.0 * s)
        })
        .sum()
}

fn ellipticity(m: &SpectralMeasure, s: f64, resolution: usize) -> Result<Ellipticity> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::BadParameter(format!("s = {s} must lie in (0, 1)")));
    }
    if m.dim > 3 {
        return Err(Error::UnsupportedDimension(m.dim));
    }
    let resolution = resolution.max(4);
    if m.kind == MeasureKind::Uniform && m.dim >= 2 {
        let lambda = uniform_abs_moment(m.dim, s);
        let mut minimizer = vec![0.0; m.dim];
        minimizer[0] = 1.0;
        return Ok(Ellipticity { lambda, refinement_delta: 0.0, minimizer });
    }

    let nodes = m.nodes(resolution)?;
    match m.dim {
        1 => Ok(Ellipticity { lambda: directional_moment(&nodes, &[1.0], s), refinement_delta: 0.0, minimizer: vec![1.0] }),
        2 => {
            let f = |e: &[f64]| directional_moment(&nodes, e, s);
            let mut candidates: Vec<Vec<f64>> = (0..resolution)
                .map(|j| {
                    let t = PI * j as f64 / resolution as f64;
                    vec![t.cos(), t.sin()]
                })
                .collect();
            // Kinks sit where e is orthogonal to an atom.
            candidates.extend(nodes.iter().map(|a| vec![-a.direction[1], a.direction[0]]));
            let (mut best_e, mut best) = candidates
                .into_iter()
                .map(|e| {
                    let v = f(&e);
                    (e, v)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("nonempty grid");
            let coarse = best;
            let mut h = PI / resolution as f64;
            for _ in 0..4 {
                let t0 = best_e[1].atan2(best_e[0]);
                for k in -16..=16 {
                    let t = t0 + h * k as f64 / 16.0;
                    let e = [t.cos(), t.sin()];
                    let v = f(&e);
                    if v < best {
                        best = v;
                        best_e = e.to_vec();
                    }
                }
                h /= 16.0;
            }
            Ok(Ellipticity { lambda: best, refinement_delta: coarse - best, minimizer: best_e })
        }
        _ => {
            let f = |e: &[f64]| directional_moment(&nodes, e, s);
            let mut candidates = Vec::new();
            for i in 0..=resolution {
                let theta = 0.5 * PI * i as f64 / resolution as f64;
                for j in 0..(4 * resolution) {
                    let phi = 2.0 * PI * j as f64 / (4 * resolution) as f64;
                    candidates.push(vec![theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]);
                }
            }
            if m.kind == MeasureKind::Atomic && nodes.len() <= 64 {
                for (i, a) in nodes.iter().enumerate() {
                    for b in &nodes[i + 1..] {
                        let c = cross(&a.direction, &b.direction);
                        let n = norm(&c);
                        if n > 1e-12 {
                            candidates.push(c.iter().map(|v| v / n).collect());
                        }
                    }
                }
            }
            let (mut best_e, mut best) = candidates
                .into_iter()
                .map(|e| {
                    let v = f(&e);
                    (e, v)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("nonempty grid");
            let coarse = best;
            let mut h = PI / resolution as f64;
            for _ in 0..4 {
                let (u, v) = tangent_basis(&best_e);
                let center = best_e.clone();
                for a in -8..=8 {
                    for b in -8..=8 {
                        let (da, db) = (h * a as f64 / 8.0, h * b as f64 / 8.0);
                        let mut e: Vec<f64> = (0..3).map(|k| center[k] + da * u[k] + db * v[k]).collect();
                        let n = norm(&e);
                        e.iter_mut().for_each(|x| *x /= n);
                        let val = f(&e);
                        if val < best {
                            best = val;
                            best_e = e;
                        }
                    }
                }
                h /= 8.0;
            }
            Ok(Ellipticity { lambda: best, refinement_delta: coarse - best, minimizer: best_e })
        }
    }
}

fn cross(a: &[f64], b: &[f64]) -> Vec<f64> {
    vec![a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn tangent_basis(e: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let pick = if e[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = cross(e, &pick);
    let nu = norm(&u);
    let u: Vec<f64> = u.iter().map(|x| x / nu).collect();
    let v = cross(e, &u);
    (u, v)
}
