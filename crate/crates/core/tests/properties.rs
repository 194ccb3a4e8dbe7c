use std::sync::Arc;

use nalgebra::DMatrix;
use nonlocal_mean::asymptotics::{hs_seminorm, local_limit_operator, SeminormMethod, SeminormSpec};
use nonlocal_mean::funcs::{parse_function, Affine, Bump, FarField, Gaussian, Smoothness, TestFunction};
use nonlocal_mean::meankernel::{mean_value, MeanKernel};
use nonlocal_mean::measure::SpectralMeasure;
use nonlocal_mean::operator::{eval_operator, symbol, QuadratureSpec};
use nonlocal_mean::wos::{run_walks, Domain, WalkConfig};
use proptest::prelude::*;

/// `a f + b g`, with support information taken from both terms.
#[derive(Debug)]
struct Combination {
    a: f64,
    f: Arc<dyn TestFunction>,
    b: f64,
    g: Arc<dyn TestFunction>,
}

impl TestFunction for Combination {
    fn dim(&self) -> usize {
        self.f.dim()
    }
    fn evaluate(&self, x: &[f64]) -> f64 {
        self.a * self.f.evaluate(x) + self.b * self.g.evaluate(x)
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.f.gradient(x).iter().zip(self.g.gradient(x)).map(|(p, q)| self.a * p + self.b * q).collect()
    }
    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        self.f.hessian(x) * self.a + self.g.hessian(x) * self.b
    }
    fn sup_bound(&self) -> f64 {
        self.a.abs() * self.f.sup_bound() + self.b.abs() * self.g.sup_bound()
    }
    fn smoothness(&self) -> Smoothness {
        Smoothness::CInf
    }
    fn length_scale(&self) -> f64 {
        self.f.length_scale().min(self.g.length_scale())
    }
    fn far_field(&self) -> FarField {
        match (self.f.far_field(), self.g.far_field()) {
            (FarField::Compact { center: c1, radius: r1 }, FarField::Compact { center: c2, radius: r2 }) => {
                let gap = c1.iter().zip(&c2).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                FarField::Compact { center: c1, radius: r1.max(gap + r2) }
            }
            _ => FarField::Unbounded,
        }
    }
    fn describe(&self) -> String {
        format!("{} * ({}) + {} * ({})", self.a, self.f.describe(), self.b, self.g.describe())
    }
    fn c2_near(&self, x: &[f64]) -> bool {
        self.f.c2_near(x) && self.g.c2_near(x)
    }
}

fn measures() -> Vec<SpectralMeasure> {
    vec![
        SpectralMeasure::uniform(2).unwrap(),
        SpectralMeasure::atomic(2, vec![(vec![0.6, 0.8], 0.7), (vec![-1.0, 0.0], 1.3), (vec![0.0, -1.0], 0.4)]).unwrap(),
        SpectralMeasure::density_circle(vec![1.0, 2.0, 0.5, 0.0, 1.5, 3.0, 1.0, 0.2]).unwrap(),
    ]
}

fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= abs + rel * a.abs().max(b.abs())
}

fn config() -> ProptestConfig {
    ProptestConfig { cases: 24, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn operator_is_linear(
        a in -2.0..2.0f64, b in -2.0..2.0f64,
        cx in -0.5..0.5f64, cy in -0.5..0.5f64,
        x in -0.4..0.4f64, y in -0.4..0.4f64,
        s in 0.15..0.85f64, which in 0usize..3,
    ) {
        let m = &measures()[which];
        let quad = QuadratureSpec::default();
        let f: Arc<dyn TestFunction> = Arc::new(Bump::new(vec![0.0, 0.0], 1.0).unwrap());
        let g: Arc<dyn TestFunction> = Arc::new(Bump::new(vec![cx, cy], 0.8).unwrap());
        let sum = Combination { a, f: f.clone(), b, g: g.clone() };
        let lf = eval_operator(f.as_ref(), &[x, y], s, m, 1.0, &quad).unwrap();
        let lg = eval_operator(g.as_ref(), &[x, y], s, m, 1.0, &quad).unwrap();
        let ls = eval_operator(&sum, &[x, y], s, m, 1.0, &quad).unwrap();
        let expected = a * lf.value + b * lg.value;
        let slack = 10.0 * (a.abs() * lf.error_estimate + b.abs() * lg.error_estimate + ls.error_estimate);
        prop_assert!(close(ls.value, expected, 1e-7, 1e-9 + slack), "{} vs {}", ls.value, expected);
    }

    #[test]
    fn operator_commutes_with_translation(
        zx in -3.0..3.0f64, zy in -3.0..3.0f64,
        x in -1.0..1.0f64, y in -1.0..1.0f64,
        s in 0.1..0.9f64, which in 0usize..3,
    ) {
        let m = &measures()[which];
        let quad = QuadratureSpec::default();
        let u = Gaussian::new(vec![0.2, -0.1], 0.7).unwrap();
        let shifted = Gaussian::new(vec![0.2 + zx, -0.1 + zy], 0.7).unwrap();
        let a = eval_operator(&u, &[x, y], s, m, 1.0, &quad).unwrap();
        let b = eval_operator(&shifted, &[x + zx, y + zy], s, m, 1.0, &quad).unwrap();
        prop_assert!(close(a.value, b.value, 1e-9, 1e-11), "{} vs {}", a.value, b.value);
    }

    #[test]
    fn operator_scales_with_order(
        lambda in 0.3..3.0f64,
        x in -1.0..1.0f64, y in -1.0..1.0f64,
        s in 0.1..0.9f64, which in 0usize..3,
    ) {
        // u_l(x) = u(l x) gives L u_l(x) = l^{2s} (L u)(l x).
        let m = &measures()[which];
        let quad = QuadratureSpec::default();
        let (c, w) = ([0.3, 0.1], 0.9);
        let u = Gaussian::new(c.to_vec(), w).unwrap();
        let scaled = Gaussian::new(vec![c[0] / lambda, c[1] / lambda], w / lambda).unwrap();
        let a = eval_operator(&scaled, &[x, y], s, m, 1.0, &quad).unwrap();
        let b = eval_operator(&u, &[lambda * x, lambda * y], s, m, 1.0, &quad).unwrap();
        let expected = lambda.powf(2.0 * s) * b.value;
        prop_assert!(close(a.value, expected, 1e-8, 1e-10), "{} vs {}", a.value, expected);
    }

    #[test]
    fn plane_waves_are_eigenfunctions(
        kx in -3.0..3.0f64, ky in -3.0..3.0f64, phase in 0.0..6.3f64,
        x in -2.0..2.0f64, y in -2.0..2.0f64,
        s in 0.1..0.9f64, which in 0usize..2,
    ) {
        let m = &measures()[which];
        let u = parse_function(&format!("cos:k={kx},{ky};phase={phase}"), None).unwrap();
        let got = eval_operator(u.as_ref(), &[x, y], s, m, 1.0, &QuadratureSpec::default()).unwrap();
        let expected = symbol(&[kx, ky], s, m).unwrap() * u.evaluate(&[x, y]);
        prop_assert!(close(got.value, expected, 1e-7, 1e-9), "{} vs {}", got.value, expected);
        prop_assert!((got.value - expected).abs() <= 1e-12 + 10.0 * got.error_estimate.max(1e-13 * expected.abs()));
    }

    #[test]
    fn mean_value_reproduces_affine_functions(
        c0 in -2.0..2.0f64, c1 in -2.0..2.0f64, offset in -3.0..3.0f64,
        x in -1.0..1.0f64, y in -1.0..1.0f64,
        r in 0.001..0.5f64, s in 0.1..0.9f64, which in 0usize..3,
    ) {
        let m = &measures()[which];
        let u = Affine::linear(vec![c0, c1], offset);
        let params = MeanKernel::new(r, s, m).unwrap();
        let v = mean_value(&u, &[x, y], &params, &QuadratureSpec::default()).unwrap();
        prop_assert!(close(v.value, u.evaluate(&[x, y]), 1e-12, 1e-12), "{}", v.value);
    }

    #[test]
    fn mean_value_is_an_average(
        cx in -1.0..1.0f64, cy in -1.0..1.0f64, w in 0.2..2.0f64,
        r in 0.01..1.0f64, s in 0.1..0.9f64, which in 0usize..3,
    ) {
        let m = &measures()[which];
        let u = Gaussian::new(vec![cx, cy], w).unwrap();
        let params = MeanKernel::new(r, s, m).unwrap();
        let v = mean_value(&u, &[0.0, 0.0], &params, &QuadratureSpec::default()).unwrap();
        prop_assert!(v.value > -1e-12 && v.value < 1.0 + 1e-12, "{}", v.value);
    }

    #[test]
    fn operator_scales_with_measure_mass(factor in 0.1..10.0f64, s in 0.1..0.9f64) {
        let base = SpectralMeasure::atomic(2, vec![(vec![0.6, 0.8], 0.7), (vec![-1.0, 0.0], 1.3)]).unwrap();
        let heavy = SpectralMeasure::atomic(2, vec![(vec![0.6, 0.8], 0.7 * factor), (vec![-1.0, 0.0], 1.3 * factor)]).unwrap();
        let u = Gaussian::new(vec![0.1, 0.2], 1.0).unwrap();
        let quad = QuadratureSpec::default();
        let a = eval_operator(&u, &[0.0, 0.0], s, &base, 1.0, &quad).unwrap();
        let b = eval_operator(&u, &[0.0, 0.0], s, &heavy, 1.0, &quad).unwrap();
        prop_assert!(close(b.value, factor * a.value, 1e-12, 1e-14));
        let ma = mean_value(&u, &[0.0, 0.0], &MeanKernel::new(0.3, s, &base).unwrap(), &quad).unwrap();
        let mb = mean_value(&u, &[0.0, 0.0], &MeanKernel::new(0.3, s, &heavy).unwrap(), &quad).unwrap();
        prop_assert!(close(ma.value, mb.value, 1e-12, 1e-14));
    }

    #[test]
    fn walk_estimates_are_bounded_by_the_data(
        seed in 0u64..1000, theta in 0.2..1.0f64, s in 0.2..0.8f64,
        px in -0.5..0.5f64, py in -0.5..0.5f64, amplitude in -3.0..3.0f64,
    ) {
        let m = &measures()[which_for(seed)];
        let domain = Domain::ball(vec![0.0, 0.0], 1.0).unwrap();
        let g = Gaussian::with_amplitude(vec![1.5, 0.0], 0.6, amplitude).unwrap();
        let cfg = WalkConfig { walks: 200, seed, theta, ..Default::default() };
        let st = run_walks(&[px, py], s, m, &domain, &g, &cfg).unwrap();
        prop_assert!(st.estimate.abs() <= amplitude.abs() + 1e-15);
        prop_assert!((0.0..=1.0).contains(&st.truncated_frac));
    }
}

fn which_for(seed: u64) -> usize {
    (seed % 3) as usize
}

#[test]
fn local_limit_target_ignores_affine_terms() {
    let m = &measures()[1];
    let quad = QuadratureSpec::default();
    let g: Arc<dyn TestFunction> = Arc::new(Gaussian::new(vec![0.0, 0.0], 1.0).unwrap());
    let tilted = Combination { a: 1.0, f: g.clone(), b: 1.0, g: Arc::new(Affine::linear(vec![2.0, -1.0], 0.5)) };
    let a = local_limit_operator(g.as_ref(), &[0.1, 0.2], m, &[0.9, 0.99], &quad).unwrap();
    let b = local_limit_operator(&tilted, &[0.1, 0.2], m, &[0.9, 0.99], &quad).unwrap();
    for (p, q) in a.rows.iter().zip(&b.rows) {
        assert_eq!(p.target, q.target);
    }
}

#[test]
fn seminorm_is_translation_invariant() {
    let m = SpectralMeasure::atomic(2, vec![(vec![1.0, 0.0], 1.0), (vec![-1.0, 0.0], 1.0), (vec![0.6, 0.8], 0.5)]).unwrap();
    let spec = SeminormSpec::default();
    let a = hs_seminorm(&Bump::new(vec![0.0, 0.0], 1.0).unwrap(), 0.4, &m, SeminormMethod::TensorQuadrature, &spec).unwrap();
    let b = hs_seminorm(&Bump::new(vec![1.7, -2.3], 1.0).unwrap(), 0.4, &m, SeminormMethod::TensorQuadrature, &spec).unwrap();
    assert!(close(a.squared, b.squared, 1e-8, 0.0), "{} vs {}", a.squared, b.squared);
    let zero = Affine::constant(2, 0.0);
    assert!(matches!(
        hs_seminorm(&zero, 0.4, &m, SeminormMethod::TensorQuadrature, &spec),
        Err(nonlocal_mean::Error::UnboundedSupport)
    ));
}

#[test]
fn walk_estimates_are_linear_in_the_data() {
    let m = &measures()[1];
    let domain = Domain::ball(vec![0.0, 0.0], 1.0).unwrap();
    let f: Arc<dyn TestFunction> = Arc::new(Gaussian::new(vec![1.5, 0.0], 0.6).unwrap());
    let g: Arc<dyn TestFunction> = Arc::new(Bump::new(vec![-1.2, 0.5], 0.7).unwrap());
    let combo = Combination { a: 2.0, f: f.clone(), b: -0.5, g: g.clone() };
    let cfg = WalkConfig { walks: 3000, seed: 42, h_max: Some(0.3), ..Default::default() };
    let run = |u: &dyn TestFunction| run_walks(&[0.1, 0.2], 0.6, m, &domain, u, &cfg).unwrap().estimate;
    let (ef, eg, ec) = (run(f.as_ref()), run(g.as_ref()), run(&combo));
    assert!((ec - (2.0 * ef - 0.5 * eg)).abs() < 1e-12);
}

#[test]
fn walks_terminate_as_step_budget_grows() {
    let m = SpectralMeasure::uniform(2).unwrap();
    let domain = Domain::boxed(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
    let g = Affine::constant(2, 1.0);
    let mut last = 1.0;
    for max_steps in [100, 1000, 10_000] {
        let cfg = WalkConfig { walks: 2000, max_steps, seed: 3, ..Default::default() };
        let st = run_walks(&[0.1, 0.0], 0.3, &m, &domain, &g, &cfg).unwrap();
        assert!(st.truncated_frac <= last);
        last = st.truncated_frac;
    }
    assert_eq!(last, 0.0);
}
