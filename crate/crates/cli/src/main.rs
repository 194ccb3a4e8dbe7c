//! `nlmean`: command-line front end for the nonlocal-mean toolkit.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nonlocal_mean::asymptotics::{
    bbm_check, fit_expansion_order, h1_seminorm, halving_ladder, hs_seminorm, local_limit_mean,
    local_limit_operator, LimitReport, SeminormMethod, SeminormSpec, S_LADDER, UNIFORM_BOUND_GRID,
};
use nonlocal_mean::funcs::{parse_function, TestFunction};
use nonlocal_mean::meankernel::{mean_value, MeanKernel};
use nonlocal_mean::measure::{validate, MeasureFile, SpectralMeasure, DEFAULT_SPHERE_RESOLUTION};
use nonlocal_mean::operator::{eval_operator, QuadratureSpec};
use nonlocal_mean::wos::{run_walks, Domain, WalkConfig};
use nonlocal_mean::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use output::{emit, Csv};

#[derive(Parser)]
#[command(name = "nlmean", version, about = "Anisotropic nonlocal operators, mean kernels and their asymptotics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a measure file and print its mass, moments and ellipticity.
    MeasureInfo(MeasureInfoArgs),
    /// Evaluate L u(x).
    EvalOperator(EvalOperatorArgs),
    /// Evaluate the mean kernel average M^s_r u(x).
    MeanValue(MeanValueArgs),
    /// Draw jumps from the mean-kernel law as CSV.
    SampleJump(SampleJumpArgs),
    /// Fit the order of the small-radius expansion residual.
    VerifyExpansion(VerifyExpansionArgs),
    /// Follow L or M^s_r along an s -> 1 ladder.
    LimitS1(LimitArgs),
    /// Check (1 - s)[u]^2_{H^s} -> [u]^2_{H^1} and the uniform bound.
    Bbm(BbmArgs),
    /// Compute the H^s seminorm, the energy and the H^1 seminorm.
    Seminorm(SeminormArgs),
    /// Walk-on-spheres estimate of the exterior Dirichlet problem.
    SolveWos(WosArgs),
}

#[derive(Args)]
struct MeasureInfoArgs {
    /// Measure JSON file.
    file: PathBuf,
    /// Reject measures heavier than this.
    #[arg(long)]
    mass_bound: Option<f64>,
    /// Order used for the ellipticity constant.
    #[arg(long, default_value_t = 0.5)]
    s: f64,
    #[arg(long, default_value_t = DEFAULT_SPHERE_RESOLUTION)]
    resolution: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Problem {
    /// Measure JSON file.
    #[arg(long)]
    measure: PathBuf,
    /// Test function, e.g. `gaussian:center=0,0;width=1`.
    #[arg(long = "fn")]
    function: String,
    /// Evaluation point, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x: Vec<f64>,
}

#[derive(Args)]
struct QuadArgs {
    #[arg(long, default_value_t = 24)]
    jacobi_nodes: usize,
    #[arg(long, default_value_t = 12)]
    panel_nodes: usize,
    #[arg(long, default_value_t = 32)]
    sphere_resolution: usize,
    /// Truncate the radial integral at this radius and report a bound.
    #[arg(long)]
    tail_cap: Option<f64>,
    /// Exit with status 3 if the error estimate exceeds this.
    #[arg(long)]
    tol: Option<f64>,
}

impl QuadArgs {
    fn spec(&self) -> QuadratureSpec {
        QuadratureSpec {
            jacobi_nodes: self.jacobi_nodes,
            panel_nodes: self.panel_nodes,
            sphere_resolution: self.sphere_resolution,
            tail_cap: self.tail_cap,
        }
    }
}

#[derive(Args)]
struct EvalOperatorArgs {
    #[command(flatten)]
    problem: Problem,
    #[arg(long)]
    s: f64,
    /// Split radius between the singular and far parts.
    #[arg(long, default_value_t = 1.0)]
    rho0: f64,
    #[command(flatten)]
    quad: QuadArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MeanValueArgs {
    #[command(flatten)]
    problem: Problem,
    #[arg(long)]
    s: f64,
    #[arg(long)]
    r: f64,
    #[command(flatten)]
    quad: QuadArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleJumpArgs {
    #[arg(long)]
    measure: PathBuf,
    #[arg(long)]
    s: f64,
    #[arg(long)]
    r: f64,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TableOut {
    /// JSON summary destination (stdout by default).
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV table destination.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyExpansionArgs {
    #[command(flatten)]
    problem: Problem,
    #[arg(long)]
    s: f64,
    /// Largest radius of the halving ladder.
    #[arg(long, default_value_t = 0.1)]
    r_max: f64,
    /// Smallest radius of the halving ladder.
    #[arg(long, default_value_t = 0.00625)]
    r_min: f64,
    #[command(flatten)]
    quad: QuadArgs,
    #[command(flatten)]
    table: TableOut,
}

#[derive(Clone, Copy, ValueEnum)]
enum Limit {
    Operator,
    Mean,
}

#[derive(Args)]
struct LimitArgs {
    #[command(flatten)]
    problem: Problem,
    #[arg(long, value_enum, default_value_t = Limit::Operator)]
    which: Limit,
    /// Radius for the mean-kernel limit.
    #[arg(long, default_value_t = 0.5)]
    r: f64,
    #[arg(long, value_delimiter = ',', default_values_t = S_LADDER)]
    ladder: Vec<f64>,
    /// Accepted final relative error.
    #[arg(long, default_value_t = 1e-2)]
    rel_tol: f64,
    #[command(flatten)]
    quad: QuadArgs,
    #[command(flatten)]
    table: TableOut,
}

#[derive(Args)]
struct SeminormGrid {
    /// Gauss-Legendre nodes per x-panel and coordinate.
    #[arg(long, default_value_t = 8)]
    grid_nodes: usize,
    #[arg(long, default_value_t = 20)]
    jacobi_nodes: usize,
    #[arg(long, default_value_t = 10)]
    panel_nodes: usize,
    #[arg(long, default_value_t = 16)]
    sphere_resolution: usize,
}

impl SeminormGrid {
    fn spec(&self) -> SeminormSpec {
        SeminormSpec {
            grid_nodes: self.grid_nodes,
            quad: QuadratureSpec {
                jacobi_nodes: self.jacobi_nodes,
                panel_nodes: self.panel_nodes,
                sphere_resolution: self.sphere_resolution,
                tail_cap: None,
            },
        }
    }
}

#[derive(Args)]
struct BbmArgs {
    #[arg(long)]
    measure: PathBuf,
    #[arg(long = "fn")]
    function: String,
    #[arg(long, value_delimiter = ',', default_values_t = [0.9, 0.95, 0.99])]
    ladder: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = UNIFORM_BOUND_GRID)]
    bound_grid: Vec<f64>,
    #[arg(long, default_value_t = 2e-2)]
    rel_tol: f64,
    #[command(flatten)]
    grid: SeminormGrid,
    #[command(flatten)]
    table: TableOut,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Tensor,
    Mc,
}

#[derive(Args)]
struct SeminormArgs {
    #[arg(long)]
    measure: PathBuf,
    #[arg(long = "fn")]
    function: String,
    #[arg(long)]
    s: f64,
    #[arg(long, value_enum, default_value_t = Method::Tensor)]
    method: Method,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    grid: SeminormGrid,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WosArgs {
    #[arg(long)]
    measure: PathBuf,
    /// `ball:center=0,0;radius=1` or `box:lo=-1,-1;hi=1,1`.
    #[arg(long)]
    domain: String,
    /// Exterior data, as a test function spec.
    #[arg(long)]
    g: String,
    #[arg(long)]
    s: f64,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    point: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    walks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    theta: f64,
    #[arg(long)]
    hmax: Option<f64>,
    #[arg(long, default_value_t = 10_000)]
    max_steps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    /// Bad input: exit 2.
    Usage(String),
    /// Computed but imprecise, or a check did not pass: exit 3.
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::QuadratureUnderResolved { .. } | Error::NonfiniteValue(_) | Error::Overflow(_) => {
                Failure::Numerical(e.to_string())
            }
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MeasureInfo(a) => measure_info(a),
        Command::EvalOperator(a) => eval_operator_cmd(a),
        Command::MeanValue(a) => mean_value_cmd(a),
        Command::SampleJump(a) => sample_jump(a),
        Command::VerifyExpansion(a) => verify_expansion(a),
        Command::LimitS1(a) => limit_s1(a),
        Command::Bbm(a) => bbm(a),
        Command::Seminorm(a) => seminorm(a),
        Command::SolveWos(a) => solve_wos(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(3)
        }
    }
}

fn load_measure(path: &Path, mass_bound: Option<f64>) -> Result<(SpectralMeasure, Vec<usize>), Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let file: MeasureFile =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let report = validate(&file, mass_bound)?;
    if let Some(bad) = report.checks.iter().find(|c| !c.passed) {
        return Err(Failure::Usage(format!("measure check `{}` failed: {}", bad.name, bad.detail)));
    }
    Ok((report.measure, report.renormalized))
}

fn load_function(spec: &str, dim: usize) -> Result<Arc<dyn TestFunction>, Failure> {
    let u = parse_function(spec, Some(dim))?;
    if u.dim() != dim {
        return Err(Error::DimensionMismatch { expected: dim, found: u.dim() }.into());
    }
    Ok(u)
}

fn check_point(x: &[f64], dim: usize) -> Outcome {
    if x.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, found: x.len() }.into());
    }
    Ok(())
}

fn check_tol(error: f64, tol: Option<f64>) -> Outcome {
    match tol {
        Some(t) if !(error <= t) => Err(Failure::Numerical(format!("error estimate {error:e} exceeds tolerance {t:e}"))),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Outcome {
    emit(path, &output::json(value)?)?;
    Ok(())
}

fn measure_info(a: MeasureInfoArgs) -> Outcome {
    let (m, renormalized) = load_measure(&a.file, a.mass_bound)?;
    let moments = m.second_moment()?;
    let ell = m.ellipticity(a.s, a.resolution)?;
    let summary = json!({
        "n": m.dim(),
        "kind": m.kind(),
        "total_mass": m.total_mass()?,
        "moment_matrix": moments.rows(),
        "ellipticity": { "s": a.s, "lambda": ell.lambda, "minimizer": ell.minimizer, "refinement_delta": ell.refinement_delta },
        "renormalized": renormalized,
    });
    write_json(a.out.as_deref(), &summary)
}

fn eval_operator_cmd(a: EvalOperatorArgs) -> Outcome {
    let (m, _) = load_measure(&a.problem.measure, None)?;
    let u = load_function(&a.problem.function, m.dim())?;
    check_point(&a.problem.x, m.dim())?;
    let r = eval_operator(u.as_ref(), &a.problem.x, a.s, &m, a.rho0, &a.quad.spec())?;
    write_json(a.out.as_deref(), &r)?;
    check_tol(r.error_estimate, a.quad.tol)
}

fn mean_value_cmd(a: MeanValueArgs) -> Outcome {
    let (m, _) = load_measure(&a.problem.measure, None)?;
    let u = load_function(&a.problem.function, m.dim())?;
    check_point(&a.problem.x, m.dim())?;
    let params = MeanKernel::new(a.r, a.s, &m)?;
    let r = mean_value(u.as_ref(), &a.problem.x, &params, &a.quad.spec())?;
    write_json(a.out.as_deref(), &json!({ "value": r.value, "error_estimate": r.error_estimate }))?;
    check_tol(r.error_estimate, a.quad.tol)
}

fn sample_jump(a: SampleJumpArgs) -> Outcome {
    let (m, _) = load_measure(&a.measure, None)?;
    let params = MeanKernel::new(a.r, a.s, &m)?;
    let sampler = params.sampler()?;
    let mut header = vec!["rho".to_string()];
    header.extend((1..=m.dim()).map(|i| format!("omega{i}")));
    header.push("sign".into());
    let names: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&names);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for _ in 0..a.count {
        let j = sampler.sample(a.r, &mut rng);
        let mut row = vec![j.rho];
        row.extend(&j.direction);
        row.push(j.sign);
        csv.row(&row);
    }
    emit(a.out.as_deref(), csv.as_str())?;
    Ok(())
}

const TABLE_HEADER: [&str; 5] = ["ladder", "computed", "target", "abs_error", "rel_error"];

fn verify_expansion(a: VerifyExpansionArgs) -> Outcome {
    let (m, _) = load_measure(&a.problem.measure, None)?;
    let u = load_function(&a.problem.function, m.dim())?;
    check_point(&a.problem.x, m.dim())?;
    if !(a.r_min > 0.0 && a.r_min <= a.r_max) {
        return Err(Failure::Usage("need 0 < r-min <= r-max".into()));
    }
    let ladder = halving_ladder(a.r_max, a.r_min);
    let fit = fit_expansion_order(u.as_ref(), &a.problem.x, a.s, &m, &ladder, &a.quad.spec())?;
    let mut csv = Csv::new(&TABLE_HEADER);
    for (r, res) in fit.radii.iter().zip(&fit.residuals) {
        csv.row(&[*r, *res, 0.0, res.abs(), res.abs()]);
    }
    if let Some(p) = &a.table.csv {
        emit(Some(p), csv.as_str())?;
    }
    let worst = fit.error_estimates.iter().cloned().fold(0.0, f64::max);
    write_json(
        a.table.out.as_deref(),
        &json!({
            "pass": fit.pass,
            "slope": fit.slope,
            "vacuous": fit.vacuous,
            "fit_residual": fit.fit_residual,
            "noise_floor": fit.noise_floor,
            "max_error_estimate": worst,
        }),
    )?;
    check_tol(worst, a.quad.tol)?;
    if fit.pass {
        Ok(())
    } else {
        Err(Failure::Numerical(format!("fitted slope {:?} is below the threshold", fit.slope)))
    }
}

fn limit_table(report: &LimitReport, csv_path: Option<&Path>) -> Outcome {
    let mut csv = Csv::new(&TABLE_HEADER);
    for row in &report.rows {
        csv.row(&[row.ladder, row.computed, row.target, row.abs_error, row.rel_error]);
    }
    if let Some(p) = csv_path {
        emit(Some(p), csv.as_str())?;
    }
    Ok(())
}

fn limit_s1(a: LimitArgs) -> Outcome {
    let (m, _) = load_measure(&a.problem.measure, None)?;
    let u = load_function(&a.problem.function, m.dim())?;
    check_point(&a.problem.x, m.dim())?;
    let quad = a.quad.spec();
    let report = match a.which {
        Limit::Operator => local_limit_operator(u.as_ref(), &a.problem.x, &m, &a.ladder, &quad)?,
        Limit::Mean => local_limit_mean(u.as_ref(), &a.problem.x, a.r, &m, &a.ladder, &quad)?,
    };
    limit_table(&report, a.table.csv.as_deref())?;
    let pass = report.passes(a.rel_tol);
    write_json(
        a.table.out.as_deref(),
        &json!({ "pass": pass, "final_rel_err": report.final_rel_error, "monotone": report.monotone }),
    )?;
    if pass {
        Ok(())
    } else {
        Err(Failure::Numerical("limit ladder did not converge within tolerance".into()))
    }
}

fn bbm(a: BbmArgs) -> Outcome {
    let (m, _) = load_measure(&a.measure, None)?;
    let u = load_function(&a.function, m.dim())?;
    let report = bbm_check(u.as_ref(), &m, &a.ladder, &a.bound_grid, &a.grid.spec())?;
    limit_table(&report.limit, a.table.csv.as_deref())?;
    let pass = report.limit.passes(a.rel_tol) && report.bounded;
    write_json(
        a.table.out.as_deref(),
        &json!({
            "pass": pass,
            "final_rel_err": report.limit.final_rel_error,
            "monotone": report.limit.monotone,
            "h1_squared": report.h1_squared,
            "h1_norm": report.h1_norm,
            "empirical_constant": report.empirical_constant,
            "reference_constant": report.reference_constant,
            "bounded": report.bounded,
            "bound": report.bound,
        }),
    )?;
    if pass {
        Ok(())
    } else {
        Err(Failure::Numerical("BBM check did not pass".into()))
    }
}

fn seminorm(a: SeminormArgs) -> Outcome {
    let (m, _) = load_measure(&a.measure, None)?;
    let u = load_function(&a.function, m.dim())?;
    let spec = a.grid.spec();
    let method = match a.method {
        Method::Tensor => SeminormMethod::TensorQuadrature,
        Method::Mc => SeminormMethod::MonteCarlo { samples: a.samples, seed: a.seed },
    };
    let hs = hs_seminorm(u.as_ref(), a.s, &m, method, &spec)?;
    let h1 = h1_seminorm(u.as_ref(), &m, &spec)?;
    write_json(a.out.as_deref(), &json!({ "hs": hs, "energy": hs.squared / 4.0, "h1": h1 }))?;
    check_tol(hs.error_estimate, a.tol)
}

fn solve_wos(a: WosArgs) -> Outcome {
    let (m, _) = load_measure(&a.measure, None)?;
    let domain: Domain = a.domain.parse()?;
    let g = load_function(&a.g, domain.dim())?;
    let config = WalkConfig { walks: a.walks, max_steps: a.max_steps, theta: a.theta, h_max: a.hmax, seed: a.seed };
    let stats = run_walks(&a.point, a.s, &m, &domain, g.as_ref(), &config)?;
    write_json(
        a.out.as_deref(),
        &json!({
            "estimate": stats.estimate,
            "stderr": stats.stderr,
            "mean_len": stats.mean_len,
            "truncated_frac": stats.truncated_frac,
            "walks": stats.walks,
        }),
    )
}
