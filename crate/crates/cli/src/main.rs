#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod report;

use std::fs::File;
use std::io::{self, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pretest_core::ancova::{analyze, build_model, contrast_vector, load_dataset_with, AncovaModel, ColumnOrder};
use pretest_core::distributions::f_upper_quantile;
use pretest_core::kernel::b_norm;
use pretest_core::oracle::{invert_param_point, simulate_full, simulate_reduced};
use pretest_core::{
    coverage_probability, min_coverage, min_coverage_curve, DegreesOfFreedom, Error, MinResult, MinimizeConfig,
    OuterRule, ParamPoint, QuadratureSpec, ReducedModel, Scenario,
};

use report::{write_records, Format, Record, Value};

const DEFAULT_SEED: u64 = 20_240_917;

#[derive(Parser, Debug)]
#[command(name = "pretest", version, about = "Coverage of the naive confidence interval after a preliminary F test")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output format (default: csv for `curve`, plain otherwise)
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Worker threads for grid points and Monte Carlo blocks
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    threads: Option<u32>,
    /// Seed for Monte Carlo commands
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Coverage probability at one (||gamma||, psi)
    Coverage(CoverageArgs),
    /// Minimum coverage over (||gamma||, psi)
    Mincoverage(MinCoverageArgs),
    /// Minimum coverage over a grid of ||b|| values
    Curve(CurveArgs),
    /// Monte Carlo estimate of the coverage
    Oracle(OracleArgs),
    /// Analysis of covariance data set end to end
    Ancova(AncovaArgs),
}

#[derive(Args, Debug, Clone, Copy)]
#[group(required = true, multiple = false)]
struct Cutoff {
    /// Critical value of the preliminary F test
    #[arg(long, value_parser = positive)]
    ell: Option<f64>,
    /// Level of the preliminary test; ell is its F(s, m) upper quantile
    #[arg(long, value_parser = open_probability)]
    sig_level: Option<f64>,
}

#[derive(Args, Debug, Clone, Copy)]
struct TestArgs {
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    m: u32,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    s: u32,
    #[command(flatten)]
    cutoff: Cutoff,
    /// 1 - alpha is the nominal coverage
    #[arg(long, default_value_t = 0.05, value_parser = open_probability)]
    alpha: f64,
}

#[derive(Args, Debug, Clone, Copy)]
struct ScenarioArgs {
    #[command(flatten)]
    test: TestArgs,
    #[arg(long, value_parser = b_value)]
    bnorm: f64,
}

#[derive(Args, Debug, Clone, Copy)]
struct QuadArgs {
    #[arg(long, value_parser = open_probability)]
    tail_bound: Option<f64>,
    #[arg(long, value_parser = positive)]
    rel_tol: Option<f64>,
    #[arg(long, value_parser = positive)]
    abs_tol: Option<f64>,
    /// Inner Simpson panels (even)
    #[arg(long)]
    panels: Option<usize>,
    #[arg(long, value_enum)]
    outer_rule: Option<OuterRuleArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OuterRuleArg {
    Adaptive,
    FixedTensor,
}

#[derive(Args, Debug, Clone, Copy)]
struct MinArgs {
    #[arg(long, value_parser = positive)]
    gamma_max: Option<f64>,
    #[arg(long)]
    grid_gamma: Option<usize>,
    #[arg(long)]
    grid_psi: Option<usize>,
    #[arg(long, value_parser = positive)]
    refine_tol: Option<f64>,
    #[arg(long)]
    max_evals: Option<usize>,
    /// Evaluate grid cells with the full quadrature spec
    #[arg(long)]
    no_screen: bool,
}

#[derive(Args, Debug)]
struct CoverageArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, value_parser = nonnegative)]
    gamma: f64,
    #[arg(long, value_parser = psi_value, allow_hyphen_values = true)]
    psi: f64,
    #[command(flatten)]
    quad: QuadArgs,
}

#[derive(Args, Debug)]
struct MinCoverageArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    min: MinArgs,
    #[command(flatten)]
    quad: QuadArgs,
}

#[derive(Args, Debug)]
struct CurveArgs {
    #[command(flatten)]
    test: TestArgs,
    /// ||b|| values as start:stop:step
    #[arg(long, value_parser = parse_grid)]
    grid: Grid,
    #[command(flatten)]
    min: MinArgs,
    #[command(flatten)]
    quad: QuadArgs,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long, required_unless_present = "design", conflicts_with = "design", value_parser = clap::value_parser!(u32).range(1..))]
    m: Option<u32>,
    #[arg(long, required_unless_present = "design", conflicts_with = "design", value_parser = clap::value_parser!(u32).range(1..))]
    s: Option<u32>,
    #[arg(long, required_unless_present = "design", conflicts_with = "design", value_parser = b_value)]
    bnorm: Option<f64>,
    #[command(flatten)]
    cutoff: Cutoff,
    #[arg(long, default_value_t = 0.05, value_parser = open_probability)]
    alpha: f64,
    #[arg(long, value_parser = nonnegative)]
    gamma: f64,
    #[arg(long, value_parser = psi_value, allow_hyphen_values = true)]
    psi: f64,
    #[arg(long, default_value_t = 1_000_000, value_parser = clap::value_parser!(u64).range(1..))]
    reps: u64,
    /// Simulate the full regression on this analysis-of-covariance data file
    #[arg(long)]
    design: Option<PathBuf>,
    #[command(flatten)]
    contrast: ContrastArgs,
    /// Error standard deviation for the full simulation
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    sigma: f64,
}

#[derive(Args, Debug, Clone, Copy)]
struct ContrastArgs {
    #[arg(long, default_value_t = 1)]
    treat_a: i64,
    #[arg(long, default_value_t = 2)]
    treat_b: i64,
    /// x* minus the grand covariate mean
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    xstar_offset: f64,
    /// Order of the two numeric columns after the treatment id
    #[arg(long, value_enum, default_value_t = Columns::ResponseCovariate)]
    columns: Columns,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Columns {
    ResponseCovariate,
    CovariateResponse,
}

#[derive(Args, Debug)]
struct AncovaArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    contrast: ContrastArgs,
    #[arg(long, default_value_t = 0.05, value_parser = open_probability)]
    sig_level: f64,
    #[arg(long, default_value_t = 0.05, value_parser = open_probability)]
    alpha: f64,
    #[command(flatten)]
    min: MinArgs,
    #[command(flatten)]
    quad: QuadArgs,
}

#[derive(Debug, Clone, PartialEq)]
struct Grid(Vec<f64>);

fn parse_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not finite"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("must be positive, got {v}"))
    }
}

fn nonnegative(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("must be nonnegative, got {v}"))
    }
}

fn open_probability(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie in (0, 1), got {v}"))
    }
}

fn b_value(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("||b|| must lie in (0, 1], got {v}"))
    }
}

fn psi_value(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if (-1.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("psi must lie in [-1, 1], got {v}"))
    }
}

/// `start:stop:step` with `step > 0` and `stop >= start`; the end point is
/// included when it lies on the lattice up to round-off.
fn parse_grid(s: &str) -> Result<Grid, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, h] = parts.as_slice() else {
        return Err(format!("grid `{s}` must have the form start:stop:step"));
    };
    let (start, stop, step) = (parse_f64(a)?, parse_f64(b)?, parse_f64(h)?);
    if !(step > 0.0) {
        return Err(format!("grid step must be positive, got {step}"));
    }
    if stop < start {
        return Err(format!("grid stop {stop} is below start {start}"));
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    if count > 100_000 {
        return Err(format!("grid `{s}` has {count} points"));
    }
    // round to 12 decimals so 0.1:1.0:0.1 yields 0.3, not 0.30000000000000004
    let values = (0..count).map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12).collect();
    Ok(Grid(values))
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument { .. } | Error::Parse { .. } | Error::NoRows | Error::UnknownTreatment(_) => 2,
            Error::Invariant { kind: "dataset", .. } => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure { code: 1, message: format!("write failed: {e}") }
    }
}

type Outcome = Result<(), Failure>;

fn quad_spec(q: &QuadArgs) -> Result<QuadratureSpec, Failure> {
    let mut spec = QuadratureSpec::default();
    if let Some(v) = q.tail_bound {
        spec.tail_bound = v;
    }
    if let Some(v) = q.rel_tol {
        spec.rel_tol = v;
    }
    if let Some(v) = q.abs_tol {
        spec.abs_tol = v;
    }
    if let Some(v) = q.panels {
        spec.simpson_panels = v;
    }
    if let Some(r) = q.outer_rule {
        spec.outer_rule = match r {
            OuterRuleArg::Adaptive => OuterRule::Adaptive,
            OuterRuleArg::FixedTensor => OuterRule::FixedTensor,
        };
    }
    spec.validate()?;
    Ok(spec)
}

fn min_config(a: &MinArgs) -> Result<MinimizeConfig, Failure> {
    let d = MinimizeConfig::default();
    let cfg = MinimizeConfig {
        gamma_max: a.gamma_max.unwrap_or(d.gamma_max),
        grid_gamma: a.grid_gamma.unwrap_or(d.grid_gamma),
        grid_psi: a.grid_psi.unwrap_or(d.grid_psi),
        refine_tol: a.refine_tol.unwrap_or(d.refine_tol),
        refine_max_evals: a.max_evals.unwrap_or(d.refine_max_evals),
        screen_grid: !a.no_screen,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn df(v: u32) -> Result<DegreesOfFreedom, Failure> {
    Ok(DegreesOfFreedom::new(v)?)
}

/// `ell` from the flags, computing the F quantile when a level is given.
fn resolve_ell(cutoff: &Cutoff, s: u32, m: u32) -> Result<f64, Failure> {
    match (cutoff.ell, cutoff.sig_level) {
        (Some(ell), _) => Ok(ell),
        (None, Some(level)) => Ok(f_upper_quantile(df(s)?, df(m)?, level)?),
        // clap enforces exactly one of the two
        (None, None) => unreachable!("cutoff group is required"),
    }
}

fn push_test(r: &mut Record, m: u32, s: u32, ell: f64, cutoff: &Cutoff, alpha: f64) {
    r.push("m", m).push("s", s).push("ell", ell);
    r.push("sig_level", cutoff.sig_level.map_or(Value::Missing, Value::Float));
    r.push("alpha", alpha);
}

fn scenario(args: &ScenarioArgs) -> Result<(Scenario, f64), Failure> {
    let t = &args.test;
    let ell = resolve_ell(&t.cutoff, t.s, t.m)?;
    Ok((Scenario::new(t.m, t.s, ell, t.alpha, args.bnorm)?, ell))
}

fn warn_min(res: &MinResult) {
    if res.boundary_warning {
        eprintln!("warning: the minimum lies on the ||gamma|| = gamma_max edge; widen --gamma-max");
    }
    if !res.converged {
        eprintln!("warning: refinement stopped at the evaluation limit before converging");
    }
}

fn push_min(r: &mut Record, res: &MinResult) {
    r.push("min_coverage", res.min_coverage)
        .push("argmin_gamma", res.argmin.gamma_norm())
        .push("argmin_psi", res.argmin.psi())
        .push("grid_min", res.grid_min)
        .push("error_estimate", res.error_estimate)
        .push("evaluations", res.evaluations)
        .push("converged", res.converged)
        .push("boundary_warning", res.boundary_warning);
}

fn emit(records: &[Record], format: Format, table: bool) -> Outcome {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    write_records(&mut out, records, format, table)?;
    Ok(())
}

fn cmd_coverage(a: &CoverageArgs, format: Format) -> Outcome {
    let (sc, ell) = scenario(&a.scenario)?;
    let point = ParamPoint::new(a.gamma, a.psi)?;
    let res = coverage_probability(&sc, &point, &quad_spec(&a.quad)?)?;
    let mut r = Record::new();
    let t = &a.scenario.test;
    push_test(&mut r, t.m, t.s, ell, &t.cutoff, t.alpha);
    r.push("b_norm", sc.b_norm())
        .push("gamma", point.gamma_norm())
        .push("psi", point.psi())
        .push("branch", res.branch.as_str())
        .push("term_i", res.term_i)
        .push("term_j", res.term_j)
        .push("total", res.total)
        .push("error_estimate", res.error_estimate);
    emit(&[r], format, false)
}

fn cmd_mincoverage(a: &MinCoverageArgs, format: Format) -> Outcome {
    let (sc, ell) = scenario(&a.scenario)?;
    let res = min_coverage(&sc, &min_config(&a.min)?, &quad_spec(&a.quad)?)?;
    warn_min(&res);
    let mut r = Record::new();
    let t = &a.scenario.test;
    push_test(&mut r, t.m, t.s, ell, &t.cutoff, t.alpha);
    r.push("b_norm", sc.b_norm());
    push_min(&mut r, &res);
    emit(&[r], format, false)
}

fn cmd_curve(a: &CurveArgs, format: Format) -> Outcome {
    let t = &a.test;
    let ell = resolve_ell(&t.cutoff, t.s, t.m)?;
    let rows = min_coverage_curve(t.m, t.s, ell, t.alpha, &a.grid.0, &min_config(&a.min)?, &quad_spec(&a.quad)?);
    let records: Vec<Record> = rows
        .iter()
        .map(|row| {
            let mut r = Record::new();
            r.push("b_norm", row.b_norm);
            match &row.result {
                Ok(res) => {
                    r.push("min_coverage", res.min_coverage)
                        .push("argmin_gamma", res.argmin.gamma_norm())
                        .push("argmin_psi", res.argmin.psi())
                        .push("error", "");
                }
                Err(e) => {
                    eprintln!("warning: ||b|| = {}: {e}", row.b_norm);
                    r.push("min_coverage", Value::Missing)
                        .push("argmin_gamma", Value::Missing)
                        .push("argmin_psi", Value::Missing)
                        .push("error", e.as_str());
                }
            }
            r
        })
        .collect();
    emit(&records, format, true)?;
    if rows.iter().all(|r| r.result.is_err()) {
        return Err(Failure { code: 1, message: "every grid point failed".into() });
    }
    Ok(())
}

fn load_model(path: &PathBuf, columns: Columns) -> Result<AncovaModel, Failure> {
    let file =
        File::open(path).map_err(|e| Failure { code: 2, message: format!("cannot open {}: {e}", path.display()) })?;
    let order = match columns {
        Columns::ResponseCovariate => ColumnOrder::ResponseCovariate,
        Columns::CovariateResponse => ColumnOrder::CovariateResponse,
    };
    let data = load_dataset_with(BufReader::new(file), order).map_err(|e| {
        let f = Failure::from(e);
        Failure { message: format!("{}: {}", path.display(), f.message), ..f }
    })?;
    Ok(build_model(&data)?)
}

fn cmd_oracle(a: &OracleArgs, seed: u64, format: Format) -> Outcome {
    let point = ParamPoint::new(a.gamma, a.psi)?;
    let mut r = Record::new();
    let est = match &a.design {
        None => {
            // clap requires these without --design
            let (m, s, b) = (a.m.unwrap_or_default(), a.s.unwrap_or_default(), a.bnorm.unwrap_or_default());
            let ell = resolve_ell(&a.cutoff, s, m)?;
            let sc = Scenario::new(m, s, ell, a.alpha, b)?;
            r.push("mode", "reduced");
            push_test(&mut r, m, s, ell, &a.cutoff, a.alpha);
            r.push("b_norm", b);
            simulate_reduced(&ReducedModel::new(&sc, &point), &sc, a.reps, seed)?
        }
        Some(path) => {
            let model = load_model(path, a.contrast.columns)?;
            let c = &a.contrast;
            let design =
                model.design().with_contrast(contrast_vector(&model, c.treat_a, c.treat_b, c.xstar_offset)?)?;
            let (m, s) = (design.m() as u32, design.s() as u32);
            let ell = resolve_ell(&a.cutoff, s, m)?;
            let beta = invert_param_point(&design, &point, a.sigma)?;
            r.push("mode", "full");
            push_test(&mut r, m, s, ell, &a.cutoff, a.alpha);
            r.push("b_norm", b_norm(&design)?);
            simulate_full(&design, &beta, a.sigma, a.alpha, ell, a.reps, seed)?
        }
    };
    r.push("gamma", point.gamma_norm())
        .push("psi", point.psi())
        .push("reps", est.reps)
        .push("covered", est.covered)
        .push("coverage_hat", est.coverage_hat)
        .push("std_error", est.std_error)
        .push("rejected", est.rejected)
        .push("accepted", est.accepted)
        .push("seed", est.seed);
    emit(&[r], format, false)
}

fn cmd_ancova(a: &AncovaArgs, format: Format) -> Outcome {
    let model = load_model(&a.data, a.contrast.columns)?;
    let c = &a.contrast;
    let rep = analyze(
        &model,
        c.treat_a,
        c.treat_b,
        c.xstar_offset,
        a.sig_level,
        a.alpha,
        &min_config(&a.min)?,
        &quad_spec(&a.quad)?,
    )?;
    warn_min(&rep.minimization);
    let mut r = Record::new();
    r.push("n", rep.n)
        .push("p", rep.p)
        .push("m", rep.m)
        .push("s", rep.s)
        .push("treat_a", rep.treat_a)
        .push("treat_b", rep.treat_b)
        .push("xstar_offset", rep.xstar_offset)
        .push("sig_level", rep.sig_level)
        .push("alpha", rep.alpha)
        .push("ell", rep.ell)
        .push("ell_s_plus_1", rep.ell_s_plus_1)
        .push("b_norm", rep.b_norm)
        .push("min_coverage", rep.min_coverage)
        .push("argmin_gamma", rep.argmin_gamma)
        .push("argmin_psi", rep.argmin_psi)
        .push("converged", rep.minimization.converged)
        .push("boundary_warning", rep.minimization.boundary_warning);
    emit(&[r], format, false)
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global()
            .map_err(|e| Failure { code: 1, message: format!("thread pool: {e}") })?;
    }
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    let plain = cli.format.unwrap_or(Format::Plain);
    match &cli.command {
        Command::Coverage(a) => cmd_coverage(a, plain),
        Command::Mincoverage(a) => cmd_mincoverage(a, plain),
        Command::Curve(a) => cmd_curve(a, cli.format.unwrap_or(Format::Csv)),
        Command::Oracle(a) => cmd_oracle(a, seed, plain),
        Command::Ancova(a) => cmd_ancova(a, plain),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
