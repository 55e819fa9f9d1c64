//! `robint` command-line front end.
//!
//! Exit codes: 0 success, 2 validation/usage, 3 solver failure, 4 I/O.
//! Errors go to stderr as one JSON object per line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::{json, Value};

use crate::diagnostics::{self, DiagnosticsError};
use crate::expansion::{self, ExpansionError, ExpansionOptions};
use crate::higher_order::{self, HigherOrderSpec, HoError};
use crate::io::{self, IoError, LoadedProblem, SolutionReport, Strictness, SweepRow};
use crate::model::{self, ModelError, ProblemSpec, SignPattern};
use crate::nature;
use crate::oracle::{self, GridSpec, OracleError};
use crate::solver::{self, RobustSolution, SearchStrategy, SolverError, SolverOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "robint",
    version,
    about = "Robust network interventions under correlation uncertainty"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Search {
    Iterate,
    Exhaustive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    V,
    M,
    C,
    Delta,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::V => "v",
            SweepParam::M => "m",
            SweepParam::C => "c",
            SweepParam::Delta => "delta",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Problem file (JSON).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Residual tolerance; larger residuals produce a warning.
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Drop unknown keys with a warning instead of failing.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SolveFlags {
    #[arg(long, value_enum, default_value_t = Search::Iterate)]
    pub search: Search,
    #[arg(long, default_value_t = solver::MAX_ORTHANT_ITERS)]
    pub max_orthant_iters: usize,
}

impl SolveFlags {
    fn options(&self) -> SolverOptions {
        SolverOptions {
            search: match self.search {
                Search::Iterate => SearchStrategy::Iterate,
                Search::Exhaustive => SearchStrategy::Exhaustive,
            },
            max_orthant_iters: self.max_orthant_iters,
            ..SolverOptions::default()
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a problem file.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Robust intervention and worst-case covariance.
    Solve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        solve: SolveFlags,
    },
    /// Nature's best response against an intervention (default: the robust one).
    WorstCase {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        solve: SolveFlags,
        /// Comma-separated intervention.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Option<Vec<f64>>,
    },
    /// Solution with uncertainty costs, saddle certificate and Property A.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        solve: SolveFlags,
    },
    /// Solve along a parameter grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        solve: SolveFlags,
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, allow_hyphen_values = true)]
        from: f64,
        #[arg(long, allow_hyphen_values = true)]
        to: f64,
        /// Number of intervals; steps + 1 points are solved.
        #[arg(long)]
        steps: usize,
        /// Two-agent family value of m when no input is given.
        #[arg(long, default_value_t = 2.0)]
        m: f64,
        /// Two-agent family value of v when no input is given.
        #[arg(long, default_value_t = 0.5)]
        v: f64,
        /// Two-agent family value of c when no input is given.
        #[arg(long, default_value_t = 2.0)]
        c: f64,
    },
    /// Worst case after a new agent joins.
    Expand {
        #[command(flatten)]
        common: Common,
        /// Also run the damped best-response solve for the decision maker.
        #[arg(long)]
        solve: bool,
    },
    /// Second-order interaction model.
    HigherOrder {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        solve: SolveFlags,
        #[arg(long, default_value_t = 2)]
        order: u32,
        /// Overrides the file's delta.
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Compare the solver with the brute-force grid oracle (n <= 3).
    OracleCheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        solve: SolveFlags,
        #[arg(long, default_value_t = 201)]
        grid: usize,
    },
}

/// A failure with its exit code and machine-readable form.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
    pub details: Option<Value>,
}

impl Failure {
    fn new(code: i32, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            kind,
            message: message.into(),
            details: None,
        }
    }

    fn with_details(mut self, details: Value) -> Self {
        self.details = Some(details);
        self
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_VALIDATION, "usage", message)
    }
}

fn vec_of(x: &DVector<f64>) -> Vec<f64> {
    x.iter().copied().collect()
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        let message = e.to_string();
        match e {
            IoError::Parse { line, column, .. } => Failure::new(EXIT_VALIDATION, "parse", message)
                .with_details(json!({"line": line, "column": column})),
            IoError::UnknownField { path } => {
                Failure::new(EXIT_VALIDATION, "unknown_field", message)
                    .with_details(json!({"field": path}))
            }
            IoError::Schema { field, .. } => Failure::new(EXIT_VALIDATION, "schema", message)
                .with_details(json!({"field": field})),
            IoError::Validation(report) => Failure::new(EXIT_VALIDATION, "validation", message)
                .with_details(json!({"violations": report.violations})),
            IoError::NonFinite { field } => Failure::new(EXIT_SOLVER, "non_finite", message)
                .with_details(json!({"field": field})),
            IoError::Csv(_) => Failure::new(EXIT_IO, "io", message),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let ModelError::Invalid(report) = &e;
        let details = json!({"violations": report.violations});
        Failure::new(EXIT_VALIDATION, "validation", e.to_string()).with_details(details)
    }
}

impl From<SolverError> for Failure {
    fn from(e: SolverError) -> Self {
        let message = e.to_string();
        match e {
            SolverError::Model(m) => m.into(),
            SolverError::PropertyBViolation { indices, candidate } => {
                Failure::new(EXIT_SOLVER, "property_b_violation", message).with_details(
                    json!({"indices": indices, "candidate_x": vec_of(&candidate.x_star)}),
                )
            }
            SolverError::NoFixedPoint { orthants_tried } => {
                Failure::new(EXIT_SOLVER, "no_fixed_point", message)
                    .with_details(json!({"orthants_tried": orthants_tried}))
            }
            SolverError::Linalg { .. } => Failure::new(EXIT_SOLVER, "linear_solve", message),
            SolverError::TooLarge { .. } => Failure::new(EXIT_SOLVER, "too_large", message),
        }
    }
}

impl From<ExpansionError> for Failure {
    fn from(e: ExpansionError) -> Self {
        let message = e.to_string();
        match e {
            ExpansionError::Model(m) => m.into(),
            ExpansionError::Dimension(_)
            | ExpansionError::BaseBlockNotPd { .. }
            | ExpansionError::NonPositiveVariance { .. }
            | ExpansionError::InvalidPin { .. }
            | ExpansionError::MissingIntervention => {
                Failure::new(EXIT_VALIDATION, "expansion_input", message)
            }
            ExpansionError::EmptyFeasibleSet { .. }
            | ExpansionError::ZeroGradient { .. }
            | ExpansionError::ZeroEntry { .. }
            | ExpansionError::MaxIterations { .. }
            | ExpansionError::Linalg(_) => Failure::new(EXIT_SOLVER, "expansion", message),
        }
    }
}

impl From<HoError> for Failure {
    fn from(e: HoError) -> Self {
        let message = e.to_string();
        match e {
            HoError::Solver(s) => s.into(),
            HoError::Model(m) => m.into(),
            HoError::InvalidDelta(_)
            | HoError::NonzeroDiagonal { .. }
            | HoError::UnsupportedOrder { .. }
            | HoError::Dimension(_)
            | HoError::NotZeroMean => Failure::new(EXIT_VALIDATION, "higher_order_input", message),
            HoError::ZeroEntry { .. }
            | HoError::NondegeneracyFailure { .. }
            | HoError::Nature(_) => Failure::new(EXIT_SOLVER, "higher_order", message),
        }
    }
}

impl From<OracleError> for Failure {
    fn from(e: OracleError) -> Self {
        Failure::new(EXIT_VALIDATION, "oracle_input", e.to_string())
    }
}

impl From<DiagnosticsError> for Failure {
    fn from(e: DiagnosticsError) -> Self {
        Failure::new(EXIT_SOLVER, "diagnostics", e.to_string())
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(EXIT_IO, "io", format!("{}: {e}", path.display()))
        .with_details(json!({"path": path.display().to_string()}))
}

fn load(common: &Common) -> Result<LoadedProblem, Failure> {
    let path = common
        .input
        .as_ref()
        .ok_or_else(|| Failure::usage("--input is required for this subcommand"))?;
    let bytes = std::fs::read(path).map_err(|e| io_failure(path, e))?;
    let strictness = if common.lenient {
        Strictness::Lenient
    } else {
        Strictness::Strict
    };
    Ok(io::load_problem_with(&bytes, strictness)?)
}

fn json_only(common: &Common) -> Result<(), Failure> {
    match common.format {
        Format::Json => Ok(()),
        Format::Csv => Err(Failure::usage("--format csv is only available for sweep")),
    }
}

fn finite<'a>(field: &str, values: impl IntoIterator<Item = &'a f64>) -> Result<(), Failure> {
    Ok(io::check_finite(field, values)?)
}

fn tolerance_warning(sol: &mut RobustSolution, tol: f64) {
    if sol.stationarity_residual > tol {
        sol.warnings.push(format!(
            "stationarity residual {:e} exceeds --tol {:e}",
            sol.stationarity_residual, tol
        ));
    }
}

fn solution_report(sol: &RobustSolution, loaded_warnings: &[String]) -> SolutionReport {
    let mut report = SolutionReport::from_solution(sol, None);
    let mut warnings = loaded_warnings.to_vec();
    warnings.append(&mut report.warnings);
    report.warnings = warnings;
    report
}

fn cmd_validate(common: &Common) -> Result<Vec<u8>, Failure> {
    json_only(common)?;
    let loaded = load(common)?;
    let model = model::aggregate(&loaded.spec)?;
    #[derive(Serialize)]
    struct Out {
        valid: bool,
        n: usize,
        delta: Option<f64>,
        expansion: bool,
        property_a: model::PropertyAReport,
        warnings: Vec<String>,
    }
    Ok(io::to_json_bytes(&Out {
        valid: true,
        n: loaded.spec.n(),
        delta: loaded.delta,
        expansion: loaded.expansion.is_some(),
        property_a: model.property_a,
        warnings: loaded.warnings,
    }))
}

fn cmd_solve(common: &Common, flags: &SolveFlags) -> Result<Vec<u8>, Failure> {
    json_only(common)?;
    let loaded = load(common)?;
    let mut sol = solver::solve_robust(&loaded.spec, &flags.options())?;
    tolerance_warning(&mut sol, common.tol);
    let report = solution_report(&sol, &loaded.warnings);
    report.check_finite()?;
    Ok(io::to_json_bytes(&report))
}

fn cmd_worst_case(
    common: &Common,
    flags: &SolveFlags,
    x: Option<&[f64]>,
) -> Result<Vec<u8>, Failure> {
    json_only(common)?;
    let loaded = load(common)?;
    let spec = &loaded.spec;
    let x = match x {
        Some(x) => {
            if x.len() != spec.n() {
                return Err(Failure::usage(format!(
                    "--x has {} entries, expected {}",
                    x.len(),
                    spec.n()
                )));
            }
            DVector::from_column_slice(x)
        }
        None => solver::solve_robust(spec, &flags.options())?.x_star,
    };
    finite("x", x.iter())?;
    let zeros = solver::near_zero_indices(&x, solver::EPS_SIGN);
    let mut warnings = loaded.warnings.clone();
    if !zeros.is_empty() {
        warnings.push(format!(
            "x has near-zero entries {zeros:?}; the worst case is not unique there"
        ));
    }
    let signs = SignPattern::of(&x);
    let wc = nature::worst_case(&signs, spec);
    #[derive(Serialize)]
    struct Out {
        x: Vec<f64>,
        sign_pattern: Vec<i8>,
        per_agent_factors: Vec<Vec<f64>>,
        #[serde(rename = "B_star")]
        b_star: Vec<Vec<f64>>,
        inner_value: f64,
        warnings: Vec<String>,
    }
    let out = Out {
        x: vec_of(&x),
        sign_pattern: signs.as_slice().to_vec(),
        per_agent_factors: wc.per_agent.iter().map(|q| vec_of(&q.factor)).collect(),
        b_star: rows_of(&wc.aggregate),
        inner_value: nature::inner_max_value(&x, spec),
        warnings,
    };
    finite("B_star", out.b_star.iter().flatten())?;
    finite("inner_value", [&out.inner_value])?;
    Ok(io::to_json_bytes(&out))
}

fn cmd_diagnose(common: &Common, flags: &SolveFlags) -> Result<Vec<u8>, Failure> {
    json_only(common)?;
    let loaded = load(common)?;
    let spec = &loaded.spec;
    let mut sol = solver::solve_robust(spec, &flags.options())?;
    tolerance_warning(&mut sol, common.tol);
    let costs = diagnostics::uncertainty_costs(&sol, spec)?;
    let certificate = solver::verify_saddle(spec, &sol)?;
    let property_a = model::aggregate(spec)?.property_a;
    let mut report = solution_report(&sol, &loaded.warnings);
    report.diagnostics = Some(costs);
    report.check_finite()?;
    #[derive(Serialize)]
    struct Out {
        solution: SolutionReport,
        certificate: solver::Certificate,
        property_a: model::PropertyAReport,
    }
    finite(
        "certificate",
        [
            &certificate.max_over_b,
            &certificate.min_over_x,
            &certificate.gap,
        ],
    )?;
    Ok(io::to_json_bytes(&Out {
        solution: report,
        certificate,
        property_a,
    }))
}

/// Grid point `k` of `steps` intervals; endpoints are exact.
fn grid_point(from: f64, to: f64, k: usize, steps: usize) -> f64 {
    if k == steps {
        to
    } else {
        from + (to - from) * k as f64 / steps as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignFlip {
    pub lower: f64,
    pub upper: f64,
}

/// Brackets where `x₁ − x₂` changes sign between successive solved points.
pub fn sign_flips(rows: &[SweepRow]) -> Vec<SignFlip> {
    let mut flips = Vec::new();
    let mut last: Option<(f64, f64)> = None;
    for row in rows {
        let Some(x) = &row.x else { continue };
        if x.len() < 2 {
            continue;
        }
        let d = x[0] - x[1];
        if d == 0.0 {
            continue;
        }
        if let Some((p, prev)) = last {
            if prev.signum() != d.signum() {
                flips.push(SignFlip {
                    lower: p,
                    upper: row.parameter,
                });
            }
        }
        last = Some((row.parameter, d));
    }
    flips
}

enum SweepBase {
    Family { m: f64, v: f64, c: f64 },
    File(ProblemSpec),
}

fn sweep_row(
    base: &SweepBase,
    param: SweepParam,
    t: f64,
    options: &SolverOptions,
) -> Result<SweepRow, Failure> {
    let result = match (base, param) {
        (SweepBase::Family { v, c, .. }, SweepParam::M) => {
            solver::solve_robust(&model::two_agent_family(t, *v, *c), options)
        }
        (SweepBase::Family { m, c, .. }, SweepParam::V) => {
            solver::solve_robust(&model::two_agent_family(*m, t, *c), options)
        }
        (SweepBase::Family { m, v, .. }, SweepParam::C) => {
            solver::solve_robust(&model::two_agent_family(*m, *v, t), options)
        }
        (SweepBase::Family { .. }, SweepParam::Delta) => {
            return Err(Failure::usage(
                "--param delta needs --input with a zero-mean problem",
            ));
        }
        (SweepBase::File(spec), SweepParam::M) => {
            let mut s = spec.clone();
            s.mean *= t;
            solver::solve_robust(&s, options)
        }
        (SweepBase::File(spec), SweepParam::V) => {
            solver::solve_robust(&spec.with_std_scaled(t), options)
        }
        (SweepBase::File(spec), SweepParam::C) => {
            let mut s = spec.clone();
            s.cost = s.cost.scaled(t);
            solver::solve_robust(&s, options)
        }
        (SweepBase::File(spec), SweepParam::Delta) => {
            match higher_order::ho_solve(&HigherOrderSpec::new(spec.clone(), t), options) {
                Ok(sol) => Ok(sol),
                Err(HoError::Solver(e)) => Err(e),
                Err(e) => {
                    let f = Failure::from(e);
                    if f.code == EXIT_VALIDATION {
                        return Err(f);
                    }
                    return Ok(SweepRow {
                        parameter: t,
                        x: None,
                        objective: None,
                        property_b: false,
                        error: Some(f.message),
                    });
                }
            }
        }
    };
    Ok(match result {
        Ok(sol) => SweepRow {
            parameter: t,
            x: Some(vec_of(&sol.x_star)),
            objective: Some(sol.objective),
            property_b: sol.property_b,
            error: None,
        },
        Err(SolverError::PropertyBViolation { candidate, .. }) => SweepRow {
            parameter: t,
            x: Some(vec_of(&candidate.x_star)),
            objective: Some(candidate.objective),
            property_b: false,
            error: Some("property B violated".into()),
        },
        Err(e @ SolverError::Model(_)) => return Err(e.into()),
        Err(e) => SweepRow {
            parameter: t,
            x: None,
            objective: None,
            property_b: false,
            error: Some(e.to_string()),
        },
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    common: &Common,
    flags: &SolveFlags,
    param: SweepParam,
    from: f64,
    to: f64,
    steps: usize,
    family: (f64, f64, f64),
) -> Result<Vec<u8>, Failure> {
    if steps == 0 {
        return Err(Failure::usage("--steps must be at least 1"));
    }
    if !(from.is_finite() && to.is_finite()) {
        return Err(Failure::usage("--from and --to must be finite"));
    }
    let (base, warnings) = match &common.input {
        Some(_) => {
            let loaded = load(common)?;
            (SweepBase::File(loaded.spec), loaded.warnings)
        }
        None => {
            let (m, v, c) = family;
            (SweepBase::Family { m, v, c }, Vec::new())
        }
    };
    let n = match &base {
        SweepBase::Family { .. } => 2,
        SweepBase::File(spec) => spec.n(),
    };
    let options = flags.options();
    let rows = (0..=steps)
        .map(|k| sweep_row(&base, param, grid_point(from, to, k, steps), &options))
        .collect::<Result<Vec<_>, _>>()?;
    match common.format {
        Format::Csv => Ok(io::write_sweep_csv(&rows, n)?),
        Format::Json => {
            for row in &rows {
                if let Some(x) = &row.x {
                    finite("x", x)?;
                }
            }
            #[derive(Serialize)]
            struct Out {
                param: &'static str,
                rows: Vec<SweepRow>,
                sign_flips: Vec<SignFlip>,
                warnings: Vec<String>,
            }
            let sign_flips = sign_flips(&rows);
            Ok(io::to_json_bytes(&Out {
                param: param.name(),
                rows,
                sign_flips,
                warnings,
            }))
        }
    }
}

fn cmd_expand(common: &Common, run_solve: bool) -> Result<Vec<u8>, Failure> {
    json_only(common)?;
    let loaded = load(common)?;
    let espec = loaded.expansion.ok_or_else(|| {
        Failure::new(
            EXIT_VALIDATION,
            "expansion_input",
            "problem file has no \"expansion\" object",
        )
    })?;
    #[derive(Serialize)]
    struct Solved {
        x: Vec<f64>,
        objective: f64,
        upper: f64,
        lower: f64,
        gap: f64,
        iterations: usize,
    }
    #[derive(Serialize)]
    struct Out {
        x: Vec<f64>,
        betas: Vec<Vec<f64>>,
        new_agent_factor: Vec<f64>,
        blocks: Vec<Vec<Vec<f64>>>,
        #[serde(rename = "B_star")]
        b_star: Vec<Vec<f64>>,
        #[serde(skip_serializing_if = "Option::is_none")]
        solve: Option<Solved>,
        warnings: Vec<String>,
    }
    let mut warnings = loaded.warnings;
    let (x, wc, solved) = if run_solve {
        let options = ExpansionOptions {
            tol: common.tol,
            ..ExpansionOptions::default()
        };
        let sol = expansion::solve_expansion(&espec, &loaded.spec, &options)?;
        warnings.push("the expansion solve is an experimental best-response iteration".into());
        let solved = Solved {
            x: vec_of(&sol.x),
            objective: sol.objective,
            upper: sol.upper,
            lower: sol.lower,
            gap: sol.gap,
            iterations: sol.iterations,
        };
        (sol.x, sol.worst_case, Some(solved))
    } else {
        let x = espec
            .x_bar
            .clone()
            .ok_or(ExpansionError::MissingIntervention)?;
        let wc = expansion::expansion_worst_case_at(&espec, &x)?;
        (x, wc, None)
    };
    let out = Out {
        x: vec_of(&x),
        betas: wc.betas.iter().map(vec_of).collect(),
        new_agent_factor: vec_of(&wc.new_agent.factor),
        blocks: wc.blocks.iter().map(rows_of).collect(),
        b_star: rows_of(&wc.aggregate),
        solve: solved,
        warnings,
    };
    finite("B_star", out.b_star.iter().flatten())?;
    Ok(io::to_json_bytes(&out))
}

fn cmd_higher_order(
    common: &Common,
    flags: &SolveFlags,
    order: u32,
    delta: Option<f64>,
) -> Result<Vec<u8>, Failure> {
    json_only(common)?;
    higher_order::check_order(order)?;
    let loaded = load(common)?;
    let delta = delta
        .or(loaded.delta)
        .ok_or_else(|| Failure::usage("delta missing: give --delta or a \"delta\" field"))?;
    let hspec = HigherOrderSpec::new(loaded.spec, delta);
    let mut sol = higher_order::ho_solve(&hspec, &flags.options())?;
    tolerance_warning(&mut sol, common.tol);
    let weights = higher_order::ho_weights(&hspec);
    #[derive(Serialize)]
    struct Out {
        order: u32,
        delta: f64,
        kappa: Vec<f64>,
        solution: SolutionReport,
    }
    let report = solution_report(&sol, &loaded.warnings);
    report.check_finite()?;
    Ok(io::to_json_bytes(&Out {
        order,
        delta,
        kappa: weights.kappa.clone(),
        solution: report,
    }))
}

/// Solver/oracle agreement threshold relative to `1 + |f|`.
pub const ORACLE_RTOL: f64 = 1e-3;

fn cmd_oracle_check(common: &Common, flags: &SolveFlags, grid: usize) -> Result<Vec<u8>, Failure> {
    json_only(common)?;
    let loaded = load(common)?;
    let grid = GridSpec::new(grid)?;
    let (solver_value, x_star, saddle, model_name) = match loaded.delta {
        Some(delta) => {
            let hspec = HigherOrderSpec::new(loaded.spec, delta);
            let sol = higher_order::ho_solve(&hspec, &flags.options())?;
            let saddle = oracle::oracle_saddle_higher_order(&hspec, &grid)?;
            (sol.objective, sol.x_star, saddle, "higher-order")
        }
        None => {
            let sol = solver::solve_robust(&loaded.spec, &flags.options())?;
            let saddle = oracle::oracle_saddle(&loaded.spec, &grid)?;
            (sol.objective, sol.x_star, saddle, "base")
        }
    };
    let discrepancy = (solver_value - saddle.value()).abs() / (1.0 + solver_value.abs());
    #[derive(Serialize)]
    struct Out {
        model: &'static str,
        grid: usize,
        solver_value: f64,
        solver_x: Vec<f64>,
        oracle_primal: f64,
        oracle_dual: f64,
        oracle_gap: f64,
        oracle_x: Vec<f64>,
        discrepancy: f64,
        pass: bool,
        warnings: Vec<String>,
    }
    let out = Out {
        model: model_name,
        grid: grid.points_per_axis,
        solver_value,
        solver_x: vec_of(&x_star),
        oracle_primal: saddle.primal_value,
        oracle_dual: saddle.dual_value,
        oracle_gap: saddle.gap,
        oracle_x: vec_of(&saddle.x),
        discrepancy,
        pass: discrepancy <= ORACLE_RTOL,
        warnings: loaded.warnings,
    };
    finite(
        "oracle",
        [
            &out.solver_value,
            &out.oracle_primal,
            &out.oracle_dual,
            &out.discrepancy,
        ],
    )?;
    Ok(io::to_json_bytes(&out))
}

fn execute(cli: &Cli) -> Result<(Vec<u8>, Option<PathBuf>), Failure> {
    let (bytes, common) = match &cli.command {
        Command::Validate { common } => (cmd_validate(common)?, common),
        Command::Solve { common, solve } => (cmd_solve(common, solve)?, common),
        Command::WorstCase { common, solve, x } => {
            (cmd_worst_case(common, solve, x.as_deref())?, common)
        }
        Command::Diagnose { common, solve } => (cmd_diagnose(common, solve)?, common),
        Command::Sweep {
            common,
            solve,
            param,
            from,
            to,
            steps,
            m,
            v,
            c,
        } => (
            cmd_sweep(common, solve, *param, *from, *to, *steps, (*m, *v, *c))?,
            common,
        ),
        Command::Expand { common, solve } => (cmd_expand(common, *solve)?, common),
        Command::HigherOrder {
            common,
            solve,
            order,
            delta,
        } => (cmd_higher_order(common, solve, *order, *delta)?, common),
        Command::OracleCheck {
            common,
            solve,
            grid,
        } => (cmd_oracle_check(common, solve, *grid)?, common),
    };
    Ok((bytes, common.out.clone()))
}

fn report_failure(err: &mut dyn Write, f: &Failure) -> i32 {
    let _ = err.write_all(&io::error_object(f.kind, &f.message, f.details.clone()));
    f.code
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    EXIT_OK
                }
                _ => report_failure(err, &Failure::usage(e.to_string().trim_end())),
            };
        }
    };
    match execute(&cli) {
        Ok((bytes, None)) => match out.write_all(&bytes).and_then(|_| out.flush()) {
            Ok(()) => EXIT_OK,
            Err(e) => report_failure(err, &Failure::new(EXIT_IO, "io", format!("stdout: {e}"))),
        },
        Ok((bytes, Some(path))) => match std::fs::write(&path, &bytes) {
            Ok(()) => EXIT_OK,
            Err(e) => report_failure(err, &io_failure(&path, e)),
        },
        Err(f) => report_failure(err, &f),
    }
}
