//! Problem files and reports.
//!
//! Problem file (JSON):
//!
//! ```json
//! {
//!   "n": 2,
//!   "mean": [[2.0, 1.0], [2.0, 1.0]],
//!   "std": [[0.5, 1.0], [0.5, 1.0]],
//!   "cost": {"type": "scaled_identity", "c": 2.0},
//!   "target": [1.0, 1.0],
//!   "reference": [0.0, 0.0]
//! }
//! ```
//!
//! `cost` may also be `{"type": "rank1", "c": .., "p": [..]}` (p is
//! normalized on load) or `{"type": "dense", "matrix": [[..], ..]}`.
//! Optional keys: `"delta"` (second-order strength; zero std on the
//! diagonal is then accepted) and `"expansion"` with `base_blocks`,
//! `new_variances`, `pinned` (`[agent, j, value]`, 0-based), `x_bar` and
//! `new_agent_std`. With an expansion the last of the `n` agents is the new one.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::diagnostics::UncertaintyCostReport;
use crate::expansion::{ExpansionSpec, PinnedEntry};
use crate::model::{validate_spec, Cost, ProblemSpec, ValidationReport, Violation};
use crate::solver::RobustSolution;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IoError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown field `{path}`")]
    UnknownField { path: String },
    #[error("schema violation in `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("invalid problem: {0}")]
    Validation(ValidationReport),
    #[error("refusing to serialize non-finite value in `{field}`")]
    NonFinite { field: String },
    #[error("csv error: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    /// Unknown keys are errors.
    #[default]
    Strict,
    /// Unknown keys are dropped with a warning.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostFile {
    ScaledIdentity { c: f64 },
    Rank1 { c: f64, p: Vec<f64> },
    Dense { matrix: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionFile {
    pub base_blocks: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_variances: Option<Vec<f64>>,
    #[serde(default)]
    pub pinned: Vec<(usize, usize, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_bar: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_agent_std: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub n: usize,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    pub cost: CostFile,
    pub target: Vec<f64>,
    pub reference: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expansion: Option<ExpansionFile>,
}

const TOP_KEYS: &[&str] = &[
    "n",
    "mean",
    "std",
    "cost",
    "target",
    "reference",
    "delta",
    "expansion",
];
const EXPANSION_KEYS: &[&str] = &[
    "base_blocks",
    "new_variances",
    "pinned",
    "x_bar",
    "new_agent_std",
];

fn cost_keys(kind: Option<&str>) -> &'static [&'static str] {
    match kind {
        Some("scaled_identity") => &["type", "c"],
        Some("rank1") => &["type", "c", "p"],
        Some("dense") => &["type", "matrix"],
        _ => &["type", "c", "p", "matrix"],
    }
}

/// Removes unknown keys, returning their dotted paths.
fn strip_unknown(value: &mut Value) -> Vec<String> {
    let mut unknown = Vec::new();
    let Value::Object(top) = value else {
        return unknown;
    };
    top.retain(|k, _| {
        let keep = TOP_KEYS.contains(&k.as_str());
        if !keep {
            unknown.push(k.clone());
        }
        keep
    });
    if let Some(Value::Object(cost)) = top.get_mut("cost") {
        let kind = cost.get("type").and_then(Value::as_str).map(str::to_owned);
        let allowed = cost_keys(kind.as_deref());
        cost.retain(|k, _| {
            let keep = allowed.contains(&k.as_str());
            if !keep {
                unknown.push(format!("cost.{k}"));
            }
            keep
        });
    }
    if let Some(Value::Object(exp)) = top.get_mut("expansion") {
        exp.retain(|k, _| {
            let keep = EXPANSION_KEYS.contains(&k.as_str());
            if !keep {
                unknown.push(format!("expansion.{k}"));
            }
            keep
        });
    }
    unknown
}

/// A parsed problem file with everything it carries.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedProblem {
    pub spec: ProblemSpec,
    pub delta: Option<f64>,
    pub expansion: Option<ExpansionSpec>,
    pub warnings: Vec<String>,
}

pub fn parse_problem_file(
    bytes: &[u8],
    strictness: Strictness,
) -> Result<(ProblemFile, Vec<String>), IoError> {
    let mut value: Value = serde_json::from_slice(bytes).map_err(|e| IoError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let unknown = strip_unknown(&mut value);
    let mut warnings = Vec::new();
    if let Some(first) = unknown.first() {
        match strictness {
            Strictness::Strict => {
                return Err(IoError::UnknownField {
                    path: first.clone(),
                })
            }
            Strictness::Lenient => {
                for path in &unknown {
                    log::warn!("ignoring unknown field `{path}`");
                    warnings.push(format!("ignored unknown field `{path}`"));
                }
            }
        }
    }
    let file: ProblemFile = serde_json::from_value(value).map_err(|e| IoError::Schema {
        field: "<document>".into(),
        message: e.to_string(),
    })?;
    Ok((file, warnings))
}

fn schema(field: &str, message: impl Into<String>) -> IoError {
    IoError::Schema {
        field: field.into(),
        message: message.into(),
    }
}

fn matrix(field: &str, rows: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>, IoError> {
    if rows.len() != n {
        return Err(schema(
            field,
            format!("expected {n} rows, found {}", rows.len()),
        ));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != n {
            return Err(schema(
                field,
                format!("row {i} has {} entries, expected {n}", r.len()),
            ));
        }
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn vector(field: &str, v: &[f64], n: usize) -> Result<DVector<f64>, IoError> {
    if v.len() != n {
        return Err(schema(
            field,
            format!("expected {n} entries, found {}", v.len()),
        ));
    }
    Ok(DVector::from_column_slice(v))
}

/// `p/‖p‖`, leaving vectors that are already unit length untouched.
pub fn normalize(p: &DVector<f64>) -> DVector<f64> {
    let norm = p.norm();
    if norm == 0.0 || (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
        p.clone()
    } else {
        p / norm
    }
}

fn cost_from_file(cost: &CostFile, n: usize) -> Result<Cost, IoError> {
    Ok(match cost {
        CostFile::ScaledIdentity { c } => Cost::scaled_identity(*c),
        CostFile::Rank1 { c, p } => {
            let p = vector("cost.p", p, n)?;
            if p.norm() == 0.0 {
                return Err(schema("cost.p", "must be nonzero"));
            }
            Cost::rank1(*c, normalize(&p))
        }
        CostFile::Dense { matrix: m } => Cost::dense(matrix("cost.matrix", m, n)?),
    })
}

fn expansion_from_file(e: &ExpansionFile, n_total: usize) -> Result<ExpansionSpec, IoError> {
    if n_total < 2 {
        return Err(schema(
            "expansion",
            "needs at least one existing agent and the new one",
        ));
    }
    let n = n_total - 1;
    if e.base_blocks.len() != n {
        return Err(schema(
            "expansion.base_blocks",
            format!("expected {n} blocks, found {}", e.base_blocks.len()),
        ));
    }
    let base_blocks = e
        .base_blocks
        .iter()
        .enumerate()
        .map(|(i, b)| matrix(&format!("expansion.base_blocks[{i}]"), b, n))
        .collect::<Result<Vec<_>, _>>()?;
    let new_variances = match &e.new_variances {
        Some(v) => vector("expansion.new_variances", v, n_total)?,
        None => DVector::from_element(n_total, 1.0),
    };
    let new_agent_std = match &e.new_agent_std {
        Some(v) => vector("expansion.new_agent_std", v, n_total)?,
        None => DVector::from_element(n_total, 1.0),
    };
    let x_bar = e
        .x_bar
        .as_ref()
        .map(|v| vector("expansion.x_bar", v, n_total))
        .transpose()?;
    let pinned = e
        .pinned
        .iter()
        .map(|&(agent, j, value)| PinnedEntry { agent, j, value })
        .collect();
    let spec = ExpansionSpec {
        base_blocks,
        new_variances,
        pinned,
        x_bar,
        new_agent_std,
    };
    spec.validate()
        .map_err(|err| schema("expansion", err.to_string()))?;
    Ok(spec)
}

/// Converts a parsed file, validating every invariant.
pub fn problem_from_file(file: &ProblemFile) -> Result<LoadedProblem, IoError> {
    let n = file.n;
    if n == 0 {
        return Err(schema("n", "must be positive"));
    }
    let spec = ProblemSpec::new(
        matrix("mean", &file.mean, n)?,
        matrix("std", &file.std, n)?,
        cost_from_file(&file.cost, n)?,
        vector("target", &file.target, n)?,
        vector("reference", &file.reference, n)?,
    );
    let mut report = validate_spec(&spec);
    if file.delta.is_some() {
        // no self-influence in the second-order model
        report
            .violations
            .retain(|v| !matches!(v, Violation::ZeroStd { i, j } if i == j));
    }
    if !report.ok() {
        return Err(IoError::Validation(report));
    }
    if let Some(d) = file.delta {
        if !(d > 0.0) {
            return Err(schema("delta", format!("must be positive (got {d})")));
        }
    }
    let expansion = file
        .expansion
        .as_ref()
        .map(|e| expansion_from_file(e, n))
        .transpose()?;
    Ok(LoadedProblem {
        spec,
        delta: file.delta,
        expansion,
        warnings: Vec::new(),
    })
}

pub fn load_problem_with(bytes: &[u8], strictness: Strictness) -> Result<LoadedProblem, IoError> {
    let (file, warnings) = parse_problem_file(bytes, strictness)?;
    let mut loaded = problem_from_file(&file)?;
    loaded.warnings = warnings;
    Ok(loaded)
}

/// Strict load of the problem itself.
pub fn load_problem(bytes: &[u8]) -> Result<ProblemSpec, IoError> {
    load_problem_with(bytes, Strictness::Strict).map(|l| l.spec)
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub fn problem_to_file(
    spec: &ProblemSpec,
    delta: Option<f64>,
    expansion: Option<&ExpansionSpec>,
) -> ProblemFile {
    let cost = match &spec.cost {
        Cost::ScaledIdentity { c } => CostFile::ScaledIdentity { c: *c },
        Cost::Rank1 { c, p } => CostFile::Rank1 {
            c: *c,
            p: p.iter().copied().collect(),
        },
        Cost::Dense(m) => CostFile::Dense { matrix: rows_of(m) },
    };
    ProblemFile {
        n: spec.n(),
        mean: rows_of(&spec.mean),
        std: rows_of(&spec.std),
        cost,
        target: spec.target.iter().copied().collect(),
        reference: spec.reference.iter().copied().collect(),
        delta,
        expansion: expansion.map(|e| ExpansionFile {
            base_blocks: e.base_blocks.iter().map(rows_of).collect(),
            new_variances: Some(e.new_variances.iter().copied().collect()),
            pinned: e.pinned.iter().map(|p| (p.agent, p.j, p.value)).collect(),
            x_bar: e.x_bar.as_ref().map(|x| x.iter().copied().collect()),
            new_agent_std: Some(e.new_agent_std.iter().copied().collect()),
        }),
    }
}

/// Pretty JSON with a trailing newline. Floats use the shortest decimal
/// that reads back to the same double.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report types serialize infallibly");
    out.push(b'\n');
    out
}

pub fn check_finite<'a>(
    field: &str,
    values: impl IntoIterator<Item = &'a f64>,
) -> Result<(), IoError> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(IoError::NonFinite {
            field: field.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionReport {
    pub x_star: Vec<f64>,
    #[serde(rename = "B_star")]
    pub b_star: Vec<Vec<f64>>,
    pub per_agent_factors: Vec<Vec<f64>>,
    pub sign_pattern: Vec<i8>,
    pub objective: f64,
    pub stationarity_residual: f64,
    pub duality_gap: f64,
    pub property_b: bool,
    pub method: String,
    pub orthants_tried: usize,
    pub linear_solve: String,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<UncertaintyCostReport>,
}

impl SolutionReport {
    pub fn from_solution(sol: &RobustSolution, diagnostics: Option<UncertaintyCostReport>) -> Self {
        Self {
            x_star: sol.x_star.iter().copied().collect(),
            b_star: rows_of(&sol.worst_case.aggregate),
            per_agent_factors: sol
                .worst_case
                .per_agent
                .iter()
                .map(|q| q.factor.iter().copied().collect())
                .collect(),
            sign_pattern: sol.worst_case.sign_pattern.as_slice().to_vec(),
            objective: sol.objective,
            stationarity_residual: sol.stationarity_residual,
            duality_gap: sol.duality_gap,
            property_b: sol.property_b,
            method: sol.method.as_str().into(),
            orthants_tried: sol.orthants_tried,
            linear_solve: format!("{:?}", sol.linear_solve).to_lowercase(),
            warnings: sol.warnings.clone(),
            diagnostics,
        }
    }

    pub fn check_finite(&self) -> Result<(), IoError> {
        check_finite("x_star", &self.x_star)?;
        check_finite("B_star", self.b_star.iter().flatten())?;
        check_finite("per_agent_factors", self.per_agent_factors.iter().flatten())?;
        check_finite("objective", [&self.objective])?;
        check_finite("stationarity_residual", [&self.stationarity_residual])?;
        check_finite("duality_gap", [&self.duality_gap])?;
        if let Some(d) = &self.diagnostics {
            check_finite("diagnostics.global_cost", d.global_cost.iter().flatten())?;
            check_finite("diagnostics.local_cost", d.local_cost.iter().flatten())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportOptions {
    pub diagnostics: Option<UncertaintyCostReport>,
}

pub fn write_report(sol: &RobustSolution, opts: &ReportOptions) -> Result<Vec<u8>, IoError> {
    let report = SolutionReport::from_solution(sol, opts.diagnostics.clone());
    report.check_finite()?;
    Ok(to_json_bytes(&report))
}

pub fn parse_report(bytes: &[u8]) -> Result<SolutionReport, IoError> {
    serde_json::from_slice(bytes).map_err(|e| IoError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// One grid point of a parameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: f64,
    /// Absent when no fixed point was found.
    pub x: Option<Vec<f64>>,
    pub objective: Option<f64>,
    pub property_b: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// CSV with columns `parameter, x1..xn, objective, property_b`.
pub fn write_sweep_csv(rows: &[SweepRow], n: usize) -> Result<Vec<u8>, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["parameter".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.push("objective".into());
    header.push("property_b".into());
    w.write_record(&header)
        .map_err(|e| IoError::Csv(e.to_string()))?;
    for row in rows {
        let mut rec = vec![row.parameter.to_string()];
        match &row.x {
            Some(x) => {
                check_finite("x", x)?;
                rec.extend(x.iter().map(f64::to_string));
            }
            None => rec.extend(std::iter::repeat_n(String::new(), n)),
        }
        rec.push(row.objective.map(|f| f.to_string()).unwrap_or_default());
        rec.push(row.property_b.to_string());
        w.write_record(&rec)
            .map_err(|e| IoError::Csv(e.to_string()))?;
    }
    w.into_inner().map_err(|e| IoError::Csv(e.to_string()))
}

/// Machine-readable error line for stderr.
pub fn error_object(kind: &str, message: &str, details: Option<Value>) -> Vec<u8> {
    let mut m = BTreeMap::new();
    m.insert("error", Value::String(kind.into()));
    m.insert("message", Value::String(message.into()));
    if let Some(d) = details {
        m.insert("details", d);
    }
    let mut out = serde_json::to_vec(&m).expect("error objects serialize");
    out.push(b'\n');
    out
}
