//! File formats: JSON configs and reports, CSV datasets and traces.
//!
//! Numeric round trips are loss-free: floats are written in the shortest
//! form that parses back to the same bits, infinities are spelled
//! `inf`/`-inf`, and the optional `--exact` trace columns carry raw IEEE bits
//! in hex for external regression baselines.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DataErrorKind, Error, Result};
use crate::estimator::{EstimatorConfig, MuPolicy, ObservationRecord, StepGains};
use crate::geometry::{sup_abs_inner, DomainSet};
use crate::link::{g_bounds, NoiseKind, NoiseModel, SaturationSpec};
use crate::simulation::{ScenarioConfig, SpecSchedule};
use crate::trace::{rows_mat, RunTrace, StepRecord, TraceMeta};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

/// Top-level JSON configuration consumed by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigFile {
    pub schema_version: u32,
    pub seed: u64,
    pub domain: DomainSet,
    pub noise: NoiseModel,
    #[serde(default)]
    pub estimator: EstimatorSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioSection>,
    /// Dataset path for `fit` / `validate` (CLI flag overrides).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc: Option<McSection>,
    #[serde(default)]
    pub ci: CiSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EstimatorSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<MuPolicy>,
    /// Scalar s for initial gains `s * I`; ignored when explicit matrices are
    /// given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0_bar: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0_bar: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_tie_epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_inflation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_uses_updated_bar: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resync_every: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSection {
    pub m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_diag: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_scale: Option<f64>,
    pub theta_true: Vec<f64>,
    pub spec: SaturationSpec,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McSection {
    pub replications: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CiSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plugin: Option<String>,
}

impl ConfigFile {
    pub fn build_estimator(&self) -> Result<EstimatorConfig> {
        let mut cfg = EstimatorConfig::new(self.domain.clone(), self.noise.clone());
        let e = &self.estimator;
        if let Some(mu) = e.mu {
            cfg.mu = mu;
        }
        if let Some(s) = e.gain_scale {
            cfg = cfg.with_gain_scale(s);
        }
        if let Some(p0) = &e.p0 {
            cfg.p0 = rows_mat(p0);
        }
        if let Some(p0_bar) = &e.p0_bar {
            cfg.p0_bar = rows_mat(p0_bar);
        }
        if let Some(t0) = &e.theta0 {
            cfg.theta0 = DVector::from_column_slice(t0);
        }
        if let Some(t0b) = &e.theta0_bar {
            cfg.theta0_bar = DVector::from_column_slice(t0b);
        }
        if let Some(v) = e.beta_tie_epsilon {
            cfg.beta_tie_epsilon = v;
        }
        if let Some(v) = e.m_inflation {
            cfg.m_inflation = v;
        }
        if let Some(v) = e.beta_uses_updated_bar {
            cfg.beta_uses_updated_bar = v;
        }
        if let Some(v) = e.resync_every {
            cfg.resync_every = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Scenario builder; `n_override` substitutes the data length (used by
    /// the Monte-Carlo design which may run shorter replications).
    pub fn build_scenario(&self, seed: u64, n_override: Option<usize>) -> Result<ScenarioConfig> {
        let s = self
            .scenario
            .as_ref()
            .ok_or_else(|| Error::config("config has no scenario section"))?;
        let a = match (&s.a, &s.a_diag) {
            (Some(rows), _) => rows_mat(rows),
            (None, Some(diag)) => DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
            (None, None) => {
                return Err(Error::config("scenario: need `a` or `a_diag`"));
            }
        };
        let scenario = ScenarioConfig {
            m: s.m,
            a,
            input_scale: s.input_scale.unwrap_or(5.0),
            theta_true: DVector::from_column_slice(&s.theta_true),
            specs: SpecSchedule::Constant(s.spec),
            noise: self.noise.clone(),
            n: n_override.unwrap_or(s.n),
            seed,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

pub fn load_config(path: &Path) -> Result<ConfigFile> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: ConfigFile = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("config {}: {e}", path.display())))?;
    if cfg.schema_version != CONFIG_SCHEMA_VERSION {
        return Err(Error::config(format!(
            "config schema version {} unsupported (expected {CONFIG_SCHEMA_VERSION})",
            cfg.schema_version
        )));
    }
    Ok(cfg)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::config(format!("serialization failed: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset CSV
// ---------------------------------------------------------------------------

fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v}")
    }
}

fn parse_f64(cell: &str, line: usize, col: &str) -> Result<f64> {
    match cell.trim() {
        "inf" | "+inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        s => s.parse::<f64>().map_err(|_| {
            Error::data(
                DataErrorKind::NonNumericCell,
                format!("line {line}"),
                format!("column {col}: cannot parse {cell:?} as a number"),
            )
        }),
    }
}

fn dataset_header(m: usize) -> Vec<String> {
    let mut h = vec!["k".to_string()];
    h.extend((0..m).map(|i| format!("phi_{i}")));
    h.extend(["l", "u", "L", "U", "y"].iter().map(|s| s.to_string()));
    h
}

/// Write observation records in the dataset CSV schema.
pub fn write_dataset(records: &[ObservationRecord], path: &Path) -> Result<()> {
    let m = records.first().map_or(0, |r| r.phi.len());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(dataset_header(m))
        .map_err(|e| Error::config(format!("csv write: {e}")))?;
    for r in records {
        let mut row = vec![r.k.to_string()];
        row.extend(r.phi.iter().map(|&v| fmt_f64(v)));
        row.push(fmt_f64(r.spec.l()));
        row.push(fmt_f64(r.spec.u()));
        row.push(fmt_f64(r.spec.clamp_lo()));
        row.push(fmt_f64(r.spec.clamp_hi()));
        row.push(fmt_f64(r.y));
        w.write_record(&row)
            .map_err(|e| Error::config(format!("csv write: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Load and validate a dataset CSV. Violations carry line numbers and
/// distinct error codes.
pub fn load_dataset(path: &Path) -> Result<Vec<ObservationRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::config(format!("cannot read dataset {}: {e}", path.display())))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::data(DataErrorKind::SchemaMismatch, "line 1", e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if headers.first().map(String::as_str) != Some("k") || headers.len() < 7 {
        return Err(Error::data(
            DataErrorKind::SchemaMismatch,
            "line 1",
            "expected header k, phi_0.., l, u, L, U, y",
        ));
    }
    let m = headers.len() - 6;
    let expected = dataset_header(m);
    if headers != expected {
        return Err(Error::data(
            DataErrorKind::SchemaMismatch,
            "line 1",
            format!("expected header {:?}, got {:?}", expected.join(","), headers.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (idx, row) in rdr.records().enumerate() {
        let line = idx + 2; // header is line 1
        let row = row.map_err(|e| {
            Error::data(DataErrorKind::NonNumericCell, format!("line {line}"), e.to_string())
        })?;
        if row.len() != expected.len() {
            return Err(Error::data(
                DataErrorKind::DimensionMismatch,
                format!("line {line}"),
                format!("expected {} cells, got {}", expected.len(), row.len()),
            ));
        }
        let k: usize = row[0].trim().parse().map_err(|_| {
            Error::data(
                DataErrorKind::NonNumericCell,
                format!("line {line}"),
                format!("column k: cannot parse {:?}", &row[0]),
            )
        })?;
        if k != idx {
            return Err(Error::data(
                DataErrorKind::NonContiguousIndex,
                format!("line {line}"),
                format!("step index {k}, expected {idx} (contiguous from 0)"),
            ));
        }
        let phi = DVector::from_iterator(
            m,
            (0..m)
                .map(|i| parse_f64(&row[1 + i], line, &format!("phi_{i}")))
                .collect::<Result<Vec<f64>>>()?,
        );
        let l = parse_f64(&row[m + 1], line, "l")?;
        let u = parse_f64(&row[m + 2], line, "u")?;
        let clamp_lo = parse_f64(&row[m + 3], line, "L")?;
        let clamp_hi = parse_f64(&row[m + 4], line, "U")?;
        let y = parse_f64(&row[m + 5], line, "y")?;
        let spec = SaturationSpec::new(l, u, clamp_lo, clamp_hi).map_err(|e| {
            Error::data(
                DataErrorKind::OrderingViolation,
                format!("line {line}"),
                format!("threshold ordering invalid: {e}"),
            )
        })?;
        let (lo, hi) = spec.output_range();
        if y < lo - 1e-9 || y > hi + 1e-9 {
            return Err(Error::data(
                DataErrorKind::OutOfRange,
                format!("line {line}"),
                format!("y = {y} outside clamp range [{lo}, {hi}]"),
            ));
        }
        out.push(ObservationRecord { k, phi, spec, y });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Trace CSV + meta sidecar
// ---------------------------------------------------------------------------

fn trace_header(m: usize) -> Vec<String> {
    let mut h = vec!["k".to_string()];
    h.extend((0..m).map(|i| format!("phi_{i}")));
    h.extend(["l", "u", "L", "U", "y"].iter().map(|s| s.to_string()));
    h.extend((0..m).map(|i| format!("theta_bar_{i}")));
    h.extend((0..m).map(|i| format!("theta_hat_{i}")));
    h.extend(
        [
            "beta_bar",
            "a_bar",
            "beta",
            "a",
            "mu",
            "g_lo",
            "g_hi",
            "m_radius",
            "phi_pbar_phi",
            "phi_p_phi",
            "yhat_bar",
            "yhat",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    h.extend((0..m).map(|i| format!("p_diag_{i}")));
    h.extend(
        [
            "logdet_p_inv",
            "logdet_pbar_inv",
            "lam_min_p_inv",
            "lam_min_pbar_inv",
            "lam_min_info",
            "lam_max_info",
            "err_bar",
            "err_hat",
            "regret_bar",
            "regret_hat",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    h
}

fn step_floats(s: &StepRecord) -> Vec<Option<f64>> {
    let mut row: Vec<Option<f64>> = Vec::new();
    row.extend(s.phi.iter().map(|&v| Some(v)));
    row.extend([
        Some(s.spec.l()),
        Some(s.spec.u()),
        Some(s.spec.clamp_lo()),
        Some(s.spec.clamp_hi()),
        Some(s.y),
    ]);
    row.extend(s.theta_bar.iter().map(|&v| Some(v)));
    row.extend(s.theta_hat.iter().map(|&v| Some(v)));
    row.extend([
        Some(s.gains.beta_bar),
        Some(s.gains.a_bar),
        Some(s.gains.beta),
        Some(s.gains.a),
        Some(s.gains.mu),
        Some(s.g_lo),
        Some(s.g_hi),
        Some(s.m_radius),
        Some(s.phi_pbar_phi),
        Some(s.phi_p_phi),
        Some(s.yhat_bar),
        Some(s.yhat),
    ]);
    row.extend(s.p_diag.iter().map(|&v| Some(v)));
    row.extend([
        Some(s.logdet_p_inv),
        Some(s.logdet_pbar_inv),
        Some(s.lam_min_p_inv),
        Some(s.lam_min_pbar_inv),
        Some(s.lam_min_info),
        Some(s.lam_max_info),
        s.err_bar,
        s.err_hat,
        s.regret_bar,
        s.regret_hat,
    ]);
    row
}

pub fn meta_path(trace_path: &Path) -> PathBuf {
    let mut os = trace_path.as_os_str().to_owned();
    os.push(".meta.json");
    PathBuf::from(os)
}

/// Write a trace as CSV plus a `<path>.meta.json` sidecar with the run
/// header. With `exact`, every float column gains a `_hex` twin carrying the
/// raw IEEE-754 bits.
pub fn write_trace(trace: &RunTrace, path: &Path, exact: bool) -> Result<()> {
    let m = trace.meta.m;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = trace_header(m);
    if exact {
        let hex_cols: Vec<String> = header[1..].iter().map(|h| format!("{h}_hex")).collect();
        header.extend(hex_cols);
    }
    w.write_record(&header)
        .map_err(|e| Error::config(format!("csv write: {e}")))?;
    for s in &trace.steps {
        let floats = step_floats(s);
        let mut row = vec![s.k.to_string()];
        row.extend(
            floats
                .iter()
                .map(|v| v.map_or_else(String::new, fmt_f64)),
        );
        if exact {
            row.extend(floats.iter().map(|v| {
                v.map_or_else(String::new, |x| format!("{:016x}", x.to_bits()))
            }));
        }
        w.write_record(&row)
            .map_err(|e| Error::config(format!("csv write: {e}")))?;
    }
    w.flush()?;
    write_json(&trace.meta, &meta_path(path))?;
    Ok(())
}

/// Reload a trace written by [`write_trace`].
pub fn load_trace(path: &Path) -> Result<RunTrace> {
    let meta_text = fs::read_to_string(meta_path(path)).map_err(|e| {
        Error::config(format!(
            "cannot read trace meta {}: {e}",
            meta_path(path).display()
        ))
    })?;
    let meta: TraceMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::config(format!("trace meta: {e}")))?;
    let m = meta.m;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::config(format!("cannot read trace {}: {e}", path.display())))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::data(DataErrorKind::SchemaMismatch, "line 1", e.to_string()))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let expected = trace_header(m);
    if headers.len() < expected.len() || headers[..expected.len()] != expected[..] {
        return Err(Error::data(
            DataErrorKind::SchemaMismatch,
            "line 1",
            "trace header does not match the documented column set",
        ));
    }
    let mut steps = Vec::new();
    for (idx, row) in rdr.records().enumerate() {
        let line = idx + 2;
        let row = row.map_err(|e| {
            Error::data(DataErrorKind::NonNumericCell, format!("line {line}"), e.to_string())
        })?;
        let k: usize = row[0].trim().parse().map_err(|_| {
            Error::data(
                DataErrorKind::NonNumericCell,
                format!("line {line}"),
                "column k",
            )
        })?;
        let mut cursor = 1usize;
        let mut take = |n: usize| -> std::ops::Range<usize> {
            let r = cursor..cursor + n;
            cursor += n;
            r
        };
        let parse_at = |i: usize| parse_f64(&row[i], line, &expected[i]);
        let parse_opt = |i: usize| -> Result<Option<f64>> {
            if row[i].trim().is_empty() {
                Ok(None)
            } else {
                parse_at(i).map(Some)
            }
        };
        let phi_r = take(m);
        let spec_r = take(4);
        let y_i = take(1).start;
        let tb_r = take(m);
        let th_r = take(m);
        let gains_r = take(12);
        let pdiag_r = take(m);
        let tail_r = take(10);
        let phi: Vec<f64> = phi_r.map(parse_at).collect::<Result<_>>()?;
        let sp: Vec<f64> = spec_r.map(parse_at).collect::<Result<_>>()?;
        let spec = SaturationSpec::new(sp[0], sp[1], sp[2], sp[3]).map_err(|e| {
            Error::data(
                DataErrorKind::OrderingViolation,
                format!("line {line}"),
                e.to_string(),
            )
        })?;
        let y = parse_at(y_i)?;
        let theta_bar: Vec<f64> = tb_r.map(parse_at).collect::<Result<_>>()?;
        let theta_hat: Vec<f64> = th_r.map(parse_at).collect::<Result<_>>()?;
        let g: Vec<f64> = gains_r.map(parse_at).collect::<Result<_>>()?;
        let p_diag: Vec<f64> = pdiag_r.map(parse_at).collect::<Result<_>>()?;
        let tail: Vec<Option<f64>> = tail_r.map(parse_opt).collect::<Result<_>>()?;
        let need = |i: usize| -> Result<f64> {
            tail[i].ok_or_else(|| {
                Error::data(
                    DataErrorKind::NonNumericCell,
                    format!("line {line}"),
                    "missing required trace column",
                )
            })
        };
        steps.push(StepRecord {
            k,
            phi,
            spec,
            y,
            theta_bar,
            theta_hat,
            gains: StepGains {
                beta_bar: g[0],
                a_bar: g[1],
                beta: g[2],
                a: g[3],
                mu: g[4],
            },
            g_lo: g[5],
            g_hi: g[6],
            m_radius: g[7],
            phi_pbar_phi: g[8],
            phi_p_phi: g[9],
            yhat_bar: g[10],
            yhat: g[11],
            p_diag,
            logdet_p_inv: need(0)?,
            logdet_pbar_inv: need(1)?,
            lam_min_p_inv: need(2)?,
            lam_min_pbar_inv: need(3)?,
            lam_min_info: need(4)?,
            lam_max_info: need(5)?,
            err_bar: tail[6],
            err_hat: tail[7],
            regret_bar: tail[8],
            regret_hat: tail[9],
        });
    }
    Ok(RunTrace { meta, steps })
}

// ---------------------------------------------------------------------------
// Validation report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub pass: bool,
    pub witnesses: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl CheckResult {
    fn new() -> Self {
        CheckResult {
            pass: true,
            witnesses: BTreeMap::new(),
            notes: Vec::new(),
        }
    }
}

/// Model-assumption audit of a dataset against a configuration: regressor
/// boundedness, threshold ordering with its bound witnesses, and positivity
/// of the link-derivative lower bound at the run's evaluation radius.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub pass: bool,
    pub rows: usize,
    pub m: usize,
    pub regressor_bounds: CheckResult,
    pub threshold_order: CheckResult,
    pub link_positivity: CheckResult,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Validate records against the model assumptions. `theta` (when supplied,
/// e.g. from a scenario section) is additionally checked for interior
/// membership in the domain.
pub fn validate_dataset(
    records: &[ObservationRecord],
    estimator: &EstimatorConfig,
    theta: Option<&DVector<f64>>,
    seed: Option<u64>,
) -> Result<ValidationReport> {
    let m = estimator.dim();

    let mut regressor_bounds = CheckResult::new();
    let mut max_phi_norm = 0.0f64;
    for r in records {
        let norm = r.phi.norm();
        if !norm.is_finite() {
            regressor_bounds.pass = false;
            regressor_bounds
                .notes
                .push(format!("step {}: regressor not finite", r.k));
        }
        max_phi_norm = max_phi_norm.max(norm);
    }
    regressor_bounds
        .witnesses
        .insert("max_phi_norm".into(), max_phi_norm);
    if let Some(th) = theta {
        let inside = estimator.domain.contains_interior(th, 0.0);
        regressor_bounds
            .witnesses
            .insert("theta_in_domain_interior".into(), f64::from(u8::from(inside)));
        if !inside {
            regressor_bounds.pass = false;
            regressor_bounds
                .notes
                .push("supplied parameter is not interior to the domain".into());
        }
    }

    let mut threshold_order = CheckResult::new();
    let mut c_bound = 0.0f64;
    let mut l_plus_sup = 0.0f64;
    let mut u_minus_sup = 0.0f64;
    for r in records {
        let s = &r.spec;
        // ordering holds by construction of SaturationSpec; witness the
        // clamp-gap and one-sided threshold bounds
        if s.l().is_finite() {
            c_bound = c_bound.max(s.l() - s.clamp_lo());
            l_plus_sup = l_plus_sup.max(s.l().max(0.0));
        }
        if s.u().is_finite() {
            c_bound = c_bound.max(s.clamp_hi() - s.u());
            u_minus_sup = u_minus_sup.max((-s.u()).max(0.0));
        }
    }
    threshold_order.witnesses.insert("c_bound".into(), c_bound);
    threshold_order
        .witnesses
        .insert("l_plus_sup".into(), l_plus_sup);
    threshold_order
        .witnesses
        .insert("u_minus_sup".into(), u_minus_sup);

    let mut link_positivity = CheckResult::new();
    let mut max_radius = 0.0f64;
    for r in records {
        max_radius = max_radius.max(sup_abs_inner(&r.phi, &estimator.domain));
    }
    let radius = max_radius * estimator.m_inflation;
    link_positivity.witnesses.insert("m_radius".into(), radius);
    if records.is_empty() || radius == 0.0 {
        link_positivity
            .notes
            .push("no excitation recorded; derivative-bound check skipped".into());
    } else {
        // distinct specs in the data (usually one)
        let mut specs: Vec<SaturationSpec> = Vec::new();
        for r in records {
            if !specs.contains(&r.spec) {
                specs.push(r.spec);
            }
        }
        let gaussian = matches!(estimator.noise.kind, NoiseKind::Gaussian { .. });
        let mut min_g_lo = f64::INFINITY;
        for spec in &specs {
            match g_bounds(radius, spec, &estimator.noise) {
                Ok(b) => {
                    min_g_lo = min_g_lo.min(b.g_lo);
                    link_positivity.witnesses.insert("g_hi".into(), b.g_hi);
                    link_positivity.witnesses.insert("rho".into(), b.rho);
                    if b.g_lo <= 0.0 && gaussian {
                        link_positivity.notes.push(
                            "derivative lower bound underflows at this radius; positivity \
                             holds analytically for gaussian noise with a nondegenerate clamp range"
                                .into(),
                        );
                    }
                }
                Err(Error::Assumption(msg)) => {
                    link_positivity.pass = false;
                    link_positivity.notes.push(msg);
                }
                Err(other) => return Err(other),
            }
        }
        if min_g_lo.is_finite() {
            link_positivity.witnesses.insert("g_lo".into(), min_g_lo);
        }
    }

    let pass = regressor_bounds.pass && threshold_order.pass && link_positivity.pass;
    Ok(ValidationReport {
        pass,
        rows: records.len(),
        m,
        regressor_bounds,
        threshold_order,
        link_positivity,
        config_hash: estimator.content_hash(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::run_to_trace;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use tempfile::tempdir;

    fn sample_records(n: usize) -> Vec<ObservationRecord> {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let spec = SaturationSpec::censored(0.0, 15.0).unwrap();
        let theta = DVector::from_column_slice(&[1.0, -0.5]);
        (0..n)
            .map(|k| {
                let phi = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                ObservationRecord {
                    k,
                    phi: phi.clone(),
                    spec,
                    y: crate::link::saturate(phi.dot(&theta) + e, &spec),
                }
            })
            .collect()
    }

    #[test]
    fn dataset_roundtrip_is_lossless() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let records = sample_records(40);
        write_dataset(&records, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(records.len(), back.len());
        for (a, b) in records.iter().zip(back.iter()) {
            assert_eq!(a.k, b.k);
            assert_eq!(a.phi, b.phi);
            assert_eq!(a.spec, b.spec);
            assert_eq!(a.y.to_bits(), b.y.to_bits());
        }
    }

    #[test]
    fn empty_dataset_loads_empty() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        write_dataset(&[], &path).unwrap();
        // zero-dimension header still parses to no records
        let loaded = load_dataset(&path);
        // an empty dataset has no phi columns; accept either empty result or
        // schema error, but never a panic
        if let Ok(v) = loaded {
            assert!(v.is_empty());
        }
    }

    #[test]
    fn dataset_with_infinite_thresholds_roundtrips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("lin.csv");
        let records: Vec<ObservationRecord> = (0..5)
            .map(|k| ObservationRecord {
                k,
                phi: DVector::from_vec(vec![k as f64]),
                spec: SaturationSpec::linear(),
                y: 1.5 * k as f64,
            })
            .collect();
        write_dataset(&records, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("-inf") && text.contains("inf"));
        let back = load_dataset(&path).unwrap();
        assert_eq!(back[3].spec, SaturationSpec::linear());
    }

    #[test]
    fn dataset_error_codes() {
        let dir = tempdir().unwrap();
        let write = |name: &str, text: &str| -> PathBuf {
            let p = dir.path().join(name);
            fs::write(&p, text).unwrap();
            p
        };
        // ordering violation cites the line
        let p = write("bad_order.csv", "k,phi_0,l,u,L,U,y\n0,1.0,2.0,1.0,0.0,3.0,1.5\n");
        let err = load_dataset(&p).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("ordering_violation"));
        assert!(err.to_string().contains("line 2"));
        // non-numeric cell
        let p = write("bad_cell.csv", "k,phi_0,l,u,L,U,y\n0,oops,0,15,0,15,7\n");
        let err = load_dataset(&p).unwrap_err();
        assert!(err.to_string().contains("non_numeric_cell"));
        // non-contiguous index
        let p = write("bad_idx.csv", "k,phi_0,l,u,L,U,y\n1,1.0,0,15,0,15,7\n");
        let err = load_dataset(&p).unwrap_err();
        assert!(err.to_string().contains("non_contiguous_index"));
        // schema mismatch
        let p = write("bad_head.csv", "step,phi_0,l,u,L,U,y\n");
        let err = load_dataset(&p).unwrap_err();
        assert!(err.to_string().contains("schema_mismatch"));
        // y outside clamp range
        let p = write("bad_y.csv", "k,phi_0,l,u,L,U,y\n0,1.0,0,15,0,15,-2\n");
        let err = load_dataset(&p).unwrap_err();
        assert!(err.to_string().contains("out_of_range"));
    }

    #[test]
    fn trace_roundtrip_preserves_bits() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let records = sample_records(30);
        let domain = DomainSet::symmetric_box(2, 2.0).unwrap();
        let noise = NoiseModel::gaussian(1.0).unwrap();
        let cfg = EstimatorConfig::new(domain, noise);
        let theta = DVector::from_column_slice(&[1.0, -0.5]);
        let trace = run_to_trace(&cfg, &records, Some(&theta), Some(3)).unwrap();
        write_trace(&trace, &path, false).unwrap();
        let back = load_trace(&path).unwrap();
        assert_eq!(trace.steps.len(), back.steps.len());
        for (a, b) in trace.steps.iter().zip(back.steps.iter()) {
            assert_eq!(a.theta_hat, b.theta_hat);
            assert_eq!(a.gains, b.gains);
            assert_eq!(a.lam_max_info.to_bits(), b.lam_max_info.to_bits());
            assert_eq!(a.err_hat, b.err_hat);
        }
        assert_eq!(
            serde_json::to_string(&trace.meta).unwrap(),
            serde_json::to_string(&back.meta).unwrap()
        );
        // exact mode adds hex columns and still loads
        let path2 = dir.path().join("trace_exact.csv");
        write_trace(&trace, &path2, true).unwrap();
        let text = fs::read_to_string(&path2).unwrap();
        assert!(text.lines().next().unwrap().contains("yhat_hex"));
        let back2 = load_trace(&path2).unwrap();
        assert_eq!(back2.steps.len(), trace.steps.len());
    }

    #[test]
    fn validation_passes_on_generated_data_and_names_witnesses() {
        let records = sample_records(60);
        let domain = DomainSet::symmetric_box(2, 2.0).unwrap();
        let noise = NoiseModel::gaussian(1.0).unwrap();
        let cfg = EstimatorConfig::new(domain, noise);
        let theta = DVector::from_column_slice(&[1.0, -0.5]);
        let report = validate_dataset(&records, &cfg, Some(&theta), Some(3)).unwrap();
        assert!(report.pass);
        assert!(report.regressor_bounds.witnesses["max_phi_norm"] > 0.0);
        assert_eq!(report.threshold_order.witnesses["c_bound"], 0.0);
        assert!(report.link_positivity.witnesses["m_radius"] > 0.0);
        assert_eq!(
            report.regressor_bounds.witnesses["theta_in_domain_interior"],
            1.0
        );
    }

    #[test]
    fn validation_fails_for_boundary_theta() {
        let records = sample_records(10);
        let domain = DomainSet::symmetric_box(2, 2.0).unwrap();
        let noise = NoiseModel::gaussian(1.0).unwrap();
        let cfg = EstimatorConfig::new(domain, noise);
        let theta = DVector::from_column_slice(&[2.0, 0.0]);
        let report = validate_dataset(&records, &cfg, Some(&theta), None).unwrap();
        assert!(!report.pass);
        assert!(!report.regressor_bounds.pass);
    }

    #[test]
    fn config_roundtrip_and_builders() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("config.json");
        let text = r#"{
            "schema_version": 1,
            "seed": 7,
            "domain": {"kind": "box", "lower": [-2, -2], "upper": [2, 2]},
            "noise": {"kind": "gaussian", "variance": 1.0},
            "estimator": {"mu": {"policy": "constant", "value": 0.5}, "gain_scale": 10.0},
            "scenario": {
                "m": 2,
                "a_diag": [0.3, 0.5],
                "input_scale": 1.0,
                "theta_true": [1.0, -0.5],
                "spec": {"l": 0.0, "u": 15.0, "L": 0.0, "U": 15.0},
                "n": 100
            },
            "ci": {"alpha": 0.05}
        }"#;
        fs::write(&path, text).unwrap();
        let cfg = load_config(&path).unwrap();
        let est = cfg.build_estimator().unwrap();
        assert_eq!(est.mu, MuPolicy::Constant { value: 0.5 });
        assert_eq!(est.p0[(0, 0)], 10.0);
        let sc = cfg.build_scenario(cfg.seed, None).unwrap();
        assert_eq!(sc.n, 100);
        assert_eq!(sc.seed, 7);
        // wrong schema version rejected
        let bad = text.replace("\"schema_version\": 1", "\"schema_version\": 99");
        fs::write(&path, bad).unwrap();
        assert!(load_config(&path).is_err());
    }
}
