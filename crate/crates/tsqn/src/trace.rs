//! Per-run trace: everything the diagnostics, confidence intervals, and
//! reports need, recorded step by step.
//!
//! The trace layer owns the expensive per-step introspection (eigenvalue
//! pairs of the information accumulator, spectra of the inverse gains) so the
//! bare estimator stays cheap for bulk Monte-Carlo replications.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::estimator::{EstimatorConfig, EstimatorState, MuPolicy, ObservationRecord, StepGains};
use crate::geometry::DomainSet;
use crate::link::{g_mean, NoiseModel, SaturationSpec};

/// One recorded step. Estimates are the values entering the step
/// (pre-update); matrix summaries are taken after the step's updates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub phi: Vec<f64>,
    pub spec: SaturationSpec,
    pub y: f64,
    /// Preliminary estimate entering the step.
    pub theta_bar: Vec<f64>,
    /// Accelerated estimate entering the step.
    pub theta_hat: Vec<f64>,
    pub gains: StepGains,
    pub g_lo: f64,
    pub g_hi: f64,
    pub m_radius: f64,
    pub phi_pbar_phi: f64,
    pub phi_p_phi: f64,
    /// Preliminary-layer prediction of y (pre-update estimate).
    pub yhat_bar: f64,
    /// Adaptive prediction of y (pre-update accelerated estimate).
    pub yhat: f64,
    /// Diagonal of the accelerated gain matrix after the update.
    pub p_diag: Vec<f64>,
    pub logdet_p_inv: f64,
    pub logdet_pbar_inv: f64,
    pub lam_min_p_inv: f64,
    pub lam_min_pbar_inv: f64,
    /// Extremal eigenvalues of the information accumulator after this step.
    pub lam_min_info: f64,
    pub lam_max_info: f64,
    /// Estimation error norms after the update (simulation mode only).
    pub err_bar: Option<f64>,
    pub err_hat: Option<f64>,
    /// Squared prediction gaps against the best predictor (simulation mode).
    pub regret_bar: Option<f64>,
    pub regret_hat: Option<f64>,
}

/// Run-level header: initial conditions and final state summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceMeta {
    pub schema_version: u32,
    pub m: usize,
    pub n: usize,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub lambda0: f64,
    pub m_inflation: f64,
    pub mu_policy: MuPolicy,
    pub domain: DomainSet,
    pub noise: NoiseModel,
    pub theta_true: Option<Vec<f64>>,
    pub theta0_bar: Vec<f64>,
    pub theta0: Vec<f64>,
    /// Initial gain matrices, dense row-major.
    pub p0_bar: Vec<Vec<f64>>,
    pub p0: Vec<Vec<f64>>,
    pub tr_p0: f64,
    pub tr_p0_bar: f64,
    pub logdet_p0_inv: f64,
    pub logdet_pbar0_inv: f64,
    pub lam_min_p0_inv: f64,
    pub lam_min_pbar0_inv: f64,
    pub final_theta_bar: Vec<f64>,
    pub final_theta_hat: Vec<f64>,
    pub final_p: Vec<Vec<f64>>,
    pub final_p_bar: Vec<Vec<f64>>,
}

/// Complete run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunTrace {
    pub meta: TraceMeta,
    pub steps: Vec<StepRecord>,
}

pub(crate) fn mat_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub(crate) fn rows_mat(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, c, |i, j| rows[i][j])
}

fn sym_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = m.clone().symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in eig.eigenvalues.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

impl RunTrace {
    /// Number of recorded steps.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn phi(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.steps[k].phi)
    }

    pub fn theta_true(&self) -> Option<DVector<f64>> {
        self.meta
            .theta_true
            .as_ref()
            .map(|v| DVector::from_column_slice(v))
    }

    pub fn final_theta_hat(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.meta.final_theta_hat)
    }

    pub fn final_theta_bar(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.meta.final_theta_bar)
    }
}

/// Drive the estimator over a record sequence, recording a full trace.
///
/// `theta_true` enables the error and regret columns (simulation mode).
pub fn run_to_trace(
    config: &EstimatorConfig,
    records: &[ObservationRecord],
    theta_true: Option<&DVector<f64>>,
    seed: Option<u64>,
) -> Result<RunTrace> {
    let mut state = EstimatorState::new(config.clone())?;
    let m = config.dim();
    let (lam_min_p0_inv, _) = sym_extremes(state.gain_inv());
    let (lam_min_pbar0_inv, _) = sym_extremes(state.gain_bar_inv());
    let logdet_p0_inv = state.logdet_gain_inv();
    let logdet_pbar0_inv = state.logdet_gain_bar_inv();
    let lambda0 = state.lambda0();

    let mut steps = Vec::with_capacity(records.len());
    for record in records {
        let theta_bar_pre = state.theta_bar().clone();
        let theta_hat_pre = state.theta_hat().clone();
        let report = state.update(record)?;
        let (lam_min_p_inv, _) = sym_extremes(state.gain_inv());
        let (lam_min_pbar_inv, _) = sym_extremes(state.gain_bar_inv());
        let (lam_min_info, lam_max_info) = sym_extremes(state.info_matrix());
        let (err_bar, err_hat, regret_bar, regret_hat) = match theta_true {
            Some(truth) => {
                let best = g_mean(record.phi.dot(truth), &record.spec, &config.noise)?;
                (
                    Some((state.theta_bar() - truth).norm()),
                    Some((state.theta_hat() - truth).norm()),
                    Some((best - report.prediction_prelim).powi(2)),
                    Some((best - report.prediction).powi(2)),
                )
            }
            None => (None, None, None, None),
        };
        steps.push(StepRecord {
            k: record.k,
            phi: record.phi.as_slice().to_vec(),
            spec: record.spec,
            y: record.y,
            theta_bar: theta_bar_pre.as_slice().to_vec(),
            theta_hat: theta_hat_pre.as_slice().to_vec(),
            gains: report.gains,
            g_lo: report.g_lo,
            g_hi: report.g_hi,
            m_radius: report.m_radius,
            phi_pbar_phi: report.phi_pbar_phi,
            phi_p_phi: report.phi_p_phi,
            yhat_bar: report.prediction_prelim,
            yhat: report.prediction,
            p_diag: state.gain().diagonal().as_slice().to_vec(),
            logdet_p_inv: state.logdet_gain_inv(),
            logdet_pbar_inv: state.logdet_gain_bar_inv(),
            lam_min_p_inv,
            lam_min_pbar_inv,
            lam_min_info,
            lam_max_info,
            err_bar,
            err_hat,
            regret_bar,
            regret_hat,
        });
    }

    let meta = TraceMeta {
        schema_version: 1,
        m,
        n: records.len(),
        seed,
        config_hash: config.content_hash(),
        lambda0,
        m_inflation: config.m_inflation,
        mu_policy: config.mu,
        domain: config.domain.clone(),
        noise: config.noise.clone(),
        theta_true: theta_true.map(|t| t.as_slice().to_vec()),
        theta0_bar: config.theta0_bar.as_slice().to_vec(),
        theta0: config.theta0.as_slice().to_vec(),
        p0_bar: mat_rows(&config.p0_bar),
        p0: mat_rows(&config.p0),
        tr_p0: config.p0.trace(),
        tr_p0_bar: config.p0_bar.trace(),
        logdet_p0_inv,
        logdet_pbar0_inv,
        lam_min_p0_inv,
        lam_min_pbar0_inv,
        final_theta_bar: state.theta_bar().as_slice().to_vec(),
        final_theta_hat: state.theta_hat().as_slice().to_vec(),
        final_p: mat_rows(state.gain()),
        final_p_bar: mat_rows(state.gain_bar()),
    };
    Ok(RunTrace { meta, steps })
}
