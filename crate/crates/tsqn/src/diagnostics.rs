//! Run diagnostics: regret accounting, excitation ratios, plug-in
//! covariance, asymptotic confidence intervals, and the finite-sample
//! Lyapunov-function error bound.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::ObservationRecord;
use crate::geometry::max_quadratic_over;
use crate::link::{fourth_central, g_bounds, g_deriv, g_mean, sigma_var, NoiseModel};
use crate::special::chi2_quantile;
use crate::trace::{rows_mat, RunTrace};

/// Which estimator layer a diagnostic refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Preliminary,
    Accelerated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    Asymptotic,
    Lyapunov,
    MonteCarlo,
}

/// What the reported intervals contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiTarget {
    /// Intervals for the parameter components.
    Parameter,
    /// Intervals for the estimation-error components `theta - theta_hat`.
    EstimationError,
}

/// Moment plug-in for quantities that depend on the unknown parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PluginChoice {
    /// Simulation truth (requires a simulation-mode trace).
    TrueTheta,
    /// The final accelerated estimate.
    Estimate,
    /// Worst case over the domain (grid over the reachable range).
    WorstCase,
}

impl PluginChoice {
    pub fn name(&self) -> &'static str {
        match self {
            PluginChoice::TrueTheta => "true_theta",
            PluginChoice::Estimate => "estimate",
            PluginChoice::WorstCase => "worst_case",
        }
    }
}

/// Confidence-interval report, shared by the three interval builders.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub method: CiMethod,
    pub target: CiTarget,
    /// Stated coverage level of the construction.
    pub confidence: f64,
    pub intervals: Vec<(f64, f64)>,
    pub center: Option<Vec<f64>>,
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replications: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plugin: Option<String>,
    /// Per-component squared-error bounds (finite-sample method only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub squared_error_bounds: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regret_bound: Option<f64>,
    /// All intermediate constants, keyed by name.
    pub constants: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ConfidenceReport {
    pub(crate) fn base(method: CiMethod, target: CiTarget, confidence: f64, alpha: f64) -> Self {
        ConfidenceReport {
            method,
            target,
            confidence,
            intervals: Vec::new(),
            center: None,
            alpha,
            t: None,
            tau: None,
            replications: None,
            upsilon: None,
            plugin: None,
            squared_error_bounds: None,
            regret_bound: None,
            constants: BTreeMap::new(),
            warnings: Vec::new(),
            config_hash: None,
            seed: None,
        }
    }

    pub fn with_provenance(mut self, config_hash: &str, seed: Option<u64>) -> Self {
        self.config_hash = Some(config_hash.to_string());
        self.seed = seed;
        self
    }
}

// ---------------------------------------------------------------------------
// Regret
// ---------------------------------------------------------------------------

fn require_truth(trace: &RunTrace, what: &str) -> Result<DVector<f64>> {
    trace.theta_true().ok_or_else(|| {
        Error::config(format!(
            "{what} requires the simulation truth; this trace has none"
        ))
    })
}

/// Per-step regret `(G(phi' theta) - yhat)^2` of one layer.
pub fn regret(trace: &RunTrace, k: usize, layer: Layer) -> Result<f64> {
    require_truth(trace, "regret")?;
    let s = trace
        .steps
        .get(k)
        .ok_or_else(|| Error::config(format!("regret: step {k} out of range")))?;
    let v = match layer {
        Layer::Preliminary => s.regret_bar,
        Layer::Accelerated => s.regret_hat,
    };
    v.ok_or_else(|| Error::config("regret: trace lacks regret columns"))
}

/// Accumulated regret over steps `0..=n`.
pub fn cumulative_regret(trace: &RunTrace, n: usize, layer: Layer) -> Result<f64> {
    let mut total = 0.0;
    for k in 0..=n.min(trace.len().saturating_sub(1)) {
        total += regret(trace, k, layer)?;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Excitation diagnostics
// ---------------------------------------------------------------------------

/// Convergence diagnostic `log(lam_max(n)) / lam_min(n)` of the information
/// accumulator: the squared estimation error is bounded by a multiple of this
/// ratio, so a decreasing trend certifies convergent excitation.
pub fn excitation_ratio(trace: &RunTrace, n: usize) -> Result<f64> {
    let s = trace
        .steps
        .get(n)
        .ok_or_else(|| Error::config(format!("excitation_ratio: step {n} out of range")))?;
    Ok(s.lam_max_info.ln() / s.lam_min_info)
}

/// Iterated-logarithm variant `log(log(lam_max(n))) / lam_min(n)`, the sharper
/// rate available once the minimum eigenvalue grows linearly.
pub fn excitation_ratio_iterated(trace: &RunTrace, n: usize) -> Result<f64> {
    let s = trace
        .steps
        .get(n)
        .ok_or_else(|| Error::config(format!("excitation_ratio: step {n} out of range")))?;
    if s.lam_max_info <= std::f64::consts::E {
        return Err(Error::numeric(
            "excitation_ratio_iterated: lam_max must exceed e",
        ));
    }
    Ok(s.lam_max_info.ln().ln() / s.lam_min_info)
}

// ---------------------------------------------------------------------------
// Plug-in covariance and asymptotic intervals
// ---------------------------------------------------------------------------

/// Accelerated estimate in force after step `n` completes.
pub fn theta_hat_after(trace: &RunTrace, n: usize) -> Result<DVector<f64>> {
    if n + 1 < trace.len() {
        Ok(DVector::from_column_slice(&trace.steps[n + 1].theta_hat))
    } else if n + 1 == trace.len() {
        Ok(trace.final_theta_hat())
    } else {
        Err(Error::config(format!(
            "step {n} out of range for a trace of length {}",
            trace.len()
        )))
    }
}

/// Plug-in estimate of the error covariance: the inverse of
/// `sum_k (G'(phi_k' theta))^2 / sigma(phi_k' theta) * phi_k phi_k'`.
///
/// Errors with a rank-deficiency report naming the null directions when the
/// accumulated information is singular.
pub fn plugin_covariance(
    trace: &RunTrace,
    n: usize,
    theta_plugin: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if trace.is_empty() || n >= trace.len() {
        return Err(Error::config("plugin_covariance: step out of range"));
    }
    let m = trace.meta.m;
    let noise = &trace.meta.noise;
    let mut acc = DMatrix::zeros(m, m);
    for s in &trace.steps[..=n] {
        let phi = DVector::from_column_slice(&s.phi);
        let x = phi.dot(theta_plugin);
        let d = g_deriv(x, &s.spec, noise)?;
        let v = sigma_var(x, &s.spec, noise)?;
        if v > 1e-300 {
            acc.ger(d * d / v, &phi, &phi, 1.0);
        }
    }
    let eig = acc.clone().symmetric_eigen();
    let lam_min = eig.eigenvalues.min();
    if !(lam_min > 1e-10) {
        let mut null_dirs = Vec::new();
        for (i, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam <= 1e-10 {
                let col: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
                null_dirs.push(format!("lambda={lam:.3e} direction={col:?}"));
            }
        }
        return Err(Error::numeric_with(
            format!(
                "plugin_covariance: information sum is rank deficient; null directions: {}",
                null_dirs.join("; ")
            ),
            lam_min,
        ));
    }
    // symmetric inverse through the eigen decomposition
    let mut inv = DMatrix::zeros(m, m);
    for i in 0..m {
        let v = eig.eigenvectors.column(i).clone_owned();
        inv.ger(1.0 / eig.eigenvalues[i], &v, &v, 1.0);
    }
    Ok(inv)
}

/// Componentwise asymptotic confidence intervals at level `1 - alpha`:
/// `theta_hat_j +- sqrt(q_jj * chi2_quantile(1 - alpha, m))`.
pub fn asymptotic_ci(trace: &RunTrace, n: usize, alpha: f64) -> Result<ConfidenceReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!(
            "asymptotic_ci: alpha {alpha} outside (0, 1)"
        )));
    }
    let center = theta_hat_after(trace, n)?;
    let q = plugin_covariance(trace, n, &center)?;
    let m = trace.meta.m;
    let quant = chi2_quantile(1.0 - alpha, m as u32)?;
    let mut report =
        ConfidenceReport::base(CiMethod::Asymptotic, CiTarget::Parameter, 1.0 - alpha, alpha);
    report.center = Some(center.as_slice().to_vec());
    report.intervals = (0..m)
        .map(|j| {
            let half = (q[(j, j)] * quant).sqrt();
            (center[j] - half, center[j] + half)
        })
        .collect();
    report.constants.insert("chi2_quantile".to_string(), quant);
    for j in 0..m {
        report.constants.insert(format!("q_diag_{j}"), q[(j, j)]);
    }
    Ok(report)
}

/// Innovation `w = y - G(phi' theta)` for a candidate parameter.
pub fn innovation(
    record: &ObservationRecord,
    theta: &DVector<f64>,
    noise: &NoiseModel,
) -> Result<f64> {
    Ok(record.y - g_mean(record.phi.dot(theta), &record.spec, noise)?)
}

// ---------------------------------------------------------------------------
// Finite-sample Lyapunov-function bound
// ---------------------------------------------------------------------------

const WORST_CASE_GRID: usize = 513;

struct StepMoments {
    /// Conditional second moment of the innovation.
    s2: f64,
    /// Conditional variance of the squared innovation.
    s4c: f64,
}

fn plugin_moments(
    trace: &RunTrace,
    n: usize,
    plugin: PluginChoice,
    theta_p: Option<&DVector<f64>>,
) -> Result<Vec<StepMoments>> {
    let noise = &trace.meta.noise;
    let mut out = Vec::with_capacity(n + 1);
    for s in &trace.steps[..=n] {
        match plugin {
            PluginChoice::TrueTheta | PluginChoice::Estimate => {
                let theta = theta_p.expect("plugin vector supplied");
                let phi = DVector::from_column_slice(&s.phi);
                let x = phi.dot(theta);
                let s2 = sigma_var(x, &s.spec, noise)?;
                let m4 = fourth_central(x, &s.spec, noise)?;
                out.push(StepMoments {
                    s2,
                    s4c: (m4 - s2 * s2).max(0.0),
                });
            }
            PluginChoice::WorstCase => {
                // grid over the reachable range [-M_k, M_k]
                let radius = s.m_radius;
                let mut s2 = 0.0f64;
                let mut s4c = 0.0f64;
                let pts = if radius == 0.0 { 1 } else { WORST_CASE_GRID };
                for i in 0..pts {
                    let x = if pts == 1 {
                        0.0
                    } else {
                        -radius + 2.0 * radius * i as f64 / (pts - 1) as f64
                    };
                    let v = sigma_var(x, &s.spec, noise)?;
                    let m4 = fourth_central(x, &s.spec, noise)?;
                    s2 = s2.max(v);
                    s4c = s4c.max((m4 - v * v).max(0.0));
                }
                out.push(StepMoments { s2, s4c });
            }
        }
    }
    Ok(out)
}

/// Finite-sample componentwise squared-error bounds and regret bound, valid
/// with probability at least `1 - 2 alpha`, computed from the recorded run.
///
/// Every intermediate constant lands in the report's `constants` map. The
/// conditional innovation moments depend on the unknown parameter; `plugin`
/// selects the substitute. Requires initial gains small enough that both
/// initial inverse log-determinants exceed 1.
pub fn lyapunov_bound(
    trace: &RunTrace,
    n: usize,
    alpha: f64,
    tau: f64,
    plugin: PluginChoice,
) -> Result<ConfidenceReport> {
    if trace.is_empty() || n >= trace.len() {
        return Err(Error::config("lyapunov_bound: step out of range"));
    }
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::config(format!(
            "lyapunov_bound: alpha {alpha} outside (0, 1/2)"
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::config("lyapunov_bound: tau must be positive"));
    }
    if !(trace.meta.logdet_p0_inv > 1.0 && trace.meta.logdet_pbar0_inv > 1.0) {
        return Err(Error::config(format!(
            "lyapunov_bound: requires log|P0^-1| > 1 and log|Pbar0^-1| > 1 \
             (got {:.4} and {:.4}); start from smaller initial gains",
            trace.meta.logdet_p0_inv, trace.meta.logdet_pbar0_inv
        )));
    }
    let meta = &trace.meta;
    let theta_vec;
    let theta_p: Option<&DVector<f64>> = match plugin {
        PluginChoice::TrueTheta => {
            theta_vec = require_truth(trace, "lyapunov_bound with plugin=true_theta")?;
            Some(&theta_vec)
        }
        PluginChoice::Estimate => {
            theta_vec = theta_hat_after(trace, n)?;
            Some(&theta_vec)
        }
        PluginChoice::WorstCase => None,
    };
    let moments = plugin_moments(trace, n, plugin, theta_p)?;

    let steps = &trace.steps[..=n];
    let mut sigma_b = f64::NEG_INFINITY;
    let mut sigma_a = f64::NEG_INFINITY;
    let mut sigma_b_bar = f64::NEG_INFINITY;
    let mut sigma_a_bar = f64::NEG_INFINITY;
    let mut phi_cap = f64::NEG_INFINITY;
    let mut phi_bar_cap = f64::NEG_INFINITY;
    let mut gamma = f64::NEG_INFINITY;
    let mut psi = f64::NEG_INFINITY;
    let mut delta0 = f64::NEG_INFINITY;
    let mut lambda_n = f64::INFINITY;

    // global Lipschitz constant of G' over the run's largest radius
    let max_radius = steps.iter().map(|s| s.m_radius).fold(0.0f64, f64::max);
    let rho = if max_radius > 0.0 {
        g_bounds(max_radius, &steps[0].spec, &meta.noise)?.rho
    } else {
        0.0
    };

    for (k, s) in steps.iter().enumerate() {
        let g = s.gains;
        let phi_norm2: f64 = s.phi.iter().map(|v| v * v).sum();
        let mom = &moments[k];
        sigma_b = sigma_b.max(mom.s2 / g.mu);
        sigma_a = sigma_a.max(mom.s2);
        sigma_b_bar = sigma_b_bar.max(mom.s4c / (g.mu * g.mu));
        sigma_a_bar = sigma_a_bar.max(mom.s4c);
        phi_cap = phi_cap.max(g.beta * g.beta * phi_norm2 / g.mu);
        phi_bar_cap = phi_bar_cap.max(g.beta_bar * g.beta_bar * phi_norm2);
        gamma = gamma.max(s.g_hi * s.g_hi / (g.mu * g.a_bar * g.a_bar * g.beta_bar * g.beta_bar));
        psi = psi.max(
            3.0 * rho * rho * phi_norm2 / (2.0 * g.mu * (g.a + g.a_bar) * g.beta_bar * g.beta_bar),
        );
        delta0 = delta0.max(g.mu + g.beta * g.beta * s.phi_p_phi);
        // pre-update inverse-gain spectra at k
        let (lam_p, lam_pbar) = if k == 0 {
            (meta.lam_min_p0_inv, meta.lam_min_pbar0_inv)
        } else {
            (steps[k - 1].lam_min_p_inv, steps[k - 1].lam_min_pbar_inv)
        };
        let c1 = lam_pbar / s.logdet_pbar_inv.powf(2.0 + tau);
        let c2 = lam_p / (s.logdet_p_inv + s.logdet_pbar_inv).powf(2.0 + tau);
        lambda_n = lambda_n.min(c1.min(c2));
    }

    // initial Lyapunov values and the step-zero correction
    let p0_inv = rows_mat(&meta.p0)
        .cholesky()
        .ok_or_else(|| Error::config("lyapunov_bound: initial gain not positive definite"))?
        .inverse();
    let pbar0_inv = rows_mat(&meta.p0_bar)
        .cholesky()
        .ok_or_else(|| Error::config("lyapunov_bound: initial gain not positive definite"))?
        .inverse();
    let theta0 = DVector::from_column_slice(&meta.theta0);
    let theta0_bar = DVector::from_column_slice(&meta.theta0_bar);
    let phi0 = DVector::from_column_slice(&steps[0].phi);
    let (v0, v0_bar, c0) = match plugin {
        PluginChoice::WorstCase => {
            let v0 = max_quadratic_over(&p0_inv, &theta0, &meta.domain)?;
            let v0_bar = max_quadratic_over(&pbar0_inv, &theta0_bar, &meta.domain)?;
            let (lo, hi) = meta.domain.inner_range(&phi0);
            let x0_bar = phi0.dot(&theta0_bar);
            let worst_gap = (hi - x0_bar).abs().max((lo - x0_bar).abs());
            let c0 =
                1.5 * steps[0].g_hi * steps[0].g_hi * worst_gap * worst_gap / steps[0].gains.mu;
            (v0, v0_bar, c0)
        }
        _ => {
            let theta = theta_p.expect("plugin vector supplied");
            let d0 = theta - &theta0;
            let d0_bar = theta - &theta0_bar;
            let v0 = (&p0_inv * &d0).dot(&d0);
            let v0_bar = (&pbar0_inv * &d0_bar).dot(&d0_bar);
            let gap = phi0.dot(&d0_bar);
            let c0 = 1.5 * steps[0].g_hi * steps[0].g_hi * gap * gap / steps[0].gains.mu;
            (v0, v0_bar, c0)
        }
    };

    let gamma_big = v0
        + sigma_b * meta.logdet_p0_inv
        + phi_cap * meta.tr_p0 * sigma_b_bar / (2.0 * sigma_b)
        + 18.0 * sigma_b * (1.0 - alpha) / alpha;
    let gamma_big_bar = v0_bar
        + sigma_a * meta.logdet_pbar0_inv
        + phi_bar_cap * meta.tr_p0_bar * sigma_a_bar / (2.0 * sigma_a)
        + 10.0 * sigma_a * (1.0 - alpha) / alpha;
    let c_big = 4.0 * psi * (sigma_a + gamma_big_bar + 1.0).powf(2.0 + tau)
        + 2.0
            * psi
            * (sigma_b + 6.0 * gamma * sigma_a + gamma_big + 6.0 * gamma * gamma_big_bar + 1.0)
                .powf(2.0 + tau);

    let last = &steps[n];
    let core = sigma_b * last.logdet_p_inv + c_big / lambda_n + gamma_big;
    let bounds: Vec<f64> = last.p_diag.iter().map(|&p| p * (core + c0)).collect();
    let regret_bound = 2.0 * delta0 * core;

    let mut report = ConfidenceReport::base(
        CiMethod::Lyapunov,
        CiTarget::EstimationError,
        1.0 - 2.0 * alpha,
        alpha,
    );
    report.tau = Some(tau);
    report.plugin = Some(plugin.name().to_string());
    report.intervals = bounds
        .iter()
        .map(|&b| {
            let half = b.max(0.0).sqrt();
            (-half, half)
        })
        .collect();
    report.squared_error_bounds = Some(bounds);
    report.regret_bound = Some(regret_bound);
    let c = &mut report.constants;
    c.insert("sigma_b".into(), sigma_b);
    c.insert("sigma_a".into(), sigma_a);
    c.insert("sigma_b_bar".into(), sigma_b_bar);
    c.insert("sigma_a_bar".into(), sigma_a_bar);
    c.insert("phi_cap".into(), phi_cap);
    c.insert("phi_bar_cap".into(), phi_bar_cap);
    c.insert("gamma".into(), gamma);
    c.insert("psi".into(), psi);
    c.insert("rho".into(), rho);
    c.insert("lambda_n".into(), lambda_n);
    c.insert("delta0".into(), delta0);
    c.insert("v0".into(), v0);
    c.insert("v0_bar".into(), v0_bar);
    c.insert("c0".into(), c0);
    c.insert("gamma_big".into(), gamma_big);
    c.insert("gamma_big_bar".into(), gamma_big_bar);
    c.insert("c_big".into(), c_big);
    c.insert("logdet_p_inv_final".into(), last.logdet_p_inv);
    c.insert("core".into(), core);
    Ok(report)
}
