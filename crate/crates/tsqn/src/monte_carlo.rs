//! Monte-Carlo confidence intervals for the estimation error.
//!
//! The design fixes a deterministic regressor and saturation sequence, draws
//! `(theta, noise path)` scenarios from the uniform prior on the domain times
//! the i.i.d. noise law, replays the estimator on each, and forms empirical
//! quantile intervals of the per-component errors with a Hoeffding level
//! correction, valid at finite replication counts.

use nalgebra::DVector;

use rand::SeedableRng;
#[cfg(test)]
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::diagnostics::{CiMethod, CiTarget, ConfidenceReport};
use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, EstimatorState, ObservationRecord};
use crate::link::{saturate, SaturationSpec};

/// Monte-Carlo experiment design. The regressors and saturation specs are
/// fixed deterministic sequences shared by all replications; randomness is
/// confined to the parameter draw and the noise path, which is what the
/// finite-sample guarantee requires.
#[derive(Debug, Clone)]
pub struct McDesign {
    /// Data length per replication.
    pub n: usize,
    /// Replication count `K`.
    pub replications: usize,
    pub regressors: Vec<DVector<f64>>,
    pub specs: Vec<SaturationSpec>,
    pub seed: u64,
    /// Estimator settings; the prior is uniform on `estimator.domain` and the
    /// noise law is `estimator.noise`.
    pub estimator: EstimatorConfig,
}

impl McDesign {
    pub fn validate(&self) -> Result<()> {
        if self.replications < 2 {
            return Err(Error::config("mc design: need at least 2 replications"));
        }
        if self.regressors.len() != self.n || self.specs.len() != self.n {
            return Err(Error::config(format!(
                "mc design: {} regressors and {} specs for {} steps",
                self.regressors.len(),
                self.specs.len(),
                self.n
            )));
        }
        let m = self.estimator.dim();
        if self.regressors.iter().any(|p| p.len() != m) {
            return Err(Error::config("mc design: regressor dimension mismatch"));
        }
        self.estimator.validate()
    }

    fn run_one(&self, index: usize) -> Result<Vec<f64>> {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        // counter-derived substream: replications are order-independent
        rng.set_stream(index as u64 + 1);
        let theta = self.estimator.domain.sample_uniform(&mut rng);
        let mut state = EstimatorState::new(self.estimator.clone())?;
        for k in 0..self.n {
            let e = self.estimator.noise.sample(&mut rng);
            let y = saturate(self.regressors[k].dot(&theta) + e, &self.specs[k]);
            let record = ObservationRecord {
                k,
                phi: self.regressors[k].clone(),
                spec: self.specs[k],
                y,
            };
            state.update(&record).map_err(|err| match err {
                Error::Config(msg) => Error::Config(format!("replication {index}: {msg}")),
                Error::Data { kind, location, msg } => Error::Data {
                    kind,
                    location: format!("replication {index}, {location}"),
                    msg,
                },
                Error::Numeric { msg, achieved } => Error::Numeric {
                    msg: format!("replication {index}: {msg}"),
                    achieved,
                },
                Error::Assumption(msg) => {
                    Error::Assumption(format!("replication {index}: {msg}"))
                }
                other => other,
            })?;
        }
        Ok((theta - state.theta_hat()).as_slice().to_vec())
    }
}

/// Run all replications and collect the per-component estimation errors
/// `theta - theta_hat_n` as a `K x m` matrix (row per replication).
/// Deterministic in the design seed and independent of execution order.
pub fn replicate_errors(design: &McDesign) -> Result<Vec<Vec<f64>>> {
    design.validate()?;
    (0..design.replications)
        .into_par_iter()
        .map(|i| design.run_one(i))
        .collect()
}

/// Left-continuous empirical quantile: the smallest sample value whose
/// empirical CDF reaches `p`. Saturates to the extremes for `p <= 0` or
/// `p >= 1` (the convention the corrected levels rely on).
pub fn empirical_quantile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::config("empirical_quantile: empty sample"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN samples"));
    let k = samples.len();
    if p <= 0.0 {
        return Ok(sorted[0]);
    }
    if p >= 1.0 {
        return Ok(sorted[k - 1]);
    }
    let idx = (p * k as f64).ceil() as usize;
    Ok(sorted[idx.clamp(1, k) - 1])
}

/// Hoeffding level correction `sqrt((ln 2 - ln t) / (2K))`.
pub fn hoeffding_correction(replications: usize, t: f64) -> f64 {
    ((2.0f64.ln() - t.ln()) / (2.0 * replications as f64)).sqrt()
}

/// Per-component interval `[z_K(alpha/2 - upsilon), z_K(1 - alpha/2 + upsilon)]`
/// for the estimation error, with coverage at least `1 - alpha - t`.
pub fn mc_interval(errors: &[Vec<f64>], alpha: f64, t: f64) -> Result<ConfidenceReport> {
    if !(alpha > 0.0 && t > 0.0 && alpha + t < 1.0) {
        return Err(Error::config(format!(
            "mc_interval: need alpha > 0, t > 0, alpha + t < 1; got alpha={alpha}, t={t}"
        )));
    }
    let k = errors.len();
    if k < 2 {
        return Err(Error::config("mc_interval: need at least 2 replications"));
    }
    let m = errors[0].len();
    if errors.iter().any(|row| row.len() != m) {
        return Err(Error::config("mc_interval: ragged error matrix"));
    }
    let upsilon = hoeffding_correction(k, t);
    let lo_level = alpha / 2.0 - upsilon;
    let hi_level = 1.0 - alpha / 2.0 + upsilon;
    let mut report = ConfidenceReport::base(
        CiMethod::MonteCarlo,
        CiTarget::EstimationError,
        1.0 - alpha - t,
        alpha,
    );
    report.t = Some(t);
    report.replications = Some(k);
    report.upsilon = Some(upsilon);
    if lo_level <= 0.0 || hi_level >= 1.0 {
        report.warnings.push(format!(
            "corrected quantile levels saturate ([{lo_level:.4}, {hi_level:.4}]): \
             the interval spans the full sample range; increase the replication \
             count for a tighter interval"
        ));
    }
    for j in 0..m {
        let column: Vec<f64> = errors.iter().map(|row| row[j]).collect();
        let lo = empirical_quantile(&column, lo_level)?;
        let hi = empirical_quantile(&column, hi_level)?;
        report.intervals.push((lo, hi));
    }
    report
        .constants
        .insert("lo_level".to_string(), lo_level);
    report
        .constants
        .insert("hi_level".to_string(), hi_level);
    Ok(report)
}
