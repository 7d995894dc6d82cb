//! Scenario generation and end-to-end experiment runs.
//!
//! Regressors follow linear state dynamics `phi_{k+1} = A phi_k + u_k` with a
//! diminishing-excitation input law: the first input component keeps unit
//! scale while the others shrink like `c / k^{1/4}`, so the usual persistent
//! excitation condition fails by design. Observations pass the latent output
//! through the per-step saturation map.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, ObservationRecord};
use crate::link::{saturate, NoiseModel, SaturationSpec};
use crate::trace::{run_to_trace, RunTrace};

/// Saturation schedule: one spec for the whole run or one per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpecSchedule {
    Constant(SaturationSpec),
    PerStep(Vec<SaturationSpec>),
}

impl SpecSchedule {
    pub fn at(&self, k: usize) -> Result<SaturationSpec> {
        match self {
            SpecSchedule::Constant(s) => Ok(*s),
            SpecSchedule::PerStep(v) => v.get(k).copied().ok_or_else(|| {
                Error::config(format!("spec schedule has no entry for step {k}"))
            }),
        }
    }
}

/// Complete description of a synthetic data scenario.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub m: usize,
    /// State matrix of the regressor dynamics; spectral radius must be < 1.
    pub a: DMatrix<f64>,
    /// Scale `c` of the diminishing input components (components 2..m draw
    /// from `c / k^{1/4} * N(0,1)`; the schedule starts at k = 1 and uses `c`
    /// itself at k = 0).
    pub input_scale: f64,
    pub theta_true: DVector<f64>,
    pub specs: SpecSchedule,
    pub noise: NoiseModel,
    pub n: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::config("scenario: dimension must be >= 1"));
        }
        if self.a.nrows() != self.m || self.a.ncols() != self.m {
            return Err(Error::config("scenario: state matrix dimension mismatch"));
        }
        if self.theta_true.len() != self.m {
            return Err(Error::config("scenario: theta_true dimension mismatch"));
        }
        if self.theta_true.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("scenario: theta_true must be finite"));
        }
        if !(self.input_scale >= 0.0) {
            return Err(Error::config("scenario: input scale must be nonnegative"));
        }
        let radius = self
            .a
            .complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0f64, f64::max);
        if !(radius < 1.0) {
            return Err(Error::config(format!(
                "scenario: spectral radius of the state matrix must be < 1 \
                 for bounded regressors, got {radius}"
            )));
        }
        if let SpecSchedule::PerStep(v) = &self.specs {
            if v.len() < self.n {
                return Err(Error::config(format!(
                    "scenario: spec schedule has {} entries for {} steps",
                    v.len(),
                    self.n
                )));
            }
        }
        Ok(())
    }

    /// The crate's reference experiment: dimension 10, diagonal state matrix,
    /// diminishing inputs, censoring band [0, 15], unit gaussian noise.
    pub fn diminishing_excitation_demo(n: usize, seed: u64) -> Self {
        let a_diag = [0.3, 0.5, 0.1, 0.01, 0.9, 0.95, 0.5, 0.4, 0.6, 0.1];
        let theta = [-1.2, 0.5, 1.0, -0.5, 1.5, -1.0, 1.8, 0.8, -1.8, 0.4];
        ScenarioConfig {
            m: 10,
            a: DMatrix::from_diagonal(&DVector::from_column_slice(&a_diag)),
            input_scale: 5.0,
            theta_true: DVector::from_column_slice(&theta),
            specs: SpecSchedule::Constant(
                SaturationSpec::censored(0.0, 15.0).expect("valid band"),
            ),
            noise: NoiseModel::gaussian(1.0).expect("valid variance"),
            n,
            seed,
        }
    }
}

/// Generate the regressor sequence `phi_0 .. phi_{n-1}` (`phi_0 = 0`).
pub fn gen_regressors(config: &ScenarioConfig) -> Result<Vec<DVector<f64>>> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut out = Vec::with_capacity(config.n);
    let mut phi = DVector::zeros(config.m);
    for k in 0..config.n {
        out.push(phi.clone());
        let input = DVector::from_fn(config.m, |i, _| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            if i == 0 {
                z
            } else if k == 0 {
                config.input_scale * z
            } else {
                config.input_scale / (k as f64).powf(0.25) * z
            }
        });
        phi = &config.a * &phi + input;
    }
    Ok(out)
}

/// Saturated observations `y_{k+1} = S_k(phi_k' theta + e_{k+1})` for a fixed
/// regressor sequence.
pub fn gen_observations(
    regressors: &[DVector<f64>],
    theta: &DVector<f64>,
    specs: &SpecSchedule,
    noise: &NoiseModel,
    seed: u64,
) -> Result<Vec<ObservationRecord>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut out = Vec::with_capacity(regressors.len());
    for (k, phi) in regressors.iter().enumerate() {
        let spec = specs.at(k)?;
        let e = noise.sample(&mut rng);
        let y = saturate(phi.dot(theta) + e, &spec);
        out.push(ObservationRecord {
            k,
            phi: phi.clone(),
            spec,
            y,
        });
    }
    Ok(out)
}

/// Full pipeline: generate a scenario's data and run the estimator over it,
/// recording a simulation-mode trace (error and regret columns populated).
pub fn run_experiment(
    scenario: &ScenarioConfig,
    estimator: &EstimatorConfig,
) -> Result<RunTrace> {
    scenario.validate()?;
    if estimator.dim() != scenario.m {
        return Err(Error::config(
            "run_experiment: estimator and scenario dimensions differ",
        ));
    }
    if !estimator.domain.contains_interior(&scenario.theta_true, 0.0) {
        return Err(Error::config(
            "run_experiment: theta_true must lie in the interior of the domain",
        ));
    }
    let regressors = gen_regressors(scenario)?;
    let records = gen_observations(
        &regressors,
        &scenario.theta_true,
        &scenario.specs,
        &scenario.noise,
        scenario.seed,
    )?;
    run_to_trace(
        estimator,
        &records,
        Some(&scenario.theta_true),
        Some(scenario.seed),
    )
}
