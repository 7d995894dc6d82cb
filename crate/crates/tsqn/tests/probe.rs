// scratch probe for calibrating the statistical acceptance experiments (deleted before ship)
use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use tsqn::diagnostics::{lyapunov_bound, PluginChoice};
use tsqn::estimator::{EstimatorConfig, MuPolicy, ObservationRecord};
use tsqn::geometry::DomainSet;
use tsqn::link::{saturate, NoiseModel, SaturationSpec};
use tsqn::monte_carlo::{mc_interval, replicate_errors, McDesign};
use tsqn::trace::run_to_trace;

fn scalar_cfg() -> EstimatorConfig {
    let domain = DomainSet::new_box(vec![-2.0], vec![2.0]).unwrap();
    let noise = NoiseModel::gaussian(1.0).unwrap();
    let mut cfg = EstimatorConfig::new(domain, noise).with_gain_scale(0.1);
    cfg.mu = MuPolicy::Adaptive {
        mu_min: 1e-6,
        mu_max: 1e6,
    };
    cfg
}

#[test]
fn probe_bound_frequency() {
    let spec = SaturationSpec::censored(0.0, 4.0).unwrap();
    let theta = DVector::from_vec(vec![1.0]);
    let n = 11;
    let holds: usize = (0..200u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha12Rng::seed_from_u64(rep);
            let records: Vec<ObservationRecord> = (0..n)
                .map(|k| {
                    let phi = DVector::from_vec(vec![1.0 + 0.5 * (k as f64 * 0.7).sin()]);
                    let e: f64 = rng.sample(rand_distr::StandardNormal);
                    let y = saturate(phi[0] * theta[0] + e, &spec);
                    ObservationRecord { k, phi, spec, y }
                })
                .collect();
            let trace = run_to_trace(&scalar_cfg(), &records, Some(&theta), None).unwrap();
            let r = lyapunov_bound(&trace, n - 1, 0.05, 0.1, PluginChoice::TrueTheta).unwrap();
            let bound = r.squared_error_bounds.unwrap()[0];
            let err2 = trace.steps.last().unwrap().err_hat.unwrap().powi(2);
            usize::from(err2 <= bound)
        })
        .sum();
    println!("bound holds on {holds}/200 replications");
}

#[test]
fn probe_mc_coverage() {
    // fixed deterministic regressors; K build replications; fresh draws checked
    let m = 3;
    let n = 400;
    let mut rng = ChaCha12Rng::seed_from_u64(77);
    let regressors: Vec<DVector<f64>> = (0..n)
        .map(|_| DVector::from_fn(m, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal)))
        .collect();
    let spec = SaturationSpec::censored(0.0, 15.0).unwrap();
    let domain = DomainSet::symmetric_box(m, 1.5).unwrap();
    let noise = NoiseModel::gaussian(1.0).unwrap();
    let mut est = EstimatorConfig::new(domain, noise).with_gain_scale(10.0);
    est.mu = MuPolicy::Adaptive {
        mu_min: 1e-3,
        mu_max: 1e6,
    };
    let design = McDesign {
        n,
        replications: 2000,
        regressors: regressors.clone(),
        specs: vec![spec; n],
        seed: 4242,
        estimator: est.clone(),
    };
    let errors = replicate_errors(&design).unwrap();
    let report = mc_interval(&errors, 0.05, 0.05).unwrap();
    println!("intervals: {:?}", report.intervals);
    println!("warnings: {:?}", report.warnings);
    // fresh draws from a disjoint substream block
    let fresh = McDesign {
        replications: 500,
        seed: 4242 + (1 << 32),
        ..design
    };
    let fresh_errors = replicate_errors(&fresh).unwrap();
    for j in 0..m {
        let (lo, hi) = report.intervals[j];
        let covered = fresh_errors
            .iter()
            .filter(|r| r[j] >= lo && r[j] <= hi)
            .count();
        println!("component {j}: coverage {}/500", covered);
    }
}
