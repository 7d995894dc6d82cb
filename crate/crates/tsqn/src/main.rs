//! Command-line front end: simulation, fitting, validation, confidence
//! intervals, and report merging.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure,
//! 5 assumption violation. Each command prints a one-line JSON summary on
//! stdout.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tsqn::diagnostics::{
    asymptotic_ci, cumulative_regret, excitation_ratio, lyapunov_bound, ConfidenceReport, Layer,
    PluginChoice,
};
use tsqn::error::{Error, Result};
use tsqn::estimator::MuPolicy;
use tsqn::io::{
    load_config, load_dataset, load_trace, validate_dataset, write_dataset, write_json,
    write_trace, ConfigFile,
};
use tsqn::monte_carlo::{mc_interval, replicate_errors, McDesign};
use tsqn::simulation::{gen_regressors, run_experiment};
use tsqn::trace::run_to_trace;

const SEED_ENV_VAR: &str = "TSQN_SEED";

#[derive(Parser)]
#[command(
    name = "tsqn",
    about = "Two-step quasi-Newton identification for saturated observations",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Seed override (also via the TSQN_SEED environment variable).
    #[arg(long)]
    seed: Option<u64>,
    /// Output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Regularization policy override.
    #[arg(long, value_enum)]
    mu: Option<MuArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MuArg {
    Constant,
    Adaptive,
}

#[derive(Clone, Copy, ValueEnum)]
enum PluginArg {
    True,
    Estimate,
    Worst,
}

impl From<PluginArg> for PluginChoice {
    fn from(p: PluginArg) -> Self {
        match p {
            PluginArg::True => PluginChoice::TrueTheta,
            PluginArg::Estimate => PluginChoice::Estimate,
            PluginArg::Worst => PluginChoice::WorstCase,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario, run the estimator over it, write the trace.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write the generated observations as a dataset CSV.
        #[arg(long)]
        data_out: Option<PathBuf>,
        /// Add hex sidecar columns with raw IEEE bits to the trace CSV.
        #[arg(long)]
        exact: bool,
    },
    /// Stream a dataset CSV through the estimator, write the trace.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Dataset path (overrides the config's `dataset`).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        exact: bool,
    },
    /// Audit a dataset against the model assumptions.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Asymptotic confidence intervals from a recorded trace.
    CiAsymptotic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Finite-sample error bounds from a recorded trace.
    CiLyapunov {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, value_enum)]
        plugin: Option<PluginArg>,
    },
    /// Monte-Carlo error intervals from replicated synthetic runs.
    CiMc {
        #[command(flatten)]
        common: Common,
        #[arg(long = "K")]
        replications: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        t: Option<f64>,
        /// Also export the raw error matrix as CSV.
        #[arg(long)]
        errors_out: Option<PathBuf>,
    },
    /// Merge a trace summary and any CI reports into one JSON document.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: PathBuf,
        /// CI report JSON files to merge (repeatable).
        #[arg(long = "ci")]
        ci: Vec<PathBuf>,
    },
}

fn resolve_seed(cli_seed: Option<u64>, config: &ConfigFile) -> u64 {
    if let Some(s) = cli_seed {
        return s;
    }
    if let Ok(v) = std::env::var(SEED_ENV_VAR) {
        if let Ok(s) = v.trim().parse() {
            return s;
        }
    }
    config.seed
}

fn apply_mu_override(config: &mut ConfigFile, mu: Option<MuArg>) -> Result<()> {
    match mu {
        None => Ok(()),
        Some(MuArg::Adaptive) => {
            let current = config.estimator.mu.unwrap_or_default();
            config.estimator.mu = Some(match current {
                MuPolicy::Adaptive { .. } => current,
                MuPolicy::Constant { .. } => MuPolicy::default(),
            });
            Ok(())
        }
        Some(MuArg::Constant) => match config.estimator.mu {
            Some(MuPolicy::Constant { .. }) => Ok(()),
            _ => Err(Error::config(
                "--mu constant requires a constant mu value in the config's estimator section",
            )),
        },
    }
}

fn print_summary(value: serde_json::Value) {
    println!("{value}");
}

fn out_or(common: &Common, default: &str) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(default))
}

fn finish_report(
    report: ConfidenceReport,
    config_hash: &str,
    seed: u64,
    path: &Path,
    command: &str,
) -> Result<()> {
    let report = report.with_provenance(config_hash, Some(seed));
    write_json(&report, path)?;
    print_summary(json!({
        "command": command,
        "status": "ok",
        "out": path.display().to_string(),
        "config_hash": config_hash,
        "seed": seed,
        "confidence": report.confidence,
        "intervals": report.intervals,
        "warnings": report.warnings,
    }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            common,
            data_out,
            exact,
        } => {
            let mut config = load_config(&common.config)?;
            apply_mu_override(&mut config, common.mu)?;
            let seed = resolve_seed(common.seed, &config);
            let scenario = config.build_scenario(seed, None)?;
            let estimator = config.build_estimator()?;
            let trace = run_experiment(&scenario, &estimator)?;
            let out = out_or(&common, "trace.csv");
            write_trace(&trace, &out, exact)?;
            if let Some(dpath) = &data_out {
                let regressors = gen_regressors(&scenario)?;
                let records = tsqn::simulation::gen_observations(
                    &regressors,
                    &scenario.theta_true,
                    &scenario.specs,
                    &scenario.noise,
                    scenario.seed,
                )?;
                write_dataset(&records, dpath)?;
            }
            print_summary(json!({
                "command": "simulate",
                "status": "ok",
                "out": out.display().to_string(),
                "data_out": data_out.map(|p| p.display().to_string()),
                "config_hash": trace.meta.config_hash,
                "seed": seed,
                "n": trace.len(),
                "final_err_hat": trace.steps.last().and_then(|s| s.err_hat),
            }));
            Ok(())
        }
        Command::Fit {
            common,
            data,
            exact,
        } => {
            let mut config = load_config(&common.config)?;
            apply_mu_override(&mut config, common.mu)?;
            let seed = resolve_seed(common.seed, &config);
            let data_path = data
                .or_else(|| config.dataset.as_ref().map(PathBuf::from))
                .ok_or_else(|| Error::config("fit: no dataset given (--data or config.dataset)"))?;
            let records = load_dataset(&data_path)?;
            let estimator = config.build_estimator()?;
            let trace = run_to_trace(&estimator, &records, None, Some(seed))?;
            let out = out_or(&common, "trace.csv");
            write_trace(&trace, &out, exact)?;
            print_summary(json!({
                "command": "fit",
                "status": "ok",
                "out": out.display().to_string(),
                "config_hash": trace.meta.config_hash,
                "seed": seed,
                "n": trace.len(),
                "theta_hat": trace.meta.final_theta_hat,
            }));
            Ok(())
        }
        Command::Validate { common, data } => {
            let mut config = load_config(&common.config)?;
            apply_mu_override(&mut config, common.mu)?;
            let seed = resolve_seed(common.seed, &config);
            let data_path = data
                .or_else(|| config.dataset.as_ref().map(PathBuf::from))
                .ok_or_else(|| {
                    Error::config("validate: no dataset given (--data or config.dataset)")
                })?;
            let records = load_dataset(&data_path)?;
            let estimator = config.build_estimator()?;
            let theta = config
                .scenario
                .as_ref()
                .map(|s| nalgebra::DVector::from_column_slice(&s.theta_true));
            let report = validate_dataset(&records, &estimator, theta.as_ref(), Some(seed))?;
            let out = out_or(&common, "validation.json");
            write_json(&report, &out)?;
            print_summary(json!({
                "command": "validate",
                "status": if report.pass { "ok" } else { "assumption_violation" },
                "pass": report.pass,
                "out": out.display().to_string(),
                "config_hash": report.config_hash,
                "seed": seed,
                "rows": report.rows,
            }));
            if report.pass {
                Ok(())
            } else {
                Err(Error::assumption(
                    "validation failed; see the report for witnesses",
                ))
            }
        }
        Command::CiAsymptotic {
            common,
            trace,
            alpha,
        } => {
            let config = load_config(&common.config)?;
            let seed = resolve_seed(common.seed, &config);
            let alpha = alpha.or(config.ci.alpha).unwrap_or(0.05);
            let t = load_trace(&trace)?;
            if t.is_empty() {
                return Err(Error::config("ci-asymptotic: empty trace"));
            }
            let report = asymptotic_ci(&t, t.len() - 1, alpha)?;
            let out = out_or(&common, "ci_asymptotic.json");
            finish_report(report, &t.meta.config_hash, seed, &out, "ci-asymptotic")
        }
        Command::CiLyapunov {
            common,
            trace,
            alpha,
            tau,
            plugin,
        } => {
            let config = load_config(&common.config)?;
            let seed = resolve_seed(common.seed, &config);
            let alpha = alpha.or(config.ci.alpha).unwrap_or(0.05);
            let tau = tau.or(config.ci.tau).unwrap_or(0.1);
            let plugin: PluginChoice = plugin.map(PluginChoice::from).unwrap_or_else(|| {
                match config.ci.plugin.as_deref() {
                    Some("true") | Some("true_theta") => PluginChoice::TrueTheta,
                    Some("worst") | Some("worst_case") => PluginChoice::WorstCase,
                    _ => PluginChoice::Estimate,
                }
            });
            let t = load_trace(&trace)?;
            if t.is_empty() {
                return Err(Error::config("ci-lyapunov: empty trace"));
            }
            let report = lyapunov_bound(&t, t.len() - 1, alpha, tau, plugin)?;
            let out = out_or(&common, "ci_lyapunov.json");
            finish_report(report, &t.meta.config_hash, seed, &out, "ci-lyapunov")
        }
        Command::CiMc {
            common,
            replications,
            alpha,
            t,
            errors_out,
        } => {
            let mut config = load_config(&common.config)?;
            apply_mu_override(&mut config, common.mu)?;
            let seed = resolve_seed(common.seed, &config);
            let mc = config
                .mc
                .clone()
                .ok_or_else(|| Error::config("ci-mc: config has no mc section"))?;
            let k = replications.unwrap_or(mc.replications);
            let alpha = alpha.or(config.ci.alpha).unwrap_or(0.05);
            let t_level = t.or(config.ci.t).unwrap_or(0.05);
            // deterministic regressors and specs, fixed across replications
            let scenario = config.build_scenario(seed, Some(mc.n))?;
            let regressors = gen_regressors(&scenario)?;
            let specs = (0..mc.n)
                .map(|i| scenario.specs.at(i))
                .collect::<Result<Vec<_>>>()?;
            let estimator = config.build_estimator()?;
            let design = McDesign {
                n: mc.n,
                replications: k,
                regressors,
                specs,
                seed,
                estimator,
            };
            let errors = replicate_errors(&design)?;
            if let Some(epath) = &errors_out {
                let mut w = csv::Writer::from_path(epath)?;
                let m = errors.first().map_or(0, Vec::len);
                w.write_record((0..m).map(|j| format!("err_{j}")))
                    .map_err(|e| Error::config(format!("csv write: {e}")))?;
                for row in &errors {
                    w.write_record(row.iter().map(|v| format!("{v}")))
                        .map_err(|e| Error::config(format!("csv write: {e}")))?;
                }
                w.flush()?;
            }
            let report = mc_interval(&errors, alpha, t_level)?;
            let out = out_or(&common, "ci_mc.json");
            finish_report(
                report,
                &design.estimator.content_hash(),
                seed,
                &out,
                "ci-mc",
            )
        }
        Command::Report { common, trace, ci } => {
            let config = load_config(&common.config)?;
            let seed = resolve_seed(common.seed, &config);
            let t = load_trace(&trace)?;
            let n = t.len();
            let mut reports = Vec::new();
            for path in &ci {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::config(format!("cannot read report {}: {e}", path.display()))
                })?;
                let value: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| Error::config(format!("report {}: {e}", path.display())))?;
                reports.push(value);
            }
            let excitation = if n > 0 {
                Some(excitation_ratio(&t, n - 1)?)
            } else {
                None
            };
            let (cum_regret_hat, cum_regret_bar) = if n > 0 && t.meta.theta_true.is_some() {
                (
                    Some(cumulative_regret(&t, n - 1, Layer::Accelerated)?),
                    Some(cumulative_regret(&t, n - 1, Layer::Preliminary)?),
                )
            } else {
                (None, None)
            };
            let merged = json!({
                "schema_version": 1,
                "config_hash": t.meta.config_hash,
                "seed": t.meta.seed,
                "trace": {
                    "n": n,
                    "m": t.meta.m,
                    "final_theta_hat": t.meta.final_theta_hat,
                    "final_theta_bar": t.meta.final_theta_bar,
                    "final_err_hat": t.steps.last().and_then(|s| s.err_hat),
                    "final_err_bar": t.steps.last().and_then(|s| s.err_bar),
                    "excitation_ratio": excitation,
                    "cumulative_regret_accelerated": cum_regret_hat,
                    "cumulative_regret_preliminary": cum_regret_bar,
                },
                "reports": reports,
            });
            let out = out_or(&common, "report.json");
            write_json(&merged, &out)?;
            print_summary(json!({
                "command": "report",
                "status": "ok",
                "out": out.display().to_string(),
                "config_hash": t.meta.config_hash,
                "seed": seed,
                "merged_reports": ci.len(),
            }));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            print_summary(json!({
                "status": "error",
                "exit_code": err.exit_code(),
                "message": err.to_string(),
            }));
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
