use std::path::Path;

use metriplectic::dynamics::{
    check_classical_conditions, check_jacobi, generate_dataset, rk4_simulate, skew_residual,
    trajectory_rng, DynamicsError, Mode, TrajectoryDataset,
};
use metriplectic::poly::{MatrixStructure, PolyMatrix, Polynomial};
use metriplectic::sos::{verify_certificate, MetricParam};
use metriplectic::sysid::{
    bilevel, compare_fields, stochastic_bilevel, Ansatz, IdentConfig, IdentError, IdentFailure,
    IdentProblem, Outcome,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::files::{self, DatasetHeader, IdentReport, RunStatus};
use crate::CliError;

/// Per-step tolerance on decreases of `E` (and of `S` in classical mode).
pub const MONOTONE_TOL: f64 = 1e-9;
/// Final `|E|` below which a trajectory counts as converged.
pub const LEVEL_SET_TOL: f64 = 1e-3;
/// Slack on increases of the full cost between phases.
pub const HISTORY_SLACK: f64 = 1e-6;
/// Coefficients at or below this magnitude are dropped from reported polynomials;
/// `theta` and `psi` are written unpruned.
pub const REPORT_PRUNE: f64 = 1e-9;

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub index: usize,
    pub x0: Vec<f64>,
    /// Last step inside the divergence bound, when the run diverged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diverged_after: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<TrajectoryStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub final_state: Vec<f64>,
    pub min_e: f64,
    pub max_e: f64,
    pub final_abs_e: f64,
    pub final_norm_sq: f64,
    pub worst_e_decrease: f64,
    pub e_monotone: bool,
    pub worst_s_decrease: f64,
    pub h_drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub system: String,
    pub mode: Mode,
    pub dt: f64,
    pub horizon: f64,
    pub n_steps: usize,
    pub trajectories: Vec<TrajectorySummary>,
    pub n_diverged: usize,
    pub n_monotone: usize,
    /// Trajectories ending with `|E| < LEVEL_SET_TOL`.
    pub n_converged: usize,
}

/// Simulates the configured trajectories; writes `traj_NNNN.csv` and
/// `summary.json` to `out`.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<SimulateSummary, CliError> {
    let spec = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| validation("config has no [simulate] section"))?;
    let sys = cfg.build_system()?;
    let horizon = cfg.horizon(spec);
    let n_steps = (horizon / spec.dt).round().max(1.0) as usize;
    let region = cfg.simulate_region(spec, sys.dim());

    let runs: Vec<_> = (0..spec.n_trajectories)
        .into_par_iter()
        .map(|t| {
            let x0 = region.sample(&mut trajectory_rng(spec.seed, t as u64));
            let traj = rk4_simulate(&sys, &x0, spec.dt, n_steps);
            (t, x0, traj)
        })
        .collect();

    files::ensure_dir(out)?;
    let mut trajectories = Vec::with_capacity(runs.len());
    for (index, x0, traj) in runs {
        match traj {
            Ok(traj) => {
                files::write_text(
                    &out.join(format!("traj_{index:04}.csv")),
                    &files::trajectory_csv(&traj, spec.csv_stride),
                )?;
                let es = traj.diagnostics.iter().map(|d| d.e);
                let fin = traj.final_state();
                let worst = traj.worst_free_energy_decrease();
                trajectories.push(TrajectorySummary {
                    index,
                    x0,
                    diverged_after: None,
                    stats: Some(TrajectoryStats {
                        final_state: fin.to_vec(),
                        min_e: es.clone().fold(f64::INFINITY, f64::min),
                        max_e: es.fold(f64::NEG_INFINITY, f64::max),
                        final_abs_e: traj.final_diagnostics().e.abs(),
                        final_norm_sq: fin.iter().map(|v| v * v).sum(),
                        worst_e_decrease: worst,
                        e_monotone: worst >= -MONOTONE_TOL,
                        worst_s_decrease: traj.worst_entropy_decrease(),
                        h_drift: traj.hamiltonian_drift(),
                    }),
                });
            }
            Err(DynamicsError::Diverged { last_valid, norm }) => {
                log::warn!("trajectory {index} diverged after step {last_valid} (norm {norm:e})");
                trajectories.push(TrajectorySummary {
                    index,
                    x0,
                    diverged_after: Some(last_valid),
                    stats: None,
                });
            }
            Err(e) => return Err(validation(e)),
        }
    }
    let stats = || trajectories.iter().filter_map(|t| t.stats.as_ref());
    let summary = SimulateSummary {
        system: sys.name().to_string(),
        mode: sys.mode(),
        dt: spec.dt,
        horizon,
        n_steps,
        n_diverged: trajectories.iter().filter(|t| t.diverged_after.is_some()).count(),
        n_monotone: stats().filter(|s| s.e_monotone).count(),
        n_converged: stats().filter(|s| s.final_abs_e < LEVEL_SET_TOL).count(),
        trajectories,
    };
    files::write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn gen_data(cfg: &RunConfig) -> Result<TrajectoryDataset, CliError> {
    let sys = cfg.build_system()?;
    let spec = cfg.dataset_spec(sys.dim())?;
    generate_dataset(&sys, &spec).map_err(|e| match e {
        DynamicsError::Diverged { .. } => CliError::Divergence(e.to_string()),
        other => validation(other),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Bilevel,
    Stochastic,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Bilevel => "bilevel",
            Algorithm::Stochastic => "stochastic",
        })
    }
}

/// Command-line overrides for `[identify]`.
#[derive(Debug, Clone, Default)]
pub struct IdentifyOverrides {
    pub batch_size: Option<usize>,
    pub max_iters: Option<usize>,
    pub seed: Option<u64>,
}

/// Effective identification settings after applying flag overrides.
pub fn ident_config(
    cfg: &RunConfig,
    algorithm: Algorithm,
    over: &IdentifyOverrides,
    m: usize,
) -> Result<IdentConfig, CliError> {
    let mut ic = cfg.identify.unwrap_or_default();
    if let Some(q) = over.batch_size {
        ic.batch_size = Some(q);
    }
    if let Some(k) = over.max_iters {
        ic.max_iters = k;
    }
    if let Some(s) = over.seed {
        ic.seed = s;
    }
    match algorithm {
        Algorithm::Bilevel => ic.batch_size = None,
        Algorithm::Stochastic => {
            let q = ic
                .batch_size
                .ok_or_else(|| validation("stochastic identification needs a batch size"))?;
            if q > m {
                return Err(validation(format!("batch size {q} exceeds the {m} samples in the dataset")));
            }
            if !cfg.identify_seed_given && over.seed.is_none() {
                return Err(validation("stochastic identification needs an explicit seed"));
            }
        }
    }
    ic.validate().map_err(validation)?;
    Ok(ic)
}

/// Runs identification on `data`, writes `report.json` and
/// `cost_history.csv` to `out`, and returns the report. Solver failures
/// still write a report (with the partial history) before returning an error.
pub fn identify(
    cfg: &RunConfig,
    data: &TrajectoryDataset,
    algorithm: Algorithm,
    over: &IdentifyOverrides,
    out: &Path,
) -> Result<IdentReport, CliError> {
    let sys = cfg.build_system()?;
    if data.dim != sys.dim() {
        return Err(validation(format!(
            "dataset has dimension {}, configured system has {}",
            data.dim,
            sys.dim()
        )));
    }
    let ic = ident_config(cfg, algorithm, over, data.len())?;
    let ansatz = Ansatz::for_system(&sys, &ic).map_err(validation)?;
    let problem = IdentProblem::new(ansatz, data).map_err(validation)?;
    let result = match algorithm {
        Algorithm::Bilevel => bilevel(&problem, &ic),
        Algorithm::Stochastic => stochastic_bilevel(&problem, &ic),
    };

    let mut echo = cfg.clone();
    echo.identify = Some(ic);
    echo.output = None;
    let m = problem.len();
    let initial = problem.full_cost(
        &vec![0.0; problem.ansatz().metric_param().num_theta()],
        &vec![0.0; problem.ansatz().num_psi()],
    );
    let (state, status, error, rejected, cert_failures) = match result {
        Ok(run) => {
            let status = match run.outcome {
                Outcome::Converged => RunStatus::Converged,
                Outcome::Stalled => RunStatus::Stalled,
                Outcome::MaxIterations => RunStatus::MaxIterations,
            };
            (run.state, status, None, run.rejected_steps, run.certificate_failures)
        }
        Err(IdentFailure { error, partial }) => {
            if let IdentError::Config(_) = error {
                return Err(validation(error));
            }
            (partial, RunStatus::SolverFailure, Some(error.to_string()), 0, Vec::new())
        }
    };
    let ansatz = problem.ansatz();
    let metric = ansatz
        .metric_param()
        .metric(&state.theta)
        .map_err(validation)?;
    let (lo, hi) = problem.data_box();
    let certificate = problem
        .verify(&state.theta, ic.eta, ic.certificate_samples.max(1), ic.seed)
        .ok();
    let field_rms = compare_fields(ansatz, &state.theta, &state.psi, &sys, 1000, lo, hi, ic.seed).ok();
    let final_full = state.final_full_cost().unwrap_or(initial);
    let worst = state.worst_full_cost_increase(Some(initial));
    let report = IdentReport {
        config: echo,
        algorithm: algorithm.to_string(),
        dataset: DatasetHeader {
            dim: data.dim,
            records: data.len(),
            provenance: data.provenance.clone(),
        },
        status,
        error: error.clone(),
        iterations: state.iteration,
        initial_full_cost: initial,
        final_full_cost: final_full,
        final_cost_per_sample: final_full / m as f64,
        worst_full_cost_increase: worst,
        monotone: worst <= HISTORY_SLACK,
        rejected_steps: rejected,
        certificate_failures: cert_failures,
        cost_history: state.cost_history.clone(),
        theta: state.theta.clone(),
        psi: state.psi.clone(),
        metric: upper_records(&metric),
        entropy: ansatz.entropy(&state.psi).pruned(REPORT_PRUNE).to_records(),
        certificate,
        field_rms,
    };
    files::ensure_dir(out)?;
    files::write_json(&out.join(files::REPORT_FILE), &report)?;
    files::write_text(
        &out.join(files::HISTORY_FILE),
        &files::cost_history_csv(&report.cost_history),
    )?;
    match error {
        Some(e) => Err(CliError::Solver(e)),
        None => Ok(report),
    }
}

/// 0 when the run converged, or stopped with a monotone full-cost history;
/// 4 otherwise.
pub fn identify_exit_code(report: &IdentReport) -> i32 {
    match report.status {
        RunStatus::Converged => 0,
        RunStatus::Stalled | RunStatus::MaxIterations if report.monotone => 0,
        RunStatus::SolverFailure => 3,
        _ => 4,
    }
}

fn upper_records(m: &PolyMatrix) -> Vec<Vec<metriplectic::poly::PolyRecord>> {
    let n = m.size();
    (0..n)
        .flat_map(|i| (i..n).map(move |j| (i, j)))
        .map(|(i, j)| m.entry(i, j).pruned(REPORT_PRUNE).to_records())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    /// Whether the suite counts towards `all_passed`.
    pub required: bool,
    pub value: f64,
    pub tol: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub subject: String,
    pub suites: Vec<SuiteResult>,
    pub all_passed: bool,
}

impl VerifyReport {
    fn new(subject: String, suites: Vec<SuiteResult>) -> Self {
        let all_passed = suites.iter().filter(|s| s.required).all(|s| s.passed);
        Self {
            subject,
            suites,
            all_passed,
        }
    }

    pub fn suite(&self, name: &str) -> Option<&SuiteResult> {
        self.suites.iter().find(|s| s.name == name)
    }
}

fn suite(name: &str, value: f64, tol: f64, passed: bool, required: bool) -> SuiteResult {
    SuiteResult {
        name: name.to_string(),
        passed,
        required,
        value,
        tol,
        detail: String::new(),
    }
}

/// Structural and dynamical checks of the configured system.
pub fn verify_system(cfg: &RunConfig) -> Result<VerifyReport, CliError> {
    let sys = cfg.build_system()?;
    let n = sys.dim();
    let seed = cfg.simulate.as_ref().map_or(0, |s| s.seed);
    let region = cfg
        .simulate
        .as_ref()
        .map(|s| cfg.simulate_region(s, n))
        .unwrap_or_else(|| cfg.simulate_region(&default_sim(), n));
    let mut rng = trajectory_rng(seed, u64::MAX);
    let points: Vec<Vec<f64>> = (0..500).map(|_| region.sample(&mut rng)).collect();
    let mut suites = Vec::new();

    let mut skew: f64 = 0.0;
    for x in &points {
        let g = sys.grad_free_energy(x);
        let scale = 1.0 + g.iter().map(|v| v * v).sum::<f64>();
        skew = skew.max(skew_residual(&sys, x).map_err(validation)?.abs() / scale);
    }
    suites.push(suite("skew_symmetry", skew, 1e-12, skew <= 1e-12, true));

    let jac = check_jacobi(sys.poisson(), 5, seed);
    let jr = jac.max_residual();
    suites.push(suite("jacobi", jr, 1e-9, jr <= 1e-9, true));

    let min_eig = sys.min_metric_eigenvalue(&points).map_err(validation)?;
    suites.push(suite("metric_psd", min_eig, -1e-12, min_eig >= -1e-12, true));

    if sys.mode() == Mode::Generalized {
        let mut worst: f64 = 0.0;
        for x in &points {
            let rate = sys.free_energy_rate(x).map_err(validation)?;
            let f = sys.field(x).map_err(validation)?;
            let along: f64 = sys.grad_free_energy(x).iter().zip(&f).map(|(a, b)| a * b).sum();
            worst = worst.max((rate - along).abs() / rate.abs().max(1.0));
        }
        suites.push(suite("free_energy_rate_identity", worst, 1e-10, worst <= 1e-10, true));
    }

    let cond = check_classical_conditions(&sys, &points, 1e-9).map_err(validation)?;
    let mut c = suite(
        "classical_conditions",
        cond.metric_on_energy.max(cond.poisson_on_entropy),
        cond.tol,
        cond.classical_compatible,
        sys.mode() == Mode::Classical,
    );
    c.detail = format!(
        "max |K grad H| = {:e}, max |Pi grad S| = {:e}",
        cond.metric_on_energy, cond.poisson_on_entropy
    );
    suites.push(c);

    // short simulations from the same region
    let sim = cfg.simulate.clone().unwrap_or_else(default_sim);
    let steps = ((cfg.horizon(&sim) / sim.dt).round() as usize).clamp(1, 5000);
    let trajs: Vec<_> = (0..5)
        .into_par_iter()
        .map(|t| {
            let x0 = region.sample(&mut trajectory_rng(sim.seed, t));
            rk4_simulate(&sys, &x0, sim.dt, steps)
        })
        .collect();
    let mut e_dec: f64 = 0.0;
    let mut s_dec: f64 = 0.0;
    let mut h_drift: f64 = 0.0;
    let mut diverged = 0;
    for t in &trajs {
        match t {
            Ok(t) => {
                e_dec = e_dec.min(t.worst_free_energy_decrease());
                s_dec = s_dec.min(t.worst_entropy_decrease());
                h_drift = h_drift.max(t.hamiltonian_drift());
            }
            Err(_) => diverged += 1,
        }
    }
    let mut mono = suite(
        "free_energy_monotone",
        e_dec,
        -MONOTONE_TOL,
        e_dec >= -MONOTONE_TOL && diverged == 0,
        true,
    );
    if diverged > 0 {
        mono.detail = format!("{diverged} of {} trajectories diverged", trajs.len());
    }
    suites.push(mono);
    if sys.mode() == Mode::Classical {
        suites.push(suite("first_law", h_drift, 1e-8, h_drift < 1e-8, true));
        suites.push(suite("second_law", s_dec, -MONOTONE_TOL, s_dec >= -MONOTONE_TOL, true));
    }
    Ok(VerifyReport::new(format!("system {}", sys.name()), suites))
}

fn default_sim() -> crate::config::SimulateSpec {
    crate::config::SimulateSpec {
        dt: 1e-3,
        horizon: None,
        n_trajectories: 5,
        seed: 0,
        region: None,
        csv_stride: 10,
    }
}

/// Re-checks an identification report: the metric recorded in it must be
/// certified on the data region and agree with the stored `theta`.
pub fn verify_report(report: &IdentReport) -> Result<VerifyReport, CliError> {
    let ic = report.config.identify.unwrap_or_default();
    let n = report.dataset.dim;
    let param = MetricParam::new(n, ic.metric_degree);
    let mut suites = Vec::new();

    let upper: Result<Vec<Polynomial>, _> = report
        .metric
        .iter()
        .map(|r| Polynomial::from_records(n, r))
        .collect();
    let theta = upper
        .map_err(|e| e.to_string())
        .and_then(|u| PolyMatrix::from_upper(n, n, MatrixStructure::Symmetric, u).map_err(|e| e.to_string()))
        .and_then(|k| param.theta_of(&k).map_err(|e| e.to_string()));
    match theta {
        Ok(theta) => {
            let (lo, hi) = report.dataset.provenance.region.bounding_box();
            let cert = verify_certificate(&param, &theta, ic.eta, ic.certificate_samples.max(1), ic.seed, &lo, &hi)
                .map_err(validation)?;
            let mut s = suite("certificate", cert.min_eigenvalue, cert.tol, cert.passed, true);
            s.detail = format!(
                "eigenvalues in [{:e}, {:e}], eta = {}",
                cert.min_eigenvalue, cert.max_eigenvalue, ic.eta
            );
            suites.push(s);
            let diff = theta
                .iter()
                .zip(&report.theta)
                .map(|(a, b)| (a - b).abs())
                .fold(if theta.len() == report.theta.len() { 0.0 } else { f64::INFINITY }, f64::max);
            suites.push(suite("theta_matches_metric", diff, REPORT_PRUNE, diff <= REPORT_PRUNE, true));
        }
        Err(e) => {
            let mut s = suite("certificate", f64::NAN, 1e-6, false, true);
            s.detail = format!("metric outside the ansatz: {e}");
            suites.push(s);
        }
    }

    let finite = report
        .cost_history
        .iter()
        .all(|r| r.batch_cost.is_finite() && r.full_cost.is_finite());
    suites.push(suite("cost_history_finite", 0.0, 0.0, finite, true));
    let mut mono = suite(
        "cost_history_monotone",
        report.worst_full_cost_increase,
        HISTORY_SLACK,
        report.worst_full_cost_increase <= HISTORY_SLACK,
        report.algorithm == "bilevel",
    );
    mono.detail = format!("algorithm {}", report.algorithm);
    suites.push(mono);
    let below = report.final_cost_per_sample < ic.cost_threshold;
    suites.push(suite(
        "final_cost_below_threshold",
        report.final_cost_per_sample,
        ic.cost_threshold,
        below,
        false,
    ));
    Ok(VerifyReport::new("identification report".into(), suites))
}
