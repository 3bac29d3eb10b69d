//! Identification of the entropy `S` and metric `K` from state/derivative
//! samples by alternating a metric SDP and an entropy LP.
//!
//! Both subproblems minimize the one-norm of
//! `xdot - (Pi(x) + K_theta(x)) (grad H(x) + grad S_psi(x))`, which is affine in
//! `theta` for fixed `psi` and affine in `psi` for fixed `theta`.

use conic::{Cone, ProgramBuilder, SolveStatus, Tolerances};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{trajectory_rng, MetriplecticSystem, PoissonStructure, Sample, TrajectoryDataset};
use crate::poly::{monomial_basis, CompiledPoly, ExponentVector, PolyError, Polynomial};
use crate::sos::{build_sos_constraints_reduced, theta_from_gram, verify_certificate, CertificateReport, MetricParam, SosError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentConfig {
    /// Total degree `r` of the entropy ansatz.
    pub entropy_degree: u32,
    /// Total degree `s` of the metric entries (even).
    pub metric_degree: u32,
    /// Bound on `K` (`eta I >= K`) and on each entropy coefficient.
    pub eta: f64,
    /// Minibatch size `q`; `None` uses the whole dataset.
    pub batch_size: Option<usize>,
    pub max_iters: usize,
    pub seed: u64,
    /// Relative change of the full cost between iterations below which the
    /// full-batch loop stops.
    pub stop_tol: f64,
    /// Stop once the full cost per sample falls below this value.
    pub cost_threshold: f64,
    pub fix_entropy_constant: bool,
    /// Samples used by the per-phase certificate check.
    pub certificate_samples: usize,
    pub solver: Tolerances,
}

impl Default for IdentConfig {
    fn default() -> Self {
        Self {
            entropy_degree: 8,
            metric_degree: 2,
            eta: 100.0,
            batch_size: None,
            max_iters: 100,
            seed: 0,
            stop_tol: 1e-8,
            cost_threshold: 1e-5,
            fix_entropy_constant: true,
            certificate_samples: 1000,
            solver: Tolerances::default(),
        }
    }
}

impl IdentConfig {
    pub fn validate(&self) -> Result<(), IdentError> {
        let bad = |m: String| Err(IdentError::Config(m));
        if self.entropy_degree < 1 {
            return bad("entropy_degree must be >= 1".into());
        }
        if self.metric_degree % 2 != 0 {
            return bad(format!(
                "metric_degree {} is odd; use {}",
                self.metric_degree,
                self.metric_degree + 1
            ));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return bad(format!("eta must be finite and >= 0, got {}", self.eta));
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.stop_tol >= 0.0) || !(self.cost_threshold >= 0.0) {
            return bad("stop_tol and cost_threshold must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IdentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error("non-finite input")]
    NonFinite,
    #[error("empty dataset or batch")]
    Empty,
    #[error("{phase} phase of iteration {iteration}: solver returned {status}")]
    Solver {
        phase: Phase,
        iteration: usize,
        status: SolveStatus,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Metric,
    Entropy,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Metric => "metric",
            Phase::Entropy => "entropy",
        })
    }
}

/// Known structure (`Pi`, `H`) plus the polynomial families for `K` and `S`.
#[derive(Debug, Clone)]
pub struct Ansatz {
    poisson: PoissonStructure,
    hamiltonian: Polynomial,
    metric: MetricParam,
    entropy_basis: Vec<ExponentVector>,
    grad_h: Vec<CompiledPoly>,
    pi: Vec<CompiledPoly>,
    // d(phi_k)/dx_i, indexed [k][i]
    grad_basis: Vec<Vec<CompiledPoly>>,
}

impl Ansatz {
    pub fn new(
        poisson: PoissonStructure,
        hamiltonian: Polynomial,
        entropy_degree: u32,
        metric_degree: u32,
    ) -> Result<Self, IdentError> {
        let n = poisson.dim();
        if hamiltonian.dim() != n {
            return Err(PolyError::DimensionMismatch {
                expected: n,
                found: hamiltonian.dim(),
            }
            .into());
        }
        let entropy_basis = monomial_basis(n, entropy_degree);
        let grad_basis = entropy_basis
            .iter()
            .map(|e| {
                Polynomial::monomial(e.clone(), 1.0)
                    .grad()
                    .iter()
                    .map(Polynomial::compile)
                    .collect()
            })
            .collect();
        Ok(Self {
            grad_h: hamiltonian.grad().iter().map(Polynomial::compile).collect(),
            pi: poisson.bivector().compile(),
            poisson,
            hamiltonian,
            metric: MetricParam::new(n, metric_degree),
            entropy_basis,
            grad_basis,
        })
    }

    /// Ansatz sharing `Pi` and `H` with a known system.
    pub fn for_system(sys: &MetriplecticSystem, cfg: &IdentConfig) -> Result<Self, IdentError> {
        Self::new(
            sys.poisson().clone(),
            sys.hamiltonian().clone(),
            cfg.entropy_degree,
            cfg.metric_degree,
        )
    }

    pub fn dim(&self) -> usize {
        self.poisson.dim()
    }

    pub fn poisson(&self) -> &PoissonStructure {
        &self.poisson
    }

    pub fn hamiltonian(&self) -> &Polynomial {
        &self.hamiltonian
    }

    pub fn metric_param(&self) -> &MetricParam {
        &self.metric
    }

    pub fn entropy_basis(&self) -> &[ExponentVector] {
        &self.entropy_basis
    }

    pub fn num_psi(&self) -> usize {
        self.entropy_basis.len()
    }

    pub fn entropy(&self, psi: &[f64]) -> Polynomial {
        Polynomial::from_basis(self.dim(), &self.entropy_basis, psi)
    }

    /// `psi` for a polynomial entropy, if it lies in the ansatz.
    pub fn psi_of(&self, s: &Polynomial) -> Option<Vec<f64>> {
        s.coefficients_in(&self.entropy_basis).ok()
    }

    fn features(&self, s: &Sample) -> Features {
        let n = self.dim();
        let x = &s.x;
        let pi = DMatrix::from_fn(n, n, |i, j| self.pi[i * n + j].eval(x));
        let grad_h: Vec<f64> = self.grad_h.iter().map(|p| p.eval(x)).collect();
        let l = self.entropy_basis.len();
        let mut g = DMatrix::zeros(n, l);
        for (k, gk) in self.grad_basis.iter().enumerate() {
            for i in 0..n {
                g[(i, k)] = gk[i].eval(x);
            }
        }
        Features {
            xdot: s.xdot.clone(),
            pi,
            grad_h,
            phi: self.metric.features(x),
            grad_basis: g,
        }
    }

    /// `(Pi + K_theta)(grad H + grad S_psi)` at `x`.
    pub fn field(&self, theta: &[f64], psi: &[f64], x: &[f64]) -> Vec<f64> {
        let f = self.features(&Sample {
            x: x.to_vec(),
            xdot: vec![0.0; x.len()],
        });
        let r = f.residual(&self.metric, theta, psi);
        r.iter().map(|v| -v).collect()
    }
}

/// Everything the subproblems need at one sample, evaluated once.
#[derive(Debug, Clone)]
struct Features {
    xdot: Vec<f64>,
    pi: DMatrix<f64>,
    grad_h: Vec<f64>,
    phi: Vec<f64>,
    // n x L, column k is grad phi_k
    grad_basis: DMatrix<f64>,
}

impl Features {
    fn grad_e(&self, psi: &[f64]) -> Vec<f64> {
        let n = self.grad_h.len();
        (0..n)
            .map(|i| {
                self.grad_h[i]
                    + (0..psi.len())
                        .map(|k| self.grad_basis[(i, k)] * psi[k])
                        .sum::<f64>()
            })
            .collect()
    }

    fn residual(&self, metric: &MetricParam, theta: &[f64], psi: &[f64]) -> Vec<f64> {
        let u = self.grad_e(psi);
        let m = &self.pi + metric.eval_with_features(theta, &self.phi);
        let n = u.len();
        (0..n)
            .map(|i| self.xdot[i] - (0..n).map(|j| m[(i, j)] * u[j]).sum::<f64>())
            .collect()
    }
}

/// Dataset with per-sample features precomputed for a given ansatz.
#[derive(Debug, Clone)]
pub struct IdentProblem {
    ansatz: Ansatz,
    features: Vec<Features>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl IdentProblem {
    pub fn new(ansatz: Ansatz, data: &TrajectoryDataset) -> Result<Self, IdentError> {
        if data.is_empty() {
            return Err(IdentError::Empty);
        }
        if data.dim != ansatz.dim() {
            return Err(PolyError::DimensionMismatch {
                expected: ansatz.dim(),
                found: data.dim,
            }
            .into());
        }
        data.validate().map_err(|_| IdentError::NonFinite)?;
        let features = data.samples.iter().map(|s| ansatz.features(s)).collect();
        let (lo, hi) = data.bounding_box();
        Ok(Self {
            ansatz,
            features,
            lo,
            hi,
        })
    }

    pub fn ansatz(&self) -> &Ansatz {
        &self.ansatz
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Bounding box of the sample states.
    pub fn data_box(&self) -> (&[f64], &[f64]) {
        (&self.lo, &self.hi)
    }

    pub fn residual_at(&self, index: usize, theta: &[f64], psi: &[f64]) -> Vec<f64> {
        self.features[index].residual(&self.ansatz.metric, theta, psi)
    }

    /// Sum of one-norm residuals over `batch`.
    pub fn batch_cost(&self, batch: &[usize], theta: &[f64], psi: &[f64]) -> f64 {
        batch
            .iter()
            .map(|&i| self.residual_at(i, theta, psi).iter().map(|v| v.abs()).sum::<f64>())
            .sum()
    }

    /// Sum of one-norm residuals over the whole dataset.
    pub fn full_cost(&self, theta: &[f64], psi: &[f64]) -> f64 {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch_cost(&all, theta, psi)
    }

    pub fn verify(&self, theta: &[f64], eta: f64, n_samples: usize, seed: u64) -> Result<CertificateReport, IdentError> {
        Ok(verify_certificate(
            &self.ansatz.metric,
            theta,
            eta,
            n_samples,
            seed,
            &self.lo,
            &self.hi,
        )?)
    }
}

/// `xdot - (Pi(x) + K_theta(x))(grad H(x) + grad S_psi(x))`.
pub fn residual(ansatz: &Ansatz, sample: &Sample, theta: &[f64], psi: &[f64]) -> Result<Vec<f64>, IdentError> {
    let n = ansatz.dim();
    if sample.x.len() != n || sample.xdot.len() != n {
        return Err(PolyError::DimensionMismatch {
            expected: n,
            found: sample.x.len(),
        }
        .into());
    }
    if theta.len() != ansatz.metric.num_theta() || psi.len() != ansatz.num_psi() {
        return Err(IdentError::Config("parameter vector length".into()));
    }
    if sample
        .x
        .iter()
        .chain(&sample.xdot)
        .chain(theta)
        .chain(psi)
        .any(|v| !v.is_finite())
    {
        return Err(IdentError::NonFinite);
    }
    Ok(ansatz.features(sample).residual(&ansatz.metric, theta, psi))
}

/// Result of one convex subproblem.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSolution {
    pub params: Vec<f64>,
    /// Optimal objective reported by the solver (sum of slacks).
    pub objective: f64,
    pub solver_iterations: usize,
}

/// Adds `delta >= |b - A w|` rows for every residual entry and returns the
/// slack block. `rows[t] = (coefficients over w, b)`.
fn add_l1_rows(builder: &mut ProgramBuilder, rows: &[(Vec<(usize, f64)>, f64)]) -> Result<Vec<usize>, IdentError> {
    let m = rows.len();
    let delta = builder.add_var_block(Cone::NonNeg(m));
    let plus = builder.add_var_block(Cone::NonNeg(m));
    let minus = builder.add_var_block(Cone::NonNeg(m));
    for (t, (coeffs, b)) in rows.iter().enumerate() {
        // delta - (b - A w) = s+  and  delta + (b - A w) = s-
        let mut r1 = vec![(delta.var(t), 1.0), (plus.var(t), -1.0)];
        r1.extend(coeffs.iter().copied());
        builder.add_equality(r1, *b).map_err(SosError::from)?;
        let mut r2 = vec![(delta.var(t), 1.0), (minus.var(t), -1.0)];
        r2.extend(coeffs.iter().map(|&(j, a)| (j, -a)));
        builder.add_equality(r2, -*b).map_err(SosError::from)?;
    }
    Ok((0..m).map(|t| delta.var(t)).collect())
}

fn check_batch(problem: &IdentProblem, batch: &[usize]) -> Result<(), IdentError> {
    if batch.is_empty() || batch.iter().any(|&i| i >= problem.len()) {
        return Err(IdentError::Empty);
    }
    Ok(())
}

/// Metric search: minimize the batch one-norm cost over `theta` subject to
/// the SOS certificates of `eta I >= K(x) >= 0`, with `psi` fixed.
pub fn metric_search(
    problem: &IdentProblem,
    batch: &[usize],
    psi: &[f64],
    cfg: &IdentConfig,
) -> Result<PhaseSolution, IdentError> {
    check_batch(problem, batch)?;
    let param = &problem.ansatz.metric;
    let n = problem.ansatz.dim();
    let l = param.basis().len();
    let pairs = param.pairs();
    let mut builder = ProgramBuilder::new();
    let theta_block = builder.add_var_block(Cone::Free(param.num_theta()));
    let theta_vars: Vec<usize> = (0..param.num_theta()).map(|t| theta_block.var(t)).collect();

    let mut rows = Vec::with_capacity(batch.len() * n);
    for &i in batch {
        let f = &problem.features[i];
        let u = f.grad_e(psi);
        for c in 0..n {
            let pu: f64 = (0..n).map(|j| f.pi[(c, j)] * u[j]).sum();
            let b = f.xdot[c] - pu;
            let mut coeffs = Vec::new();
            for (p, &(a, bb)) in pairs.iter().enumerate() {
                // coefficient of K_{a,bb} in (K u)_c
                let w = if a == c && bb == c {
                    u[c]
                } else if a == c {
                    u[bb]
                } else if bb == c {
                    u[a]
                } else {
                    continue;
                };
                for k in 0..l {
                    let v = f.phi[k] * w;
                    if v != 0.0 {
                        coeffs.push((theta_vars[param.theta_index(p, k)], v));
                    }
                }
            }
            rows.push((coeffs, b));
        }
    }
    let deltas = add_l1_rows(&mut builder, &rows)?;
    let cert = if cfg.eta > 0.0 {
        Some(build_sos_constraints_reduced(&mut builder, param, cfg.eta, &theta_vars)?)
    } else {
        // eta = 0 leaves K = 0 as the only feasible metric
        for &t in &theta_vars {
            builder.add_equality([(t, 1.0)], 0.0).map_err(SosError::from)?;
        }
        None
    };
    builder
        .set_objective(deltas.iter().map(|&d| (d, 1.0)))
        .map_err(SosError::from)?;
    let prog = builder.finalize().map_err(SosError::from)?;
    let res = conic::solve(&prog, &cfg.solver);
    if res.status != SolveStatus::Optimal {
        return Err(IdentError::Solver {
            phase: Phase::Metric,
            iteration: 0,
            status: res.status,
        });
    }
    // Read theta off the lower Gram matrix, which lies strictly inside the
    // PSD cone, so K(x) >= 0 holds exactly rather than up to the equality
    // residual.
    let params = match &cert {
        Some(c) => theta_from_gram(param, &c.basis, &c.gram_plus_values(&res.primal)),
        None => vec![0.0; theta_vars.len()],
    };
    Ok(PhaseSolution {
        params,
        objective: res.objective_value,
        solver_iterations: res.iterations,
    })
}

/// Entropy search: minimize the batch one-norm cost over `psi` with
/// `-eta <= psi_k <= eta`, `theta` fixed. With `fix_entropy_constant` the
/// constant coefficient is held at zero.
pub fn entropy_search(
    problem: &IdentProblem,
    batch: &[usize],
    theta: &[f64],
    cfg: &IdentConfig,
) -> Result<PhaseSolution, IdentError> {
    check_batch(problem, batch)?;
    let ansatz = &problem.ansatz;
    let n = ansatz.dim();
    let l = ansatz.num_psi();
    // variable for each free coefficient; pinned ones stay at zero
    let free_k: Vec<usize> = (0..l)
        .filter(|&k| {
            cfg.eta > 0.0 && !(cfg.fix_entropy_constant && ansatz.entropy_basis[k].is_constant())
        })
        .collect();
    let mut builder = ProgramBuilder::new();
    let psi_block = builder.add_var_block(Cone::Free(free_k.len()));
    let mut rows = Vec::with_capacity(batch.len() * n);
    for &i in batch {
        let f = &problem.features[i];
        let m = &f.pi + ansatz.metric.eval_with_features(theta, &f.phi);
        let mg = &m * &f.grad_basis;
        for c in 0..n {
            let mh: f64 = (0..n).map(|j| m[(c, j)] * f.grad_h[j]).sum();
            let b = f.xdot[c] - mh;
            let coeffs: Vec<(usize, f64)> = free_k
                .iter()
                .enumerate()
                .filter(|(_, &k)| mg[(c, k)] != 0.0)
                .map(|(v, &k)| (psi_block.var(v), mg[(c, k)]))
                .collect();
            rows.push((coeffs, b));
        }
    }
    let deltas = add_l1_rows(&mut builder, &rows)?;
    if !free_k.is_empty() {
        let upper = builder.add_var_block(Cone::NonNeg(free_k.len()));
        let lower = builder.add_var_block(Cone::NonNeg(free_k.len()));
        for v in 0..free_k.len() {
            builder
                .add_equality([(psi_block.var(v), 1.0), (upper.var(v), 1.0)], cfg.eta)
                .map_err(SosError::from)?;
            builder
                .add_equality([(psi_block.var(v), 1.0), (lower.var(v), -1.0)], -cfg.eta)
                .map_err(SosError::from)?;
        }
    }
    builder
        .set_objective(deltas.iter().map(|&d| (d, 1.0)))
        .map_err(SosError::from)?;
    let prog = builder.finalize().map_err(SosError::from)?;
    let res = conic::solve(&prog, &cfg.solver);
    if res.status != SolveStatus::Optimal {
        return Err(IdentError::Solver {
            phase: Phase::Entropy,
            iteration: 0,
            status: res.status,
        });
    }
    let mut psi = vec![0.0; l];
    for (v, &k) in free_k.iter().enumerate() {
        // project round-off back into the box
        psi[k] = res.primal[psi_block.var(v)].clamp(-cfg.eta, cfg.eta);
    }
    Ok(PhaseSolution {
        params: psi,
        objective: res.objective_value,
        solver_iterations: res.iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub iter: usize,
    pub phase: Phase,
    pub batch_cost: f64,
    pub full_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentState {
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    pub iteration: usize,
    pub cost_history: Vec<CostRecord>,
}

impl IdentState {
    /// `theta = 0`, `psi = 0`.
    pub fn initial(ansatz: &Ansatz) -> Self {
        Self {
            theta: vec![0.0; ansatz.metric.num_theta()],
            psi: vec![0.0; ansatz.num_psi()],
            iteration: 0,
            cost_history: Vec::new(),
        }
    }

    /// Largest increase of the full cost between consecutive phases.
    pub fn worst_full_cost_increase(&self, initial_full_cost: Option<f64>) -> f64 {
        let mut prev = initial_full_cost;
        let mut worst: f64 = 0.0;
        for r in &self.cost_history {
            if let Some(p) = prev {
                worst = worst.max(r.full_cost - p);
            }
            prev = Some(r.full_cost);
        }
        worst
    }

    pub fn final_full_cost(&self) -> Option<f64> {
        self.cost_history.last().map(|r| r.full_cost)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Full cost per sample fell below `cost_threshold`.
    Converged,
    /// Relative full-cost change fell below `stop_tol`.
    Stalled,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentRun {
    pub state: IdentState,
    pub outcome: Outcome,
    pub initial_full_cost: f64,
    /// Phases whose certificate check failed (should stay empty).
    pub certificate_failures: Vec<usize>,
    /// Solver steps whose result was worse than the incumbent on the batch
    /// and was therefore discarded.
    pub rejected_steps: usize,
}

impl IdentRun {
    pub fn final_cost_per_sample(&self, m: usize) -> f64 {
        self.state.final_full_cost().unwrap_or(self.initial_full_cost) / m as f64
    }

    /// Full-cost sequence nonincreasing within `slack`.
    pub fn is_monotone(&self, slack: f64) -> bool {
        self.state.worst_full_cost_increase(Some(self.initial_full_cost)) <= slack
    }
}

/// A failed run together with everything recorded before the failure.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{error}")]
pub struct IdentFailure {
    pub error: IdentError,
    pub partial: IdentState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Batching {
    Full,
    Minibatch(usize),
}

/// Alternates metric and entropy searches on the full dataset.
pub fn bilevel(problem: &IdentProblem, cfg: &IdentConfig) -> Result<IdentRun, IdentFailure> {
    let init = IdentState::initial(&problem.ansatz);
    bilevel_from(problem, cfg, init)
}

pub fn bilevel_from(problem: &IdentProblem, cfg: &IdentConfig, init: IdentState) -> Result<IdentRun, IdentFailure> {
    run_loop(problem, cfg, init, Batching::Full)
}

/// Minibatch variant: each iteration runs both phases on a fresh uniform minibatch
/// of size `q` drawn without replacement. With `q = m` the whole dataset is
/// used in its original order, which reproduces [`bilevel`].
pub fn stochastic_bilevel(problem: &IdentProblem, cfg: &IdentConfig) -> Result<IdentRun, IdentFailure> {
    let init = IdentState::initial(&problem.ansatz);
    stochastic_bilevel_from(problem, cfg, init)
}

pub fn stochastic_bilevel_from(
    problem: &IdentProblem,
    cfg: &IdentConfig,
    init: IdentState,
) -> Result<IdentRun, IdentFailure> {
    let q = cfg.batch_size.unwrap_or(problem.len());
    if q == 0 || q > problem.len() {
        return Err(IdentFailure {
            error: IdentError::Config(format!(
                "batch size {q} must be between 1 and the dataset size {}",
                problem.len()
            )),
            partial: init,
        });
    }
    let batching = if q == problem.len() {
        Batching::Full
    } else {
        Batching::Minibatch(q)
    };
    run_loop(problem, cfg, init, batching)
}

fn run_loop(
    problem: &IdentProblem,
    cfg: &IdentConfig,
    init: IdentState,
    batching: Batching,
) -> Result<IdentRun, IdentFailure> {
    let fail = |error: IdentError, state: &IdentState| IdentFailure {
        error,
        partial: state.clone(),
    };
    let mut state = init;
    if let Err(e) = cfg.validate() {
        return Err(fail(e, &state));
    }
    if state.theta.len() != problem.ansatz.metric.num_theta() || state.psi.len() != problem.ansatz.num_psi() {
        return Err(fail(IdentError::Config("initial parameter length".into()), &state));
    }
    let m = problem.len();
    let all: Vec<usize> = (0..m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial_full_cost = problem.full_cost(&state.theta, &state.psi);
    let mut prev_full = initial_full_cost;
    let mut certificate_failures = Vec::new();
    let mut rejected_steps = 0;
    let mut outcome = Outcome::MaxIterations;

    if initial_full_cost / (m as f64) < cfg.cost_threshold {
        return Ok(IdentRun {
            state,
            outcome: Outcome::Converged,
            initial_full_cost,
            certificate_failures,
            rejected_steps,
        });
    }

    for _ in 0..cfg.max_iters {
        let iter = state.iteration + 1;
        let batch: Vec<usize> = match batching {
            Batching::Full => all.clone(),
            Batching::Minibatch(q) => {
                let mut b = rand::seq::index::sample(&mut rng, m, q).into_vec();
                b.sort_unstable();
                b
            }
        };

        // metric phase
        let incumbent = problem.batch_cost(&batch, &state.theta, &state.psi);
        let sol = metric_search(problem, &batch, &state.psi, cfg).map_err(|e| {
            fail(with_iteration(e, iter), &state)
        })?;
        let candidate = problem.batch_cost(&batch, &sol.params, &state.psi);
        let batch_cost = if candidate <= incumbent {
            state.theta = sol.params;
            candidate
        } else {
            rejected_steps += 1;
            log::debug!("iteration {iter}: metric step rejected ({candidate:e} > {incumbent:e})");
            incumbent
        };
        let cert_seed = cfg.seed ^ (iter as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        if cfg.certificate_samples > 0 && cfg.eta > 0.0 {
            let rep = problem
                .verify(&state.theta, cfg.eta, cfg.certificate_samples, cert_seed)
                .map_err(|e| fail(e, &state))?;
            if !rep.passed {
                log::warn!("iteration {iter}: metric certificate check failed: {rep:?}");
                certificate_failures.push(iter);
            }
        }
        let full = problem.full_cost(&state.theta, &state.psi);
        state.cost_history.push(CostRecord {
            iter,
            phase: Phase::Metric,
            batch_cost,
            full_cost: full,
        });

        // entropy phase
        let incumbent = problem.batch_cost(&batch, &state.theta, &state.psi);
        let sol = entropy_search(problem, &batch, &state.theta, cfg).map_err(|e| {
            fail(with_iteration(e, iter), &state)
        })?;
        let candidate = problem.batch_cost(&batch, &state.theta, &sol.params);
        let batch_cost = if candidate <= incumbent {
            state.psi = sol.params;
            candidate
        } else {
            rejected_steps += 1;
            log::debug!("iteration {iter}: entropy step rejected ({candidate:e} > {incumbent:e})");
            incumbent
        };
        let full = problem.full_cost(&state.theta, &state.psi);
        state.cost_history.push(CostRecord {
            iter,
            phase: Phase::Entropy,
            batch_cost,
            full_cost: full,
        });
        state.iteration = iter;
        log::info!(
            "iteration {iter}: full cost {full:.6e} ({:.3e} per sample)",
            full / m as f64
        );

        if full / (m as f64) < cfg.cost_threshold {
            outcome = Outcome::Converged;
            break;
        }
        if batching == Batching::Full && (prev_full - full).abs() <= cfg.stop_tol * prev_full.abs().max(f64::MIN_POSITIVE) {
            outcome = Outcome::Stalled;
            break;
        }
        prev_full = full;
    }
    Ok(IdentRun {
        state,
        outcome,
        initial_full_cost,
        certificate_failures,
        rejected_steps,
    })
}

fn with_iteration(e: IdentError, iter: usize) -> IdentError {
    match e {
        IdentError::Solver { phase, status, .. } => IdentError::Solver {
            phase,
            iteration: iter,
            status,
        },
        other => other,
    }
}

/// RMS over `n_points` uniform samples in `[lo, hi]` of the difference between
/// the identified field and the true system's field.
pub fn compare_fields(
    ansatz: &Ansatz,
    theta: &[f64],
    psi: &[f64],
    truth: &MetriplecticSystem,
    n_points: usize,
    lo: &[f64],
    hi: &[f64],
    seed: u64,
) -> Result<f64, IdentError> {
    use rand::Rng;
    if truth.dim() != ansatz.dim() || lo.len() != ansatz.dim() || hi.len() != ansatz.dim() {
        return Err(PolyError::DimensionMismatch {
            expected: ansatz.dim(),
            found: truth.dim(),
        }
        .into());
    }
    if n_points == 0 {
        return Err(IdentError::Empty);
    }
    let mut rng = trajectory_rng(seed, 0);
    let mut acc = 0.0;
    for _ in 0..n_points {
        let x: Vec<f64> = lo
            .iter()
            .zip(hi)
            .map(|(&a, &b)| if a < b { rng.random_range(a..b) } else { a })
            .collect();
        let fi = ansatz.field(theta, psi, &x);
        let ft = truth.field(&x).map_err(|_| IdentError::NonFinite)?;
        acc += fi.iter().zip(&ft).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok((acc / n_points as f64).sqrt())
}
