//! Poisson structures, metriplectic systems, RK4 simulation and dataset
//! generation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{monomial_basis, CompiledPoly, MatrixStructure, PolyError, PolyMatrix, Polynomial};

/// Default bound on `|x|` before a simulation is declared divergent.
pub const DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("non-finite state or parameter")]
    NonFinite,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{expected:?} field requested from a {actual:?} system")]
    ModeMismatch { expected: Mode, actual: Mode },
    #[error("state norm {norm:e} exceeded the divergence bound after step {last_valid}")]
    Diverged { last_valid: usize, norm: f64 },
}

/// A skew-symmetric polynomial bivector `Pi(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonStructure {
    bivector: PolyMatrix,
}

impl PoissonStructure {
    /// Wraps a bivector; the matrix must be flagged skew.
    pub fn new(bivector: PolyMatrix) -> Result<Self, DynamicsError> {
        if bivector.structure() != MatrixStructure::Skew {
            return Err(DynamicsError::InvalidArgument(
                "Poisson bivector must be skew".into(),
            ));
        }
        if bivector.size() != bivector.dim_state() {
            return Err(PolyError::DimensionMismatch {
                expected: bivector.dim_state(),
                found: bivector.size(),
            }
            .into());
        }
        Ok(Self { bivector })
    }

    /// `[[0, I], [-I, 0]]` in `(q, p)` block order.
    pub fn canonical(n_pairs: usize) -> Result<Self, DynamicsError> {
        if n_pairs == 0 {
            return Err(DynamicsError::InvalidArgument("n_pairs must be >= 1".into()));
        }
        let n = 2 * n_pairs;
        let mut upper = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in i..n {
                let c = if i < n_pairs && j == i + n_pairs { 1.0 } else { 0.0 };
                upper.push(Polynomial::constant(n, c));
            }
        }
        Self::new(PolyMatrix::from_upper(n, n, MatrixStructure::Skew, upper)?)
    }

    /// Lie-Poisson structure on so(3)*: `Pi(p) v = p x v`.
    pub fn so3() -> Self {
        let v = |i| Polynomial::variable(3, i);
        let zero = Polynomial::zero(3);
        // p^x = [[0, -p3, p2], [p3, 0, -p1], [-p2, p1, 0]]
        let upper = vec![
            zero.clone(),
            -&v(2),
            v(1),
            zero.clone(),
            -&v(0),
            zero,
        ];
        Self::new(PolyMatrix::from_upper(3, 3, MatrixStructure::Skew, upper).expect("valid so3 bivector"))
            .expect("so3 bivector is skew")
    }

    pub fn dim(&self) -> usize {
        self.bivector.size()
    }

    pub fn bivector(&self) -> &PolyMatrix {
        &self.bivector
    }

    pub fn eval(&self, x: &[f64]) -> Result<DMatrix<f64>, DynamicsError> {
        Ok(self.bivector.eval(x)?)
    }

    /// `{f, g} = grad f' Pi grad g`.
    pub fn bracket(&self, f: &Polynomial, g: &Polynomial) -> Result<Polynomial, DynamicsError> {
        quadratic_form(&self.bivector, f, g)
    }
}

fn check_dim(expected: usize, found: usize) -> Result<(), DynamicsError> {
    if expected != found {
        return Err(PolyError::DimensionMismatch { expected, found }.into());
    }
    Ok(())
}

fn quadratic_form(m: &PolyMatrix, f: &Polynomial, g: &Polynomial) -> Result<Polynomial, DynamicsError> {
    check_dim(m.dim_state(), f.dim())?;
    check_dim(m.dim_state(), g.dim())?;
    let mg = m.mul_poly_vec(&g.grad())?;
    Ok(Polynomial::dot(&f.grad(), &mg)?)
}

pub fn poisson_bracket(
    f: &Polynomial,
    g: &Polynomial,
    poisson: &PoissonStructure,
) -> Result<Polynomial, DynamicsError> {
    poisson.bracket(f, g)
}

/// `(f, g) = grad f' K grad g` for a symmetric metric `K`.
pub fn symmetric_bracket(
    f: &Polynomial,
    g: &Polynomial,
    metric: &PolyMatrix,
) -> Result<Polynomial, DynamicsError> {
    if metric.structure() != MatrixStructure::Symmetric {
        return Err(DynamicsError::InvalidArgument("metric must be symmetric".into()));
    }
    quadratic_form(metric, f, g)
}

fn jacobi_sum(
    p: &PoissonStructure,
    f: &Polynomial,
    g: &Polynomial,
    h: &Polynomial,
) -> Result<Polynomial, DynamicsError> {
    let a = p.bracket(&p.bracket(f, g)?, h)?;
    let b = p.bracket(&p.bracket(h, f)?, g)?;
    let c = p.bracket(&p.bracket(g, h)?, f)?;
    Ok(&(&a + &b) + &c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobiReport {
    /// Largest |coefficient| of the Jacobi sum over coordinate triples.
    pub coordinate_residual: f64,
    /// Same over the random cubic triples.
    pub random_residual: f64,
    pub random_triples: usize,
}

impl JacobiReport {
    pub fn max_residual(&self) -> f64 {
        self.coordinate_residual.max(self.random_residual)
    }
}

/// Random polynomial of total degree `<= degree` with coefficients in [-1, 1].
pub fn random_polynomial<R: Rng>(dim: usize, degree: u32, rng: &mut R) -> Polynomial {
    let basis = monomial_basis(dim, degree);
    let coeffs: Vec<f64> = basis.iter().map(|_| rng.random_range(-1.0..=1.0)).collect();
    Polynomial::from_basis(dim, &basis, &coeffs)
}

/// Evaluates the Jacobi sum symbolically for all coordinate triples and for
/// `random_triples` random cubic triples.
pub fn check_jacobi(p: &PoissonStructure, random_triples: usize, seed: u64) -> JacobiReport {
    let n = p.dim();
    let mut coordinate_residual: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            for k in j..n {
                let (f, g, h) = (
                    Polynomial::variable(n, i),
                    Polynomial::variable(n, j),
                    Polynomial::variable(n, k),
                );
                let r = jacobi_sum(p, &f, &g, &h).expect("dims agree");
                coordinate_residual = coordinate_residual.max(r.max_abs_coeff());
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random_residual: f64 = 0.0;
    for _ in 0..random_triples {
        let f = random_polynomial(n, 3, &mut rng);
        let g = random_polynomial(n, 3, &mut rng);
        let h = random_polynomial(n, 3, &mut rng);
        let r = jacobi_sum(p, &f, &g, &h).expect("dims agree");
        random_residual = random_residual.max(r.max_abs_coeff());
    }
    JacobiReport {
        coordinate_residual,
        random_residual,
        random_triples,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// `x' = Pi grad H + K grad S`
    Classical,
    /// `x' = (Pi + K) grad (H + S)`
    Generalized,
}

#[derive(Debug, Clone)]
struct Compiled {
    grad_h: Vec<CompiledPoly>,
    grad_s: Vec<CompiledPoly>,
    grad_e: Vec<CompiledPoly>,
    h: CompiledPoly,
    s: CompiledPoly,
    pi: Vec<CompiledPoly>,
    k: Vec<CompiledPoly>,
}

#[derive(Debug, Clone)]
pub struct MetriplecticSystem {
    name: String,
    poisson: PoissonStructure,
    hamiltonian: Polynomial,
    entropy: Polynomial,
    metric: PolyMatrix,
    mode: Mode,
    compiled: Compiled,
}

impl MetriplecticSystem {
    pub fn new(
        name: impl Into<String>,
        poisson: PoissonStructure,
        hamiltonian: Polynomial,
        entropy: Polynomial,
        metric: PolyMatrix,
        mode: Mode,
    ) -> Result<Self, DynamicsError> {
        let n = poisson.dim();
        check_dim(n, hamiltonian.dim())?;
        check_dim(n, entropy.dim())?;
        check_dim(n, metric.dim_state())?;
        check_dim(n, metric.size())?;
        if metric.structure() != MatrixStructure::Symmetric {
            return Err(DynamicsError::InvalidArgument("metric must be symmetric".into()));
        }
        let e = &hamiltonian + &entropy;
        let compiled = Compiled {
            grad_h: hamiltonian.grad().iter().map(Polynomial::compile).collect(),
            grad_s: entropy.grad().iter().map(Polynomial::compile).collect(),
            grad_e: e.grad().iter().map(Polynomial::compile).collect(),
            h: hamiltonian.compile(),
            s: entropy.compile(),
            pi: poisson.bivector().compile(),
            k: metric.compile(),
        };
        Ok(Self {
            name: name.into(),
            poisson,
            hamiltonian,
            entropy,
            metric,
            mode,
            compiled,
        })
    }

    /// The two-dimensional example: `H = (q^2 + p^2)/2`,
    /// `E = -(p^2 + 4p^4 - 4q^4)^2 / 2`, `K = I`, `S = E - H`.
    pub fn demo2d() -> Self {
        let q = Polynomial::variable(2, 0);
        let p = Polynomial::variable(2, 1);
        let h = (&q.powi(2) + &p.powi(2)).scale(0.5);
        let g = &(&p.powi(2) + &p.powi(4).scale(4.0)) - &q.powi(4).scale(4.0);
        let e = g.powi(2).scale(-0.5);
        let s = &e - &h;
        Self::new(
            "demo2d",
            PoissonStructure::canonical(1).expect("n_pairs = 1"),
            h,
            s,
            PolyMatrix::identity(2, 2),
            Mode::Generalized,
        )
        .expect("consistent demo system")
    }

    /// Rigid body on so(3)*: `H = p' I^{-1} p / 2`, `E = -(|p|^2 - 1)^2 / 2`,
    /// `K = I`, `S = E - H`.
    pub fn so3(inertia: [f64; 3]) -> Result<Self, DynamicsError> {
        let h = so3_hamiltonian(inertia)?;
        let norm2 = (0..3).fold(Polynomial::zero(3), |acc, i| &acc + &Polynomial::variable(3, i).powi(2));
        let e = (&norm2 - &Polynomial::constant(3, 1.0)).powi(2).scale(-0.5);
        let s = &e - &h;
        Self::new(
            "so3",
            PoissonStructure::so3(),
            h,
            s,
            PolyMatrix::identity(3, 3),
            Mode::Generalized,
        )
    }

    /// Classical rigid body with entropy `S = |p|^2` (a Casimir of the
    /// cross-product bracket) and `K = |a|^2 I - a a'`, `a = I^{-1} p`, so
    /// that `K grad H = 0`.
    pub fn so3_classical(inertia: [f64; 3]) -> Result<Self, DynamicsError> {
        let h = so3_hamiltonian(inertia)?;
        let a: Vec<Polynomial> = (0..3)
            .map(|i| Polynomial::variable(3, i).scale(1.0 / inertia[i]))
            .collect();
        let a2 = a.iter().fold(Polynomial::zero(3), |acc, ai| &acc + &ai.powi(2));
        let mut upper = Vec::new();
        for i in 0..3 {
            for j in i..3 {
                let mut entry = -&(&a[i] * &a[j]);
                if i == j {
                    entry = &entry + &a2;
                }
                upper.push(entry);
            }
        }
        let k = PolyMatrix::from_upper(3, 3, MatrixStructure::Symmetric, upper)?;
        let s = (0..3).fold(Polynomial::zero(3), |acc, i| &acc + &Polynomial::variable(3, i).powi(2));
        Self::new("so3-classical", PoissonStructure::so3(), h, s, k, Mode::Classical)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.poisson.dim()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn poisson(&self) -> &PoissonStructure {
        &self.poisson
    }

    pub fn hamiltonian(&self) -> &Polynomial {
        &self.hamiltonian
    }

    pub fn entropy(&self) -> &Polynomial {
        &self.entropy
    }

    pub fn metric(&self) -> &PolyMatrix {
        &self.metric
    }

    /// `E = H + S`.
    pub fn free_energy(&self) -> Polynomial {
        &self.hamiltonian + &self.entropy
    }

    /// Same system with both `H` and `S` multiplied by `c`.
    pub fn scaled_potentials(&self, c: f64) -> Self {
        Self::new(
            self.name.clone(),
            self.poisson.clone(),
            self.hamiltonian.scale(c),
            self.entropy.scale(c),
            self.metric.clone(),
            self.mode,
        )
        .expect("scaling keeps dimensions")
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        let mut out = self.clone();
        out.mode = mode;
        out
    }

    fn check_point(&self, x: &[f64]) -> Result<(), DynamicsError> {
        check_dim(self.dim(), x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite);
        }
        Ok(())
    }

    fn eval_vec(polys: &[CompiledPoly], x: &[f64]) -> Vec<f64> {
        polys.iter().map(|p| p.eval(x)).collect()
    }

    fn mat_vec(entries: &[CompiledPoly], n: usize, x: &[f64], v: &[f64], out: &mut [f64]) {
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += entries[i * n + j].eval(x) * v[j];
            }
            out[i] += acc;
        }
    }

    pub fn grad_hamiltonian(&self, x: &[f64]) -> Vec<f64> {
        Self::eval_vec(&self.compiled.grad_h, x)
    }

    pub fn grad_entropy(&self, x: &[f64]) -> Vec<f64> {
        Self::eval_vec(&self.compiled.grad_s, x)
    }

    pub fn grad_free_energy(&self, x: &[f64]) -> Vec<f64> {
        Self::eval_vec(&self.compiled.grad_e, x)
    }

    /// `(H, S, E)` at `x`.
    pub fn potentials(&self, x: &[f64]) -> Diagnostics {
        let h = self.compiled.h.eval(x);
        let s = self.compiled.s.eval(x);
        Diagnostics { h, s, e: h + s }
    }

    /// `Pi grad H + K grad S`.
    pub fn classical_field(&self, x: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        if self.mode != Mode::Classical {
            return Err(DynamicsError::ModeMismatch {
                expected: Mode::Classical,
                actual: self.mode,
            });
        }
        self.check_point(x)?;
        Ok(self.classical_field_unchecked(x))
    }

    /// `(Pi + K)(grad H + grad S)`.
    pub fn generalized_field(&self, x: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        if self.mode != Mode::Generalized {
            return Err(DynamicsError::ModeMismatch {
                expected: Mode::Generalized,
                actual: self.mode,
            });
        }
        self.check_point(x)?;
        Ok(self.generalized_field_unchecked(x))
    }

    /// Field of the system's own mode.
    pub fn field(&self, x: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        self.check_point(x)?;
        Ok(self.field_unchecked(x))
    }

    fn classical_field_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let gh = self.grad_hamiltonian(x);
        let gs = self.grad_entropy(x);
        let mut out = vec![0.0; n];
        Self::mat_vec(&self.compiled.pi, n, x, &gh, &mut out);
        Self::mat_vec(&self.compiled.k, n, x, &gs, &mut out);
        out
    }

    fn generalized_field_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let ge = self.grad_free_energy(x);
        let mut out = vec![0.0; n];
        Self::mat_vec(&self.compiled.pi, n, x, &ge, &mut out);
        Self::mat_vec(&self.compiled.k, n, x, &ge, &mut out);
        out
    }

    pub(crate) fn field_unchecked(&self, x: &[f64]) -> Vec<f64> {
        match self.mode {
            Mode::Classical => self.classical_field_unchecked(x),
            Mode::Generalized => self.generalized_field_unchecked(x),
        }
    }

    /// `dE/dt = grad E' K grad E`.
    pub fn free_energy_rate(&self, x: &[f64]) -> Result<f64, DynamicsError> {
        self.check_point(x)?;
        let ge = self.grad_free_energy(x);
        let mut kge = vec![0.0; self.dim()];
        Self::mat_vec(&self.compiled.k, self.dim(), x, &ge, &mut kge);
        Ok(ge.iter().zip(&kge).map(|(a, b)| a * b).sum())
    }

    /// Smallest eigenvalue of `K(x)` over the given points.
    pub fn min_metric_eigenvalue(&self, points: &[Vec<f64>]) -> Result<f64, DynamicsError> {
        let mut worst = f64::INFINITY;
        for x in points {
            self.check_point(x)?;
            let k = self.metric.eval(x)?;
            worst = worst.min(k.symmetric_eigenvalues().min());
        }
        Ok(worst)
    }
}

fn so3_hamiltonian(inertia: [f64; 3]) -> Result<Polynomial, DynamicsError> {
    if inertia.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(DynamicsError::InvalidArgument(
            "inertia must be positive and finite".into(),
        ));
    }
    Ok((0..3).fold(Polynomial::zero(3), |acc, i| {
        &acc + &Polynomial::variable(3, i).powi(2).scale(0.5 / inertia[i])
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionsReport {
    /// `max |K grad H|`
    pub metric_on_energy: f64,
    /// `max |Pi grad S|`
    pub poisson_on_entropy: f64,
    pub tol: f64,
    pub classical_compatible: bool,
}

/// Checks the degeneracy conditions `K grad H = 0` and `Pi grad S = 0` at the
/// given points (Euclidean norms).
pub fn check_classical_conditions(
    sys: &MetriplecticSystem,
    points: &[Vec<f64>],
    tol: f64,
) -> Result<ConditionsReport, DynamicsError> {
    let n = sys.dim();
    let mut a: f64 = 0.0;
    let mut b: f64 = 0.0;
    for x in points {
        sys.check_point(x)?;
        let mut kgh = vec![0.0; n];
        MetriplecticSystem::mat_vec(&sys.compiled.k, n, x, &sys.grad_hamiltonian(x), &mut kgh);
        let mut pgs = vec![0.0; n];
        MetriplecticSystem::mat_vec(&sys.compiled.pi, n, x, &sys.grad_entropy(x), &mut pgs);
        a = a.max(norm2(&kgh));
        b = b.max(norm2(&pgs));
    }
    Ok(ConditionsReport {
        metric_on_energy: a,
        poisson_on_entropy: b,
        tol,
        classical_compatible: a <= tol && b <= tol,
    })
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub h: f64,
    pub s: f64,
    pub e: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub diagnostics: Vec<Diagnostics>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one sample")
    }

    pub fn final_diagnostics(&self) -> Diagnostics {
        *self.diagnostics.last().expect("trajectory has at least one sample")
    }

    /// Most negative step-to-step change of `E` (0 if never decreasing).
    pub fn worst_free_energy_decrease(&self) -> f64 {
        self.diagnostics
            .windows(2)
            .map(|w| w[1].e - w[0].e)
            .fold(0.0, f64::min)
    }

    /// Most negative step-to-step change of `S`.
    pub fn worst_entropy_decrease(&self) -> f64 {
        self.diagnostics
            .windows(2)
            .map(|w| w[1].s - w[0].s)
            .fold(0.0, f64::min)
    }

    /// `max |H(t) - H(0)|`.
    pub fn hamiltonian_drift(&self) -> f64 {
        let h0 = self.diagnostics[0].h;
        self.diagnostics
            .iter()
            .map(|d| (d.h - h0).abs())
            .fold(0.0, f64::max)
    }
}

/// One classical fourth-order Runge-Kutta step.
pub fn rk4_step(sys: &MetriplecticSystem, x: &[f64], dt: f64) -> Vec<f64> {
    let n = x.len();
    let k1 = sys.field_unchecked(x);
    let tmp: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * dt * k1[i]).collect();
    let k2 = sys.field_unchecked(&tmp);
    let tmp: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * dt * k2[i]).collect();
    let k3 = sys.field_unchecked(&tmp);
    let tmp: Vec<f64> = (0..n).map(|i| x[i] + dt * k3[i]).collect();
    let k4 = sys.field_unchecked(&tmp);
    (0..n)
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

fn check_sim_args(sys: &MetriplecticSystem, x0: &[f64], dt: f64, n_steps: usize) -> Result<(), DynamicsError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(DynamicsError::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if n_steps == 0 {
        return Err(DynamicsError::InvalidArgument("n_steps must be >= 1".into()));
    }
    sys.check_point(x0)
}

pub fn rk4_simulate(
    sys: &MetriplecticSystem,
    x0: &[f64],
    dt: f64,
    n_steps: usize,
) -> Result<Trajectory, DynamicsError> {
    rk4_simulate_bounded(sys, x0, dt, n_steps, DIVERGENCE_BOUND)
}

/// Fixed-step RK4 on the system's field; `n_steps + 1` samples including `x0`.
pub fn rk4_simulate_bounded(
    sys: &MetriplecticSystem,
    x0: &[f64],
    dt: f64,
    n_steps: usize,
    bound: f64,
) -> Result<Trajectory, DynamicsError> {
    check_sim_args(sys, x0, dt, n_steps)?;
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut diagnostics = Vec::with_capacity(n_steps + 1);
    let mut x = x0.to_vec();
    times.push(0.0);
    diagnostics.push(sys.potentials(&x));
    states.push(x.clone());
    for k in 1..=n_steps {
        x = rk4_step(sys, &x, dt);
        let norm = norm2(&x);
        if !(norm <= bound) {
            return Err(DynamicsError::Diverged {
                last_valid: k - 1,
                norm,
            });
        }
        times.push(k as f64 * dt);
        diagnostics.push(sys.potentials(&x));
        states.push(x.clone());
    }
    Ok(Trajectory {
        times,
        states,
        diagnostics,
    })
}

/// Where initial conditions are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SamplingRegion {
    /// Uniform over the axis-aligned box `[lo, hi]`.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Uniform (by volume) over `r_min <= |x| <= r_max`.
    Shell { dim: usize, r_min: f64, r_max: f64 },
}

impl SamplingRegion {
    pub fn square(dim: usize, half_width: f64) -> Self {
        SamplingRegion::Box {
            lo: vec![-half_width; dim],
            hi: vec![half_width; dim],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SamplingRegion::Box { lo, .. } => lo.len(),
            SamplingRegion::Shell { dim, .. } => *dim,
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let ok = match self {
            SamplingRegion::Box { lo, hi } => {
                !lo.is_empty()
                    && lo.len() == hi.len()
                    && lo.iter().zip(hi).all(|(a, b)| a.is_finite() && b.is_finite() && a < b)
            }
            SamplingRegion::Shell { dim, r_min, r_max } => {
                *dim > 0 && *r_min >= 0.0 && r_min < r_max && r_max.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(DynamicsError::InvalidArgument(format!("empty sampling region {self:?}")))
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            SamplingRegion::Box { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(&a, &b)| rng.random_range(a..b))
                .collect(),
            SamplingRegion::Shell { dim, r_min, r_max } => {
                let dir: Vec<f64> = loop {
                    let v: Vec<f64> = (0..*dim).map(|_| rng.sample(StandardNormal)).collect();
                    let nv = norm2(&v);
                    if nv > 1e-12 {
                        break v.iter().map(|x| x / nv).collect();
                    }
                };
                let d = *dim as i32;
                let u: f64 = rng.random();
                let r = (r_min.powi(d) + u * (r_max.powi(d) - r_min.powi(d))).powf(1.0 / d as f64);
                dir.iter().map(|x| x * r).collect()
            }
        }
    }

    /// Axis-aligned bounding box `(lo, hi)`.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            SamplingRegion::Box { lo, hi } => (lo.clone(), hi.clone()),
            SamplingRegion::Shell { dim, r_max, .. } => (vec![-r_max; *dim], vec![*r_max; *dim]),
        }
    }
}

/// Independent RNG stream for trajectory `index` of a seeded experiment.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMode {
    /// `xdot` is the generating field evaluated at the sample.
    #[default]
    Exact,
    /// Central difference of neighbouring RK4 states.
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_trajectories: usize,
    pub n_samples_per: usize,
    /// RK4 steps between consecutive recorded samples of a trajectory.
    pub stride: usize,
    pub dt: f64,
    pub region: SamplingRegion,
    pub seed: u64,
    #[serde(default)]
    pub derivative: DerivativeMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub xdot: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub system: String,
    pub mode: Mode,
    pub seed: u64,
    pub region: SamplingRegion,
    pub dt: f64,
    pub n_trajectories: usize,
    pub n_samples_per: usize,
    pub stride: usize,
    pub derivative: DerivativeMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub dim: usize,
    pub samples: Vec<Sample>,
    pub provenance: Provenance,
}

impl TrajectoryDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        for s in &self.samples {
            check_dim(self.dim, s.x.len())?;
            check_dim(self.dim, s.xdot.len())?;
            if s.x.iter().chain(&s.xdot).any(|v| !v.is_finite()) {
                return Err(DynamicsError::NonFinite);
            }
        }
        Ok(())
    }

    /// Smallest box containing every sample state.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for s in &self.samples {
            for i in 0..self.dim {
                lo[i] = lo[i].min(s.x[i]);
                hi[i] = hi[i].max(s.x[i]);
            }
        }
        (lo, hi)
    }
}

/// Simulates `n_trajectories` seeded trajectories and records
/// `n_samples_per` states from each, `stride` steps apart.
pub fn generate_dataset(
    sys: &MetriplecticSystem,
    spec: &DatasetSpec,
) -> Result<TrajectoryDataset, DynamicsError> {
    if spec.n_trajectories == 0 || spec.n_samples_per == 0 {
        return Err(DynamicsError::InvalidArgument("sample counts must be >= 1".into()));
    }
    if spec.n_samples_per > 1 && spec.stride == 0 {
        return Err(DynamicsError::InvalidArgument(
            "stride must be >= 1 when recording several samples per trajectory".into(),
        ));
    }
    if !(spec.dt > 0.0) || !spec.dt.is_finite() {
        return Err(DynamicsError::InvalidArgument(format!("dt must be positive, got {}", spec.dt)));
    }
    spec.region.validate()?;
    check_dim(sys.dim(), spec.region.dim())?;

    let fd = spec.derivative == DerivativeMode::FiniteDifference;
    // finite differences need a neighbour on each side of every sample
    let offset = usize::from(fd);
    let last_step = offset + (spec.n_samples_per - 1) * spec.stride + offset;

    let per_traj: Vec<Result<Vec<Sample>, DynamicsError>> = (0..spec.n_trajectories)
        .into_par_iter()
        .map(|t| {
            let mut rng = trajectory_rng(spec.seed, t as u64);
            let x0 = spec.region.sample(&mut rng);
            let states = if last_step == 0 {
                vec![x0]
            } else {
                rk4_simulate(sys, &x0, spec.dt, last_step)?.states
            };
            Ok((0..spec.n_samples_per)
                .map(|j| {
                    let k = offset + j * spec.stride;
                    let x = states[k].clone();
                    let xdot = if fd {
                        (0..x.len())
                            .map(|i| (states[k + 1][i] - states[k - 1][i]) / (2.0 * spec.dt))
                            .collect()
                    } else {
                        sys.field_unchecked(&x)
                    };
                    Sample { x, xdot }
                })
                .collect())
        })
        .collect();
    let mut samples = Vec::with_capacity(spec.n_trajectories * spec.n_samples_per);
    for r in per_traj {
        samples.extend(r?);
    }
    let ds = TrajectoryDataset {
        dim: sys.dim(),
        samples,
        provenance: Provenance {
            system: sys.name().to_string(),
            mode: sys.mode(),
            seed: spec.seed,
            region: spec.region.clone(),
            dt: spec.dt,
            n_trajectories: spec.n_trajectories,
            n_samples_per: spec.n_samples_per,
            stride: spec.stride,
            derivative: spec.derivative,
        },
    };
    ds.validate()?;
    Ok(ds)
}

/// Max-norm of `xdot - field(x)` over the dataset.
pub fn self_residual(sys: &MetriplecticSystem, ds: &TrajectoryDataset) -> Result<f64, DynamicsError> {
    let mut worst: f64 = 0.0;
    for s in &ds.samples {
        let f = sys.field(&s.x)?;
        for (a, b) in f.iter().zip(&s.xdot) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// `grad E' Pi grad E` at `x`; zero up to round-off for any skew `Pi`.
pub fn skew_residual(sys: &MetriplecticSystem, x: &[f64]) -> Result<f64, DynamicsError> {
    sys.check_point(x)?;
    let ge = DVector::from_vec(sys.grad_free_energy(x));
    let pi = sys.poisson().eval(x)?;
    Ok(ge.dot(&(pi * &ge)))
}
