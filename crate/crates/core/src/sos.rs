//! Sum-of-squares certificates for `eta I >= K(x) >= 0`.
//!
//! With `y` an auxiliary vector, `y'K(x)y` is written as `z'Qz` over the basis
//! `z = (y_i m(x))` where `m` runs over monomials of degree `<= s/2`. `Q >= 0`
//! certifies `K(x) >= 0` for every `x`; a second Gram matrix does the same for
//! `eta I - K(x)`.

use std::collections::BTreeMap;

use conic::{BlockHandle, BuildError, Cone, ProgramBuilder};
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::trajectory_rng;
use crate::poly::{monomial_basis, ExponentVector, MatrixStructure, PolyMatrix, Polynomial};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SosError {
    #[error("metric degree {0} is odd; use {next} instead", next = .0 + 1)]
    OddDegree(u32),
    #[error("eta must be positive, got {0}")]
    NonPositiveEta(f64),
    #[error("expected {expected} metric coefficients, found {found}")]
    ThetaLength { expected: usize, found: usize },
    #[error("metric entry ({0}, {1}) has a monomial outside the degree-s basis")]
    OutsideBasis(usize, usize),
    #[error(transparent)]
    Build(#[from] BuildError),
}

/// Polynomial metric `K(x)` with entries in the full monomial basis of
/// degree `<= s`. Only the upper triangle carries coefficients; pairs are
/// ordered row by row and coefficients are stored pair-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricParam {
    n: usize,
    s: u32,
    basis: Vec<ExponentVector>,
}

impl MetricParam {
    pub fn new(n: usize, s: u32) -> Self {
        Self {
            n,
            s,
            basis: monomial_basis(n, s),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn degree(&self) -> u32 {
        self.s
    }

    pub fn basis(&self) -> &[ExponentVector] {
        &self.basis
    }

    pub fn num_pairs(&self) -> usize {
        self.n * (self.n + 1) / 2
    }

    pub fn num_theta(&self) -> usize {
        self.num_pairs() * self.basis.len()
    }

    /// Upper-triangle pairs `(i, j)`, `i <= j`, in coefficient order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|i| (i..self.n).map(move |j| (i, j)))
            .collect()
    }

    pub fn pair_index(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        i * self.n - i * (i + 1) / 2 + j
    }

    pub fn theta_index(&self, pair: usize, k: usize) -> usize {
        pair * self.basis.len() + k
    }

    fn check_len(&self, theta: &[f64]) -> Result<(), SosError> {
        if theta.len() != self.num_theta() {
            return Err(SosError::ThetaLength {
                expected: self.num_theta(),
                found: theta.len(),
            });
        }
        Ok(())
    }

    pub fn metric(&self, theta: &[f64]) -> Result<PolyMatrix, SosError> {
        self.check_len(theta)?;
        let l = self.basis.len();
        let upper = (0..self.num_pairs())
            .map(|p| Polynomial::from_basis(self.n, &self.basis, &theta[p * l..(p + 1) * l]))
            .collect();
        Ok(PolyMatrix::from_upper(self.n, self.n, MatrixStructure::Symmetric, upper)
            .expect("upper triangle has the right shape"))
    }

    /// Coefficients of a symmetric polynomial matrix in this parameterization.
    pub fn theta_of(&self, k: &PolyMatrix) -> Result<Vec<f64>, SosError> {
        let mut theta = Vec::with_capacity(self.num_theta());
        for (i, j) in self.pairs() {
            let c = k
                .entry(i, j)
                .coefficients_in(&self.basis)
                .map_err(|_| SosError::OutsideBasis(i, j))?;
            theta.extend(c);
        }
        Ok(theta)
    }

    /// `theta` for `c * I`.
    pub fn scaled_identity(&self, c: f64) -> Vec<f64> {
        let mut theta = vec![0.0; self.num_theta()];
        for i in 0..self.n {
            theta[self.theta_index(self.pair_index(i, i), 0)] = c;
        }
        theta
    }

    /// Monomial values `phi_k(x)`.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        self.basis.iter().map(|e| e.eval(x)).collect()
    }

    pub fn eval(&self, theta: &[f64], x: &[f64]) -> DMatrix<f64> {
        self.eval_with_features(theta, &self.features(x))
    }

    pub fn eval_with_features(&self, theta: &[f64], phi: &[f64]) -> DMatrix<f64> {
        let l = self.basis.len();
        let mut m = DMatrix::zeros(self.n, self.n);
        for (p, (i, j)) in self.pairs().into_iter().enumerate() {
            let v: f64 = theta[p * l..(p + 1) * l].iter().zip(phi).map(|(a, b)| a * b).sum();
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        m
    }
}

/// Basis `z_a = y_i m_alpha(x)` of the Gram matrices, `y_i`-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GramBasis {
    n: usize,
    state_monomials: Vec<ExponentVector>,
    // (i, index into state_monomials) for every kept element
    elements: Vec<(usize, usize)>,
}

impl GramBasis {
    pub fn new(n: usize, s: u32) -> Result<Self, SosError> {
        if s % 2 != 0 {
            return Err(SosError::OddDegree(s));
        }
        let state_monomials = monomial_basis(n, s / 2);
        let l = state_monomials.len();
        Ok(Self {
            n,
            state_monomials,
            elements: (0..n).flat_map(|i| (0..l).map(move |k| (i, k))).collect(),
        })
    }

    /// Basis for the two-sided constraint `eta I >= K(x) >= 0` with every
    /// element removed whose diagonal Gram entry is forced to zero.
    ///
    /// If `y_i^2 x^(2 alpha)`, `alpha != 0`, is produced only by the diagonal
    /// cell of `y_i x^alpha`, the two coupling rows give
    /// `Q+_aa = -Q-_aa`, so both vanish and so does the whole row of each PSD
    /// matrix. Repeating until nothing changes leaves a program with the
    /// same feasible `theta` and a strictly feasible point, which the full
    /// basis lacks whenever `s > 0`.
    pub fn reduced(n: usize, s: u32) -> Result<Self, SosError> {
        let mut basis = Self::new(n, s)?;
        loop {
            let support = basis.monomial_support();
            let drop = (0..basis.block_dim()).find(|&a| {
                let (i, m) = basis.element(a);
                !m.is_constant()
                    && support
                        .get(&(i, i, m.product(m)))
                        .is_some_and(|cells| cells.as_slice() == [(a, a)])
            });
            match drop {
                Some(a) => {
                    basis.elements.remove(a);
                }
                None => return Ok(basis),
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn state_monomials(&self) -> &[ExponentVector] {
        &self.state_monomials
    }

    pub fn block_dim(&self) -> usize {
        self.elements.len()
    }

    /// `(i, m)` for basis element `a`.
    pub fn element(&self, a: usize) -> (usize, &ExponentVector) {
        let (i, k) = self.elements[a];
        (i, &self.state_monomials[k])
    }

    /// Monomials `y_i y_j x^gamma` (`i <= j`) of `z'Qz`, each with the Gram
    /// positions `(a, b)`, `a >= b`, that contribute to it.
    pub fn monomial_support(&self) -> BTreeMap<(usize, usize, ExponentVector), Vec<(usize, usize)>> {
        let d = self.block_dim();
        let mut out: BTreeMap<_, Vec<_>> = BTreeMap::new();
        for a in 0..d {
            for b in 0..=a {
                let (ia, ma) = self.element(a);
                let (ib, mb) = self.element(b);
                let key = (ia.min(ib), ia.max(ib), ma.product(mb));
                out.entry(key).or_default().push((a, b));
            }
        }
        out
    }
}

/// Variables and rows added to a program by the certificate builders.
#[derive(Debug, Clone)]
pub struct SosCertificate {
    pub basis: GramBasis,
    /// Gram matrix of `y'K(x)y`.
    pub gram_plus: BlockHandle,
    /// Gram matrix of `y'(eta I - K(x))y`, absent for one-sided certificates.
    pub gram_minus: Option<BlockHandle>,
    /// Equality rows, one per monomial and Gram matrix. Monomials with no
    /// Gram cell in a reduced basis get a single row pinning `theta` to 0.
    pub coupling_rows: Vec<usize>,
}

impl SosCertificate {
    /// Packed values of the lower Gram matrix in a primal point.
    pub fn gram_plus_values(&self, primal: &[f64]) -> Vec<f64> {
        (0..self.gram_plus.len()).map(|k| primal[self.gram_plus.var(k)]).collect()
    }
}

fn check_theta_vars(param: &MetricParam, theta_vars: &[usize]) -> Result<(), SosError> {
    if theta_vars.len() != param.num_theta() {
        return Err(SosError::ThetaLength {
            expected: param.num_theta(),
            found: theta_vars.len(),
        });
    }
    Ok(())
}

/// Adds two PSD Gram blocks of dimension `n * C(n + s/2, s/2)` and the
/// coefficient-matching equalities that make `y'K(x)y` and
/// `y'(eta I - K(x))y` sums of squares. `theta_vars[t]` is the program
/// variable holding coefficient `t` of `param`.
pub fn build_sos_constraints(
    builder: &mut ProgramBuilder,
    param: &MetricParam,
    eta: f64,
    theta_vars: &[usize],
) -> Result<SosCertificate, SosError> {
    let basis = GramBasis::new(param.dim(), param.degree())?;
    build_with_basis(builder, param, Some(eta), theta_vars, basis)
}

/// Same feasible set as [`build_sos_constraints`] over the basis of
/// [`GramBasis::reduced`]. This is the form to hand to an interior-point
/// solver.
pub fn build_sos_constraints_reduced(
    builder: &mut ProgramBuilder,
    param: &MetricParam,
    eta: f64,
    theta_vars: &[usize],
) -> Result<SosCertificate, SosError> {
    let basis = GramBasis::reduced(param.dim(), param.degree())?;
    build_with_basis(builder, param, Some(eta), theta_vars, basis)
}

/// Only the lower certificate, `y'K(x)y` SOS.
pub fn build_psd_constraints(
    builder: &mut ProgramBuilder,
    param: &MetricParam,
    theta_vars: &[usize],
) -> Result<SosCertificate, SosError> {
    let basis = GramBasis::new(param.dim(), param.degree())?;
    build_with_basis(builder, param, None, theta_vars, basis)
}

fn build_with_basis(
    builder: &mut ProgramBuilder,
    param: &MetricParam,
    eta: Option<f64>,
    theta_vars: &[usize],
    basis: GramBasis,
) -> Result<SosCertificate, SosError> {
    if let Some(eta) = eta {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(SosError::NonPositiveEta(eta));
        }
    }
    check_theta_vars(param, theta_vars)?;
    let support = basis.monomial_support();
    let d = basis.block_dim();
    let gram_plus = builder.add_var_block(Cone::Psd(d));
    let gram_minus = eta.map(|_| builder.add_var_block(Cone::Psd(d)));
    let mut coupling_rows = Vec::with_capacity(2 * param.num_theta());
    let gram_terms = |h: &BlockHandle, cells: &[(usize, usize)]| -> Vec<(usize, f64)> {
        cells
            .iter()
            .map(|&(a, b)| {
                let (idx, m) = h.psd_entry(a, b);
                // off-diagonal cells occur twice in z'Qz
                (idx, if a == b { m } else { 2.0 * m })
            })
            .collect()
    };
    let no_cells: Vec<(usize, usize)> = Vec::new();
    for (p, (i, j)) in param.pairs().into_iter().enumerate() {
        let mult = if i == j { 1.0 } else { 2.0 };
        for (k, gamma) in param.basis().iter().enumerate() {
            let t = theta_vars[param.theta_index(p, k)];
            let cells = support.get(&(i, j, gamma.clone())).unwrap_or(&no_cells);
            if cells.is_empty() && gram_minus.is_some() {
                coupling_rows.push(builder.add_equality([(t, mult)], 0.0)?);
                continue;
            }
            let mut row = gram_terms(&gram_plus, cells);
            row.push((t, -mult));
            coupling_rows.push(builder.add_equality(row, 0.0)?);
            if let (Some(h), Some(eta)) = (&gram_minus, eta) {
                let mut row = gram_terms(h, cells);
                row.push((t, mult));
                let rhs = if i == j && gamma.is_constant() { eta } else { 0.0 };
                coupling_rows.push(builder.add_equality(row, rhs)?);
            }
        }
    }
    Ok(SosCertificate {
        basis,
        gram_plus,
        gram_minus,
        coupling_rows,
    })
}

/// Coefficients of `z'Qz` for a packed Gram matrix, expressed in the metric
/// parameterization (so a consistent certificate reproduces `theta`).
pub fn theta_from_gram(param: &MetricParam, basis: &GramBasis, packed: &[f64]) -> Vec<f64> {
    let d = basis.block_dim();
    let full = conic::unpack_symmetric(d, packed);
    let mut theta = vec![0.0; param.num_theta()];
    for ((i, j, gamma), cells) in basis.monomial_support() {
        let k = param.basis().iter().position(|e| *e == gamma).expect("in basis");
        let mut c = 0.0;
        for (a, b) in cells {
            c += if a == b { full[a * d + b] } else { 2.0 * full[a * d + b] };
        }
        let mult = if i == j { 1.0 } else { 2.0 };
        theta[param.theta_index(param.pair_index(i, j), k)] = c / mult;
    }
    theta
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub n_samples: usize,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    /// `min_eigenvalue` (distance above 0).
    pub lower_margin: f64,
    /// `eta - max_eigenvalue`.
    pub upper_margin: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Samples `K(x)` uniformly over the box `[lo, hi]` and checks
/// `-tol <= eig(K(x)) <= eta + tol`.
pub fn verify_certificate(
    param: &MetricParam,
    theta: &[f64],
    eta: f64,
    n_samples: usize,
    seed: u64,
    lo: &[f64],
    hi: &[f64],
) -> Result<CertificateReport, SosError> {
    param.check_len(theta)?;
    const TOL: f64 = 1e-6;
    let mut rng = trajectory_rng(seed, 0);
    let mut min_eig = f64::INFINITY;
    let mut max_eig = f64::NEG_INFINITY;
    for _ in 0..n_samples {
        let x: Vec<f64> = lo
            .iter()
            .zip(hi)
            .map(|(&a, &b)| if a < b { rng.random_range(a..b) } else { a })
            .collect();
        let eig = param.eval(theta, &x).symmetric_eigenvalues();
        min_eig = min_eig.min(eig.min());
        max_eig = max_eig.max(eig.max());
    }
    Ok(CertificateReport {
        n_samples,
        min_eigenvalue: min_eig,
        max_eigenvalue: max_eig,
        lower_margin: min_eig,
        upper_margin: eta - max_eig,
        tol: TOL,
        passed: min_eig >= -TOL && max_eig <= eta + TOL,
    })
}
