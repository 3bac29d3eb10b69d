//! Sparse multivariate polynomials over `f64`, polynomial matrices and the
//! graded monomial bases used to parameterize entropies and metrics.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolyError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite coefficient in term {0}")]
    NonFiniteCoefficient(String),
    #[error("polynomial matrix is {size}x{size} but {found} entries were given")]
    EntryCount { size: usize, found: usize },
    #[error("entry ({row}, {col}) breaks the declared {structure:?} structure")]
    Structure {
        row: usize,
        col: usize,
        structure: MatrixStructure,
    },
}

/// Exponents of each state variable in a monomial.
///
/// Ordered graded-lexicographically: lower total degree first, and within a
/// degree the larger power of `x1` first, so `1 < x1 < x2 < x1^2 < x1 x2 < x2^2`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExponentVector(Vec<u32>);

impl ExponentVector {
    pub fn new(exponents: Vec<u32>) -> Self {
        Self(exponents)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0; dim])
    }

    /// Exponent vector of the single variable `x_index`.
    pub fn unit(dim: usize, index: usize) -> Self {
        let mut e = vec![0; dim];
        e[index] = 1;
        Self(e)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn is_constant(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    /// Componentwise sum, i.e. the exponent of the product monomial.
    pub fn product(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(x)
            .filter(|(&e, _)| e > 0)
            .map(|(&e, &xi)| xi.powi(e as i32))
            .product()
    }
}

impl Ord for ExponentVector {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for ExponentVector {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for ExponentVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_constant() {
            return write!(f, "1");
        }
        let mut first = true;
        for (i, &e) in self.0.iter().enumerate() {
            if e == 0 {
                continue;
            }
            if !first {
                write!(f, "*")?;
            }
            first = false;
            write!(f, "x{}", i + 1)?;
            if e > 1 {
                write!(f, "^{e}")?;
            }
        }
        Ok(())
    }
}

/// All monomials in `n` variables of total degree `<= r`, graded-lex ordered.
/// The first entry is the constant monomial; the length is `C(n + r, r)`.
pub fn monomial_basis(n: usize, r: u32) -> Vec<ExponentVector> {
    assert!(n >= 1, "monomial basis needs at least one variable");
    let mut out = Vec::new();
    for d in 0..=r {
        let mut current = vec![0u32; n];
        push_compositions(&mut current, 0, d, &mut out);
    }
    out
}

// Emits exponent vectors of exact degree `remaining` over positions `pos..`,
// largest power of the earliest variable first.
fn push_compositions(
    current: &mut Vec<u32>,
    pos: usize,
    remaining: u32,
    out: &mut Vec<ExponentVector>,
) {
    let n = current.len();
    if pos == n - 1 {
        current[pos] = remaining;
        out.push(ExponentVector(current.clone()));
        current[pos] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e;
        push_compositions(current, pos + 1, remaining - e, out);
    }
    current[pos] = 0;
}

/// One `{"exponents": [...], "coeff": c}` record of the polynomial text form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyRecord {
    pub exponents: Vec<u32>,
    pub coeff: f64,
}

/// Sparse polynomial: exponent vector -> coefficient, no stored exact zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    dim: usize,
    terms: BTreeMap<ExponentVector, f64>,
}

impl Polynomial {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        Self::monomial(ExponentVector::zeros(dim), c)
    }

    /// The coordinate function `x_index`.
    pub fn variable(dim: usize, index: usize) -> Self {
        Self::monomial(ExponentVector::unit(dim, index), 1.0)
    }

    pub fn monomial(exponents: ExponentVector, coeff: f64) -> Self {
        let mut p = Self::zero(exponents.dim());
        p.add_term(exponents, coeff);
        p
    }

    /// Builds a polynomial from `(exponents, coeff)` pairs, collecting like terms.
    pub fn from_terms<I>(dim: usize, terms: I) -> Result<Self, PolyError>
    where
        I: IntoIterator<Item = (ExponentVector, f64)>,
    {
        let mut p = Self::zero(dim);
        for (e, c) in terms {
            if e.dim() != dim {
                return Err(PolyError::DimensionMismatch {
                    expected: dim,
                    found: e.dim(),
                });
            }
            if !c.is_finite() {
                return Err(PolyError::NonFiniteCoefficient(e.to_string()));
            }
            p.add_term(e, c);
        }
        Ok(p)
    }

    /// Linear combination `sum_k coeffs[k] * basis[k]`.
    pub fn from_basis(dim: usize, basis: &[ExponentVector], coeffs: &[f64]) -> Self {
        assert_eq!(basis.len(), coeffs.len(), "basis/coefficient length");
        let mut p = Self::zero(dim);
        for (e, &c) in basis.iter().zip(coeffs) {
            debug_assert_eq!(e.dim(), dim);
            p.add_term(e.clone(), c);
        }
        p
    }

    pub fn from_records(dim: usize, records: &[PolyRecord]) -> Result<Self, PolyError> {
        Self::from_terms(
            dim,
            records
                .iter()
                .map(|r| (ExponentVector::new(r.exponents.clone()), r.coeff)),
        )
    }

    /// Text form, graded-lex ordered.
    pub fn to_records(&self) -> Vec<PolyRecord> {
        self.terms
            .iter()
            .map(|(e, &c)| PolyRecord {
                exponents: e.0.clone(),
                coeff: c,
            })
            .collect()
    }

    /// Coefficients against an explicit basis. Terms outside the basis are
    /// reported as an error so that no information is silently dropped.
    pub fn coefficients_in(&self, basis: &[ExponentVector]) -> Result<Vec<f64>, ExponentVector> {
        let mut out = vec![0.0; basis.len()];
        let index: BTreeMap<&ExponentVector, usize> =
            basis.iter().enumerate().map(|(k, e)| (e, k)).collect();
        for (e, &c) in &self.terms {
            match index.get(e) {
                Some(&k) => out[k] = c,
                None => return Err(e.clone()),
            }
        }
        Ok(out)
    }

    fn add_term(&mut self, e: ExponentVector, c: f64) {
        if c == 0.0 {
            return;
        }
        let entry = self.terms.entry(e);
        match entry {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(c);
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                let sum = *o.get() + c;
                if sum == 0.0 {
                    o.remove();
                } else {
                    *o.get_mut() = sum;
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&ExponentVector, f64)> {
        self.terms.iter().map(|(e, &c)| (e, c))
    }

    pub fn coeff(&self, e: &ExponentVector) -> f64 {
        self.terms.get(e).copied().unwrap_or(0.0)
    }

    /// Total degree; the zero polynomial has degree 0.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|e| e.degree()).max().unwrap_or(0)
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |m, c| m.max(c.abs()))
    }

    /// Drops terms with `|coeff| <= threshold`. Used only at reporting time.
    pub fn pruned(&self, threshold: f64) -> Self {
        Self {
            dim: self.dim,
            terms: self
                .terms
                .iter()
                .filter(|(_, c)| c.abs() > threshold)
                .map(|(e, &c)| (e.clone(), c))
                .collect(),
        }
    }

    fn check_dim(&self, found: usize) -> Result<(), PolyError> {
        if found != self.dim {
            Err(PolyError::DimensionMismatch {
                expected: self.dim,
                found,
            })
        } else {
            Ok(())
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, PolyError> {
        self.check_dim(x.len())?;
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(e, &c)| c * e.eval(x)).sum()
    }

    /// Exact partial derivative with respect to `x_index`.
    pub fn partial(&self, index: usize) -> Self {
        let mut out = Self::zero(self.dim);
        for (e, &c) in &self.terms {
            let k = e.0[index];
            if k == 0 {
                continue;
            }
            let mut d = e.0.clone();
            d[index] -= 1;
            out.add_term(ExponentVector(d), c * k as f64);
        }
        out
    }

    pub fn grad(&self) -> Vec<Polynomial> {
        (0..self.dim).map(|i| self.partial(i)).collect()
    }

    pub fn checked_add(&self, other: &Self) -> Result<Self, PolyError> {
        self.check_dim(other.dim)?;
        let mut out = self.clone();
        for (e, &c) in &other.terms {
            out.add_term(e.clone(), c);
        }
        Ok(out)
    }

    pub fn checked_sub(&self, other: &Self) -> Result<Self, PolyError> {
        self.checked_add(&other.scale(-1.0))
    }

    pub fn checked_mul(&self, other: &Self) -> Result<Self, PolyError> {
        self.check_dim(other.dim)?;
        let mut out = Self::zero(self.dim);
        for (ea, &ca) in &self.terms {
            for (eb, &cb) in &other.terms {
                out.add_term(ea.product(eb), ca * cb);
            }
        }
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> Self {
        if c == 0.0 {
            return Self::zero(self.dim);
        }
        Self {
            dim: self.dim,
            terms: self
                .terms
                .iter()
                .map(|(e, &v)| (e.clone(), v * c))
                .filter(|(_, v)| *v != 0.0)
                .collect(),
        }
    }

    pub fn powi(&self, k: u32) -> Self {
        let mut out = Self::constant(self.dim, 1.0);
        for _ in 0..k {
            out = &out * self;
        }
        out
    }

    /// Inner product `sum_i a[i] * b[i]` of two polynomial vectors.
    pub fn dot(a: &[Polynomial], b: &[Polynomial]) -> Result<Self, PolyError> {
        let dim = a.first().map(|p| p.dim).unwrap_or(0);
        let mut out = Self::zero(dim);
        for (p, q) in a.iter().zip(b) {
            out = out.checked_add(&p.checked_mul(q)?)?;
        }
        Ok(out)
    }

    /// Compiled form for repeated evaluation in inner loops.
    pub fn compile(&self) -> CompiledPoly {
        CompiledPoly {
            dim: self.dim,
            terms: self
                .terms
                .iter()
                .map(|(e, &c)| {
                    (
                        e.0.iter()
                            .enumerate()
                            .filter(|(_, &k)| k > 0)
                            .map(|(i, &k)| (i, k as i32))
                            .collect(),
                        c,
                    )
                })
                .collect(),
        }
    }
}

// Operator sugar for internal algebra where dimensions are known to agree.
// Mismatched dimensions panic; use the `checked_*` methods on untrusted input.
impl std::ops::Add for &Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: &Polynomial) -> Polynomial {
        self.checked_add(rhs).expect("polynomial dimensions agree")
    }
}

impl std::ops::Sub for &Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        self.checked_sub(rhs).expect("polynomial dimensions agree")
    }
}

impl std::ops::Mul for &Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        self.checked_mul(rhs).expect("polynomial dimensions agree")
    }
}

impl std::ops::Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (k, (e, c)) in self.terms.iter().enumerate() {
            if k > 0 {
                write!(f, " + ")?;
            }
            if e.is_constant() {
                write!(f, "{c}")?;
            } else {
                write!(f, "{c}*{e}")?;
            }
        }
        Ok(())
    }
}

/// Flattened polynomial for fast evaluation.
#[derive(Debug, Clone)]
pub struct CompiledPoly {
    dim: usize,
    terms: Vec<(Vec<(usize, i32)>, f64)>,
}

impl CompiledPoly {
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        self.terms
            .iter()
            .map(|(factors, c)| {
                factors
                    .iter()
                    .fold(*c, |acc, &(i, k)| acc * x[i].powi(k))
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixStructure {
    General,
    Symmetric,
    Skew,
}

/// Square matrix of polynomials sharing one state dimension, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyMatrix {
    dim_state: usize,
    size: usize,
    structure: MatrixStructure,
    entries: Vec<Polynomial>,
}

impl PolyMatrix {
    pub fn zeros(dim_state: usize, size: usize, structure: MatrixStructure) -> Self {
        Self {
            dim_state,
            size,
            structure,
            entries: vec![Polynomial::zero(dim_state); size * size],
        }
    }

    pub fn identity(dim_state: usize, size: usize) -> Self {
        Self::constant_diagonal(dim_state, size, 1.0)
    }

    pub fn constant_diagonal(dim_state: usize, size: usize, value: f64) -> Self {
        let mut m = Self::zeros(dim_state, size, MatrixStructure::Symmetric);
        for i in 0..size {
            m.entries[i * size + i] = Polynomial::constant(dim_state, value);
        }
        m
    }

    /// Validates the declared structure coefficient-wise.
    pub fn from_entries(
        dim_state: usize,
        size: usize,
        structure: MatrixStructure,
        entries: Vec<Polynomial>,
    ) -> Result<Self, PolyError> {
        if entries.len() != size * size {
            return Err(PolyError::EntryCount {
                size,
                found: entries.len(),
            });
        }
        for p in &entries {
            if p.dim() != dim_state {
                return Err(PolyError::DimensionMismatch {
                    expected: dim_state,
                    found: p.dim(),
                });
            }
        }
        let m = Self {
            dim_state,
            size,
            structure,
            entries,
        };
        m.validate_structure()?;
        Ok(m)
    }

    /// Builds a symmetric (or skew) matrix from its upper triangle, listed
    /// row by row: `(0,0), (0,1), ..., (0,n-1), (1,1), ...`. For skew
    /// matrices the diagonal entries of `upper` must be zero.
    pub fn from_upper(
        dim_state: usize,
        size: usize,
        structure: MatrixStructure,
        upper: Vec<Polynomial>,
    ) -> Result<Self, PolyError> {
        let expected = size * (size + 1) / 2;
        if upper.len() != expected {
            return Err(PolyError::EntryCount {
                size,
                found: upper.len(),
            });
        }
        let sign = match structure {
            MatrixStructure::Skew => -1.0,
            _ => 1.0,
        };
        let mut m = Self::zeros(dim_state, size, structure);
        let mut it = upper.into_iter();
        for i in 0..size {
            for j in i..size {
                let p = it.next().expect("length checked");
                if p.dim() != dim_state {
                    return Err(PolyError::DimensionMismatch {
                        expected: dim_state,
                        found: p.dim(),
                    });
                }
                if i != j {
                    m.entries[j * size + i] = p.scale(sign);
                }
                m.entries[i * size + j] = p;
            }
        }
        m.validate_structure()?;
        Ok(m)
    }

    fn validate_structure(&self) -> Result<(), PolyError> {
        let n = self.size;
        for i in 0..n {
            for j in i..n {
                let a = &self.entries[i * n + j];
                let b = &self.entries[j * n + i];
                let ok = match self.structure {
                    MatrixStructure::General => true,
                    MatrixStructure::Symmetric => a == b,
                    MatrixStructure::Skew => *a == b.scale(-1.0) && (i != j || a.is_zero()),
                };
                if !ok {
                    return Err(PolyError::Structure {
                        row: i,
                        col: j,
                        structure: self.structure,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn structure(&self) -> MatrixStructure {
        self.structure
    }

    pub fn entry(&self, i: usize, j: usize) -> &Polynomial {
        &self.entries[i * self.size + j]
    }

    /// All entries, row-major.
    pub fn entries(&self) -> &[Polynomial] {
        &self.entries
    }

    pub fn degree(&self) -> u32 {
        self.entries.iter().map(|p| p.degree()).max().unwrap_or(0)
    }

    pub fn eval(&self, x: &[f64]) -> Result<DMatrix<f64>, PolyError> {
        if x.len() != self.dim_state {
            return Err(PolyError::DimensionMismatch {
                expected: self.dim_state,
                found: x.len(),
            });
        }
        Ok(DMatrix::from_fn(self.size, self.size, |i, j| {
            self.entry(i, j).eval_unchecked(x)
        }))
    }

    /// Matrix-vector product with a vector of polynomials.
    pub fn mul_poly_vec(&self, v: &[Polynomial]) -> Result<Vec<Polynomial>, PolyError> {
        if v.len() != self.size {
            return Err(PolyError::DimensionMismatch {
                expected: self.size,
                found: v.len(),
            });
        }
        (0..self.size)
            .map(|i| {
                let row: Vec<Polynomial> = (0..self.size).map(|j| self.entry(i, j).clone()).collect();
                Polynomial::dot(&row, v)
            })
            .collect()
    }

    /// Entry-wise sum; the result is `General` unless both structures agree.
    pub fn checked_add(&self, other: &Self) -> Result<Self, PolyError> {
        if other.size != self.size {
            return Err(PolyError::DimensionMismatch {
                expected: self.size,
                found: other.size,
            });
        }
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a.checked_add(b))
            .collect::<Result<Vec<_>, _>>()?;
        let structure = if self.structure == other.structure {
            self.structure
        } else {
            MatrixStructure::General
        };
        Ok(Self {
            dim_state: self.dim_state,
            size: self.size,
            structure,
            entries,
        })
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            dim_state: self.dim_state,
            size: self.size,
            structure: self.structure,
            entries: self.entries.iter().map(|p| p.scale(c)).collect(),
        }
    }

    pub fn compile(&self) -> Vec<CompiledPoly> {
        self.entries.iter().map(|p| p.compile()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(e: &[u32]) -> ExponentVector {
        ExponentVector::new(e.to_vec())
    }

    #[test]
    fn univariate_basis() {
        let b = monomial_basis(1, 2);
        assert_eq!(b, vec![ev(&[0]), ev(&[1]), ev(&[2])]);
    }

    #[test]
    fn constant_only_basis() {
        assert_eq!(monomial_basis(2, 0), vec![ev(&[0, 0])]);
    }

    #[test]
    fn bivariate_quadratic_basis_matches_enumeration() {
        let b = monomial_basis(2, 2);
        let mut brute = Vec::new();
        for i in 0..=2u32 {
            for j in 0..=2u32 {
                if i + j <= 2 {
                    brute.push(ev(&[i, j]));
                }
            }
        }
        assert_eq!(b.len(), brute.len());
        assert_eq!(b.len(), 6);
        for e in &brute {
            assert!(b.contains(e));
        }
        assert_eq!(
            b,
            vec![ev(&[0, 0]), ev(&[1, 0]), ev(&[0, 1]), ev(&[2, 0]), ev(&[1, 1]), ev(&[0, 2])]
        );
        let mut sorted = b.clone();
        sorted.sort();
        assert_eq!(sorted, b);
    }

    #[test]
    fn eval_constant_and_quadratic() {
        let one = Polynomial::constant(2, 1.0);
        assert_eq!(one.eval(&[3.0, -7.0]).unwrap(), 1.0);
        let q = Polynomial::variable(2, 0);
        let p = Polynomial::variable(2, 1);
        let h = &(&q * &q).scale(0.5) + &(&p * &p).scale(0.5);
        assert_eq!(h.eval(&[1.0, 1.0]).unwrap(), 1.0);
        assert!(matches!(
            h.eval(&[1.0]),
            Err(PolyError::DimensionMismatch { expected: 2, found: 1 })
        ));
    }

    fn free_energy_2d() -> Polynomial {
        let q = Polynomial::variable(2, 0);
        let p = Polynomial::variable(2, 1);
        let g = &(&(&p * &p) + &p.powi(4).scale(4.0)) - &q.powi(4).scale(4.0);
        (&g * &g).scale(-0.5)
    }

    #[test]
    fn free_energy_value_and_gradient() {
        let e = free_energy_2d();
        assert_eq!(e.degree(), 8);
        assert_eq!(e.eval(&[1.0, 0.0]).unwrap(), -8.0);
        let g: Vec<f64> = e.grad().iter().map(|d| d.eval(&[1.0, 0.0]).unwrap()).collect();
        assert_eq!(g, vec![-64.0, 0.0]);
    }

    #[test]
    fn free_energy_expansion_matches_pointwise() {
        use rand::{Rng, SeedableRng};
        let e = free_energy_2d();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (q, p): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let g = p * p + 4.0 * p.powi(4) - 4.0 * q.powi(4);
            let direct = -0.5 * g * g;
            let val = e.eval(&[q, p]).unwrap();
            assert!((val - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let c = Polynomial::constant(3, 4.5);
        assert!(c.grad().iter().all(|d| d.is_zero()));
    }

    #[test]
    fn quadratic_gradient() {
        let q = Polynomial::variable(2, 0);
        let p = Polynomial::variable(2, 1);
        let h = &(&q * &q).scale(0.5) + &(&p * &p).scale(0.5);
        assert_eq!(h.grad(), vec![q, p]);
    }

    #[test]
    fn arithmetic_identities_and_pruning() {
        let x = Polynomial::variable(2, 0);
        let zero = Polynomial::zero(2);
        assert_eq!(&x + &zero, x);
        assert_eq!(&x * &x, Polynomial::monomial(ev(&[2, 0]), 1.0));
        let diff = &x - &x;
        assert!(diff.is_zero());
        assert_eq!(diff.num_terms(), 0);
        let other = Polynomial::variable(3, 0);
        assert!(x.checked_add(&other).is_err());
        assert!(x.checked_mul(&other).is_err());
    }

    #[test]
    fn records_round_trip_in_graded_lex_order() {
        let e = free_energy_2d();
        let recs = e.to_records();
        let mut keys: Vec<ExponentVector> =
            recs.iter().map(|r| ev(&r.exponents)).collect();
        let sorted = {
            let mut k = keys.clone();
            k.sort();
            k
        };
        assert_eq!(keys, sorted);
        let back = Polynomial::from_records(2, &recs).unwrap();
        assert_eq!(back, e);
        keys.dedup();
        assert_eq!(keys.len(), recs.len());
        let json = serde_json::to_string(&recs).unwrap();
        let parsed: Vec<PolyRecord> = serde_json::from_str(&json).unwrap();
        assert_eq!(Polynomial::from_records(2, &parsed).unwrap(), e);
    }

    #[test]
    fn identity_and_zero_matrices() {
        let i2 = PolyMatrix::identity(2, 2);
        let m = i2.eval(&[0.3, -9.0]).unwrap();
        assert_eq!(m, DMatrix::identity(2, 2));
        let z = PolyMatrix::zeros(2, 2, MatrixStructure::Symmetric);
        assert_eq!(z.eval(&[1.0, 2.0]).unwrap(), DMatrix::zeros(2, 2));
        assert!(i2.eval(&[1.0]).is_err());
    }

    #[test]
    fn skew_cross_product_matrix() {
        let v = |i| Polynomial::variable(3, i);
        let z = Polynomial::zero(3);
        // upper triangle of a^x: (0,1) = -a3, (0,2) = a2, (1,2) = -a1
        let m = PolyMatrix::from_upper(
            3,
            3,
            MatrixStructure::Skew,
            vec![z.clone(), -&v(2), v(1), z.clone(), -&v(0), z],
        )
        .unwrap();
        let a = [1.0, 2.0, 3.0];
        let ev = m.eval(&a).unwrap();
        assert_eq!(ev[(0, 1)], -3.0);
        assert_eq!(ev[(0, 2)], 2.0);
        assert_eq!(ev[(1, 2)], -1.0);
        let b = [0.5, -1.0, 4.0];
        let prod = &ev * nalgebra::DVector::from_row_slice(&b);
        let cross = [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ];
        for i in 0..3 {
            assert_eq!(prod[i], cross[i]);
        }
    }

    #[test]
    fn structure_violations_are_rejected() {
        let x = Polynomial::variable(1, 0);
        let bad = PolyMatrix::from_entries(
            1,
            2,
            MatrixStructure::Symmetric,
            vec![x.clone(), x.clone(), Polynomial::zero(1), x.clone()],
        );
        assert!(matches!(bad, Err(PolyError::Structure { row: 0, col: 1, .. })));
        let bad_diag = PolyMatrix::from_upper(
            1,
            1,
            MatrixStructure::Skew,
            vec![x],
        );
        assert!(bad_diag.is_err());
    }

    #[test]
    fn compiled_matches_interpreted() {
        let e = free_energy_2d();
        let c = e.compile();
        for x in [[0.1, 0.2], [-1.3, 0.7], [1.0, 0.0]] {
            assert!((c.eval(&x) - e.eval(&x).unwrap()).abs() < 1e-12);
        }
    }
}
