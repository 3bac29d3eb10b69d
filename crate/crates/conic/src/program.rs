//! Conic program intermediate representation.
//!
//! A program is `min c'z  s.t.  A z = b,  z in K1 x K2 x ...`, where the decision
//! vector `z` is partitioned into consecutive cone blocks. PSD blocks are stored
//! in scaled lower-triangular packing (see [`pack_symmetric`]).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "size", rename_all = "lowercase")]
pub enum Cone {
    /// `k` unconstrained variables.
    Free(usize),
    /// `k` variables constrained to be `>= 0`.
    NonNeg(usize),
    /// A `d x d` positive semidefinite matrix, `d(d+1)/2` packed variables.
    Psd(usize),
}

impl Cone {
    /// Number of scalar decision variables occupied by the block.
    pub fn len(&self) -> usize {
        match *self {
            Cone::Free(k) | Cone::NonNeg(k) => k,
            Cone::Psd(d) => packed_len(d),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn packed_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Position of entry `(i, j)` of a `d x d` symmetric matrix in the packed
/// vector. Packing is column-major over the lower triangle:
/// `(0,0), (1,0), ..., (d-1,0), (1,1), (2,1), ...`.
pub fn packed_index(d: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i >= j { (i, j) } else { (j, i) };
    debug_assert!(i < d);
    j * (2 * d - j + 1) / 2 + (i - j)
}

/// Packs a symmetric matrix given row-major as `d*d` values. Off-diagonal
/// entries are multiplied by `sqrt(2)` so that Euclidean inner products of
/// packed vectors equal trace inner products of the matrices.
pub fn pack_symmetric(d: usize, full: &[f64]) -> Vec<f64> {
    assert_eq!(full.len(), d * d);
    let mut out = Vec::with_capacity(packed_len(d));
    for j in 0..d {
        for i in j..d {
            let v = full[i * d + j];
            out.push(if i == j { v } else { v * std::f64::consts::SQRT_2 });
        }
    }
    out
}

/// Inverse of [`pack_symmetric`]; returns the full row-major matrix.
pub fn unpack_symmetric(d: usize, packed: &[f64]) -> Vec<f64> {
    assert_eq!(packed.len(), packed_len(d));
    let mut full = vec![0.0; d * d];
    let mut k = 0;
    for j in 0..d {
        for i in j..d {
            let v = if i == j {
                packed[k]
            } else {
                packed[k] / std::f64::consts::SQRT_2
            };
            full[i * d + j] = v;
            full[j * d + i] = v;
            k += 1;
        }
    }
    full
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarBlock {
    pub cone: Cone,
    pub offset: usize,
}

/// Handle returned by [`ProgramBuilder::add_var_block`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockHandle {
    pub index: usize,
    pub offset: usize,
    pub cone: Cone,
}

impl BlockHandle {
    pub fn len(&self) -> usize {
        self.cone.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cone.is_empty()
    }

    /// Global index of the `k`-th scalar of a free or nonnegative block.
    pub fn var(&self, k: usize) -> usize {
        assert!(k < self.len(), "variable {k} outside block of length {}", self.len());
        self.offset + k
    }

    /// Global variable index and multiplier `m` such that matrix entry
    /// `X[i][j] = m * z[index]` for a PSD block.
    pub fn psd_entry(&self, i: usize, j: usize) -> (usize, f64) {
        let Cone::Psd(d) = self.cone else {
            panic!("psd_entry on a non-PSD block");
        };
        let idx = self.offset + packed_index(d, i, j);
        let m = if i == j {
            1.0
        } else {
            std::f64::consts::FRAC_1_SQRT_2
        };
        (idx, m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equality {
    /// Sorted by variable index, no duplicates, no zeros.
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BuildError {
    #[error("variable index {index} out of range (program has {num_vars} variables)")]
    IndexOutOfRange { index: usize, num_vars: usize },
    #[error("non-finite coefficient for variable {0}")]
    NonFinite(usize),
    #[error("program has no objective")]
    NoObjective,
    #[error("program was already finalized")]
    AlreadyFinalized,
    #[error("cone blocks cover {covered} variables but objective has {objective}")]
    Inconsistent { covered: usize, objective: usize },
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A validated conic program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConicProgram {
    blocks: Vec<VarBlock>,
    objective: Vec<f64>,
    equalities: Vec<Equality>,
}

impl ConicProgram {
    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn num_equalities(&self) -> usize {
        self.equalities.len()
    }

    pub fn blocks(&self) -> &[VarBlock] {
        &self.blocks
    }

    pub fn objective(&self) -> &[f64] {
        &self.objective
    }

    pub fn equalities(&self) -> &[Equality] {
        &self.equalities
    }

    /// Same blocks and objective with a different equality system.
    pub(crate) fn with_equalities(&self, equalities: Vec<Equality>) -> Self {
        Self {
            blocks: self.blocks.clone(),
            objective: self.objective.clone(),
            equalities,
        }
    }

    pub fn objective_value(&self, z: &[f64]) -> f64 {
        self.objective.iter().zip(z).map(|(c, v)| c * v).sum()
    }

    /// Max-norm of `A z - b`.
    pub fn equality_residual(&self, z: &[f64]) -> f64 {
        self.equalities
            .iter()
            .map(|eq| {
                let lhs: f64 = eq.coeffs.iter().map(|&(j, a)| a * z[j]).sum();
                (lhs - eq.rhs).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Largest violation of cone membership: `-min(z_i)` over nonnegative
    /// variables and `-lambda_min` over PSD blocks (0 when inside).
    pub fn cone_violation(&self, z: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for b in &self.blocks {
            let slice = &z[b.offset..b.offset + b.cone.len()];
            match b.cone {
                Cone::Free(_) => {}
                Cone::NonNeg(_) => {
                    for &v in slice {
                        worst = worst.max(-v);
                    }
                }
                Cone::Psd(d) => {
                    let full = unpack_symmetric(d, slice);
                    let m = nalgebra::DMatrix::from_row_slice(d, d, &full);
                    let eig = m.symmetric_eigenvalues();
                    worst = worst.max(-eig.min());
                }
            }
        }
        worst
    }

    /// Line-based dump used for debugging and cross-solver comparison.
    ///
    /// ```text
    /// conic-program v1
    /// vars <n>
    /// block <free|nonneg|psd> <size>          (one line per block, in order)
    /// objective <index> <value>               (nonzeros only)
    /// equalities <m>
    /// a <row> <index> <value>                 (triplets, row-major)
    /// b <row> <value>
    /// end
    /// ```
    /// Floats are written with Rust's shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "conic-program v1");
        let _ = writeln!(s, "vars {}", self.num_vars());
        for b in &self.blocks {
            let (k, n) = match b.cone {
                Cone::Free(k) => ("free", k),
                Cone::NonNeg(k) => ("nonneg", k),
                Cone::Psd(d) => ("psd", d),
            };
            let _ = writeln!(s, "block {k} {n}");
        }
        for (j, &c) in self.objective.iter().enumerate() {
            if c != 0.0 {
                let _ = writeln!(s, "objective {j} {c:?}");
            }
        }
        let _ = writeln!(s, "equalities {}", self.equalities.len());
        for (r, eq) in self.equalities.iter().enumerate() {
            for &(j, a) in &eq.coeffs {
                let _ = writeln!(s, "a {r} {j} {a:?}");
            }
            let _ = writeln!(s, "b {r} {:?}", eq.rhs);
        }
        let _ = writeln!(s, "end");
        s
    }

    pub fn from_text(text: &str) -> Result<Self, BuildError> {
        let perr = |line: usize, message: &str| BuildError::Parse {
            line,
            message: message.to_string(),
        };
        let mut builder = ProgramBuilder::new();
        let mut declared_vars = None;
        let mut objective = Vec::new();
        let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
        let mut saw_header = false;
        for (ln, raw) in text.lines().enumerate() {
            let line_no = ln + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            let num = |k: usize| -> Result<usize, BuildError> {
                toks.get(k)
                    .ok_or_else(|| perr(line_no, "missing field"))?
                    .parse::<usize>()
                    .map_err(|e| perr(line_no, &e.to_string()))
            };
            let real = |k: usize| -> Result<f64, BuildError> {
                toks.get(k)
                    .ok_or_else(|| perr(line_no, "missing field"))?
                    .parse::<f64>()
                    .map_err(|e| perr(line_no, &e.to_string()))
            };
            match toks[0] {
                "conic-program" => {
                    if toks.get(1) != Some(&"v1") {
                        return Err(perr(line_no, "unsupported version"));
                    }
                    saw_header = true;
                }
                "vars" => declared_vars = Some(num(1)?),
                "block" => {
                    let size = num(2)?;
                    let cone = match toks.get(1).copied() {
                        Some("free") => Cone::Free(size),
                        Some("nonneg") => Cone::NonNeg(size),
                        Some("psd") => Cone::Psd(size),
                        _ => return Err(perr(line_no, "unknown cone kind")),
                    };
                    builder.add_var_block(cone);
                }
                "objective" => objective.push((num(1)?, real(2)?)),
                "equalities" => rows = vec![(Vec::new(), 0.0); num(1)?],
                "a" => {
                    let r = num(1)?;
                    let row = rows.get_mut(r).ok_or_else(|| perr(line_no, "row out of range"))?;
                    row.0.push((num(2)?, real(3)?));
                }
                "b" => {
                    let r = num(1)?;
                    let row = rows.get_mut(r).ok_or_else(|| perr(line_no, "row out of range"))?;
                    row.1 = real(2)?;
                }
                "end" => break,
                _ => return Err(perr(line_no, "unknown record")),
            }
        }
        if !saw_header {
            return Err(perr(1, "missing header"));
        }
        if declared_vars != Some(builder.num_vars()) {
            return Err(perr(2, "vars does not match block sizes"));
        }
        builder.set_objective(objective)?;
        for (coeffs, rhs) in rows {
            builder.add_equality(coeffs, rhs)?;
        }
        builder.finalize()
    }
}

/// Incremental construction of a [`ConicProgram`].
#[derive(Debug, Default)]
pub struct ProgramBuilder {
    blocks: Vec<VarBlock>,
    num_vars: usize,
    objective: Option<Vec<f64>>,
    pending_objective: Option<Vec<(usize, f64)>>,
    equalities: Vec<Equality>,
    finalized: bool,
}

impl ProgramBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_equalities(&self) -> usize {
        self.equalities.len()
    }

    pub fn add_var_block(&mut self, cone: Cone) -> BlockHandle {
        let handle = BlockHandle {
            index: self.blocks.len(),
            offset: self.num_vars,
            cone,
        };
        self.blocks.push(VarBlock {
            cone,
            offset: self.num_vars,
        });
        self.num_vars += cone.len();
        handle
    }

    fn check_index(&self, index: usize) -> Result<(), BuildError> {
        if index >= self.num_vars {
            Err(BuildError::IndexOutOfRange {
                index,
                num_vars: self.num_vars,
            })
        } else {
            Ok(())
        }
    }

    /// Adds `sum coeffs = rhs`; repeated indices are summed, zeros dropped.
    /// Returns the row index.
    pub fn add_equality(
        &mut self,
        coeffs: impl IntoIterator<Item = (usize, f64)>,
        rhs: f64,
    ) -> Result<usize, BuildError> {
        let mut row: Vec<(usize, f64)> = Vec::new();
        for (j, a) in coeffs {
            self.check_index(j)?;
            if !a.is_finite() {
                return Err(BuildError::NonFinite(j));
            }
            row.push((j, a));
        }
        if !rhs.is_finite() {
            return Err(BuildError::NonFinite(usize::MAX));
        }
        row.sort_by_key(|&(j, _)| j);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
        for (j, a) in row {
            match merged.last_mut() {
                Some((lj, la)) if *lj == j => *la += a,
                _ => merged.push((j, a)),
            }
        }
        merged.retain(|&(_, a)| a != 0.0);
        self.equalities.push(Equality {
            coeffs: merged,
            rhs,
        });
        Ok(self.equalities.len() - 1)
    }

    /// Sets the (sparse) objective. Indices are validated at finalization so
    /// the objective may be declared before all blocks exist.
    pub fn set_objective(
        &mut self,
        coeffs: impl IntoIterator<Item = (usize, f64)>,
    ) -> Result<(), BuildError> {
        let mut pending = Vec::new();
        for (j, c) in coeffs {
            if !c.is_finite() {
                return Err(BuildError::NonFinite(j));
            }
            pending.push((j, c));
        }
        self.pending_objective = Some(pending);
        self.objective = None;
        Ok(())
    }

    pub fn finalize(&mut self) -> Result<ConicProgram, BuildError> {
        if self.finalized {
            return Err(BuildError::AlreadyFinalized);
        }
        let pending = self.pending_objective.as_ref().ok_or(BuildError::NoObjective)?;
        let mut objective = vec![0.0; self.num_vars];
        for &(j, c) in pending {
            self.check_index(j)?;
            objective[j] += c;
        }
        let covered: usize = self.blocks.iter().map(|b| b.cone.len()).sum();
        if covered != objective.len() {
            return Err(BuildError::Inconsistent {
                covered,
                objective: objective.len(),
            });
        }
        self.objective = Some(objective.clone());
        self.finalized = true;
        Ok(ConicProgram {
            blocks: self.blocks.clone(),
            objective,
            equalities: std::mem::take(&mut self.equalities),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_program_has_no_objective() {
        let mut b = ProgramBuilder::new();
        assert_eq!(b.finalize(), Err(BuildError::NoObjective));
    }

    #[test]
    fn block_offsets_and_packed_length() {
        let mut b = ProgramBuilder::new();
        let f = b.add_var_block(Cone::Free(2));
        let p = b.add_var_block(Cone::Psd(3));
        assert_eq!((f.offset, p.offset), (0, 2));
        assert_eq!(b.num_vars(), 2 + 6);
    }

    #[test]
    fn index_errors_and_double_finalize() {
        let mut b = ProgramBuilder::new();
        b.add_var_block(Cone::NonNeg(1));
        assert!(matches!(
            b.add_equality([(3, 1.0)], 0.0),
            Err(BuildError::IndexOutOfRange { index: 3, num_vars: 1 })
        ));
        b.set_objective([(5, 1.0)]).unwrap();
        assert!(matches!(b.finalize(), Err(BuildError::IndexOutOfRange { .. })));
        b.set_objective([(0, 1.0)]).unwrap();
        assert!(b.finalize().is_ok());
        assert_eq!(b.finalize(), Err(BuildError::AlreadyFinalized));
    }

    #[test]
    fn equality_rows_merge_duplicates() {
        let mut b = ProgramBuilder::new();
        b.add_var_block(Cone::Free(3));
        b.add_equality([(2, 1.0), (0, 2.0), (2, -1.0), (1, 0.5)], 1.0)
            .unwrap();
        b.set_objective([]).unwrap();
        let p = b.finalize().unwrap();
        assert_eq!(p.equalities()[0].coeffs, vec![(0, 2.0), (1, 0.5)]);
    }

    #[test]
    fn text_and_json_round_trip() {
        let mut b = ProgramBuilder::new();
        let x = b.add_var_block(Cone::NonNeg(2));
        let s = b.add_var_block(Cone::Psd(2));
        let (i01, m01) = s.psd_entry(0, 1);
        b.add_equality([(x.var(0), 1.0), (i01, m01)], 0.1).unwrap();
        b.add_equality([(x.var(1), -3.25), (s.offset, 1.0)], 1.0 / 3.0)
            .unwrap();
        b.set_objective([(x.var(0), 1.0), (s.offset + 2, 2.5)]).unwrap();
        let p = b.finalize().unwrap();
        let back = ConicProgram::from_text(&p.to_text()).unwrap();
        assert_eq!(back, p);
        let json = serde_json::to_string(&p).unwrap();
        let back: ConicProgram = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn packing_round_trip_and_inner_products() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for d in 1..6 {
            let sym = |rng: &mut rand_chacha::ChaCha8Rng| {
                let mut m = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..=i {
                        let v: f64 = rng.random_range(-1.0..1.0);
                        m[i * d + j] = v;
                        m[j * d + i] = v;
                    }
                }
                m
            };
            let a = sym(&mut rng);
            let b = sym(&mut rng);
            let pa = pack_symmetric(d, &a);
            let pb = pack_symmetric(d, &b);
            assert_eq!(pa.len(), packed_len(d));
            let trace: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let dot: f64 = pa.iter().zip(&pb).map(|(x, y)| x * y).sum();
            assert!((trace - dot).abs() < 1e-14);
            let v: Vec<f64> = (0..packed_len(d)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let back = pack_symmetric(d, &unpack_symmetric(d, &v));
            for (x, y) in v.iter().zip(&back) {
                assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn packed_index_is_column_major_lower() {
        let d = 3;
        let order = [(0, 0), (1, 0), (2, 0), (1, 1), (2, 1), (2, 2)];
        for (k, &(i, j)) in order.iter().enumerate() {
            assert_eq!(packed_index(d, i, j), k);
            assert_eq!(packed_index(d, j, i), k);
        }
    }
}
