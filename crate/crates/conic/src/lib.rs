//! LP/SDP programs in a single intermediate representation, plus the solver
//! contract every backend implements.
//!
//! Build a [`ConicProgram`] with [`ProgramBuilder`], then call [`solve`] (the
//! in-tree interior-point backend) or any [`ConicSolver`].

pub mod corpus;
pub mod dense;
mod ipm;
pub mod program;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use program::{
    pack_symmetric, packed_index, packed_len, unpack_symmetric, BlockHandle, BuildError, Cone,
    ConicProgram, Equality, ProgramBuilder, VarBlock,
};

/// Environment variable naming the backend used by [`solve`].
pub const BACKEND_ENV: &str = "METRIPLECTIC_CONIC_BACKEND";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Relative primal/dual residual, `||Az - b|| / (1 + ||b||)`.
    pub feas_tol: f64,
    /// Relative duality gap (complementarity and objective difference).
    pub gap_tol: f64,
    /// Threshold on the normalized infeasibility certificate.
    pub infeas_tol: f64,
    pub max_iter: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            feas_tol: 1e-8,
            gap_tol: 1e-7,
            infeas_tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalLimit,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::NumericalLimit => "numerical_limit",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub status: SolveStatus,
    /// Primal point. NaN-filled when the status is `Infeasible`; a ray of
    /// unboundedness when `Unbounded`.
    pub primal: Vec<f64>,
    /// Equality multipliers (sign convention `c - A'y in K*`).
    pub dual: Vec<f64>,
    pub objective_value: f64,
    pub residuals: Residuals,
    pub iterations: usize,
}

impl SolveResult {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

pub trait ConicSolver {
    fn name(&self) -> &'static str;
    fn solve(&self, prog: &ConicProgram, tol: &Tolerances) -> SolveResult;
}

/// Primal-dual interior-point method on the homogeneous self-dual embedding.
#[derive(Debug, Clone, Copy, Default)]
pub struct InteriorPoint;

impl ConicSolver for InteriorPoint {
    fn name(&self) -> &'static str {
        "ipm"
    }

    fn solve(&self, prog: &ConicProgram, tol: &Tolerances) -> SolveResult {
        let (reduced, kept) = match presolve(prog, tol) {
            Ok(v) => v,
            Err(status) => return trivial_result(prog, status),
        };
        let mut res = ipm::solve(&reduced, tol);
        // report multipliers against the caller's rows
        let mut dual = vec![0.0; prog.num_equalities()];
        for (k, &r) in kept.iter().enumerate() {
            if k < res.dual.len() {
                dual[r] = res.dual[k];
            }
        }
        res.dual = dual;
        res
    }
}

/// Looks up a backend by name.
pub fn backend(name: &str) -> Option<Box<dyn ConicSolver + Send + Sync>> {
    match name {
        "ipm" | "interior-point" => Some(Box::new(InteriorPoint)),
        _ => None,
    }
}

/// Name of the backend selected by the environment (default `ipm`).
pub fn backend_name_from_env() -> String {
    std::env::var(BACKEND_ENV).unwrap_or_else(|_| "ipm".to_string())
}

/// Solves with the backend selected by [`BACKEND_ENV`]; unknown names fall
/// back to the interior-point method with a warning.
pub fn solve(prog: &ConicProgram, tol: &Tolerances) -> SolveResult {
    let name = backend_name_from_env();
    match backend(&name) {
        Some(b) => b.solve(prog, tol),
        None => {
            log::warn!("unknown conic backend {name:?}, using ipm");
            InteriorPoint.solve(prog, tol)
        }
    }
}

/// Drops empty and duplicated equality rows. Returns the reduced program and
/// the original index of every kept row, or a status when a dropped row is
/// contradictory.
fn presolve(prog: &ConicProgram, tol: &Tolerances) -> Result<(ConicProgram, Vec<usize>), SolveStatus> {
    let mut kept = Vec::new();
    let mut rows = Vec::new();
    let mut seen: HashMap<Vec<(usize, u64)>, f64> = HashMap::new();
    for (r, eq) in prog.equalities().iter().enumerate() {
        if eq.coeffs.is_empty() {
            if eq.rhs.abs() > tol.feas_tol {
                return Err(SolveStatus::Infeasible);
            }
            continue;
        }
        let key: Vec<(usize, u64)> = eq.coeffs.iter().map(|&(j, a)| (j, a.to_bits())).collect();
        if let Some(&rhs) = seen.get(&key) {
            if (rhs - eq.rhs).abs() > tol.feas_tol * (1.0 + rhs.abs()) {
                return Err(SolveStatus::Infeasible);
            }
            continue;
        }
        seen.insert(key, eq.rhs);
        kept.push(r);
        rows.push(eq.clone());
    }
    if rows.len() == prog.num_equalities() {
        return Ok((prog.clone(), kept));
    }
    Ok((prog.with_equalities(rows), kept))
}

fn trivial_result(prog: &ConicProgram, status: SolveStatus) -> SolveResult {
    SolveResult {
        status,
        primal: vec![f64::NAN; prog.num_vars()],
        dual: vec![0.0; prog.num_equalities()],
        objective_value: f64::NAN,
        residuals: Residuals::default(),
        iterations: 0,
    }
}
