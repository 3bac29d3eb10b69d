//! Solver contract: the corpus plus status detection.

use conic::corpus::{contract_corpus, ContractCase};
use conic::{backend, Cone, ConicProgram, ProgramBuilder, SolveStatus, Tolerances};

fn lp_contradictory() -> ConicProgram {
    // x >= 1 and x <= 0
    let mut b = ProgramBuilder::new();
    let x = b.add_var_block(Cone::Free(1));
    let s = b.add_var_block(Cone::NonNeg(2));
    b.add_equality([(x.var(0), 1.0), (s.var(0), -1.0)], 1.0).unwrap();
    b.add_equality([(x.var(0), 1.0), (s.var(1), 1.0)], 0.0).unwrap();
    b.set_objective([(x.var(0), 1.0)]).unwrap();
    b.finalize().unwrap()
}

fn lp_unbounded() -> ConicProgram {
    // min -x - y  s.t. x - y = 0, x, y >= 0
    let mut b = ProgramBuilder::new();
    let v = b.add_var_block(Cone::NonNeg(2));
    b.add_equality([(v.var(0), 1.0), (v.var(1), -1.0)], 0.0).unwrap();
    b.set_objective([(v.var(0), -1.0), (v.var(1), -1.0)]).unwrap();
    b.finalize().unwrap()
}

fn find(name: &str) -> ContractCase {
    contract_corpus().into_iter().find(|c| c.name == name).unwrap()
}

#[test]
fn contract_corpus_ipm() {
    let solver = backend("ipm").unwrap();
    let tol = Tolerances::default();
    let cases = contract_corpus();
    assert_eq!(cases.len(), 10);
    let mut failures = Vec::new();
    for case in cases {
        let res = solver.solve(&case.program, &tol);
        let ok = res.status == SolveStatus::Optimal
            && (res.objective_value - case.optimum).abs() < 1e-6
            && case.program.equality_residual(&res.primal) <= 1e-7
            && case.program.cone_violation(&res.primal) <= tol.feas_tol;
        eprintln!(
            "{:28} status {:16} value {:+.10} iters {:3}",
            case.name,
            res.status.to_string(),
            res.objective_value,
            res.iterations
        );
        if !ok {
            failures.push(case.name);
        }
    }
    assert!(failures.is_empty(), "failed cases: {failures:?}");
}

#[test]
fn infeasible_and_unbounded_are_detected() {
    let tol = Tolerances::default();
    let r = conic::solve(&lp_contradictory(), &tol);
    assert_eq!(r.status, SolveStatus::Infeasible);
    assert!(r.primal.iter().all(|v| v.is_nan()));
    assert_eq!(conic::solve(&lp_unbounded(), &tol).status, SolveStatus::Unbounded);
}

#[test]
fn lp_lower_bound_point() {
    let res = conic::InteriorPoint.solve_program(&find("lp_lower_bound").program);
    assert_eq!(res.status, SolveStatus::Optimal);
    assert!((res.primal[0] - 1.0).abs() < 1e-7);
}

#[test]
fn solve_is_deterministic() {
    let prog = find("sdp_largest_eigenvalue").program;
    let tol = Tolerances::default();
    let a = conic::InteriorPoint.solve_program(&prog);
    let b = backend("ipm").unwrap().solve(&prog, &tol);
    assert_eq!(a, b);
}

#[test]
fn text_dump_solves_identically() {
    let prog = find("mixed_hyperbolic").program;
    let back = ConicProgram::from_text(&prog.to_text()).unwrap();
    let a = conic::InteriorPoint.solve_program(&prog);
    let b = conic::InteriorPoint.solve_program(&back);
    assert_eq!(a, b);
}

trait SolveDefault {
    fn solve_program(&self, prog: &ConicProgram) -> conic::SolveResult;
}

impl SolveDefault for conic::InteriorPoint {
    fn solve_program(&self, prog: &ConicProgram) -> conic::SolveResult {
        conic::ConicSolver::solve(self, prog, &Tolerances::default())
    }
}
