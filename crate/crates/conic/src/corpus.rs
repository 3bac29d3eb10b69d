//! Tiny LPs and SDPs with hand-derived optima. Every backend must solve all
//! of them to `Optimal` with the stated objective value.

use std::f64::consts::SQRT_2;

use crate::{Cone, ConicProgram, ProgramBuilder};

#[derive(Debug, Clone)]
pub struct ContractCase {
    pub name: &'static str,
    pub program: ConicProgram,
    pub optimum: f64,
}

fn case(name: &'static str, mut b: ProgramBuilder, optimum: f64) -> ContractCase {
    ContractCase {
        name,
        program: b.finalize().expect("corpus programs are well formed"),
        optimum,
    }
}

fn lp_lower_bound() -> ContractCase {
    // min x  s.t. x >= 1
    let mut b = ProgramBuilder::new();
    let x = b.add_var_block(Cone::Free(1));
    let s = b.add_var_block(Cone::NonNeg(1));
    b.add_equality([(x.var(0), 1.0), (s.var(0), -1.0)], 1.0).unwrap();
    b.set_objective([(x.var(0), 1.0)]).unwrap();
    case("lp_lower_bound", b, 1.0)
}

fn lp_simplex() -> ContractCase {
    // min 2x + 3y + z  on the probability simplex  ->  z = 1
    let mut b = ProgramBuilder::new();
    let v = b.add_var_block(Cone::NonNeg(3));
    b.add_equality((0..3).map(|k| (v.var(k), 1.0)), 1.0).unwrap();
    b.set_objective([(v.var(0), 2.0), (v.var(1), 3.0), (v.var(2), 1.0)]).unwrap();
    case("lp_simplex", b, 1.0)
}

fn lp_vertex() -> ContractCase {
    // min x + y  s.t. x + 2y >= 2, 3x + y >= 3, x, y >= 0  ->  (0.8, 0.6)
    let mut b = ProgramBuilder::new();
    let v = b.add_var_block(Cone::NonNeg(2));
    let s = b.add_var_block(Cone::NonNeg(2));
    b.add_equality([(v.var(0), 1.0), (v.var(1), 2.0), (s.var(0), -1.0)], 2.0).unwrap();
    b.add_equality([(v.var(0), 3.0), (v.var(1), 1.0), (s.var(1), -1.0)], 3.0).unwrap();
    b.set_objective([(v.var(0), 1.0), (v.var(1), 1.0)]).unwrap();
    case("lp_vertex", b, 1.4)
}

fn lp_absolute_value() -> ContractCase {
    // min t  s.t. t >= x - 3, t >= 3 - x, x = 5 (the last row repeated)
    let mut b = ProgramBuilder::new();
    let f = b.add_var_block(Cone::Free(2));
    let s = b.add_var_block(Cone::NonNeg(2));
    let (t, x) = (f.var(0), f.var(1));
    b.add_equality([(t, 1.0), (x, -1.0), (s.var(0), -1.0)], -3.0).unwrap();
    b.add_equality([(t, 1.0), (x, 1.0), (s.var(1), -1.0)], 3.0).unwrap();
    b.add_equality([(x, 1.0)], 5.0).unwrap();
    b.add_equality([(x, 1.0)], 5.0).unwrap();
    b.set_objective([(t, 1.0)]).unwrap();
    case("lp_absolute_value", b, 2.0)
}

fn sdp_two_by_two() -> ContractCase {
    // min t  s.t. [[t, 1], [1, t]] psd
    let mut b = ProgramBuilder::new();
    let t = b.add_var_block(Cone::Free(1));
    let m = b.add_var_block(Cone::Psd(2));
    let (i00, _) = m.psd_entry(0, 0);
    let (i11, _) = m.psd_entry(1, 1);
    let (i10, mult) = m.psd_entry(1, 0);
    b.add_equality([(i00, 1.0), (t.var(0), -1.0)], 0.0).unwrap();
    b.add_equality([(i11, 1.0), (t.var(0), -1.0)], 0.0).unwrap();
    b.add_equality([(i10, mult)], 1.0).unwrap();
    b.set_objective([(t.var(0), 1.0)]).unwrap();
    case("sdp_two_by_two", b, 1.0)
}

fn sdp_trace_with_offdiagonal() -> ContractCase {
    // min tr X  s.t. X_01 = 1  ->  X = [[1, 1], [1, 1]]
    let mut b = ProgramBuilder::new();
    let m = b.add_var_block(Cone::Psd(2));
    let (i10, mult) = m.psd_entry(1, 0);
    b.add_equality([(i10, mult)], 1.0).unwrap();
    b.set_objective([(m.psd_entry(0, 0).0, 1.0), (m.psd_entry(1, 1).0, 1.0)]).unwrap();
    case("sdp_trace_with_offdiagonal", b, 2.0)
}

fn sdp_largest_eigenvalue() -> ContractCase {
    // min t  s.t. tI - A psd, A tridiagonal (2, 1)  ->  2 + sqrt 2
    let a = [[2.0, 1.0, 0.0], [1.0, 2.0, 1.0], [0.0, 1.0, 2.0]];
    let mut b = ProgramBuilder::new();
    let t = b.add_var_block(Cone::Free(1));
    let m = b.add_var_block(Cone::Psd(3));
    for j in 0..3 {
        for i in j..3 {
            let (idx, mult) = m.psd_entry(i, j);
            if i == j {
                b.add_equality([(idx, mult), (t.var(0), -1.0)], -a[i][j]).unwrap();
            } else {
                b.add_equality([(idx, mult)], -a[i][j]).unwrap();
            }
        }
    }
    b.set_objective([(t.var(0), 1.0)]).unwrap();
    case("sdp_largest_eigenvalue", b, 2.0 + SQRT_2)
}

fn sdp_smallest_eigenvalue() -> ContractCase {
    // min <C, X>  s.t. tr X = 1, C = [[1, 2], [2, 1]]  ->  -1
    let mut b = ProgramBuilder::new();
    let m = b.add_var_block(Cone::Psd(2));
    let (i00, _) = m.psd_entry(0, 0);
    let (i11, _) = m.psd_entry(1, 1);
    let (i10, _) = m.psd_entry(1, 0);
    b.add_equality([(i00, 1.0), (i11, 1.0)], 1.0).unwrap();
    // <C, X> = X00 + X11 + 4 X10 = X00 + X11 + 2 sqrt2 * packed10
    b.set_objective([(i00, 1.0), (i11, 1.0), (i10, 2.0 * SQRT_2)]).unwrap();
    case("sdp_smallest_eigenvalue", b, -1.0)
}

fn sdp_unit_diagonal() -> ContractCase {
    // min sum_{i != j} X_ij  s.t. diag X = 1, 3x3. 1'X1 >= 0 bounds it by -3,
    // attained at (3I - J) / 2.
    let mut b = ProgramBuilder::new();
    let m = b.add_var_block(Cone::Psd(3));
    for i in 0..3 {
        b.add_equality([(m.psd_entry(i, i).0, 1.0)], 1.0).unwrap();
    }
    let mut obj = Vec::new();
    for j in 0..3 {
        for i in j + 1..3 {
            let (idx, mult) = m.psd_entry(i, j);
            obj.push((idx, 2.0 * mult));
        }
    }
    b.set_objective(obj).unwrap();
    case("sdp_unit_diagonal", b, -3.0)
}

fn mixed_hyperbolic() -> ContractCase {
    // min x  s.t. [[x, 1], [1, y]] psd, y <= 4  ->  x = 1/4
    let mut b = ProgramBuilder::new();
    let m = b.add_var_block(Cone::Psd(2));
    let s = b.add_var_block(Cone::NonNeg(1));
    let (i00, _) = m.psd_entry(0, 0);
    let (i11, _) = m.psd_entry(1, 1);
    let (i10, mult) = m.psd_entry(1, 0);
    b.add_equality([(i10, mult)], 1.0).unwrap();
    b.add_equality([(i11, 1.0), (s.var(0), 1.0)], 4.0).unwrap();
    b.set_objective([(i00, 1.0)]).unwrap();
    case("mixed_hyperbolic", b, 0.25)
}

/// The ten contract instances.
pub fn contract_corpus() -> Vec<ContractCase> {
    vec![
        lp_lower_bound(),
        lp_simplex(),
        lp_vertex(),
        lp_absolute_value(),
        sdp_two_by_two(),
        sdp_trace_with_offdiagonal(),
        sdp_largest_eigenvalue(),
        sdp_smallest_eigenvalue(),
        sdp_unit_diagonal(),
        mixed_hyperbolic(),
    ]
}
