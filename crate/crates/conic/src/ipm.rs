//! Homogeneous self-dual interior-point method for LP/SDP programs.
//!
//! The IR program `min c'x, Ax = b, x in K` is solved in the form
//! `min c'x, Ax = b, Gx + s = h, s in K'` with `G = -I` restricted to the
//! cone-constrained variables and `h = 0`; free variables stay free. Each
//! iteration is a Mehrotra predictor-corrector step with Nesterov-Todd
//! scaling. The reduced KKT system is solved by eliminating the cone
//! variables (normal equations `A_K W'W A_K'`, block diagonal over groups of
//! rows that share variables) and then the free variables through a dense
//! Schur complement.

use nalgebra::DMatrix;

use crate::dense::{axpy, cholesky_in_place, cholesky_solve, dot, norm_inf};
use crate::program::{packed_len, Cone, ConicProgram};
use crate::{Residuals, SolveResult, SolveStatus, Tolerances};

const STEP_FRACTION: f64 = 0.99;
const PIVOT_TINY: f64 = 1e-15;
const RUIZ_PASSES: usize = 12;

#[derive(Debug, Clone, Copy)]
enum Kind {
    NonNeg,
    Psd(usize),
}

#[derive(Debug, Clone, Copy)]
struct ConeSlice {
    kind: Kind,
    start: usize,
    len: usize,
}

#[derive(Debug, Clone)]
struct PsdGroup {
    cone: usize,
    locals: Vec<usize>,
    // rows x locals, row-major
    a: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Component {
    rows: Vec<usize>,
    nn: Vec<(usize, Vec<(usize, f64)>)>,
    psd: Vec<PsdGroup>,
    free_cols: Vec<usize>,
    // rows x free_cols, row-major
    af: Vec<f64>,
}

/// Scaled problem data plus the structural information used by the KKT solver.
struct Model {
    n: usize,
    m: usize,
    c: Vec<f64>,
    b: Vec<f64>,
    rows: Vec<Vec<(usize, f64)>>,
    cols: Vec<Vec<(usize, f64)>>,
    free: Vec<usize>,
    kvar: Vec<usize>,
    cones: Vec<ConeSlice>,
    degree: usize,
    comps: Vec<Component>,
    // rows touching no cone variable, as (free position, coefficient)
    free_rows: Vec<(usize, Vec<(usize, f64)>)>,
    // x = col_scale * x_scaled, y = row_scale * y_scaled
    col_scale: Vec<f64>,
    row_scale: Vec<f64>,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

impl Model {
    fn new(prog: &ConicProgram) -> Self {
        let n = prog.num_vars();
        let m = prog.num_equalities();
        let mut free = Vec::new();
        let mut kvar = Vec::new();
        let mut cones = Vec::new();
        let mut degree = 0;
        for blk in prog.blocks() {
            let len = blk.cone.len();
            match blk.cone {
                Cone::Free(_) => free.extend(blk.offset..blk.offset + len),
                Cone::NonNeg(k) => {
                    if k > 0 {
                        cones.push(ConeSlice {
                            kind: Kind::NonNeg,
                            start: kvar.len(),
                            len: k,
                        });
                        kvar.extend(blk.offset..blk.offset + len);
                        degree += k;
                    }
                }
                Cone::Psd(d) => {
                    if d > 0 {
                        cones.push(ConeSlice {
                            kind: Kind::Psd(d),
                            start: kvar.len(),
                            len,
                        });
                        kvar.extend(blk.offset..blk.offset + len);
                        degree += d;
                    }
                }
            }
        }
        let mut rows: Vec<Vec<(usize, f64)>> =
            prog.equalities().iter().map(|e| e.coeffs.clone()).collect();
        let mut b: Vec<f64> = prog.equalities().iter().map(|e| e.rhs).collect();
        let mut c = prog.objective().to_vec();

        // Ruiz equilibration on A; PSD blocks get one scale per block.
        let mut row_scale = vec![1.0; m];
        let mut col_scale = vec![1.0; n];
        let psd_blocks: Vec<(usize, usize)> = prog
            .blocks()
            .iter()
            .filter(|blk| matches!(blk.cone, Cone::Psd(_)))
            .map(|blk| (blk.offset, blk.cone.len()))
            .collect();
        for _ in 0..RUIZ_PASSES {
            let mut rmax = vec![0.0f64; m];
            let mut cmax = vec![0.0f64; n];
            for (r, row) in rows.iter().enumerate() {
                for &(j, a) in row {
                    rmax[r] = rmax[r].max(a.abs());
                    cmax[j] = cmax[j].max(a.abs());
                }
            }
            for &(off, len) in &psd_blocks {
                let mx = cmax[off..off + len].iter().fold(0.0f64, |a, &b| a.max(b));
                cmax[off..off + len].iter_mut().for_each(|v| *v = mx);
            }
            let rs: Vec<f64> = rmax
                .iter()
                .map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 })
                .collect();
            let cs: Vec<f64> = cmax
                .iter()
                .map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 })
                .collect();
            for (r, row) in rows.iter_mut().enumerate() {
                for (j, a) in row.iter_mut() {
                    *a *= rs[r] * cs[*j];
                }
            }
            for r in 0..m {
                row_scale[r] *= rs[r];
            }
            for j in 0..n {
                col_scale[j] *= cs[j];
            }
        }
        for r in 0..m {
            b[r] *= row_scale[r];
        }
        for j in 0..n {
            c[j] *= col_scale[j];
        }

        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (r, row) in rows.iter().enumerate() {
            for &(j, a) in row {
                cols[j].push((r, a));
            }
        }

        let mut kpos = vec![usize::MAX; n];
        for (k, &v) in kvar.iter().enumerate() {
            kpos[v] = k;
        }
        let mut fpos = vec![usize::MAX; n];
        for (k, &v) in free.iter().enumerate() {
            fpos[v] = k;
        }
        let mut s_cone = vec![0usize; kvar.len()];
        for (ci, cone) in cones.iter().enumerate() {
            for k in cone.start..cone.start + cone.len {
                s_cone[k] = ci;
            }
        }

        // Rows coupled through a cone variable (or a whole PSD block) share a
        // component of the normal-equation matrix.
        let mut uf = UnionFind::new(m);
        for cone in &cones {
            match cone.kind {
                Kind::NonNeg => {
                    for k in cone.start..cone.start + cone.len {
                        let col = &cols[kvar[k]];
                        for w in col.windows(2) {
                            uf.union(w[0].0, w[1].0);
                        }
                    }
                }
                Kind::Psd(_) => {
                    let mut first = None;
                    for k in cone.start..cone.start + cone.len {
                        for &(r, _) in &cols[kvar[k]] {
                            match first {
                                None => first = Some(r),
                                Some(f) => uf.union(f, r),
                            }
                        }
                    }
                }
            }
        }
        // Rows over free variables only have a zero normal-equation block;
        // they are solved together with the free-variable Schur complement.
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        let mut free_rows = Vec::new();
        for r in 0..m {
            if rows[r].iter().all(|&(j, _)| kpos[j] == usize::MAX) {
                free_rows.push((r, rows[r].iter().map(|&(j, a)| (fpos[j], a)).collect()));
            } else {
                groups.entry(uf.find(r)).or_default().push(r);
            }
        }
        let comps = groups
            .into_values()
            .map(|rs| build_component(rs, &rows, &kpos, &fpos, &s_cone, &cones))
            .collect();

        Model {
            n,
            m,
            c,
            b,
            rows,
            cols,
            free,
            kvar,
            cones,
            degree,
            comps,
            free_rows,
            col_scale,
            row_scale,
        }
    }

    fn nk(&self) -> usize {
        self.kvar.len()
    }

    fn a_mul(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, a)| a * x[j]).sum())
            .collect()
    }

    fn at_mul(&self, y: &[f64]) -> Vec<f64> {
        self.cols
            .iter()
            .map(|col| col.iter().map(|&(r, a)| a * y[r]).sum())
            .collect()
    }

    // G x = -x_K
    fn g_mul(&self, x: &[f64]) -> Vec<f64> {
        self.kvar.iter().map(|&v| -x[v]).collect()
    }

    fn gt_mul_add(&self, z: &[f64], out: &mut [f64]) {
        for (k, &v) in self.kvar.iter().enumerate() {
            out[v] -= z[k];
        }
    }
}

fn build_component(
    rows_in: Vec<usize>,
    rows: &[Vec<(usize, f64)>],
    kpos: &[usize],
    fpos: &[usize],
    s_cone: &[usize],
    cones: &[ConeSlice],
) -> Component {
    let nr = rows_in.len();
    let mut nn: std::collections::BTreeMap<usize, Vec<(usize, f64)>> = Default::default();
    let mut psd: std::collections::BTreeMap<usize, std::collections::BTreeMap<usize, Vec<(usize, f64)>>> =
        Default::default();
    let mut free: std::collections::BTreeMap<usize, Vec<(usize, f64)>> = Default::default();
    for (lr, &r) in rows_in.iter().enumerate() {
        for &(j, a) in &rows[r] {
            if kpos[j] != usize::MAX {
                let k = kpos[j];
                let ci = s_cone[k];
                match cones[ci].kind {
                    Kind::NonNeg => nn.entry(k).or_default().push((lr, a)),
                    Kind::Psd(_) => psd
                        .entry(ci)
                        .or_default()
                        .entry(k - cones[ci].start)
                        .or_default()
                        .push((lr, a)),
                }
            } else {
                free.entry(fpos[j]).or_default().push((lr, a));
            }
        }
    }
    let psd = psd
        .into_iter()
        .map(|(cone, cols)| {
            let locals: Vec<usize> = cols.keys().copied().collect();
            let mut a = vec![0.0; nr * locals.len()];
            for (li, entries) in cols.values().enumerate() {
                for &(lr, v) in entries {
                    a[lr * locals.len() + li] = v;
                }
            }
            PsdGroup { cone, locals, a }
        })
        .collect();
    let free_cols: Vec<usize> = free.keys().copied().collect();
    let mut af = vec![0.0; nr * free_cols.len()];
    for (li, entries) in free.values().enumerate() {
        for &(lr, v) in entries {
            af[lr * free_cols.len() + li] = v;
        }
    }
    Component {
        rows: rows_in,
        nn: nn.into_iter().collect(),
        psd,
        free_cols,
        af,
    }
}

// ---------------------------------------------------------------------------
// Cone algebra. PSD slices are packed symmetric matrices (see program.rs).

fn unpack(d: usize, v: &[f64]) -> DMatrix<f64> {
    let full = crate::program::unpack_symmetric(d, v);
    DMatrix::from_row_slice(d, d, &full)
}

fn pack(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(packed_len(d));
    for j in 0..d {
        for i in j..d {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            out.push(if i == j { v } else { v * std::f64::consts::SQRT_2 });
        }
    }
    out
}

enum Scaling {
    NonNeg {
        w: Vec<f64>,
        lam: Vec<f64>,
    },
    Psd {
        d: usize,
        r: DMatrix<f64>,
        rinv: DMatrix<f64>,
        lam: Vec<f64>,
        // W'W in packed coordinates, row-major t x t
        wtw: Vec<f64>,
    },
}

impl Scaling {
    fn identity(cone: &ConeSlice) -> Self {
        match cone.kind {
            Kind::NonNeg => Scaling::NonNeg {
                w: vec![1.0; cone.len],
                lam: vec![1.0; cone.len],
            },
            Kind::Psd(d) => {
                let t = cone.len;
                let mut wtw = vec![0.0; t * t];
                for i in 0..t {
                    wtw[i * t + i] = 1.0;
                }
                Scaling::Psd {
                    d,
                    r: DMatrix::identity(d, d),
                    rinv: DMatrix::identity(d, d),
                    lam: vec![1.0; d],
                    wtw,
                }
            }
        }
    }

    /// Nesterov-Todd scaling point for interior `s`, `z`.
    fn nesterov_todd(cone: &ConeSlice, s: &[f64], z: &[f64]) -> Option<Self> {
        match cone.kind {
            Kind::NonNeg => {
                let w = s.iter().zip(z).map(|(a, b)| (a / b).sqrt()).collect();
                let lam = s.iter().zip(z).map(|(a, b)| (a * b).sqrt()).collect();
                Some(Scaling::NonNeg { w, lam })
            }
            Kind::Psd(d) => {
                let ls = unpack(d, s).cholesky()?.l();
                let lz = unpack(d, z).cholesky()?.l();
                let prod = lz.transpose() * &ls;
                let svd = prod.svd(true, true);
                let u = svd.u?;
                let vt = svd.v_t?;
                let sv = svd.singular_values;
                if sv.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                    return None;
                }
                let inv_sqrt = DMatrix::from_diagonal(&sv.map(|x| 1.0 / x.sqrt()));
                let r = &ls * vt.transpose() * &inv_sqrt;
                let rinv = &inv_sqrt * u.transpose() * lz.transpose();
                let p = &r * r.transpose();
                let t = cone.len;
                let mut wtw = vec![0.0; t * t];
                let mut e = vec![0.0; t];
                for col in 0..t {
                    e.iter_mut().for_each(|v| *v = 0.0);
                    e[col] = 1.0;
                    let em = unpack(d, &e);
                    let img = pack(&(&p * em * &p));
                    for row in 0..t {
                        wtw[row * t + col] = img[row];
                    }
                }
                // symmetrize against round-off
                for i in 0..t {
                    for j in 0..i {
                        let v = 0.5 * (wtw[i * t + j] + wtw[j * t + i]);
                        wtw[i * t + j] = v;
                        wtw[j * t + i] = v;
                    }
                }
                Some(Scaling::Psd {
                    d,
                    r,
                    rinv,
                    lam: sv.iter().copied().collect(),
                    wtw,
                })
            }
        }
    }

    // W v
    fn w(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Scaling::NonNeg { w, .. } => w.iter().zip(v).map(|(a, b)| a * b).collect(),
            Scaling::Psd { d, r, .. } => pack(&(r.transpose() * unpack(*d, v) * r)),
        }
    }

    // W' v
    fn wt(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Scaling::NonNeg { w, .. } => w.iter().zip(v).map(|(a, b)| a * b).collect(),
            Scaling::Psd { d, r, .. } => pack(&(r * unpack(*d, v) * r.transpose())),
        }
    }

    // W^{-T} v
    fn winvt(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Scaling::NonNeg { w, .. } => v.iter().zip(w).map(|(a, b)| a / b).collect(),
            Scaling::Psd { d, rinv, .. } => pack(&(rinv * unpack(*d, v) * rinv.transpose())),
        }
    }

    fn wtw(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Scaling::NonNeg { w, .. } => w.iter().zip(v).map(|(a, b)| a * a * b).collect(),
            Scaling::Psd { wtw, .. } => {
                let t = v.len();
                (0..t).map(|i| dot(&wtw[i * t..(i + 1) * t], v)).collect()
            }
        }
    }

    fn lambda(&self) -> Vec<f64> {
        match self {
            Scaling::NonNeg { lam, .. } => lam.clone(),
            Scaling::Psd { d, lam, .. } => pack(&DMatrix::from_diagonal(
                &nalgebra::DVector::from_column_slice(&lam[..*d]),
            )),
        }
    }

    // lambda \ v, the inverse of v -> lambda o v
    fn lambda_inv_circ(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Scaling::NonNeg { lam, .. } => v.iter().zip(lam).map(|(a, b)| a / b).collect(),
            Scaling::Psd { d, lam, .. } => {
                let mut out = v.to_vec();
                let mut k = 0;
                for j in 0..*d {
                    for i in j..*d {
                        out[k] = 2.0 * v[k] / (lam[i] + lam[j]);
                        k += 1;
                    }
                }
                out
            }
        }
    }
}

// Jordan product u o v
fn circ(cone: &ConeSlice, u: &[f64], v: &[f64]) -> Vec<f64> {
    match cone.kind {
        Kind::NonNeg => u.iter().zip(v).map(|(a, b)| a * b).collect(),
        Kind::Psd(d) => {
            let um = unpack(d, u);
            let vm = unpack(d, v);
            pack(&((&um * &vm + &vm * &um) * 0.5))
        }
    }
}

fn identity_element(cone: &ConeSlice) -> Vec<f64> {
    match cone.kind {
        Kind::NonNeg => vec![1.0; cone.len],
        Kind::Psd(d) => pack(&DMatrix::identity(d, d)),
    }
}

/// Largest `alpha` with `v + alpha * dv` in the cone (capped at `f64::MAX`).
fn max_step(cone: &ConeSlice, v: &[f64], dv: &[f64]) -> f64 {
    match cone.kind {
        Kind::NonNeg => v
            .iter()
            .zip(dv)
            .filter(|(_, &d)| d < 0.0)
            .map(|(&x, &d)| -x / d)
            .fold(f64::MAX, f64::min),
        Kind::Psd(d) => {
            let Some(chol) = unpack(d, v).cholesky() else {
                return 0.0;
            };
            let l = chol.l();
            let dm = unpack(d, dv);
            let Some(x) = l.solve_lower_triangular(&dm) else {
                return 0.0;
            };
            let Some(y) = l.solve_lower_triangular(&x.transpose()) else {
                return 0.0;
            };
            let sym = (&y + y.transpose()) * 0.5;
            let lmin = sym.symmetric_eigenvalues().min();
            if lmin >= 0.0 {
                f64::MAX
            } else {
                -1.0 / lmin
            }
        }
    }
}

/// Smallest eigenvalue (or entry) of a cone slice.
fn min_eig(cone: &ConeSlice, v: &[f64]) -> f64 {
    match cone.kind {
        Kind::NonNeg => v.iter().copied().fold(f64::MAX, f64::min),
        Kind::Psd(d) => unpack(d, v).symmetric_eigenvalues().min(),
    }
}

// ---------------------------------------------------------------------------
// KKT factorization and solve.

enum SchurFactor {
    None,
    /// Cholesky factor of the free-variable Schur complement after
    /// symmetric scaling to unit diagonal, with the scaling.
    Cholesky(Vec<f64>, Vec<f64>),
    /// LU of `P [S A_E'; A_E -reg] P` when some rows touch only free
    /// variables; `P` is the diagonal equilibration stored alongside.
    Saddle(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, Vec<f64>),
}

struct Factor {
    /// Per component: Cholesky factor of the equilibrated normal matrix and
    /// the diagonal scaling applied on both sides.
    comp_l: Vec<(Vec<f64>, Vec<f64>)>,
    schur: SchurFactor,
}

/// Static regularization proportional to each diagonal entry, so rows whose
/// scaling has collapsed keep their relative accuracy. Zero diagonals get
/// `rel * max diagonal` (or `fallback` when the whole diagonal is zero).
fn regularize(a: &mut [f64], n: usize, rel: f64, fallback: f64) {
    let maxd = (0..n).map(|i| a[i * n + i]).fold(0.0, f64::max);
    let floor = if maxd > 0.0 { rel * maxd } else { fallback };
    for i in 0..n {
        let d = a[i * n + i];
        a[i * n + i] += if d > 0.0 { rel * d } else { floor };
    }
}

/// Solves `M x = b` given the factor of `P M P` and `P`.
fn scaled_solve((l, p): &(Vec<f64>, Vec<f64>), x: &mut [f64]) {
    for (v, d) in x.iter_mut().zip(p) {
        *v *= d;
    }
    cholesky_solve(l, p.len(), x);
    for (v, d) in x.iter_mut().zip(p) {
        *v *= d;
    }
}

struct Kkt<'a> {
    model: &'a Model,
    scalings: &'a [Scaling],
    factor: Factor,
}

impl<'a> Kkt<'a> {
    fn new(model: &'a Model, scalings: &'a [Scaling]) -> Self {
        let p = model.free.len();
        let mut comp_l = Vec::with_capacity(model.comps.len());
        let mut s_mat = vec![0.0; p * p];
        for comp in &model.comps {
            let nr = comp.rows.len();
            let mut mm = vec![0.0; nr * nr];
            for (k, entries) in &comp.nn {
                let ci = cone_of(model, *k);
                let Scaling::NonNeg { w, .. } = &scalings[ci] else {
                    unreachable!()
                };
                let wk = w[*k - model.cones[ci].start];
                let dk = wk * wk;
                for &(ra, va) in entries {
                    for &(rb, vb) in entries {
                        mm[ra * nr + rb] += dk * va * vb;
                    }
                }
            }
            for g in &comp.psd {
                let Scaling::Psd { wtw, .. } = &scalings[g.cone] else {
                    unreachable!()
                };
                let t = model.cones[g.cone].len;
                let nl = g.locals.len();
                // B = A_g * D_g  (nr x nl)
                let mut bmat = vec![0.0; nr * nl];
                for r in 0..nr {
                    for (j, &lj) in g.locals.iter().enumerate() {
                        let mut acc = 0.0;
                        for (i, &li) in g.locals.iter().enumerate() {
                            let a = g.a[r * nl + i];
                            if a != 0.0 {
                                acc += a * wtw[li * t + lj];
                            }
                        }
                        bmat[r * nl + j] = acc;
                    }
                }
                for ra in 0..nr {
                    for rb in 0..nr {
                        mm[ra * nr + rb] +=
                            dot(&bmat[ra * nl..(ra + 1) * nl], &g.a[rb * nl..(rb + 1) * nl]);
                    }
                }
            }
            regularize(&mut mm, nr, 1e-13, 1e-8);
            // unit diagonal, so rows whose cone weights collapse are not
            // mistaken for dependent ones
            let dscale: Vec<f64> = (0..nr).map(|i| 1.0 / mm[i * nr + i].sqrt()).collect();
            for i in 0..nr {
                for j in 0..nr {
                    mm[i * nr + j] *= dscale[i] * dscale[j];
                }
            }
            cholesky_in_place(&mut mm, nr, PIVOT_TINY);
            let fac = (mm, dscale);
            // Schur contribution A_F' M^{-1} A_F
            let nf = comp.free_cols.len();
            if nf > 0 {
                let mut x = vec![0.0; nr];
                for a in 0..nf {
                    for r in 0..nr {
                        x[r] = comp.af[r * nf + a];
                    }
                    scaled_solve(&fac, &mut x);
                    for bcol in a..nf {
                        let mut acc = 0.0;
                        for r in 0..nr {
                            acc += comp.af[r * nf + bcol] * x[r];
                        }
                        let (ga, gb) = (comp.free_cols[a], comp.free_cols[bcol]);
                        s_mat[ga * p + gb] += acc;
                        if ga != gb {
                            s_mat[gb * p + ga] += acc;
                        }
                    }
                }
            }
            comp_l.push(fac);
        }
        let schur = if p == 0 && model.free_rows.is_empty() {
            SchurFactor::None
        } else if model.free_rows.is_empty() {
            regularize(&mut s_mat, p, 1e-14, 1e-10);
            let scale: Vec<f64> = (0..p).map(|i| 1.0 / s_mat[i * p + i].sqrt()).collect();
            for i in 0..p {
                for j in 0..p {
                    s_mat[i * p + j] *= scale[i] * scale[j];
                }
            }
            cholesky_in_place(&mut s_mat, p, PIVOT_TINY);
            SchurFactor::Cholesky(s_mat, scale)
        } else {
            let e = model.free_rows.len();
            regularize(&mut s_mat, p, 1e-14, 1e-10);
            let mut k = DMatrix::zeros(p + e, p + e);
            for i in 0..p {
                for j in 0..p {
                    k[(i, j)] = s_mat[i * p + j];
                }
            }
            for (q, (_, row)) in model.free_rows.iter().enumerate() {
                for &(f, a) in row {
                    k[(p + q, f)] += a;
                    k[(f, p + q)] += a;
                }
            }
            // scale free variables to unit diagonal and each pinned row by
            // its largest scaled coefficient
            let mut scale: Vec<f64> = (0..p).map(|i| 1.0 / k[(i, i)].sqrt()).collect();
            for q in 0..e {
                let mx = (0..p).map(|i| (k[(p + q, i)] * scale[i]).abs()).fold(0.0, f64::max);
                scale.push(if mx > 0.0 { 1.0 / mx } else { 1.0 });
            }
            for i in 0..p + e {
                for j in 0..p + e {
                    k[(i, j)] *= scale[i] * scale[j];
                }
            }
            for q in 0..e {
                k[(p + q, p + q)] = -1e-14;
            }
            SchurFactor::Saddle(k.lu(), scale)
        };
        Kkt {
            model,
            scalings,
            factor: Factor {
                comp_l,
                schur,
            },
        }
    }

    fn apply_d(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for (cone, sc) in self.model.cones.iter().zip(self.scalings) {
            let r = cone.start..cone.start + cone.len;
            out[r.clone()].copy_from_slice(&sc.wtw(&v[r]));
        }
        out
    }

    fn m_inv(&self, t: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; t.len()];
        for (comp, l) in self.model.comps.iter().zip(&self.factor.comp_l) {
            let mut x: Vec<f64> = comp.rows.iter().map(|&r| t[r]).collect();
            scaled_solve(l, &mut x);
            for (lr, &r) in comp.rows.iter().enumerate() {
                out[r] = x[lr];
            }
        }
        out
    }

    // A_F' w
    fn aft_mul(&self, w: &[f64]) -> Vec<f64> {
        let p = self.model.free.len();
        let mut out = vec![0.0; p];
        for comp in &self.model.comps {
            let nf = comp.free_cols.len();
            for (lr, &r) in comp.rows.iter().enumerate() {
                let wr = w[r];
                if wr == 0.0 {
                    continue;
                }
                for (li, &g) in comp.free_cols.iter().enumerate() {
                    out[g] += comp.af[lr * nf + li] * wr;
                }
            }
        }
        out
    }

    // A_F dxf
    fn af_mul(&self, dxf: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.model.m];
        for comp in &self.model.comps {
            let nf = comp.free_cols.len();
            for (lr, &r) in comp.rows.iter().enumerate() {
                out[r] = (0..nf)
                    .map(|li| comp.af[lr * nf + li] * dxf[comp.free_cols[li]])
                    .sum();
            }
        }
        out
    }

    fn solve_once(&self, rx: &[f64], ry: &[f64], rz: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let model = self.model;
        let rxk: Vec<f64> = model.kvar.iter().map(|&v| rx[v]).collect();
        let rxf: Vec<f64> = model.free.iter().map(|&v| rx[v]).collect();
        let drxk = self.apply_d(&rxk);
        let v: Vec<f64> = rz.iter().zip(&drxk).map(|(a, b)| a - b).collect();
        // t = ry + A_K v
        let mut vx = vec![0.0; model.n];
        for (k, &var) in model.kvar.iter().enumerate() {
            vx[var] = v[k];
        }
        let akv = model.a_mul(&vx);
        let t: Vec<f64> = ry.iter().zip(&akv).map(|(a, b)| a + b).collect();
        let p = model.free.len();
        let mut dxf = vec![0.0; p];
        let mut dy_free = Vec::new();
        match &self.factor.schur {
            SchurFactor::None => {}
            SchurFactor::Cholesky(l, scale) => {
                let w = self.m_inv(&t);
                let mut rhs = self.aft_mul(&w);
                axpy(1.0, &rxf, &mut rhs);
                for (v, d) in rhs.iter_mut().zip(scale) {
                    *v *= d;
                }
                cholesky_solve(l, p, &mut rhs);
                for (v, d) in rhs.iter_mut().zip(scale) {
                    *v *= d;
                }
                dxf = rhs;
            }
            SchurFactor::Saddle(lu, scale) => {
                let w = self.m_inv(&t);
                let mut rhs = self.aft_mul(&w);
                axpy(1.0, &rxf, &mut rhs);
                rhs.extend(model.free_rows.iter().map(|(r, _)| t[*r]));
                let rhs: Vec<f64> = rhs.iter().zip(scale).map(|(a, b)| a * b).collect();
                let sol = lu
                    .solve(&nalgebra::DVector::from_vec(rhs))
                    .unwrap_or_else(|| nalgebra::DVector::zeros(scale.len()));
                let sol: Vec<f64> = sol.iter().zip(scale).map(|(a, b)| a * b).collect();
                dxf.copy_from_slice(&sol[..p]);
                dy_free = sol[p..].to_vec();
            }
        }
        let afdx = self.af_mul(&dxf);
        let diff: Vec<f64> = afdx.iter().zip(&t).map(|(a, b)| a - b).collect();
        let mut dy = self.m_inv(&diff);
        for ((r, _), v) in model.free_rows.iter().zip(dy_free) {
            dy[*r] = v;
        }
        // dz = A_K' dy - rxk
        let aty = model.at_mul(&dy);
        let dz: Vec<f64> = model
            .kvar
            .iter()
            .zip(&rxk)
            .map(|(&var, r)| aty[var] - r)
            .collect();
        let ddz = self.apply_d(&dz);
        let mut dx = vec![0.0; model.n];
        for (k, &var) in model.kvar.iter().enumerate() {
            dx[var] = -rz[k] - ddz[k];
        }
        for (k, &var) in model.free.iter().enumerate() {
            dx[var] = dxf[k];
        }
        (dx, dy, dz)
    }

    fn residual(
        &self,
        rx: &[f64],
        ry: &[f64],
        rz: &[f64],
        dx: &[f64],
        dy: &[f64],
        dz: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let model = self.model;
        let mut kx = model.at_mul(dy);
        model.gt_mul_add(dz, &mut kx);
        let ex: Vec<f64> = rx.iter().zip(&kx).map(|(a, b)| a - b).collect();
        let ky = model.a_mul(dx);
        let ey: Vec<f64> = ry.iter().zip(&ky).map(|(a, b)| a - b).collect();
        let gdx = model.g_mul(dx);
        let ddz = self.apply_d(dz);
        let ez: Vec<f64> = (0..rz.len()).map(|k| rz[k] - (gdx[k] - ddz[k])).collect();
        (ex, ey, ez)
    }

    /// Solves `[0 A' G'; A 0 0; G 0 -W'W] [dx; dy; dz] = [rx; ry; rz]` with
    /// iterative refinement against the unregularized operator.
    fn solve(&self, rx: &[f64], ry: &[f64], rz: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (mut dx, mut dy, mut dz) = self.solve_once(rx, ry, rz);
        let scale = 1.0 + norm_inf(rx).max(norm_inf(ry)).max(norm_inf(rz));
        let mut last = f64::INFINITY;
        for _ in 0..6 {
            let (ex, ey, ez) = self.residual(rx, ry, rz, &dx, &dy, &dz);
            let err = norm_inf(&ex).max(norm_inf(&ey)).max(norm_inf(&ez));
            if err <= 1e-14 * scale || err >= 0.5 * last {
                break;
            }
            last = err;
            let (cx, cy, cz) = self.solve_once(&ex, &ey, &ez);
            axpy(1.0, &cx, &mut dx);
            axpy(1.0, &cy, &mut dy);
            axpy(1.0, &cz, &mut dz);
        }
        (dx, dy, dz)
    }
}

fn cone_of(model: &Model, k: usize) -> usize {
    // cones are contiguous and sorted by start
    match model.cones.binary_search_by(|c| {
        if k < c.start {
            std::cmp::Ordering::Greater
        } else if k >= c.start + c.len {
            std::cmp::Ordering::Less
        } else {
            std::cmp::Ordering::Equal
        }
    }) {
        Ok(i) => i,
        Err(_) => unreachable!("s-position {k} not covered by a cone"),
    }
}

// ---------------------------------------------------------------------------

struct Iterate {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
    tau: f64,
    kappa: f64,
}

fn shift_into_cone(model: &Model, v: &mut [f64]) {
    let mut lowest = f64::MAX;
    for cone in &model.cones {
        lowest = lowest.min(min_eig(cone, &v[cone.start..cone.start + cone.len]));
    }
    if model.cones.is_empty() {
        return;
    }
    let alpha = -lowest;
    if alpha >= 0.0 {
        for cone in &model.cones {
            let e = identity_element(cone);
            axpy(1.0 + alpha, &e, &mut v[cone.start..cone.start + cone.len]);
        }
    }
}

fn scalings_for(model: &Model, s: &[f64], z: &[f64]) -> Option<Vec<Scaling>> {
    model
        .cones
        .iter()
        .map(|c| {
            let r = c.start..c.start + c.len;
            Scaling::nesterov_todd(c, &s[r.clone()], &z[r])
        })
        .collect()
}

fn per_cone<F>(model: &Model, scalings: &[Scaling], v: &[f64], f: F) -> Vec<f64>
where
    F: Fn(&ConeSlice, &Scaling, &[f64]) -> Vec<f64>,
{
    let mut out = vec![0.0; v.len()];
    for (cone, sc) in model.cones.iter().zip(scalings) {
        let r = cone.start..cone.start + cone.len;
        out[r.clone()].copy_from_slice(&f(cone, sc, &v[r]));
    }
    out
}

fn cone_step(model: &Model, v: &[f64], dv: &[f64]) -> f64 {
    model
        .cones
        .iter()
        .map(|c| {
            let r = c.start..c.start + c.len;
            max_step(c, &v[r.clone()], &dv[r])
        })
        .fold(f64::MAX, f64::min)
}

struct Direction {
    dx: Vec<f64>,
    dy: Vec<f64>,
    dz: Vec<f64>,
    ds: Vec<f64>,
    dtau: f64,
    dkappa: f64,
}

pub(crate) fn solve(prog: &ConicProgram, tol: &Tolerances) -> SolveResult {
    let model = Model::new(prog);
    let n = model.n;
    let m = model.m;
    let nk = model.nk();
    let h = vec![0.0; nk];

    // Initial point from two least-squares style solves with W = I.
    let ident: Vec<Scaling> = model.cones.iter().map(Scaling::identity).collect();
    let kkt0 = Kkt::new(&model, &ident);
    let (x0, _, zp) = kkt0.solve(&vec![0.0; n], &model.b, &h);
    let mut s0: Vec<f64> = zp.iter().map(|v| -v).collect();
    shift_into_cone(&model, &mut s0);
    let neg_c: Vec<f64> = model.c.iter().map(|v| -v).collect();
    let (_, y0, mut z0) = kkt0.solve(&neg_c, &vec![0.0; m], &vec![0.0; nk]);
    shift_into_cone(&model, &mut z0);
    drop(kkt0);

    let mut it = Iterate {
        x: x0,
        y: y0,
        z: z0,
        s: s0,
        tau: 1.0,
        kappa: 1.0,
    };

    let mut status = SolveStatus::NumericalLimit;
    let mut iterations = 0;
    let mut report = Report::default();
    for k in 0..=tol.max_iter {
        iterations = k;
        report = evaluate(prog, &model, &it);
        log::trace!(
            "ipm {k:3} pcost {:+.9e} dcost {:+.9e} pres {:.2e} dres {:.2e} gap {:.2e} compl {:.2e} tau {:.2e} kappa {:.2e}",
            report.pcost,
            report.dcost,
            report.pres,
            report.dres,
            report.relgap,
            report.absgap,
            it.tau,
            it.kappa
        );
        if report.pres <= tol.feas_tol
            && report.dres <= tol.feas_tol
            && report.relgap <= tol.gap_tol
        {
            status = SolveStatus::Optimal;
            break;
        }
        if report.primal_infeasible_ratio <= tol.infeas_tol {
            status = SolveStatus::Infeasible;
            break;
        }
        if report.dual_infeasible_ratio <= tol.infeas_tol {
            status = SolveStatus::Unbounded;
            break;
        }
        if k == tol.max_iter {
            break;
        }

        // residuals in scaled space
        let mut rx = model.at_mul(&it.y);
        model.gt_mul_add(&it.z, &mut rx);
        axpy(it.tau, &model.c, &mut rx);
        let mut ry = model.a_mul(&it.x);
        axpy(-it.tau, &model.b, &mut ry);
        let gx = model.g_mul(&it.x);
        let rz: Vec<f64> = (0..nk).map(|i| it.s[i] + gx[i] - it.tau * h[i]).collect();
        let rtau = it.kappa + dot(&model.c, &it.x) + dot(&model.b, &it.y) + dot(&h, &it.z);
        let mu = (dot(&it.s, &it.z) + it.tau * it.kappa) / (model.degree as f64 + 1.0);

        let Some(scalings) = scalings_for(&model, &it.s, &it.z) else {
            log::debug!("ipm: scaling failed at iteration {k}");
            break;
        };
        let kkt = Kkt::new(&model, &scalings);
        let (u1x, u1y, u1z) = kkt.solve(&neg_c, &model.b, &h);
        let denom = dot(&model.c, &u1x) + dot(&model.b, &u1y) + dot(&h, &u1z) - it.kappa / it.tau;
        let lam = per_cone(&model, &scalings, &it.s, |_, sc, _| sc.lambda());

        let direction = |dxr: f64, ds_target: &[f64], dkappa_target: f64| -> Direction {
            let winv_part = per_cone(&model, &scalings, ds_target, |_, sc, v| {
                sc.wt(&sc.lambda_inv_circ(v))
            });
            let rhs_x: Vec<f64> = rx.iter().map(|v| -dxr * v).collect();
            let rhs_y: Vec<f64> = ry.iter().map(|v| -dxr * v).collect();
            let rhs_z: Vec<f64> = (0..nk).map(|i| -dxr * rz[i] + winv_part[i]).collect();
            let (u0x, u0y, u0z) = kkt.solve(&rhs_x, &rhs_y, &rhs_z);
            let num = -dxr * rtau + dkappa_target / it.tau
                - (dot(&model.c, &u0x) + dot(&model.b, &u0y) + dot(&h, &u0z));
            let dtau = num / denom;
            let mut dx = u0x;
            axpy(dtau, &u1x, &mut dx);
            let mut dy = u0y;
            axpy(dtau, &u1y, &mut dy);
            let mut dz = u0z;
            axpy(dtau, &u1z, &mut dz);
            // ds = -W'(lambda \ d_s + W dz)
            let ds = {
                let inner = per_cone(&model, &scalings, ds_target, |_, sc, v| sc.lambda_inv_circ(v));
                let wdz = per_cone(&model, &scalings, &dz, |_, sc, v| sc.w(v));
                let sum: Vec<f64> = inner.iter().zip(&wdz).map(|(a, b)| a + b).collect();
                per_cone(&model, &scalings, &sum, |_, sc, v| {
                    sc.wt(v).into_iter().map(|x| -x).collect()
                })
            };
            let dkappa = -(dkappa_target + it.kappa * dtau) / it.tau;
            Direction {
                dx,
                dy,
                dz,
                ds,
                dtau,
                dkappa,
            }
        };

        let step_len = |d: &Direction| -> f64 {
            let mut a = cone_step(&model, &it.s, &d.ds).min(cone_step(&model, &it.z, &d.dz));
            if d.dtau < 0.0 {
                a = a.min(-it.tau / d.dtau);
            }
            if d.dkappa < 0.0 {
                a = a.min(-it.kappa / d.dkappa);
            }
            a
        };

        // predictor
        let ds_aff = per_cone(&model, &scalings, &lam, |c, _, v| circ(c, v, v));
        let aff = direction(1.0, &ds_aff, it.kappa * it.tau);
        let alpha_aff = step_len(&aff).min(1.0);
        let sigma = (1.0 - alpha_aff).powi(3).clamp(0.0, 1.0);

        // corrector
        let ws = per_cone(&model, &scalings, &aff.ds, |_, sc, v| sc.winvt(v));
        let wz = per_cone(&model, &scalings, &aff.dz, |_, sc, v| sc.w(v));
        let mut ds_cc = ds_aff.clone();
        for (cone, _) in model.cones.iter().zip(&scalings) {
            let r = cone.start..cone.start + cone.len;
            let corr = circ(cone, &ws[r.clone()], &wz[r.clone()]);
            let e = identity_element(cone);
            for (i, idx) in r.enumerate() {
                ds_cc[idx] += corr[i] - sigma * mu * e[i];
            }
        }
        let dk_cc = it.kappa * it.tau + aff.dkappa * aff.dtau - sigma * mu;
        let dir = direction(1.0 - sigma, &ds_cc, dk_cc);
        let alpha = (STEP_FRACTION * step_len(&dir)).min(1.0);
        if !(alpha > 1e-12) || !alpha.is_finite() {
            log::debug!("ipm: step length collapsed at iteration {k}");
            break;
        }
        log::trace!("ipm {k:3} step {alpha:.3e} affine {alpha_aff:.3e} sigma {sigma:.3e}");
        axpy(alpha, &dir.dx, &mut it.x);
        axpy(alpha, &dir.dy, &mut it.y);
        axpy(alpha, &dir.dz, &mut it.z);
        axpy(alpha, &dir.ds, &mut it.s);
        it.tau += alpha * dir.dtau;
        it.kappa += alpha * dir.dkappa;
        if it.x.iter().chain(&it.y).chain(&it.z).any(|v| !v.is_finite()) {
            break;
        }
    }

    let (primal, dual) = report_point(prog, &model, &it, status);
    SolveResult {
        status,
        objective_value: prog.objective_value(&primal),
        primal,
        dual,
        residuals: Residuals {
            primal: report.pres,
            dual: report.dres,
            gap: report.relgap,
        },
        iterations,
    }
}

#[derive(Default)]
struct Report {
    pcost: f64,
    dcost: f64,
    pres: f64,
    dres: f64,
    /// Larger of complementarity and objective gap, relative.
    relgap: f64,
    /// Complementarity `s'z / tau^2`.
    absgap: f64,
    primal_infeasible_ratio: f64,
    dual_infeasible_ratio: f64,
}

// Unscaled x, y, z, s from the scaled iterate (not divided by tau).
fn unscale(model: &Model, it: &Iterate) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let x: Vec<f64> = it.x.iter().zip(&model.col_scale).map(|(a, b)| a * b).collect();
    let y: Vec<f64> = it.y.iter().zip(&model.row_scale).map(|(a, b)| a * b).collect();
    let z: Vec<f64> = it
        .z
        .iter()
        .zip(&model.kvar)
        .map(|(a, &v)| a / model.col_scale[v])
        .collect();
    let s: Vec<f64> = it
        .s
        .iter()
        .zip(&model.kvar)
        .map(|(a, &v)| a * model.col_scale[v])
        .collect();
    (x, y, z, s)
}

fn evaluate(prog: &ConicProgram, model: &Model, it: &Iterate) -> Report {
    let (x, y, z, s) = unscale(model, it);
    let c = prog.objective();
    let b: Vec<f64> = prog.equalities().iter().map(|e| e.rhs).collect();
    let ax: Vec<f64> = prog
        .equalities()
        .iter()
        .map(|e| e.coeffs.iter().map(|&(j, a)| a * x[j]).sum())
        .collect();
    let mut aty = vec![0.0; model.n];
    for (r, e) in prog.equalities().iter().enumerate() {
        for &(j, a) in &e.coeffs {
            aty[j] += a * y[r];
        }
    }
    // A'y + G'z (G'z scatters -z onto cone variables)
    let mut dual_lin = aty.clone();
    for (k, &v) in model.kvar.iter().enumerate() {
        dual_lin[v] -= z[k];
    }
    let tau = it.tau;
    let bnorm = 1.0 + norm_inf(&b);
    let cnorm = 1.0 + norm_inf(c);
    let pres_eq = ax
        .iter()
        .zip(&b)
        .map(|(a, bb)| (a / tau - bb).abs())
        .fold(0.0, f64::max);
    let pres_cone = model
        .kvar
        .iter()
        .zip(&s)
        .map(|(&v, sv)| ((sv - x[v]) / tau).abs())
        .fold(0.0, f64::max);
    let pres = pres_eq.max(pres_cone) / bnorm;
    let dres = dual_lin
        .iter()
        .zip(c)
        .map(|(a, cc)| (a / tau + cc).abs())
        .fold(0.0, f64::max)
        / cnorm;
    let pcost = dot(c, &x) / tau;
    let dcost = -dot(&b, &y) / tau;
    let absgap = (dot(&s, &z) / (tau * tau)).abs();
    let relgap = absgap.max((pcost - dcost).abs()) / pcost.abs().min(dcost.abs()).max(1.0);

    let by = dot(&b, &y);
    let primal_infeasible_ratio = if by < 0.0 {
        norm_inf(&dual_lin) / -by
    } else {
        f64::INFINITY
    };
    let cx = dot(c, &x);
    let dual_infeasible_ratio = if cx < 0.0 {
        let ax_norm = norm_inf(&ax);
        let cone_norm = model
            .kvar
            .iter()
            .zip(&s)
            .map(|(&v, sv)| (sv - x[v]).abs())
            .fold(0.0, f64::max);
        ax_norm.max(cone_norm) / -cx
    } else {
        f64::INFINITY
    };
    Report {
        pcost,
        dcost,
        pres,
        dres,
        relgap,
        absgap,
        primal_infeasible_ratio,
        dual_infeasible_ratio,
    }
}

fn report_point(
    _prog: &ConicProgram,
    model: &Model,
    it: &Iterate,
    status: SolveStatus,
) -> (Vec<f64>, Vec<f64>) {
    let (x, y, _z, s) = unscale(model, it);
    match status {
        SolveStatus::Infeasible => (vec![f64::NAN; model.n], y),
        SolveStatus::Unbounded => (x, vec![f64::NAN; model.m]),
        _ => {
            let tau = it.tau;
            let mut primal: Vec<f64> = x.iter().map(|v| v / tau).collect();
            // cone variables are reported from the slack, which is strictly
            // inside the cone
            for (k, &v) in model.kvar.iter().enumerate() {
                primal[v] = s[k] / tau;
            }
            (primal, y.iter().map(|v| v / tau).collect())
        }
    }
}
