use conic::{Cone, ProgramBuilder, SolveResult, SolveStatus, Tolerances};
use metriplectic::sos::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy)]
enum Builder {
    Lower,
    Full(f64),
    Reduced(f64),
}

fn add(b: &mut ProgramBuilder, param: &MetricParam, vars: &[usize], which: Builder) -> SosCertificate {
    match which {
        Builder::Lower => build_psd_constraints(b, param, vars),
        Builder::Full(eta) => build_sos_constraints(b, param, eta, vars),
        Builder::Reduced(eta) => build_sos_constraints_reduced(b, param, eta, vars),
    }
    .unwrap()
}

/// Feasibility of a fixed metric.
fn fixed(param: &MetricParam, theta: &[f64], which: Builder) -> SolveResult {
    let mut b = ProgramBuilder::new();
    let t = b.add_var_block(Cone::Free(param.num_theta()));
    let vars: Vec<usize> = (0..param.num_theta()).map(|k| t.var(k)).collect();
    for (k, &v) in theta.iter().enumerate() {
        b.add_equality([(vars[k], 1.0)], v).unwrap();
    }
    add(&mut b, param, &vars, which);
    b.set_objective([]).unwrap();
    conic::solve(&b.finalize().unwrap(), &Tolerances::default())
}

fn monomial(param: &MetricParam, exps: &[u32]) -> usize {
    param.basis().iter().position(|e| e.as_slice() == exps).unwrap()
}

#[test]
fn scalar_examples() {
    let p = MetricParam::new(1, 2);
    let mut x2 = vec![0.0; 3];
    x2[monomial(&p, &[2])] = 1.0;
    let r = fixed(&p, &x2, Builder::Lower);
    assert_eq!(r.status, SolveStatus::Optimal);

    // K(x) = [x] changes sign
    let mut x1 = vec![0.0; 3];
    x1[monomial(&p, &[1])] = 1.0;
    assert_eq!(fixed(&p, &x1, Builder::Lower).status, SolveStatus::Infeasible);
    assert_eq!(fixed(&p, &x1, Builder::Reduced(10.0)).status, SolveStatus::Infeasible);

    // x^2 is unbounded, so eta - x^2 is not SOS
    assert_eq!(fixed(&p, &x2, Builder::Reduced(10.0)).status, SolveStatus::Infeasible);
}

#[test]
fn identity_and_bounds() {
    for (n, s) in [(2, 0), (2, 2), (3, 2)] {
        let p = MetricParam::new(n, s);
        for which in [Builder::Reduced(2.0), Builder::Full(2.0), Builder::Lower] {
            let r = fixed(&p, &p.scaled_identity(1.0), which);
            assert_eq!(r.status, SolveStatus::Optimal, "n={n} s={s}");
        }
        assert_eq!(fixed(&p, &p.scaled_identity(3.0), Builder::Reduced(2.0)).status, SolveStatus::Infeasible);
        assert_eq!(fixed(&p, &p.scaled_identity(-0.5), Builder::Lower).status, SolveStatus::Infeasible);
        assert_eq!(fixed(&p, &p.scaled_identity(0.0), Builder::Reduced(2.0)).status, SolveStatus::Optimal);
    }
}

#[test]
fn degree_zero_metric() {
    let p = MetricParam::new(2, 0);
    assert_eq!(p.num_theta(), 3);
    assert_eq!(GramBasis::reduced(2, 0).unwrap(), GramBasis::new(2, 0).unwrap());
    // [[1, 0.9], [0.9, 1]] has eigenvalues 0.1 and 1.9
    let theta = vec![1.0, 0.9, 1.0];
    assert_eq!(fixed(&p, &theta, Builder::Reduced(2.0)).status, SolveStatus::Optimal);
    assert_eq!(fixed(&p, &theta, Builder::Reduced(1.5)).status, SolveStatus::Infeasible);
    assert_eq!(fixed(&p, &[1.0, 1.1, 1.0], Builder::Lower).status, SolveStatus::Infeasible);
}

#[test]
fn builder_errors() {
    let p = MetricParam::new(2, 2);
    let mut b = ProgramBuilder::new();
    let t = b.add_var_block(Cone::Free(p.num_theta()));
    let vars: Vec<usize> = (0..p.num_theta()).map(|k| t.var(k)).collect();
    assert_eq!(build_sos_constraints(&mut b, &p, 0.0, &vars).unwrap_err(), SosError::NonPositiveEta(0.0));
    assert!(matches!(build_sos_constraints(&mut b, &p, 1.0, &vars[1..]), Err(SosError::ThetaLength { .. })));
    assert_eq!(GramBasis::new(2, 1).unwrap_err(), SosError::OddDegree(1));
}

#[test]
fn reduced_basis_drops_forced_zeros() {
    // with s = 2 every y_i x_k element is dropped: y_i^2 x_k^2 has one cell
    assert_eq!(GramBasis::reduced(2, 2).unwrap().block_dim(), 2);
    assert_eq!(GramBasis::reduced(3, 2).unwrap().block_dim(), 3);
    let full = GramBasis::new(2, 4).unwrap();
    let red = GramBasis::reduced(2, 4).unwrap();
    assert!(red.block_dim() < full.block_dim());
    for a in 0..red.block_dim() {
        let (_, m) = red.element(a);
        assert!(m.degree() < 2, "kept {m:?}");
    }
}

/// Brute-force accounting: every (a, b) cell lands on exactly one monomial.
#[test]
fn monomial_support_accounting() {
    for (n, s) in [(1, 2), (2, 2), (2, 4), (3, 2), (3, 4)] {
        let g = GramBasis::new(n, s).unwrap();
        let p = MetricParam::new(n, s);
        let d = g.block_dim();
        let support = g.monomial_support();
        let total: usize = support.values().map(Vec::len).sum();
        assert_eq!(total, d * (d + 1) / 2);
        for ((i, j, gamma), cells) in &support {
            assert!(p.basis().contains(gamma));
            for &(a, b) in cells {
                assert!(a >= b);
                let (ia, ma) = g.element(a);
                let (ib, mb) = g.element(b);
                assert_eq!((ia.min(ib), ia.max(ib)), (*i, *j));
                assert_eq!(ma.product(mb), *gamma);
            }
        }
        // each (pair, monomial) of the full parameterization is reachable
        assert_eq!(support.len(), p.num_theta());
    }
}

fn random_psd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d + 1, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose()
}

/// z'Qz evaluated directly agrees with y'K(x)y for the K read from Q.
#[test]
fn gram_to_metric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (n, s) in [(2, 2), (3, 2), (2, 4)] {
        let g = GramBasis::new(n, s).unwrap();
        let p = MetricParam::new(n, s);
        let d = g.block_dim();
        let q = random_psd(d, &mut rng);
        let theta = theta_from_gram(&p, &g, &conic::pack_symmetric(d, q.as_slice()));
        for _ in 0..20 {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
            let y = nalgebra::DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let z = nalgebra::DVector::from_fn(d, |a, _| {
                let (i, m) = g.element(a);
                y[i] * m.eval(&x)
            });
            let direct = (z.transpose() * &q * &z)[(0, 0)];
            let via_k = (y.transpose() * p.eval(&theta, &x) * &y)[(0, 0)];
            assert!((direct - via_k).abs() < 1e-10 * (1.0 + direct.abs()), "{direct} vs {via_k}");
            assert!(p.eval(&theta, &x).symmetric_eigenvalues().min() > -1e-10);
        }
        let r = fixed(&p, &theta, Builder::Lower);
        assert_eq!(r.status, SolveStatus::Optimal);
    }
}

/// Optimizing a random objective over the certified set and sampling the
/// result never finds eigenvalues outside [0, eta] beyond solver accuracy.
#[test]
fn certificates_are_sound() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (n, s, eta) in [(2, 2, 5.0), (3, 2, 2.0), (2, 4, 3.0)] {
        let p = MetricParam::new(n, s);
        for trial in 0..3 {
            let mut b = ProgramBuilder::new();
            let t = b.add_var_block(Cone::Free(p.num_theta()));
            let vars: Vec<usize> = (0..p.num_theta()).map(|k| t.var(k)).collect();
            let cert = add(&mut b, &p, &vars, Builder::Reduced(eta));
            b.set_objective(vars.iter().map(|&v| (v, rng.random_range(-1.0..1.0)))).unwrap();
            let r = conic::solve(&b.finalize().unwrap(), &Tolerances::default());
            assert_eq!(r.status, SolveStatus::Optimal, "n={n} s={s} trial={trial}");
            let theta: Vec<f64> = vars.iter().map(|&v| r.primal[v]).collect();
            let rep = verify_certificate(&p, &theta, eta, 1000, trial, &vec![-2.0; n], &vec![2.0; n]).unwrap();
            assert!(rep.min_eigenvalue >= -1e-7 && rep.max_eigenvalue <= eta + 1e-7, "{rep:?}");
            // the metric read from the lower Gram matrix matches theta
            let back = theta_from_gram(&p, &cert.basis, &cert.gram_plus_values(&r.primal));
            let err = back.iter().zip(&theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "gram/theta mismatch {err}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn param_round_trip(n in 1usize..4, half in 0u32..3, seed in 0u64..1000) {
        let p = MetricParam::new(n, 2 * half);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta: Vec<f64> = (0..p.num_theta()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = p.metric(&theta).unwrap();
        prop_assert_eq!(p.theta_of(&k).unwrap(), theta.clone());
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = p.eval(&theta, &x);
        prop_assert!((&m - m.transpose()).amax() == 0.0);
        prop_assert!((k.eval(&x).unwrap() - m).amax() < 1e-12);
    }
}
