use metriplectic::dynamics::*;
use metriplectic::sysid::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn data(sys: &MetriplecticSystem, m: usize, seed: u64) -> TrajectoryDataset {
    let region = if sys.dim() == 2 {
        SamplingRegion::square(2, 1.3)
    } else {
        SamplingRegion::Shell { dim: 3, r_min: 0.3, r_max: 2.0 }
    };
    generate_dataset(
        sys,
        &DatasetSpec {
            n_trajectories: m,
            n_samples_per: 1,
            stride: 1,
            dt: 1e-3,
            region,
            seed,
            derivative: DerivativeMode::Exact,
        },
    )
    .unwrap()
}

fn setup(sys: &MetriplecticSystem, cfg: &IdentConfig, m: usize) -> IdentProblem {
    let ansatz = Ansatz::for_system(sys, cfg).unwrap();
    IdentProblem::new(ansatz, &data(sys, m, 5)).unwrap()
}

fn demo_cfg() -> IdentConfig {
    IdentConfig {
        entropy_degree: 8,
        metric_degree: 2,
        cost_threshold: 0.0,
        stop_tol: 0.0,
        certificate_samples: 200,
        ..IdentConfig::default()
    }
}

#[test]
fn metric_search_recovers_truth_given_entropy() {
    let sys = MetriplecticSystem::demo2d();
    let cfg = demo_cfg();
    let problem = setup(&sys, &cfg, 100);
    let psi = problem.ansatz().psi_of(sys.entropy()).unwrap();
    let all: Vec<usize> = (0..problem.len()).collect();
    let sol = metric_search(&problem, &all, &psi, &cfg).unwrap();
    assert!(sol.objective < 1e-6, "objective {}", sol.objective);
    assert!(problem.full_cost(&sol.params, &psi) < 1e-6);
    let rep = problem.verify(&sol.params, cfg.eta, 1000, 1).unwrap();
    assert!(rep.passed, "{rep:?}");
    let param = problem.ansatz().metric_param();
    let (lo, hi) = problem.data_box();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let x: Vec<f64> = lo.iter().zip(hi).map(|(&a, &b)| rng.random_range(a..b)).collect();
        let k = param.eval(&sol.params, &x);
        let dev = (k - nalgebra::DMatrix::identity(2, 2)).amax();
        assert!(dev < 1e-4, "K deviates from I by {dev} at {x:?}");
    }
}

#[test]
fn entropy_search_recovers_truth_given_metric() {
    let sys = MetriplecticSystem::demo2d();
    let cfg = demo_cfg();
    let problem = setup(&sys, &cfg, 100);
    let theta = problem.ansatz().metric_param().theta_of(sys.metric()).unwrap();
    let all: Vec<usize> = (0..problem.len()).collect();
    let sol = entropy_search(&problem, &all, &theta, &cfg).unwrap();
    assert!(sol.objective < 1e-6, "objective {}", sol.objective);
    assert!(problem.full_cost(&theta, &sol.params) < 1e-6);
    assert_eq!(sol.params[0], 0.0);
    assert!(sol.params.iter().all(|p| p.abs() <= cfg.eta + 1e-9));
    let rms = compare_fields(problem.ansatz(), &theta, &sol.params, &sys, 500, &[-1.3; 2], &[1.3; 2], 3).unwrap();
    assert!(rms < 1e-4, "field rms {rms}");
    let fitted = problem.ansatz().entropy(&sol.params).grad();
    let truth = sys.entropy().grad();
    let (lo, hi) = problem.data_box();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let x: Vec<f64> = lo.iter().zip(hi).map(|(&a, &b)| rng.random_range(a..b)).collect();
        for i in 0..2 {
            let (a, b) = (fitted[i].eval(&x).unwrap(), truth[i].eval(&x).unwrap());
            assert!((a - b).abs() < 1e-4 * (1.0 + b.abs()), "dS/dx{i}: {a} vs {b}");
        }
    }
}

#[test]
fn zero_eta_pins_everything() {
    let sys = MetriplecticSystem::demo2d();
    let cfg = IdentConfig { eta: 0.0, ..demo_cfg() };
    let problem = setup(&sys, &cfg, 40);
    let all: Vec<usize> = (0..problem.len()).collect();
    let psi = vec![0.0; problem.ansatz().num_psi()];
    let sol = metric_search(&problem, &all, &psi, &cfg).unwrap();
    assert!(sol.params.iter().all(|t| t.abs() < 1e-6));
    let theta = problem.ansatz().metric_param().scaled_identity(1.0);
    let sol = entropy_search(&problem, &all, &theta, &cfg).unwrap();
    assert!(sol.params.iter().all(|p| p.abs() < 1e-6));
    let fixed = problem.full_cost(&theta, &psi);
    assert!((sol.objective - fixed).abs() <= 1e-6 * fixed, "{} vs {fixed}", sol.objective);
    // nothing to fit beyond the Hamiltonian part
    let zero_theta = vec![0.0; theta.len()];
    let base = problem.full_cost(&zero_theta, &psi);
    let run = bilevel(&problem, &IdentConfig { max_iters: 2, ..cfg }).unwrap();
    assert!((run.state.final_full_cost().unwrap() - base).abs() < 1e-5 * base);
}

#[test]
fn full_batch_stochastic_matches_bilevel() {
    let sys = MetriplecticSystem::demo2d();
    let cfg = IdentConfig { max_iters: 3, ..demo_cfg() };
    let problem = setup(&sys, &cfg, 60);
    let a = bilevel(&problem, &cfg).unwrap();
    let b = stochastic_bilevel(&problem, &IdentConfig { batch_size: Some(60), seed: 99, ..cfg }).unwrap();
    assert_eq!(a.state, b.state);
    assert!(a.is_monotone(1e-6), "worst increase {}", a.state.worst_full_cost_increase(Some(a.initial_full_cost)));
    assert!(a.certificate_failures.is_empty());
    assert!(a.state.final_full_cost().unwrap() < a.initial_full_cost);
    assert_eq!(a.state.cost_history.len(), 6);
}

#[test]
fn stochastic_runs_are_deterministic() {
    let sys = MetriplecticSystem::so3([1.0, 2.0, 3.0]).unwrap();
    let cfg = IdentConfig {
        entropy_degree: 4,
        max_iters: 3,
        batch_size: Some(30),
        seed: 4,
        ..demo_cfg()
    };
    let problem = setup(&sys, &cfg, 80);
    let a = stochastic_bilevel(&problem, &cfg).unwrap();
    let b = stochastic_bilevel(&problem, &cfg).unwrap();
    assert_eq!(a, b);
    let c = stochastic_bilevel(&problem, &IdentConfig { seed: 5, ..cfg }).unwrap();
    assert_ne!(a.state.cost_history, c.state.cost_history);
    // batch cost never exceeds the incumbent within an iteration
    for w in a.state.cost_history.chunks(2) {
        assert!(w[1].batch_cost <= w[0].batch_cost + 1e-9);
    }
}

#[test]
fn truth_is_a_fixed_point() {
    let sys = MetriplecticSystem::demo2d();
    let cfg = IdentConfig { max_iters: 1, ..demo_cfg() };
    let problem = setup(&sys, &cfg, 50);
    let mut init = IdentState::initial(problem.ansatz());
    init.theta = problem.ansatz().metric_param().theta_of(sys.metric()).unwrap();
    init.psi = problem.ansatz().psi_of(sys.entropy()).unwrap();
    let run = bilevel_from(&problem, &cfg, init.clone()).unwrap();
    assert!(run.initial_full_cost < 1e-9);
    assert!(run.final_cost_per_sample(problem.len()) < 1e-8);
    // with a threshold the loop stops before solving anything
    let run = bilevel_from(&problem, &IdentConfig { cost_threshold: 1e-6, ..cfg }, init.clone()).unwrap();
    assert_eq!(run.outcome, Outcome::Converged);
    assert_eq!(run.state, init);
}

#[test]
fn invalid_inputs() {
    let sys = MetriplecticSystem::demo2d();
    let cfg = demo_cfg();
    let problem = setup(&sys, &cfg, 10);
    let psi = vec![0.0; problem.ansatz().num_psi()];
    assert_eq!(metric_search(&problem, &[], &psi, &cfg).unwrap_err(), IdentError::Empty);
    assert_eq!(metric_search(&problem, &[10], &psi, &cfg).unwrap_err(), IdentError::Empty);
    let err = stochastic_bilevel(&problem, &IdentConfig { batch_size: Some(11), ..cfg }).unwrap_err();
    assert!(matches!(err.error, IdentError::Config(_)));
    let so3 = data(&MetriplecticSystem::so3([1.0; 3]).unwrap(), 5, 1);
    assert!(IdentProblem::new(problem.ansatz().clone(), &so3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cost_is_one_norm_of_residuals(seed in 0u64..1000) {
        let sys = MetriplecticSystem::so3([1.0, 2.0, 3.0]).unwrap();
        let cfg = IdentConfig { entropy_degree: 4, ..demo_cfg() };
        let ansatz = Ansatz::for_system(&sys, &cfg).unwrap();
        let ds = data(&sys, 12, seed);
        let problem = IdentProblem::new(ansatz, &ds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta: Vec<f64> = (0..problem.ansatz().metric_param().num_theta()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let psi: Vec<f64> = (0..problem.ansatz().num_psi()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let by_hand: f64 = (0..problem.len())
            .map(|i| problem.residual_at(i, &theta, &psi).iter().map(|r| r.abs()).sum::<f64>())
            .sum();
        let full = problem.full_cost(&theta, &psi);
        prop_assert!((full - by_hand).abs() <= 1e-12 * by_hand.max(1.0));
        let all: Vec<usize> = (0..problem.len()).collect();
        prop_assert_eq!(problem.batch_cost(&all, &theta, &psi), full);
        // residual is the data derivative minus the model field
        let x = &ds.samples[0].x;
        let f = problem.ansatz().field(&theta, &psi, x);
        let r = problem.residual_at(0, &theta, &psi);
        for i in 0..3 {
            prop_assert!((r[i] - (ds.samples[0].xdot[i] - f[i])).abs() < 1e-12 * (1.0 + f[i].abs()));
        }
    }
}
