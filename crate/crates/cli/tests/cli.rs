use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metriplectic_cli::commands::{self, identify_exit_code, Algorithm, IdentifyOverrides};
use metriplectic_cli::config::RunConfig;
use metriplectic_cli::files::{self, RunStatus};
use metriplectic_cli::CliError;

const SMALL_DEMO: &str = r#"
[system]
name = "demo2d"

[simulate]
dt = 1e-3
horizon = 2.0
n_trajectories = 3
seed = 7

[data]
n_trajectories = 40
n_samples_per = 1
stride = 0
dt = 1e-3
seed = 1
region = { kind = "box", lo = [-1.3, -1.3], hi = [1.3, 1.3] }

[identify]
entropy_degree = 8
metric_degree = 2
max_iters = 3
seed = 2
certificate_samples = 200
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metriplectic"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn validation_msg(text: &str) -> String {
    match RunConfig::from_toml_str(text) {
        Err(CliError::Validation(m)) => m,
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn config_validation() {
    assert!(RunConfig::from_toml_str(SMALL_DEMO).is_ok());
    let m = validation_msg(&SMALL_DEMO.replace("horizon = 2.0", "horizon = 2.0\ncsv_stride = 0"));
    assert!(m.contains("csv_stride"), "{m}");
    assert!(validation_msg(&SMALL_DEMO.replacen("dt = 1e-3", "dt = 0.0", 1)).contains("dt"));
    assert!(validation_msg(&SMALL_DEMO.replacen("dt = 1e-3", "dt = -1e-3", 1)).contains("dt"));
    let m = validation_msg(&SMALL_DEMO.replace("lo = [-1.3, -1.3], hi = [1.3, 1.3]", "lo = [-1.3], hi = [1.3]"));
    assert!(m.contains("dimension"), "{m}");
    let m = validation_msg(&SMALL_DEMO.replace("seed = 2", "batch_size = 10"));
    assert!(m.contains("seed"), "{m}");
    assert!(validation_msg(&SMALL_DEMO.replace("metric_degree = 2", "metric_degree = 3")).contains("odd"));
    assert!(validation_msg(&SMALL_DEMO.replace("name = \"demo2d\"", "name = \"demo2d\"\ninertia = [1.0, 2.0, 3.0]")).contains("inertia"));
    assert!(validation_msg(&SMALL_DEMO.replace("seed = 7", "seed = 7\nstep = 3")).contains("unknown field"));
    assert!(validation_msg("[system]\nname = \"custom\"\n").contains("custom"));
}

#[test]
fn custom_system_matches_builtin() {
    let text = r#"
[system]
name = "custom"

[system.custom]
dim = 2
poisson = "canonical"
hamiltonian = [{ exponents = [2, 0], coeff = 0.5 }, { exponents = [0, 2], coeff = 0.5 }]
entropy = [{ exponents = [1, 0], coeff = 1.0 }]
metric = [[{ exponents = [0, 0], coeff = 2.0 }], [], [{ exponents = [0, 0], coeff = 1.0 }]]
"#;
    let cfg = RunConfig::from_toml_str(text).unwrap();
    let sys = cfg.build_system().unwrap();
    // grad E = (q + 1, p); (Pi + K) grad E with K = diag(2, 1)
    let f = sys.field(&[0.5, 2.0]).unwrap();
    assert_eq!(f, vec![2.0 * 1.5 + 2.0, -1.5 + 2.0]);
    let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
    assert_eq!(back.system, cfg.system);
}

#[test]
fn dataset_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml_str(SMALL_DEMO).unwrap();
    let ds = commands::gen_data(&cfg).unwrap();
    assert_eq!(ds.len(), 40);
    let p = dir.path().join("d.jsonl");
    files::write_dataset(&p, &ds).unwrap();
    assert_eq!(files::read_dataset(&p).unwrap(), ds);

    let text = std::fs::read_to_string(&p).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[3] = "{\"x\": [1.0], \"xdot\": [2.0]}";
    let bad = write(dir.path(), "bad.jsonl", &lines.join("\n"));
    let err = files::read_dataset(&bad).unwrap_err().to_string();
    assert!(err.contains("line 4"), "{err}");

    let short = write(dir.path(), "short.jsonl", &text.lines().take(10).collect::<Vec<_>>().join("\n"));
    let err = files::read_dataset(&short).unwrap_err().to_string();
    assert!(err.contains("40"), "{err}");
    assert!(matches!(files::read_dataset(&dir.path().join("missing.jsonl")), Err(CliError::Io(_))));
}

#[test]
fn simulate_writes_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL_DEMO);
    let out = dir.path().join("sim");
    let o = run(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for k in 0..3 {
        let csv = std::fs::read_to_string(out.join(format!("traj_{k:04}.csv"))).unwrap();
        assert!(csv.starts_with("t,x1,x2,H,S,E\n"));
        // every tenth of 2000 steps plus the initial state
        assert_eq!(csv.lines().count(), 1 + 201);
    }
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n_diverged"], 0);
    assert_eq!(summary["n_monotone"], 3);
    assert!(out.join(files::METADATA_FILE).exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    // unreadable config
    assert_eq!(code(&run(&["simulate", "--config", "/nonexistent.toml", "--out", s(&out)])), 2);
    // usage error
    assert_eq!(code(&run(&["simulate", "--bogus"])), 2);
    assert_eq!(code(&run(&["--backend", "nope", "verify", "--config", "/nonexistent.toml"])), 2);
    // invalid config
    let bad = write(dir.path(), "bad.toml", &SMALL_DEMO.replacen("dt = 1e-3", "dt = 0.0", 1));
    let o = run(&["gen-data", "--config", s(&bad), "--out", s(&dir.path().join("d.jsonl"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("dt"));
    // trajectories from far outside the basin blow up
    let wide = write(
        dir.path(),
        "wide.toml",
        &SMALL_DEMO.replace("seed = 7", "seed = 7\nregion = { kind = \"box\", lo = [-4.0, -4.0], hi = [4.0, 4.0] }"),
    );
    let o = run(&["simulate", "--config", s(&wide), "--out", s(&out)]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    // minibatches without a seed
    let cfg = write(dir.path(), "c.toml", &SMALL_DEMO.replace("seed = 2\n", ""));
    let data = dir.path().join("d.jsonl");
    assert_eq!(code(&run(&["gen-data", "--config", s(&cfg), "--out", s(&data)])), 0);
    let o = run(&[
        "identify", "--data", s(&data), "--config", s(&cfg), "--algorithm", "stochastic", "--batch-size", "10", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
    // batch larger than the dataset
    let o = run(&[
        "identify", "--data", s(&data), "--config", s(&cfg), "--algorithm", "stochastic", "--batch-size", "41", "--seed", "1",
        "--out", s(&out),
    ]);
    assert_eq!(code(&o), 2);
    // dataset of the wrong dimension
    let so3 = write(dir.path(), "so3.toml", "[system]\nname = \"so3\"\n");
    let o = run(&["identify", "--data", s(&data), "--config", s(&so3), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn identify_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write(dir.path(), "c.toml", SMALL_DEMO);
    let data = dir.path().join("d.jsonl");
    assert_eq!(code(&run(&["gen-data", "--config", s(&cfg_path), "--out", s(&data)])), 0);
    let out = dir.path().join("id");
    let o = run(&["identify", "--data", s(&data), "--config", s(&cfg_path), "--out", s(&out)]);
    let report = files::read_report(&out).unwrap();
    assert_eq!(code(&o), identify_exit_code(&report));
    assert!(report.monotone, "worst increase {}", report.worst_full_cost_increase);
    assert_eq!(report.algorithm, "bilevel");
    assert_eq!(report.iterations, 3);
    assert!(report.final_full_cost < report.initial_full_cost);
    assert!(report.certificate.unwrap().passed);
    let csv = std::fs::read_to_string(out.join(files::HISTORY_FILE)).unwrap();
    assert!(csv.starts_with("iter,phase,batch_cost,full_cost\n"));
    assert_eq!(csv.lines().count(), 1 + 6);
    assert!(out.join(files::METADATA_FILE).exists());

    let o = run(&["verify", "--report", s(&out)]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["all_passed"], true, "{v:#}");

    // a metric with a negative eigenvalue must not certify
    let mut tampered = report.clone();
    let rec = tampered.metric[0].iter_mut().find(|r| r.exponents.iter().all(|&e| e == 0));
    match rec {
        Some(r) => r.coeff = -1.0,
        None => tampered.metric[0].insert(0, metriplectic::poly::PolyRecord { exponents: vec![0, 0], coeff: -1.0 }),
    }
    let v = commands::verify_report(&tampered).unwrap();
    assert!(!v.all_passed);
    let cert = v.suite("certificate").unwrap();
    assert!(!cert.passed && cert.value < 0.0, "{cert:?}");
    assert!(!v.suite("theta_matches_metric").unwrap().passed);

    // exit code policy
    let mut r = report;
    r.status = RunStatus::MaxIterations;
    r.monotone = true;
    assert_eq!(identify_exit_code(&r), 0);
    r.monotone = false;
    assert_eq!(identify_exit_code(&r), 4);
    r.status = RunStatus::SolverFailure;
    assert_eq!(identify_exit_code(&r), 3);
    r.status = RunStatus::Converged;
    assert_eq!(identify_exit_code(&r), 0);
}

#[test]
fn stochastic_identify_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml_str(SMALL_DEMO).unwrap();
    let ds = commands::gen_data(&cfg).unwrap();
    let over = IdentifyOverrides {
        batch_size: Some(20),
        max_iters: Some(2),
        seed: None,
    };
    let a = commands::identify(&cfg, &ds, Algorithm::Stochastic, &over, &dir.path().join("a")).unwrap();
    let b = commands::identify(&cfg, &ds, Algorithm::Stochastic, &over, &dir.path().join("b")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.algorithm, "stochastic");
    assert_eq!(a.iterations, 2);
    let ra = std::fs::read(dir.path().join("a").join(files::REPORT_FILE)).unwrap();
    let rb = std::fs::read(dir.path().join("b").join(files::REPORT_FILE)).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn verify_systems() {
    let dir = tempfile::tempdir().unwrap();
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["demo2d", "so3", "so3_classical"] {
        let o = run(&["verify", "--config", s(&root.join(format!("{name}.toml"))), "--out", s(&dir.path().join("v.json"))]);
        assert_eq!(code(&o), 0, "{name}");
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(v["all_passed"], true, "{name}: {v:#}");
        let jac = v["suites"].as_array().unwrap().iter().find(|s| s["name"] == "jacobi").unwrap();
        assert_eq!(jac["passed"], true);
        assert!(dir.path().join("v.json").exists());
    }
    let cfg = RunConfig::load(&root.join("demo2d.toml")).unwrap();
    let v = commands::verify_system(&cfg).unwrap();
    let classical = v.suite("classical_conditions").unwrap();
    assert!(!classical.passed && !classical.required);
    let cfg = RunConfig::load(&root.join("so3_classical.toml")).unwrap();
    let v = commands::verify_system(&cfg).unwrap();
    for name in ["classical_conditions", "first_law", "second_law"] {
        let s = v.suite(name).unwrap();
        assert!(s.passed && s.required, "{s:?}");
    }
}
