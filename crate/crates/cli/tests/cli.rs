use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mlsm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlsm"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MLSM_THREADS")
        .output()
        .expect("run mlsm")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn simulate_fit_infer_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(mlsm(&["--seed", "7", "simulate", "--n", "100", "-T", "10", "-o", "sim"], d));
    assert!(d.join("sim/network.mlsm").exists());
    assert!(d.join("sim/truth/theta.csv").exists());
    ok(mlsm(&["fit", "-i", "sim/network.mlsm", "-o", "fit"], d));
    ok(mlsm(&["infer", "-i", "sim/network.mlsm", "--fit", "fit", "-o", "inf"], d));
    let table = fs::read_to_string(d.join("inf/ci_theta.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "node,coord,estimate,std_error,lower,upper,level,ellipsoid_radius_sq");
    // k1 = 2 rows for node 1
    assert_eq!(lines.len(), 3);
    assert!(lines[1..].iter().all(|l| l.starts_with("1,")));
    let core = fs::read_to_string(d.join("inf/ci_core.csv")).unwrap();
    assert_eq!(core.lines().count(), 1 + 2 * 2 * 10);
}

#[test]
fn fitting_twice_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(mlsm(&["--seed", "3", "simulate", "--n", "60", "-T", "5", "-o", "sim"], d));
    ok(mlsm(&["--seed", "3", "fit", "-i", "sim/network.mlsm", "-o", "a"], d));
    ok(mlsm(&["--seed", "3", "fit", "-i", "sim/network.mlsm", "-o", "b"], d));
    for name in mlsm::io::FIT_FILES {
        assert_eq!(fs::read(d.join("a").join(name)).unwrap(), fs::read(d.join("b").join(name)).unwrap(), "{name}");
    }
}

#[test]
fn planted_break_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(mlsm(
        &["--seed", "11", "simulate", "--n", "100", "-T", "10", "--break-layer", "6", "--jump", "1.0", "-o", "sim"],
        d,
    ));
    let stdout = ok(mlsm(&["changepoints", "-i", "sim/network.mlsm", "-o", "cp"], d));
    assert!(stdout.contains("sigma0^2"));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("cp/changepoints.json")).unwrap()).unwrap();
    let detected: Vec<u64> = summary["detected"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert!(detected.contains(&6), "{detected:?}");
    let table = fs::read_to_string(d.join("cp/changepoints.csv")).unwrap();
    assert!(table.starts_with("t,t_prime,i,j,delta_hat,se,z,p_value,critical,reject\n"));
    assert_eq!(table.lines().count(), 1 + 9 * 4);
}

#[test]
fn config_file_and_triples_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("run.json"),
        r#"{"family": {"kind": "poisson"}, "fit": {"k1": 2, "k2": 2, "k_alpha": 1, "k_beta": 1}, "d1": 4, "n": 60, "T": 4, "seed": 5}"#,
    )
    .unwrap();
    ok(mlsm(&["--config", "run.json", "simulate", "--format", "triples", "-o", "sim"], d));
    let text = fs::read_to_string(d.join("sim/network.txt")).unwrap();
    assert!(text.starts_with("MLSM1 triples version=1 dims=60,60,4 kind=count\n"));
    ok(mlsm(&["--config", "run.json", "fit", "-i", "sim/network.txt", "-o", "fit"], d));
    ok(mlsm(&["--config", "run.json", "scree", "-i", "sim/network.txt", "--max", "5", "-o", "scree.csv"], d));
    let scree = fs::read_to_string(d.join("scree.csv")).unwrap();
    assert_eq!(scree.lines().count(), 1 + 2 * 5);
}

#[test]
fn coverage_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(mlsm(&["--seed", "1", "coverage", "--n", "40", "-T", "3", "--reps", "4", "-o", "cov"], d));
    let table = fs::read_to_string(d.join("cov/coverage.csv")).unwrap();
    assert!(table.starts_with("scenario,n,T,target,level,coverage,hits,trials,std_error,signal,dispersion,seed\n"));
    assert_eq!(table.lines().count(), 4);
    let errors = fs::read_to_string(d.join("cov/errors.csv")).unwrap();
    assert!(errors.starts_with("scenario,n,T,rep,metric,value\n"));
    assert_eq!(errors.lines().count(), 1 + 4 * 6);
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // config: inconsistent stacked rank
    fs::write(d.join("bad.json"), r#"{"fit": {"k1": 2, "k2": 2, "k_alpha": 1, "k_beta": 1}, "d1": 3}"#).unwrap();
    assert_eq!(mlsm(&["--config", "bad.json", "fit", "-i", "x", "-o", "o"], d).status.code(), Some(2));
    assert_eq!(mlsm(&["--k1", "0", "fit", "-i", "x", "-o", "o"], d).status.code(), Some(2));
    // data: index out of range
    fs::write(d.join("y.txt"), "MLSM1 triples version=1 dims=2,2,2 kind=real\n3,1,1,5\n").unwrap();
    let out = mlsm(&["fit", "-i", "y.txt", "-o", "o"], d);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    // data: Poisson family on negative values
    fs::write(d.join("z.txt"), "MLSM1 triples version=1 dims=4,4,2 kind=real\n1,2,1,-1\n").unwrap();
    assert_eq!(
        mlsm(&["--family", "poisson", "--k1", "1", "--k2", "1", "--k-alpha", "0", "--k-beta", "0", "fit", "-i", "z.txt", "-o", "o"], d)
            .status
            .code(),
        Some(3)
    );
    // convergence: a rank-deficient network cannot support the requested ranks
    fs::write(d.join("zero.txt"), "MLSM1 triples version=1 dims=6,6,2 kind=real\n").unwrap();
    assert_eq!(mlsm(&["fit", "-i", "zero.txt", "-o", "o"], d).status.code(), Some(4));
}
