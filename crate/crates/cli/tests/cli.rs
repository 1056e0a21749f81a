use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use delay_mimo::io::{SolutionBody, SolutionFile};
use tempfile::TempDir;

const SMALL: &str = r#"
scenario = "small"
slots = 50000
seeds = [1, 2]

[cache]
rows = 5000
seed = 3
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_delay-mimo"));
    c.env_remove("DELAY_MIMO_CACHE_DIR");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup(extra: &str) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, format!("{extra}\n{SMALL}")).unwrap();
    (dir, cfg)
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn gamma_and_p0_together_is_a_config_error() {
    let (dir, cfg) = setup("");
    let o = run(dir.path(), &["solve", "--config", cfg.to_str().unwrap(), "--gamma", "0.1", "--p0", "20"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("--gamma or --p0"));
}

#[test]
fn unknown_config_field_is_a_config_error() {
    let (dir, cfg) = setup("bogus = 1");
    let o = run(dir.path(), &["solve", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn bad_flag_value_is_a_config_error() {
    let (dir, _) = setup("");
    assert_eq!(code(&run(dir.path(), &["solve", "--mode", "sideways"])), 1);
}

#[test]
fn calibrate_needs_a_power_budget() {
    let (dir, cfg) = setup("gamma = 0.1");
    let o = run(dir.path(), &["calibrate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn regime_violation_names_the_constraint() {
    let (dir, cfg) = setup("tau = 60.0");
    let o = run(dir.path(), &["solve", "--config", cfg.to_str().unwrap(), "--gamma", "0.1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("arrival probability"), "{}", stderr(&o));
}

#[test]
fn unreachable_budget_is_a_numeric_failure() {
    let (dir, cfg) = setup("");
    let o = run(dir.path(), &["solve", "--config", cfg.to_str().unwrap(), "--p0", "90"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("outside achievable range"));
}

#[test]
fn full_solver_refuses_oversized_state_space() {
    let (dir, cfg) = setup("buffer = 1500");
    let o = run(dir.path(), &["solve", "--config", cfg.to_str().unwrap(), "--mode", "full", "--gamma", "0.1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("2253001 states"), "{}", stderr(&o));
}

#[test]
fn solve_writes_loadable_files_for_both_modes() {
    let (dir, cfg) = setup("");
    for mode in ["full", "decomposed"] {
        let o = run(dir.path(), &["solve", "--config", cfg.to_str().unwrap(), "--mode", mode]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let out = dir.path().join("out");
        let sol = SolutionFile::<f64>::load(&out.join(format!("solution-{mode}.json"))).unwrap();
        match (&sol.body, mode) {
            (SolutionBody::Full(s), "full") => assert_eq!(s.v.len(), 25),
            (SolutionBody::Decomposed(s), "decomposed") => assert_eq!(s.streams.len(), 2),
            _ => panic!("{mode} wrote the wrong body"),
        }
        let summary = read(out.join(format!("summary-{mode}.txt")));
        assert!(summary.contains("joint states    25 = (4+1)^2"));
        assert!(summary.contains("solve time"));
        let steady = read(out.join(format!("steady-{mode}.csv")));
        assert!(steady.starts_with("# delay-mimo "));
        assert!(steady.contains("config_hash="));
        assert!(steady.contains("cache_seed=3"));
        let calib = read(out.join(format!("calibration-{mode}.csv")));
        assert!(calib.lines().nth(1).unwrap().starts_with("gamma,P0,theta"));
    }
}

#[test]
fn outputs_are_reproducible() {
    let (dir, cfg) = setup("");
    let cfg = cfg.to_str().unwrap();
    for out in ["a", "b"] {
        let o = run(dir.path(), &["solve", "--config", cfg, "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let o = run(dir.path(), &["simulate", "--config", cfg, "--out", out, "--policy", "decomposed,rr,csit"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let mut names: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| !n.starts_with("summary"))
        .collect();
    names.sort();
    assert!(names.contains(&"sim-csit.json".to_string()));
    assert!(names.contains(&"hist-rr-seed2.csv".to_string()));
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n} differs");
    }
}

#[test]
fn simulate_reports_parse_and_match_analysis() {
    let (dir, cfg) = setup("");
    let o = run(
        dir.path(),
        &["simulate", "--config", cfg.to_str().unwrap(), "--policy", "decomposed", "--slots", "400000"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&read(dir.path().join("out/sim-decomposed.json"))).unwrap();
    let reports = json["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 2);
    let analytic: Vec<f64> = json["analytic_queue"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    for i in 0..2 {
        let mean = reports.iter().map(|r| r["avg_queue"][i].as_f64().unwrap()).sum::<f64>() / 2.0;
        assert!((mean / analytic[i] - 1.0).abs() < 0.1, "stream {i}: {mean} vs {}", analytic[i]);
    }
    let hist = read(dir.path().join("out/hist-decomposed-seed1.csv"));
    assert_eq!(hist.lines().nth(1), Some("q,stream0,stream1"));
}

#[test]
fn sweep_marks_failed_points_and_continues() {
    let (dir, cfg) = setup("");
    let o = run(
        dir.path(),
        &["sweep", "--config", cfg.to_str().unwrap(), "--axis", "p0", "--values", "20,90", "--policy", "decomposed"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = read(dir.path().join("out/sweep-p0.csv"));
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[..3].iter().all(|r| r.starts_with("0,p0,20,decomposed,") && r.ends_with(",ok")));
    assert!(rows[3].starts_with("1,p0,90,decomposed,sum,") && rows[3].contains("failed"));
    let spec: serde_json::Value = serde_json::from_str(&read(dir.path().join("out/sweep-p0.vl.json"))).unwrap();
    assert_eq!(spec["data"]["values"].as_array().unwrap().len(), 1);
}

#[test]
fn sigma_sweep_covers_every_policy() {
    let (dir, cfg) = setup("");
    let o = run(
        dir.path(),
        &["sweep", "--config", cfg.to_str().unwrap(), "--axis", "sigma-e2", "--values", "0,0.3"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = read(dir.path().join("out/sweep-sigma-e2.csv"));
    let sums: Vec<Vec<&str>> = csv
        .lines()
        .skip(2)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|f| f[4] == "sum")
        .collect();
    assert_eq!(sums.len(), 6);
    for f in &sums {
        let target: f64 = f[6].parse().unwrap();
        let analytic: f64 = f[11].parse().unwrap();
        assert!((analytic / target - 1.0).abs() < 0.01, "{f:?}");
    }
}

#[test]
fn cache_directory_is_reused() {
    let (dir, cfg) = setup("");
    let cache = dir.path().join("cache");
    let cfg = cfg.to_str().unwrap();
    for out in ["a", "b"] {
        let o = bin()
            .current_dir(dir.path())
            .env("DELAY_MIMO_CACHE_DIR", &cache)
            .args(["solve", "--config", cfg, "--out", out])
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let files: Vec<_> = fs::read_dir(&cache).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.len(), 1);
    assert!(files[0].to_str().unwrap().starts_with("eigen-2x2-l2-sigma0.0-scaled-m5000-seed3"));
    assert_eq!(
        read(dir.path().join("a/solution-decomposed.json")),
        read(dir.path().join("b/solution-decomposed.json"))
    );
}

#[test]
fn verify_passes_and_covers_every_operation() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["verify", "--out", "v"]);
    assert_eq!(code(&o), 0, "{}{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    let table = read(dir.path().join("v/verify.csv"));
    assert!(table.lines().nth(1).unwrap().starts_with("check,status"));
    assert!(table.contains("coverage,PASS,0e0,0e0,,20 of 20 operations exercised"));
    assert!(!table.contains("FAIL"));
}

#[test]
fn verify_catches_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["verify", "--inject-fault", "--slots", "100000"]);
    assert_eq!(code(&o), 3);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("full.bellman_residual,FAIL"), "{stdout}");
}

#[test]
fn reduced_cache_verify_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["verify", "--cache-rows", "1000", "--slots", "200000"];
    let a = run(dir.path(), &args);
    let b = run(dir.path(), &args);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stdout));
    assert_eq!(a.stdout, b.stdout);
}
