use std::path::Path;
use std::process::{Command, Output};

fn advent(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advent"))
        .args(args)
        .current_dir(cwd)
        .env_remove("ADVENT_SERVER")
        .output()
        .expect("spawn advent")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: &str = r#"{
  "duration_s": 400, "total_vehicles": 40, "attack_count": 2, "attack_spacing_s": 150,
  "first_attack_s": 100, "neighbor_degree": 100.0, "flood_rate_pps": 50.0,
  "min_attackers_per_window": 2
}"#;

#[test]
fn generate_writes_log_and_truth_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("s.json"), SMALL).unwrap();
    ok(&advent(&["generate", "--config", "s.json", "--seed", "4", "--out", "a.csv"], d));
    ok(&advent(&["generate", "--config", "s.json", "--seed", "4", "--out", "b.csv"], d));
    assert!(d.join("a.truth.json").is_file());
    assert_eq!(std::fs::read(d.join("a.csv")).unwrap(), std::fs::read(d.join("b.csv")).unwrap());
    assert_eq!(
        std::fs::read(d.join("a.truth.json")).unwrap(),
        std::fs::read(d.join("b.truth.json")).unwrap()
    );
}

#[test]
fn invalid_config_fails_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"attacker_fraction": 1.5}"#).unwrap();
    let out = advent(&["generate", "--config", "bad.json", "--out", "x.csv"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("attacker_fraction"));
    assert!(!dir.path().join("x.csv").exists());
}

#[test]
fn run_evaluate_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("s.json"), SMALL).unwrap();
    ok(&advent(&["generate", "--config", "s.json", "--out", "mini.csv"], d));
    let pre = ok(&advent(&["preprocess", "mini.csv", "--out", "rows"], d));
    assert!(pre.contains("vehicle files"));
    assert!(std::fs::read_dir(d.join("rows")).unwrap().count() > 0);

    for (method, mode) in [("centralized", "fl_aggregate"), ("centralized", "local_mad")] {
        let out = format!("runs/{method}_{mode}");
        let stdout = ok(&advent(
            &["run", "--scenario", "mini.csv", "--method", method, "--mnd-mode", mode, "--seed", "1", "--out", &out],
            d,
        ));
        assert!(stdout.contains("\"onset\""));
    }
    ok(&advent(&["run", "--scenario", "mini.csv", "--th", "2", "--out", "runs/th2"], d));
    let before = std::fs::read(d.join("runs/th2/report.json")).unwrap();
    ok(&advent(&["evaluate", "runs/th2"], d));
    assert_eq!(std::fs::read(d.join("runs/th2/report.json")).unwrap(), before);

    let table = ok(&advent(&["report", "runs"], d));
    assert_eq!(table.lines().count(), 4, "{table}");
    assert!(table.contains("fl_threshold(2)"));
    assert!(d.join("runs/comparison.csv").is_file());
}

#[test]
fn failures_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::create_dir(d.join("empty")).unwrap();
    for args in [
        vec!["report", "empty"],
        vec!["report", "missing"],
        vec!["run", "--scenario", "missing.csv"],
        vec!["run", "--scenario", "x.csv", "--method", "bogus"],
        vec!["evaluate", "missing"],
    ] {
        let out = advent(&args, d);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(!out.stderr.is_empty());
    }
}
