use std::fs;
use std::process::Command;

fn pie_h2() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pie-h2"))
}

#[test]
fn norm_of_the_scalar_preset() {
    let dir = tempfile::tempdir().unwrap();
    let sdpa = dir.path().join("norm.dat-s");
    let out = pie_h2()
        .args(["norm", "--preset", "ode-test", "--out"])
        .arg(dir.path())
        .arg("--export-sdpa")
        .arg(&sdpa)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    let gamma: f64 = text.trim().trim_start_matches("gamma = ").parse().unwrap();
    assert!((gamma - 0.5f64.sqrt()).abs() < 1e-3, "{text}");
    for f in ["norm_report.txt", "P.json", "certificate.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let cert: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("certificate.json")).unwrap()).unwrap();
    assert_eq!(cert["method"], "schur");
    assert!(fs::read_to_string(sdpa).unwrap().lines().count() > 4);
}

#[test]
fn exit_codes() {
    let missing = pie_h2().args(["norm", "--system", "missing.pie"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(4));
    let bogus = pie_h2().args(["norm", "--preset", "nope"]).output().unwrap();
    assert_eq!(bogus.status.code(), Some(5));
    let negative = pie_h2().args(["sim", "--preset", "ode-test", "--dt", "-1"]).output().unwrap();
    assert_eq!(negative.status.code(), Some(5));
    let flag = pie_h2().args(["norm", "--no-such-flag"]).output().unwrap();
    assert_eq!(flag.status.code(), Some(5));
}

#[test]
fn unstable_plant_is_reported_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let out = pie_h2().args(["norm", "--preset", "reaction-diffusion", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let out_dir = dir.path().join("from-config");
    fs::write(&cfg, format!("preset = \"ode-test\"\nmethod = \"gramian\"\nout = {:?}\n", out_dir)).unwrap();
    let out = pie_h2().args(["norm", "--config"]).arg(&cfg).args(["--eps", "1e-5"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cert: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("certificate.json")).unwrap()).unwrap();
    assert_eq!(cert["method"], "gramian");
    assert_eq!(cert["eps"], 1e-5);

    fs::write(&cfg, "preset = \"ode-test\"\nunknown = 1\n").unwrap();
    let bad = pie_h2().args(["norm", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(bad.status.code(), Some(5));
}

#[test]
fn demo_is_deterministic_and_sim_reads_the_gain() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = pie_h2()
            .args(["demo", "--preset", "ode-estimator", "--tfinal", "2", "--out"])
            .arg(&out_dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["gain.json", "synthesis.json", "observer.csv", "plant.csv", "observer_field.svg", "observer_output.svg"] {
        let (x, y) = (fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        assert!(x == y, "{f} differs between runs");
    }
    let sim_dir = dir.path().join("sim");
    let out = pie_h2()
        .args(["sim", "--preset", "ode-estimator", "--tfinal", "2", "--gain"])
        .arg(a.join("gain.json"))
        .arg("--out")
        .arg(&sim_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(sim_dir.join("observer.csv")).unwrap(), fs::read(a.join("observer.csv")).unwrap());
}
