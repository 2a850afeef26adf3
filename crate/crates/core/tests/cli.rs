use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "[experiment]\nscenarios = 1\ntrain_scenarios = 1\n\n[calibration]\nradar_weights = [0.0, 1.0]\nsearch_radii = [0.5, 2.0]\ndisplacement_scales = [1.0]\n";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timely-fusion"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn simulate_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = run(&["simulate", "--config", &cfg, "--seed", "4", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let fa = read_dir_sorted(&a);
    assert!(fa.iter().any(|(n, _)| n == "manifest.json"));
    assert!(fa.iter().any(|(n, _)| n == "scenario.json"));
    assert!(fa.iter().any(|(n, _)| n.starts_with("radar_")));
    assert_eq!(fa, read_dir_sorted(&b));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["metadata"]["seeds"][0], 4);
    for e in manifest["entries"].as_array().unwrap() {
        for f in e["current"]["lidar_frames"].as_array().unwrap() {
            assert!(a.join(f.as_str().unwrap()).exists());
        }
    }
}

#[test]
fn validation_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let out = out.to_str().unwrap();
    let alpha = write_config(tmp.path(), "a.toml", "[policy]\nalpha = 6\n");
    let o = run(&["simulate", "--config", &alpha, "--out", out]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha"));
    let short = write_config(tmp.path(), "s.toml", "[experiment]\nhorizon = 0.5\n");
    let o = run(&["simulate", "--config", &short, "--out", out]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("not warm"));
    let unknown = write_config(tmp.path(), "u.toml", "[scenario]\nvehicle_tint = 3\n");
    assert_eq!(code(&run(&["simulate", "--config", &unknown, "--out", out])), 1);
    let small = write_config(tmp.path(), "c.toml", SMALL);
    assert_eq!(code(&run(&["sweep", "--config", &small, "--out", out])), 1);
    assert_eq!(code(&run(&["calibrate", "--config", &small, "--mode", "bogus", "--out", out])), 1);
    assert_eq!(code(&run(&["simulate", "--config", "/nonexistent/c.toml"])), 2);
}

#[test]
fn calibrate_then_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let p = |n: &str| tmp.path().join(n).to_str().unwrap().to_string();
    let o = run(&["calibrate", "--config", &cfg, "--mode", "per_offset", "--out", &p("po.json")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    assert_eq!(table.lines().count(), 1 + 6);
    let first = fs::read(p("po.json")).unwrap();
    run(&["calibrate", "--config", &cfg, "--mode", "per_offset", "--out", &p("po.json")]);
    assert_eq!(first, fs::read(p("po.json")).unwrap());

    let o = run(&["calibrate", "--config", &cfg, "--mode", "mixed", "--out", &p("mx.json")]);
    assert_eq!(code(&o), 0);
    let mixed: serde_json::Value = serde_json::from_slice(&fs::read(p("mx.json")).unwrap()).unwrap();
    assert_eq!(mixed["mode"], "mixed");
    assert!(mixed["branches"].as_array().unwrap().is_empty());

    let o = run(&[
        "sweep", "--config", &cfg, "--params", &p("po.json"), "--params", &p("mx.json"), "--out", &p("sw"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(tmp.path().join("sw/sweep.csv")).unwrap();
    let rows = csv.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 1 + (1 + 1 + 6 + 1) * 6 * 3);
    assert!(tmp.path().join("sw/sweep.json").exists());
}

#[test]
fn selfcheck_passes() {
    let o = run(&["selfcheck"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 4);
}
