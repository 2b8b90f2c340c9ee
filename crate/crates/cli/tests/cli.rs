use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn qloss(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qloss")).args(args).current_dir(cwd).output().unwrap()
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").canonicalize().unwrap()
}

fn write(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn read(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn two_mode_table(dir: &Path) {
    write(
        &dir.join("table.json"),
        &json!({
            "modes": ["a", "b"],
            "mechanisms": [
                {"label": "surface", "unit": "dimensionless", "values": [1e-3, 5e-5]},
                {"label": "bulk", "unit": "dimensionless", "values": [0.9, 0.8]}
            ]
        }),
    );
}

#[test]
fn missing_participation_file_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("cfg.json"), &json!({"participation_table": "nope.json", "stages": []}));
    let out = qloss(&["pipeline", "--config", "cfg.json", "--out", "result"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:"), "{err}");
    assert!(err.contains("nope.json"));
    assert!(!dir.path().join("result").exists());
}

#[test]
fn simulate_then_pipeline_from_traces() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    two_mode_table(d);
    // Modes built from Γ_surface(n̄) = 4e-4 + 1e-3/√(1+(n̄/3)^0.7) and Γ_bulk = 3e-8.
    let mode = |label: &str, f0: f64, ps: f64, pb: f64| {
        json!({
            "label": label, "f0": f0, "q_ext": 2e6,
            "tls": {"q0": 1.0 / (ps * 4e-4 + pb * 3e-8), "q1": 1.0 / (ps * 1e-3), "n_c": 3.0, "beta": 0.7}
        })
    };
    write(
        &d.join("scenario.json"),
        &json!({
            "seed": 5,
            "modes": [mode("a", 5.2e9, 1e-3, 0.9), mode("b", 6.1e9, 5e-5, 0.8)],
            "noise": {"s21_sigma": 1e-3},
            "nbar_grid": [0.1, 1.0, 10.0, 100.0, 1e3, 1e4, 1e5, 1e6]
        }),
    );
    let sim = qloss(&["simulate", "--config", "scenario.json", "--out", "data", "--traces"], d);
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    assert!(d.join("data/a_s21_00.csv").exists());
    assert!(d.join("data/a_s21_00.json").exists());

    let traces = |m: &str| (0..8).map(|k| format!("data/{m}_s21_{k:02}.csv")).collect::<Vec<_>>();
    write(
        &d.join("cfg.json"),
        &json!({
            "participation_table": "table.json",
            "stages": [{
                "name": "traces", "solve_for": ["surface", "bulk"],
                "devices": [{"label": "dev", "modes": [
                    {"mode": "a", "traces": traces("a")},
                    {"mode": "b", "traces": traces("b")}
                ]}]
            }],
            "nbar": 1.0
        }),
    );
    let run = qloss(&["pipeline", "--config", "cfg.json", "--out", "out"], d);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let fits = read(&d.join("out/resonance_fits.json"));
    assert_eq!(fits.as_array().unwrap().len(), 16);
    let lf = read(&d.join("out/loss_factors.json"));
    let surface = lf.as_array().unwrap().iter().find(|g| g["label"] == "surface").unwrap();
    let want = 4e-4 + 1e-3 / (1.0 + (1.0f64 / 3.0).powf(0.7)).sqrt();
    let got = surface["value"].as_f64().unwrap();
    assert!((got / want - 1.0).abs() < 0.05, "{got:e} vs {want:e}");

    // Same inputs, same bytes.
    let again = qloss(&["pipeline", "--config", "cfg.json", "--out", "out2"], d);
    assert!(again.status.success());
    for f in ["resonance_fits.json", "tls_fits.json", "solve_report.json", "loss_factors.json"] {
        assert_eq!(fs::read(d.join("out").join(f)).unwrap(), fs::read(d.join("out2").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn solve_and_budget_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("q.csv"), "mode,q_int,sigma_q\nD1,1.7e6,0\nD2,17.2e6,0\nC,8.2e6,0\n").unwrap();
    let fx = fixtures();
    let out = qloss(
        &[
            "solve",
            "--participations",
            fx.join("participations.json").to_str().unwrap(),
            "--q",
            "q.csv",
            "--library",
            fx.join("transferred.json").to_str().unwrap(),
            "--solve-for",
            "Re surface,Bulk,Package seam",
        ],
        d,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let surf = report["estimates"].as_array().unwrap().iter().find(|e| e["label"] == "Re surface").unwrap();
    assert!((surf["value"].as_f64().unwrap() / 3.855e-4 - 1.0).abs() < 1e-3);

    let out = qloss(
        &[
            "budget",
            "--participations",
            fx.join("participations.json").to_str().unwrap(),
            "--library",
            fx.join("library.json").to_str().unwrap(),
            "--mode",
            "transmon",
            "--frequency-hz",
            "5e9",
            "--out",
            "b",
        ],
        d,
    );
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Al surface"));
    let plot = fs::read_to_string(d.join("b/budget_plot.csv")).unwrap();
    assert!(plot.starts_with("label,share,q_limit\n"));
}

#[test]
fn fit_tls_and_extrapolate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sweep = fixtures().join("sweeps/tripole1_D1_sweep.csv");
    let out = qloss(&["fit-tls", sweep.to_str().unwrap()], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["q_int"]["value"].as_f64().unwrap() / 1.7e6 - 1.0).abs() < 1e-6);

    let mut csv = String::from("n_elements,p\n");
    for n in [1e4, 2e4, 4e4, 8e4, 1.6e5, 3.2e5] {
        csv.push_str(&format!("{n},{}\n", 5e-5 - 0.2 / n));
    }
    fs::write(d.join("c.csv"), csv).unwrap();
    let out = qloss(&["extrapolate", "c.csv"], d);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["p_infinity"]["value"].as_f64().unwrap() / 5e-5 - 1.0).abs() < 1e-9);

    let bad = qloss(&["fit-tls", "c.csv"], d);
    assert!(!bad.status.success());
}
