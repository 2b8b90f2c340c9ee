//! Regression against the published tables and the bundled pipeline configs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use qloss::io::read_json;
use qloss::participation::rescale_loss_factor;
use qloss::pipeline::{analyze, AnalysisConfig};
use qloss::solver::{combine_transferred, sample_average, TransferredValue};
use qloss::{LossFactorEstimate, LossUnit, Provenance};
use serde::Deserialize;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn library(name: &str) -> Vec<LossFactorEstimate> {
    read_json(&fixtures().join(name)).unwrap()
}

fn get<'a>(lib: &'a [LossFactorEstimate], label: &str) -> &'a LossFactorEstimate {
    lib.iter().find(|g| g.label == label).unwrap_or_else(|| panic!("{label} missing"))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    ((a - b) / b).abs() <= tol
}

#[derive(Deserialize)]
struct Reference {
    unit: LossUnit,
    values: Vec<TransferredValue>,
}

#[test]
fn package_references_combine_to_published_values() {
    let refs: BTreeMap<String, serde_json::Value> = read_json(&fixtures().join("package_references.json")).unwrap();
    let lib = library("library.json");
    for label in ["Package metal-air", "Package conductor"] {
        let r: Reference = serde_json::from_value(refs[label].clone()).unwrap();
        let g = combine_transferred(label, r.unit, &r.values).unwrap();
        let want = get(&lib, label);
        assert!(close(g.value, want.value, 0.01), "{label}: {} vs {}", g.value, want.value);
        assert!(close(g.sigma, want.sigma, 0.02), "{label}: σ {} vs {}", g.sigma, want.sigma);
        assert_eq!(g.source, Provenance::Combined);
    }
}

#[test]
fn al_surface_correction() {
    let raw = get(&library("transferred.json"), "Al surface").clone();
    let g = rescale_loss_factor(&raw, 0.21).unwrap();
    let want = get(&library("library.json"), "Al surface").clone();
    assert!(close(g.value, want.value, 0.01));
    assert!(close(g.sigma, want.sigma, 0.01));
}

#[test]
fn tripole_averages_match_library() {
    #[derive(Deserialize)]
    struct Entry {
        value: Option<f64>,
        bound: Option<f64>,
    }
    #[derive(Deserialize)]
    struct Device {
        surface_e4: Entry,
        bulk_e8: Entry,
    }
    #[derive(Deserialize)]
    struct Tripoles {
        devices: Vec<Device>,
    }
    let t: Tripoles = read_json(&fixtures().join("tripole.json")).unwrap();
    let lib = library("library.json");
    let avg = |label: &str, scale: f64, pick: &dyn Fn(&Device) -> &Entry| {
        let est: Vec<LossFactorEstimate> = t
            .devices
            .iter()
            .map(|d| {
                let e = pick(d);
                assert!(e.bound.is_none());
                LossFactorEstimate::new(label, e.value.unwrap() * scale, 0.0, LossUnit::Dimensionless, Provenance::Solved)
            })
            .collect();
        sample_average(label, &est).unwrap()
    };
    let surf = avg("Re surface", 1e-4, &|d| &d.surface_e4);
    let bulk = avg("Bulk", 1e-8, &|d| &d.bulk_e8);
    for (g, want) in [(surf, get(&lib, "Re surface")), (bulk, get(&lib, "Bulk"))] {
        assert!(close(g.value, want.value, 0.02), "{}: {} vs {}", g.label, g.value, want.value);
        assert!(close(g.sigma, want.sigma, 0.1), "{}: σ {} vs {}", g.label, g.sigma, want.sigma);
        assert_eq!(g.source, Provenance::Averaged(4));
    }
}

fn run(config: &str) -> qloss::pipeline::PipelineOutput {
    let path = fixtures().join(config);
    let cfg = AnalysisConfig::load(&path).unwrap();
    analyze(&cfg, path.parent().unwrap()).unwrap()
}

#[test]
fn tripole1_config_reproduces_published_row() {
    let out = run("tripole1.json");
    let d = &out.stages[0].devices[0];
    let g = |l: &str| d.estimates.iter().find(|e| e.label == l).unwrap();
    assert!(close(g("Re surface").value, 3.9e-4, 0.15));
    assert!(close(g("Bulk").value, 3.3e-8, 0.20));
    assert!(close(g("Package seam").value, 1.96e-2, 0.25));
    assert!(g("Re surface").sigma < 0.05 * g("Re surface").value);
    assert_eq!(out.tls_fits.len(), 3);
    for t in &out.tls_fits {
        assert!(!t.extrapolated);
    }
}

#[test]
fn full_chain_reaches_the_transmon_budget() {
    let out = run("full_chain.json");
    let lib = &out.loss_factors;
    let published = library("library.json");
    for (label, tol) in [("Re surface", 0.05), ("Bulk", 0.05), ("Package seam", 0.05), ("Re-Al interface", 0.1), ("Al surface", 0.01)] {
        let got = get(lib, label).value;
        let want = get(&published, label).value;
        assert!(close(got, want, tol), "{label}: {got:e} vs {want:e}");
    }
    let b = out.budget.as_ref().unwrap();
    assert!(close(b.predicted_q.value, 9.2e6, 0.05));
    let total: f64 = b.rows.iter().map(|r| r.share).sum();
    assert!((total - 100.0).abs() < 1e-9);
}

#[test]
fn budget_only_config() {
    let out = run("transmon_budget.json");
    assert!(out.stages.is_empty());
    let b = out.budget.unwrap();
    assert!((b.predicted_t1.value * 1e6 - 292.8).abs() < 0.5);
    assert!(b.render_text().contains("Re surface"));
}
