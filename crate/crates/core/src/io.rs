//! CSV and JSON formats.
//!
//! | file | header |
//! |------|--------|
//! | S21 trace | `freq_hz,re,im` |
//! | power sweep | `nbar,q_int,sigma_q` |
//! | convergence series | `n_elements,p` |
//! | per-mode quality factors | `mode,q_int,sigma_q` |
//! | decay trace | `delay_s,population` |
//!
//! An S21 trace may have a sidecar JSON file with the same stem holding
//! `{"power_dbm": ...}`. Powers are converted to watts on ingestion.

use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

use crate::consts::dbm_to_watts;
use crate::error::{Error, Result};
use crate::resonance::{DecayTrace, S21Trace};
use crate::tls::PowerSweepPoint;
use crate::uncertain::Uncertain;

pub const S21_HEADER: [&str; 3] = ["freq_hz", "re", "im"];
pub const SWEEP_HEADER: [&str; 3] = ["nbar", "q_int", "sigma_q"];
pub const CONVERGENCE_HEADER: [&str; 2] = ["n_elements", "p"];
pub const Q_HEADER: [&str; 3] = ["mode", "q_int", "sigma_q"];
pub const DECAY_HEADER: [&str; 2] = ["delay_s", "population"];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, message: impl ToString) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn read_records<T: DeserializeOwned>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let found = rdr.headers().map_err(|e| parse_err(path, e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(parse_err(path, format!("expected header {}, found {}", header.join(","), found.iter().collect::<Vec<_>>().join(","))));
    }
    rdr.deserialize().map(|r| r.map_err(|e| parse_err(path, e))).collect()
}

fn write_records<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| parse_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| parse_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| parse_err(path, e))?;
    fs::write(path, bytes).map_err(io_err(path))
}

#[derive(Serialize, Deserialize)]
struct S21Row {
    freq_hz: f64,
    re: f64,
    im: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSidecar {
    pub power_dbm: f64,
}

/// Sidecar path for a trace: same stem, `.json` extension.
pub fn sidecar_path(trace: &Path) -> PathBuf {
    trace.with_extension("json")
}

/// Reads a trace. The input power comes from `power_dbm` when given,
/// otherwise from a sidecar file if one exists.
pub fn read_s21_csv(path: &Path, power_dbm: Option<f64>) -> Result<S21Trace> {
    let rows: Vec<S21Row> = read_records(path, &S21_HEADER)?;
    let power = match power_dbm {
        Some(p) => Some(dbm_to_watts(p)),
        None => {
            let side = sidecar_path(path);
            if side.exists() {
                Some(dbm_to_watts(read_json::<PowerSidecar>(&side)?.power_dbm))
            } else {
                None
            }
        }
    };
    S21Trace::new(
        rows.iter().map(|r| r.freq_hz).collect(),
        rows.iter().map(|r| Complex64::new(r.re, r.im)).collect(),
        power,
    )
    .map_err(|e| e.context(path.display().to_string()))
}

/// Writes a trace and, when it has an input power, its sidecar.
pub fn write_s21_csv(path: &Path, trace: &S21Trace) -> Result<()> {
    write_records(
        path,
        &S21_HEADER,
        trace.frequency().iter().zip(trace.s21()).map(|(f, z)| S21Row {
            freq_hz: *f,
            re: z.re,
            im: z.im,
        }),
    )?;
    if let Some(p) = trace.input_power() {
        write_json(
            &sidecar_path(path),
            &PowerSidecar {
                power_dbm: crate::consts::watts_to_dbm(p),
            },
        )?;
    }
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<PowerSweepPoint>> {
    let rows: Vec<PowerSweepPoint> = read_records(path, &SWEEP_HEADER)?;
    rows.into_iter()
        .map(|r| PowerSweepPoint::new(r.nbar, r.q_int, r.sigma_q).map_err(|e| e.context(path.display().to_string())))
        .collect()
}

pub fn write_sweep_csv(path: &Path, sweep: &[PowerSweepPoint]) -> Result<()> {
    write_records(path, &SWEEP_HEADER, sweep)
}

#[derive(Serialize, Deserialize)]
struct ConvergenceRow {
    n_elements: f64,
    p: f64,
}

pub fn read_convergence_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let rows: Vec<ConvergenceRow> = read_records(path, &CONVERGENCE_HEADER)?;
    Ok(rows.into_iter().map(|r| (r.n_elements, r.p)).collect())
}

pub fn write_convergence_csv(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    write_records(path, &CONVERGENCE_HEADER, points.iter().map(|&(n_elements, p)| ConvergenceRow { n_elements, p }))
}

#[derive(Serialize, Deserialize)]
struct QRow {
    mode: String,
    q_int: f64,
    sigma_q: f64,
}

/// Per-mode `Q_int ± σ`.
pub fn read_q_csv(path: &Path) -> Result<Vec<(String, Uncertain)>> {
    let rows: Vec<QRow> = read_records(path, &Q_HEADER)?;
    Ok(rows.into_iter().map(|r| (r.mode, Uncertain::new(r.q_int, r.sigma_q))).collect())
}

pub fn write_q_csv(path: &Path, rows: &[(String, Uncertain)]) -> Result<()> {
    write_records(
        path,
        &Q_HEADER,
        rows.iter().map(|(m, q)| QRow {
            mode: m.clone(),
            q_int: q.value,
            sigma_q: q.sigma,
        }),
    )
}

#[derive(Serialize, Deserialize)]
struct DecayRow {
    delay_s: f64,
    population: f64,
}

pub fn read_decay_csv(path: &Path) -> Result<DecayTrace> {
    let rows: Vec<DecayRow> = read_records(path, &DECAY_HEADER)?;
    DecayTrace::new(rows.iter().map(|r| r.delay_s).collect(), rows.iter().map(|r| r.population).collect())
        .map_err(|e| e.context(path.display().to_string()))
}

pub fn write_decay_csv(path: &Path, trace: &DecayTrace) -> Result<()> {
    write_records(
        path,
        &DECAY_HEADER,
        trace.delay().iter().zip(trace.population()).map(|(&delay_s, &population)| DecayRow { delay_s, population }),
    )
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_string(value)).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let sweep = vec![PowerSweepPoint::new(0.5, 1.7e6, 2e4).unwrap(), PowerSweepPoint::new(1e3, 3.1e6, 3e4).unwrap()];
        write_sweep_csv(&path, &sweep).unwrap();
        assert!(fs::read_to_string(&path).unwrap().starts_with("nbar,q_int,sigma_q\n"));
        assert_eq!(read_sweep_csv(&path).unwrap(), sweep);
    }

    #[test]
    fn header_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        fs::write(&path, "n,q,s\n1,2,3\n").unwrap();
        assert!(matches!(read_sweep_csv(&path), Err(Error::Parse { .. })));
        assert!(matches!(read_sweep_csv(&dir.path().join("missing.csv")), Err(Error::Io { .. })));
    }

    #[test]
    fn trace_sidecar_power() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let f: Vec<f64> = (0..40).map(|i| 5e9 + i as f64 * 1e3).collect();
        let z = vec![Complex64::new(1.0, 0.0); 40];
        let tr = S21Trace::new(f, z, Some(1e-15)).unwrap();
        write_s21_csv(&path, &tr).unwrap();
        let back = read_s21_csv(&path, None).unwrap();
        assert!((back.input_power().unwrap() / 1e-15 - 1.0).abs() < 1e-12);
        assert_eq!(back.frequency(), tr.frequency());
        let forced = read_s21_csv(&path, Some(-120.0)).unwrap();
        assert!((forced.input_power().unwrap() / 1e-15 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn q_and_convergence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let q = vec![("D1".to_string(), Uncertain::new(1.7e6, 4e4))];
        write_q_csv(&dir.path().join("q.csv"), &q).unwrap();
        assert_eq!(read_q_csv(&dir.path().join("q.csv")).unwrap(), q);
        let c = vec![(1e4, 4.1e-5), (2e4, 4.5e-5)];
        write_convergence_csv(&dir.path().join("c.csv"), &c).unwrap();
        assert_eq!(read_convergence_csv(&dir.path().join("c.csv")).unwrap(), c);
    }
}
