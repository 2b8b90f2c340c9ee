//! End-to-end analysis driven by a JSON configuration.
//!
//! A run loads a participation table and a library of known loss factors,
//! then works through stages. Each stage turns measured data for one or more
//! devices into `κ = 1/Q_int` at the evaluation photon number, solves for the
//! stage's unknown mechanisms and stores the device average back into the
//! library, so later stages can use it as known. Finally a budget is built
//! for the target mode.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::budget::{build_budget, LossBudget};
use crate::consts::angular;
use crate::error::{Error, Result};
use crate::io;
use crate::loss::LossFactorEstimate;
use crate::participation::{extrapolate_convergence, rescale_loss_factor, ConvergenceEstimate, ConvergenceSeries};
use crate::resonance::{fit_s21_resonance, ResonanceFit};
use crate::solver::{
    monte_carlo_solve, remainder_attribution, sample_average, solve_loss_factors, subtract_known, InverseQVector, LossSolution,
    ParticipationTable,
};
use crate::tls::{fit_tls, inverse_q_at, PowerSweepPoint, TlsFit};
use crate::uncertain::Uncertain;

fn default_nbar() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMethod {
    /// Invert the participation matrix of the device's modes.
    #[default]
    Solve,
    /// Attribute one mode's residual loss to a single mechanism.
    Remainder,
}

/// Measured data for one mode. Exactly one source must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeData {
    pub mode: String,
    /// Power sweep CSV.
    #[serde(default)]
    pub sweep: Option<PathBuf>,
    /// S21 trace CSVs, one per drive power.
    #[serde(default)]
    pub traces: Vec<PathBuf>,
    /// Quality factor already evaluated at the stage photon number.
    #[serde(default)]
    pub q_int: Option<Uncertain>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceData {
    pub label: String,
    pub modes: Vec<ModeData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    #[serde(default)]
    pub method: StageMethod,
    pub solve_for: Vec<String>,
    pub devices: Vec<DeviceData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceInput {
    pub label: String,
    pub series: PathBuf,
    #[serde(default = "default_dimension")]
    pub dimension: u32,
}

fn default_dimension() -> u32 {
    3
}

/// Paths are resolved relative to the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub participation_table: PathBuf,
    #[serde(default)]
    pub loss_factor_library: Option<PathBuf>,
    /// Fractional participation corrections applied to library entries.
    #[serde(default)]
    pub corrections: BTreeMap<String, f64>,
    #[serde(default)]
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub target_mode: Option<String>,
    #[serde(default)]
    pub frequency_hz: Option<f64>,
    #[serde(default = "default_nbar")]
    pub nbar: f64,
    /// Input power for traces without a sidecar file.
    #[serde(default)]
    pub power_dbm: Option<f64>,
    #[serde(default)]
    pub convergence: Vec<ConvergenceInput>,
    #[serde(default)]
    pub tail_points: Option<usize>,
    #[serde(default)]
    pub mc_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl AnalysisConfig {
    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub nbar: Option<f64>,
    pub mc_samples: Option<usize>,
    pub power_dbm: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut AnalysisConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.nbar {
            cfg.nbar = n;
        }
        if let Some(m) = self.mc_samples {
            cfg.mc_samples = m;
        }
        if let Some(p) = self.power_dbm {
            cfg.power_dbm = Some(p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonanceRecord {
    pub stage: String,
    pub device: String,
    pub mode: String,
    pub file: PathBuf,
    pub fit: ResonanceFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlsRecord {
    pub stage: String,
    pub device: String,
    pub mode: String,
    pub fit: TlsFit,
    pub nbar: f64,
    pub q_int: Uncertain,
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceReport {
    pub device: String,
    pub kappa: InverseQVector,
    /// Known loss factors subtracted before solving.
    pub known: Vec<String>,
    pub negative_residual: Vec<String>,
    pub estimates: Vec<LossFactorEstimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition_number: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaled_condition_number: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub monte_carlo: Vec<(String, Uncertain)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub method: StageMethod,
    pub nbar: f64,
    pub devices: Vec<DeviceReport>,
    /// Values stored in the library after this stage.
    pub result: Vec<LossFactorEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub label: String,
    pub estimate: ConvergenceEstimate,
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub resonance_fits: Vec<ResonanceRecord>,
    pub tls_fits: Vec<TlsRecord>,
    pub stages: Vec<StageReport>,
    pub loss_factors: Vec<LossFactorEstimate>,
    pub convergence: Vec<ConvergenceRecord>,
    pub budget: Option<LossBudget>,
}

struct Library(Vec<LossFactorEstimate>);

impl Library {
    fn get(&self, label: &str) -> Option<&LossFactorEstimate> {
        self.0.iter().find(|g| g.label == label)
    }

    fn insert(&mut self, g: LossFactorEstimate) {
        match self.0.iter_mut().find(|x| x.label == g.label) {
            Some(slot) => *slot = g,
            None => self.0.push(g),
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Runs the analysis in memory. Relative paths resolve against `base`.
pub fn analyze(cfg: &AnalysisConfig, base: &Path) -> Result<PipelineOutput> {
    let table_path = resolve(base, &cfg.participation_table);
    let raw: ParticipationTable = io::read_json(&table_path)?;
    raw.validate().map_err(|e| e.context(table_path.display().to_string()))?;
    let table = raw.aggregate().map_err(|e| e.context(table_path.display().to_string()))?;

    let mut library = Library(match &cfg.loss_factor_library {
        Some(p) => io::read_json(&resolve(base, p))?,
        None => Vec::new(),
    });
    for (label, c) in &cfg.corrections {
        let g = library.get(label).ok_or_else(|| Error::LabelMismatch(format!("correction for unknown loss factor {label}")))?;
        let rescaled = rescale_loss_factor(g, *c).map_err(|e| e.context(label.clone()))?;
        library.insert(rescaled);
    }

    let mut out = PipelineOutput {
        resonance_fits: Vec::new(),
        tls_fits: Vec::new(),
        stages: Vec::new(),
        loss_factors: Vec::new(),
        convergence: Vec::new(),
        budget: None,
    };

    for (stage_index, stage) in cfg.stages.iter().enumerate() {
        let report = run_stage(cfg, base, &table, &library, stage, stage_index, &mut out).map_err(|e| e.context(format!("stage {}", stage.name)))?;
        for g in &report.result {
            library.insert(g.clone());
        }
        out.stages.push(report);
    }

    for c in &cfg.convergence {
        let path = resolve(base, &c.series);
        let series = ConvergenceSeries::new(io::read_convergence_csv(&path)?, c.dimension).map_err(|e| e.context(path.display().to_string()))?;
        let estimate = extrapolate_convergence(&series, cfg.tail_points).map_err(|e| e.context(c.label.clone()))?;
        out.convergence.push(ConvergenceRecord {
            label: c.label.clone(),
            estimate,
        });
    }

    if let Some(target) = &cfg.target_mode {
        let f = cfg.frequency_hz.ok_or_else(|| Error::InvalidInput("target_mode needs frequency_hz".into()))?;
        let row = table.row(target)?;
        out.budget = Some(build_budget(target, &row, &library.0, angular(f)).map_err(|e| e.context(format!("budget for {target}")))?);
    }
    out.loss_factors = library.0;
    Ok(out)
}

fn mode_kappa(
    cfg: &AnalysisConfig,
    base: &Path,
    stage: &str,
    device: &str,
    m: &ModeData,
    out: &mut PipelineOutput,
) -> Result<Uncertain> {
    let sources = m.sweep.is_some() as usize + (!m.traces.is_empty()) as usize + m.q_int.is_some() as usize;
    if sources != 1 {
        return Err(Error::InvalidInput(format!("mode {} needs exactly one of sweep, traces or q_int", m.mode)));
    }
    if let Some(q) = m.q_int {
        if !(q.value > 0.0) {
            return Err(Error::NonPositiveInput("q_int"));
        }
        return Ok(q.recip());
    }
    let sweep: Vec<PowerSweepPoint> = match &m.sweep {
        Some(p) => io::read_sweep_csv(&resolve(base, p))?,
        None => {
            let mut pts = Vec::new();
            for t in &m.traces {
                let path = resolve(base, t);
                let trace = io::read_s21_csv(&path, cfg.power_dbm)?;
                let fit = fit_s21_resonance(&trace).map_err(|e| e.context(path.display().to_string()))?;
                let nbar = fit
                    .photon_number
                    .ok_or_else(|| Error::InvalidInput(format!("{}: input power unknown", path.display())))?;
                pts.push(PowerSweepPoint::new(nbar, fit.q_int.value, fit.q_int.sigma)?);
                out.resonance_fits.push(ResonanceRecord {
                    stage: stage.to_string(),
                    device: device.to_string(),
                    mode: m.mode.clone(),
                    file: t.clone(),
                    fit,
                });
            }
            pts
        }
    };
    let fit = fit_tls(&sweep).map_err(|e| e.context(format!("{device} {}", m.mode)))?;
    let kappa = inverse_q_at(&fit, cfg.nbar);
    out.tls_fits.push(TlsRecord {
        stage: stage.to_string(),
        device: device.to_string(),
        mode: m.mode.clone(),
        nbar: cfg.nbar,
        q_int: kappa.recip(),
        extrapolated: !fit.interpolates(cfg.nbar),
        fit,
    });
    Ok(kappa)
}

fn run_stage(
    cfg: &AnalysisConfig,
    base: &Path,
    table: &ParticipationTable,
    library: &Library,
    stage: &Stage,
    stage_index: usize,
    out: &mut PipelineOutput,
) -> Result<StageReport> {
    if stage.devices.is_empty() {
        return Err(Error::EmptyInput);
    }
    if stage.method == StageMethod::Remainder && stage.solve_for.len() != 1 {
        return Err(Error::InvalidInput("a remainder stage solves for exactly one mechanism".into()));
    }
    for l in &stage.solve_for {
        table.mechanism(l)?;
    }
    let mut devices = Vec::new();
    for (device_index, d) in stage.devices.iter().enumerate() {
        let mut kappa = Vec::new();
        for m in &d.modes {
            table.mode_index(&m.mode).map_err(|e| e.context(d.label.clone()))?;
            kappa.push(mode_kappa(cfg, base, &stage.name, &d.label, m, out).map_err(|e| e.context(format!("{} {}", d.label, m.mode)))?);
        }
        let k = InverseQVector::new(
            d.modes.iter().map(|m| m.mode.clone()).collect(),
            kappa.iter().map(|u| u.value).collect(),
            kappa.iter().map(|u| u.sigma).collect(),
            cfg.nbar,
        )
        .map_err(|e| e.context(d.label.clone()))?;
        let report = solve_device(cfg, table, library, stage, &d.label, k, stage_index, device_index).map_err(|e| e.context(d.label.clone()))?;
        devices.push(report);
    }

    let result = stage
        .solve_for
        .iter()
        .map(|label| {
            let per_device: Vec<LossFactorEstimate> = devices
                .iter()
                .map(|d| d.estimates.iter().find(|e| &e.label == label).cloned().expect("solved label"))
                .collect();
            if per_device.len() == 1 {
                Ok(per_device.into_iter().next().expect("one device"))
            } else {
                sample_average(label, &per_device)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StageReport {
        name: stage.name.clone(),
        method: stage.method,
        nbar: cfg.nbar,
        devices,
        result,
    })
}

#[allow(clippy::too_many_arguments)]
fn solve_device(
    cfg: &AnalysisConfig,
    table: &ParticipationTable,
    library: &Library,
    stage: &Stage,
    device: &str,
    k: InverseQVector,
    stage_index: usize,
    device_index: usize,
) -> Result<DeviceReport> {
    let local = table.select_modes(&k.modes)?;
    let mut known = Vec::new();
    for m in &local.mechanisms {
        if stage.solve_for.contains(&m.label) || m.values.iter().all(|v| *v == 0.0) {
            continue;
        }
        match library.get(&m.label) {
            Some(g) => known.push(g.clone()),
            None => {
                return Err(Error::LabelMismatch(format!(
                    "{} participates in {device} but is neither solved for nor in the library",
                    m.label
                )))
            }
        }
    }
    let known_labels: Vec<String> = known.iter().map(|g| g.label.clone()).collect();
    let mut labels = stage.solve_for.clone();
    labels.extend(known_labels.iter().cloned());
    let local = local.select_mechanisms(&labels)?;

    match stage.method {
        StageMethod::Remainder => {
            if k.len() != 1 {
                return Err(Error::ShapeMismatch(format!("remainder attribution takes one mode, {device} has {}", k.len())));
            }
            let est = remainder_attribution(&k, &local, &known, &stage.solve_for[0])?;
            let sub = subtract_known(&k, &local, &known)?;
            Ok(DeviceReport {
                device: device.to_string(),
                kappa: k,
                known: known_labels,
                negative_residual: sub.negative_residual,
                estimates: vec![est],
                covariance: None,
                condition_number: None,
                scaled_condition_number: None,
                monte_carlo: Vec::new(),
            })
        }
        StageMethod::Solve => {
            let sub = subtract_known(&k, &local, &known)?;
            let sol: LossSolution = solve_loss_factors(&sub.remaining, &sub.kappa)?;
            let monte_carlo = if cfg.mc_samples > 0 {
                let seed = cfg.seed ^ ((stage_index as u64) << 32) ^ device_index as u64;
                monte_carlo_solve(&local, &k, &known, cfg.mc_samples, seed)?
            } else {
                Vec::new()
            };
            Ok(DeviceReport {
                device: device.to_string(),
                kappa: k,
                known: known_labels,
                negative_residual: sub.negative_residual,
                estimates: sol.estimates,
                covariance: Some(sol.covariance),
                condition_number: Some(sol.condition_number),
                scaled_condition_number: Some(sol.scaled_condition_number),
                monte_carlo,
            })
        }
    }
}

/// Output file names.
pub const RESONANCE_FITS: &str = "resonance_fits.json";
pub const TLS_FITS: &str = "tls_fits.json";
pub const SOLVE_REPORT: &str = "solve_report.json";
pub const LOSS_FACTORS: &str = "loss_factors.json";
pub const CONVERGENCE: &str = "convergence.json";
pub const BUDGET_JSON: &str = "budget.json";
pub const BUDGET_TEXT: &str = "budget.txt";
pub const BUDGET_PLOT: &str = "budget_plot.csv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes every artifact into `dir`, replacing it as a whole. Files are
/// staged in a sibling directory and renamed into place, so `dir` either
/// holds a complete set or is left untouched.
pub fn write_outputs(output: &PipelineOutput, dir: &Path) -> Result<()> {
    let name = dir.file_name().ok_or_else(|| Error::InvalidInput(format!("bad output directory {}", dir.display())))?;
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let staging = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
    }
    fs::create_dir(&staging).map_err(io_err(&staging))?;
    let result = (|| {
        io::write_json(&staging.join(RESONANCE_FITS), &output.resonance_fits)?;
        io::write_json(&staging.join(TLS_FITS), &output.tls_fits)?;
        io::write_json(&staging.join(SOLVE_REPORT), &output.stages)?;
        io::write_json(&staging.join(LOSS_FACTORS), &output.loss_factors)?;
        if !output.convergence.is_empty() {
            io::write_json(&staging.join(CONVERGENCE), &output.convergence)?;
        }
        if let Some(b) = &output.budget {
            io::write_json(&staging.join(BUDGET_JSON), b)?;
            let p = staging.join(BUDGET_TEXT);
            fs::write(&p, b.render_text()).map_err(io_err(&p))?;
            let p = staging.join(BUDGET_PLOT);
            fs::write(&p, b.plot_csv()).map_err(io_err(&p))?;
        }
        Ok(())
    })();
    if let Err(e) = result {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    let backup = parent.join(format!(".{}.old-{}", name.to_string_lossy(), std::process::id()));
    let had_old = dir.exists();
    if had_old {
        fs::rename(dir, &backup).map_err(io_err(dir))?;
    }
    if let Err(e) = fs::rename(&staging, dir) {
        if had_old {
            let _ = fs::rename(&backup, dir);
        }
        let _ = fs::remove_dir_all(&staging);
        return Err(io_err(dir)(e));
    }
    if had_old {
        fs::remove_dir_all(&backup).map_err(io_err(&backup))?;
    }
    Ok(())
}

/// Loads `config`, applies overrides, runs the analysis and writes the
/// artifacts to `out`. Nothing is written when any step fails.
pub fn run_pipeline(config: &Path, overrides: &Overrides, out: &Path) -> Result<PipelineOutput> {
    let mut cfg = AnalysisConfig::load(config)?;
    overrides.apply(&mut cfg);
    let base = config.parent().unwrap_or(Path::new("."));
    let output = analyze(&cfg, base)?;
    write_outputs(&output, out)?;
    Ok(output)
}
