//! Synthetic data with known ground truth: hanger traces, power sweeps and
//! decay traces with seeded Gaussian noise.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::consts::angular;
use crate::error::{Error, Result};
use crate::resonance::{input_power_for, DecayTrace, HangerParams, S21Trace};
use crate::tls::{eval_tls, fit_tls, PowerSweepPoint, TlsFit};

/// Ground-truth TLS parameters. `q1 = None` disables the power dependence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TlsTruth {
    pub q0: f64,
    #[serde(default)]
    pub q1: Option<f64>,
    pub n_c: f64,
    pub beta: f64,
}

impl TlsTruth {
    pub fn as_fit(&self) -> TlsFit {
        TlsFit::exact(self.q0, self.q1.unwrap_or(f64::INFINITY), self.n_c, self.beta)
    }

    pub fn q_int(&self, nbar: f64) -> f64 {
        1.0 / eval_tls(&self.as_fit(), nbar)
    }

    /// Same shape, with both loss channels scaled so that `Q_int(nbar) = q`.
    pub fn pinned(&self, nbar: f64, q: f64) -> Self {
        let c = q / self.q_int(nbar);
        Self {
            q0: self.q0 * c,
            q1: self.q1.map(|q1| q1 * c),
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMode {
    pub label: String,
    pub f0: f64,
    pub q_ext: f64,
    #[serde(default)]
    pub mismatch_angle: f64,
    pub tls: TlsTruth,
    /// Overrides the scenario's relative Q noise for this mode.
    #[serde(default)]
    pub q_relative_sigma: Option<f64>,
    /// Constrains the mode to a given `Q_int` at one photon number.
    #[serde(default)]
    pub pin: Option<PinTarget>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinTarget {
    pub nbar: f64,
    pub q_int: f64,
}

impl SyntheticMode {
    /// Ground truth after applying the pin, if any.
    pub fn truth(&self) -> TlsTruth {
        match self.pin {
            Some(p) => self.tls.pinned(p.nbar, p.q_int),
            None => self.tls,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Standard deviation of each quadrature of S21, relative to the baseline.
    #[serde(default)]
    pub s21_sigma: f64,
    /// Relative standard deviation of each swept Q_int.
    #[serde(default)]
    pub q_relative_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSettings {
    pub points: usize,
    pub baseline_amplitude: f64,
    pub baseline_phase: f64,
    /// Seconds.
    pub cable_delay: f64,
    /// Largest phase angle on the resonance circle, as a fraction of π.
    pub max_angle: f64,
}

impl Default for TraceSettings {
    fn default() -> Self {
        Self {
            points: 201,
            baseline_amplitude: 1.0,
            baseline_phase: 0.0,
            cable_delay: 0.0,
            max_angle: 0.98,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScenario {
    pub seed: u64,
    pub modes: Vec<SyntheticMode>,
    #[serde(default)]
    pub noise: NoiseModel,
    pub nbar_grid: Vec<f64>,
    #[serde(default)]
    pub trace: TraceSettings,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for one (stream, mode, nbar) combination.
fn stream(seed: u64, kind: u64, mode: usize, nbar: f64) -> ChaCha8Rng {
    let s = splitmix(splitmix(splitmix(seed ^ kind) ^ mode as u64) ^ nbar.to_bits());
    ChaCha8Rng::seed_from_u64(s)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl SyntheticScenario {
    pub fn validate(&self) -> Result<()> {
        if self.noise.s21_sigma < 0.0 || self.noise.q_relative_sigma < 0.0 {
            return Err(Error::InvalidInput("noise σ must be non-negative".into()));
        }
        if self.trace.points < crate::resonance::MIN_TRACE_SAMPLES {
            return Err(Error::InvalidInput(format!("trace needs at least {} points", crate::resonance::MIN_TRACE_SAMPLES)));
        }
        if !(self.trace.max_angle > 0.0 && self.trace.max_angle < 1.0) {
            return Err(Error::InvalidInput("max_angle must lie in (0, 1)".into()));
        }
        for m in &self.modes {
            if !(m.f0 > 0.0 && m.q_ext > 0.0 && m.tls.q0 > 0.0 && m.tls.n_c > 0.0 && m.tls.beta > 0.0) {
                return Err(Error::InvalidInput(format!("mode {} has non-positive parameters", m.label)));
            }
            if m.q_relative_sigma.is_some_and(|s| s < 0.0) {
                return Err(Error::InvalidInput(format!("mode {} has negative noise", m.label)));
            }
        }
        Ok(())
    }

    pub fn mode(&self, label: &str) -> Result<(usize, &SyntheticMode)> {
        self.modes
            .iter()
            .enumerate()
            .find(|(_, m)| m.label == label)
            .ok_or_else(|| Error::LabelMismatch(format!("mode {label}")))
    }
}

/// Hanger trace of `mode` at photon number `nbar`, sampled uniformly in
/// angle around the resonance circle. The trace carries the input power
/// that produces `nbar`.
pub fn generate_s21(scenario: &SyntheticScenario, mode: &str, nbar: f64) -> Result<S21Trace> {
    scenario.validate()?;
    let (index, m) = scenario.mode(mode)?;
    let q_int = m.truth().q_int(nbar);
    let params = HangerParams::from_internal(m.f0, q_int, m.q_ext, m.mismatch_angle);
    let t = scenario.trace;
    let n = t.points;
    let mut rng = stream(scenario.seed, 1, index, nbar);
    let baseline = Complex64::from_polar(t.baseline_amplitude, t.baseline_phase);
    let mut freq = Vec::with_capacity(n);
    let mut s21 = Vec::with_capacity(n);
    for i in 0..n {
        let theta = t.max_angle * PI * (2.0 * i as f64 / (n - 1) as f64 - 1.0);
        let f = m.f0 * (1.0 + (theta / 2.0).tan() / (2.0 * params.q_tot));
        let delay = Complex64::from_polar(1.0, -2.0 * PI * t.cable_delay * (f - m.f0));
        let noise = Complex64::new(normal(&mut rng), normal(&mut rng)) * (scenario.noise.s21_sigma * t.baseline_amplitude);
        freq.push(f);
        s21.push(baseline * delay * params.s21(f) + noise);
    }
    let power = input_power_for(nbar, angular(m.f0), params.q_tot, m.q_ext);
    S21Trace::new(freq, s21, Some(power))
}

/// Power sweep of `mode` over the scenario's photon-number grid, with
/// relative Gaussian noise on each `Q_int`. A pinned mode is rescaled after
/// the noise is drawn so that its TLS fit meets the pin exactly.
pub fn generate_power_sweep(scenario: &SyntheticScenario, mode: &str) -> Result<Vec<PowerSweepPoint>> {
    scenario.validate()?;
    let (index, m) = scenario.mode(mode)?;
    let rel = m.q_relative_sigma.unwrap_or(scenario.noise.q_relative_sigma);
    let truth = m.truth();
    let sweep = scenario
        .nbar_grid
        .iter()
        .map(|&nbar| {
            let mut rng = stream(scenario.seed, 2, index, nbar);
            let q = truth.q_int(nbar);
            let noisy = q * (1.0 + rel * normal(&mut rng));
            PowerSweepPoint::new(nbar, noisy, rel * q)
        })
        .collect::<Result<Vec<_>>>()?;
    match m.pin {
        Some(p) if rel > 0.0 => pin_sweep(&sweep, p.nbar, p.q_int),
        _ => Ok(sweep),
    }
}

/// Rescales a sweep so that its TLS fit gives exactly `q_target` at `nbar`.
///
/// The TLS model is equivariant under a common scaling of `Q_int`, so one
/// fit and one rescale suffice.
pub fn pin_sweep(sweep: &[PowerSweepPoint], nbar: f64, q_target: f64) -> Result<Vec<PowerSweepPoint>> {
    let fit = fit_tls(sweep)?;
    let c = q_target * eval_tls(&fit, nbar);
    sweep.iter().map(|p| PowerSweepPoint::new(p.nbar, p.q_int * c, p.sigma_q * c)).collect()
}

/// Samples of `amplitude·exp(-t/t1) + offset` plus Gaussian noise.
pub fn generate_decay(delays: &[f64], t1: f64, amplitude: f64, offset: f64, sigma: f64, seed: u64) -> Result<DecayTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 3));
    let population = delays.iter().map(|t| amplitude * (-t / t1).exp() + offset + sigma * normal(&mut rng)).collect();
    DecayTrace::new(delays.to_vec(), population)
}

/// `count` photon numbers spaced evenly in log between `lo` and `hi`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1).max(1) as f64).exp()).collect()
}
