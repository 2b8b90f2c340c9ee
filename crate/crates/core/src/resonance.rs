//! Resonance extraction from hanger-configuration S21 sweeps, photon-number
//! calibration and exponential T1 fits.
//!
//! The hanger line shape is
//!
//! ```text
//! S21(f) = A·exp(-2πiτ(f - f_ref)) · [1 - (Q_tot/Q_ext)·e^{iφ} / (1 + 2i·Q_tot·(f/f0 - 1))]
//! ```
//!
//! with a complex baseline `A`, cable delay `τ` and impedance-mismatch angle
//! `φ`. Internal loss follows from `1/Q_int = 1/Q_tot - cos φ / Q_ext`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::consts::HBAR;
use crate::error::{Error, Result};
use crate::lsq::{self, LevenbergMarquardt, Model};
use crate::uncertain::Uncertain;

/// Minimum number of samples in an S21 sweep.
pub const MIN_TRACE_SAMPLES: usize = 32;

/// Complex transmission samples of a hanger resonator.
#[derive(Debug, Clone, PartialEq)]
pub struct S21Trace {
    frequency: Vec<f64>,
    s21: Vec<Complex64>,
    /// Input power at the device reference plane, W.
    input_power: Option<f64>,
}

impl S21Trace {
    pub fn new(frequency: Vec<f64>, s21: Vec<Complex64>, input_power: Option<f64>) -> Result<Self> {
        if frequency.len() != s21.len() {
            return Err(Error::InvalidInput(format!(
                "{} frequencies but {} S21 samples",
                frequency.len(),
                s21.len()
            )));
        }
        if frequency.len() < MIN_TRACE_SAMPLES {
            return Err(Error::InvalidInput(format!(
                "S21 trace needs at least {MIN_TRACE_SAMPLES} samples, got {}",
                frequency.len()
            )));
        }
        if frequency.windows(2).any(|w| !(w[1] > w[0])) || frequency.iter().any(|f| !f.is_finite()) {
            return Err(Error::InvalidInput("frequencies must be finite and strictly increasing".into()));
        }
        if s21.iter().any(|z| !z.norm().is_finite()) {
            return Err(Error::InvalidInput("S21 samples must be finite".into()));
        }
        if let Some(p) = input_power {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(Error::InvalidInput(format!("input power must be non-negative, got {p}")));
            }
        }
        Ok(Self {
            frequency,
            s21,
            input_power,
        })
    }

    pub fn frequency(&self) -> &[f64] {
        &self.frequency
    }

    pub fn s21(&self) -> &[Complex64] {
        &self.s21
    }

    pub fn input_power(&self) -> Option<f64> {
        self.input_power
    }

    pub fn with_input_power(mut self, watts: f64) -> Self {
        self.input_power = Some(watts);
        self
    }

    /// Multiplies every sample by a fixed complex factor.
    pub fn scaled(&self, factor: Complex64) -> Self {
        Self {
            frequency: self.frequency.clone(),
            s21: self.s21.iter().map(|z| z * factor).collect(),
            input_power: self.input_power,
        }
    }

    fn span(&self) -> f64 {
        self.frequency[self.frequency.len() - 1] - self.frequency[0]
    }
}

/// Parameters of the normalized hanger line shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HangerParams {
    pub f0: f64,
    pub q_tot: f64,
    /// Magnitude of the complex coupling quality factor.
    pub q_ext: f64,
    pub mismatch_angle: f64,
}

impl HangerParams {
    /// Builds the line shape from internal and external quality factors.
    pub fn from_internal(f0: f64, q_int: f64, q_ext: f64, mismatch_angle: f64) -> Self {
        let q_tot = 1.0 / (1.0 / q_int + mismatch_angle.cos() / q_ext);
        Self {
            f0,
            q_tot,
            q_ext,
            mismatch_angle,
        }
    }

    pub fn q_int(&self) -> f64 {
        1.0 / (1.0 / self.q_tot - self.mismatch_angle.cos() / self.q_ext)
    }

    /// Normalized transmission (unit baseline, no delay).
    pub fn s21(&self, frequency: f64) -> Complex64 {
        let detuning = frequency / self.f0 - 1.0;
        let denom = Complex64::new(1.0, 2.0 * self.q_tot * detuning);
        let coupling = Complex64::from_polar(self.q_tot / self.q_ext, self.mismatch_angle);
        Complex64::new(1.0, 0.0) - coupling / denom
    }
}

/// Best-fit hanger resonance with one-sigma uncertainties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonanceFit {
    pub f0: Uncertain,
    pub q_int: Uncertain,
    pub q_ext: Uncertain,
    pub q_tot: Uncertain,
    pub impedance_mismatch_angle: Uncertain,
    /// RMS of the complex residuals, relative to the baseline amplitude.
    pub residual_rms: f64,
    pub baseline_amplitude: f64,
    pub baseline_phase: f64,
    /// Cable delay, s.
    pub cable_delay: f64,
    /// `Q_ext / Q_int`; large values mean strongly undercoupled.
    pub coupling_ratio: f64,
    /// Circulating photon number, when the input power is known.
    pub photon_number: Option<f64>,
    pub input_power: Option<f64>,
}

impl ResonanceFit {
    pub fn omega(&self) -> f64 {
        2.0 * PI * self.f0.value
    }
}

/// Fits the hanger model to an S21 sweep.
///
/// Initial values come from an algebraic circle fit after removing an estimated
/// cable delay. All seven real parameters (f0, Q_tot, |Q_ext|, φ, baseline
/// amplitude and phase, delay) are then refined by nonlinear least squares on
/// the complex residuals. The noise variance used for the covariance is taken
/// from residuals more than one linewidth away from resonance.
pub fn fit_s21_resonance(trace: &S21Trace) -> Result<ResonanceFit> {
    let f = trace.frequency();
    let z = trace.s21();
    let n = f.len();
    let span = trace.span();

    check_dip(z)?;

    let f_ref = f[n / 2];
    let delay = refine_delay(f, z, f_ref, initial_delay(f, z));
    let corrected: Vec<Complex64> = f
        .iter()
        .zip(z)
        .map(|(&fi, &zi)| zi * Complex64::from_polar(1.0, 2.0 * PI * delay * (fi - f_ref)))
        .collect();

    let circle = fit_circle(&corrected)
        .ok_or_else(|| Error::IllConditionedFit("algebraic circle fit is singular".into()))?;
    let phase = fit_circle_phase(f, &corrected, circle, f_ref, span)?;

    let off_resonance = circle.center - Complex64::from_polar(circle.radius, phase.theta0);
    if off_resonance.norm() == 0.0 {
        return Err(Error::IllConditionedFit("off-resonance point at origin".into()));
    }
    let coupling = 2.0 * circle.radius / off_resonance.norm();
    let mismatch = (Complex64::new(1.0, 0.0) - circle.center / off_resonance).arg();
    let q_ext0 = phase.q_tot / coupling.max(1e-12);

    let model = HangerModel {
        frequency: f,
        data: z,
        f_ref,
        span,
    };
    let x0 = DVector::from_vec(vec![
        phase.f0 / f_ref - 1.0,
        phase.q_tot.ln(),
        q_ext0.ln(),
        mismatch,
        off_resonance.norm().ln(),
        off_resonance.arg(),
        delay * span,
    ]);
    let sol = LevenbergMarquardt::default().minimize(&model, x0);
    let p = &sol.params;

    let f0 = f_ref * (1.0 + p[0]);
    let q_tot = p[1].exp();
    let q_ext = p[2].exp();
    let angle = wrap_angle(p[3]);
    let amplitude = p[4].exp();
    let inverse_q_int = 1.0 / q_tot - angle.cos() / q_ext;
    if !(inverse_q_int > 0.0) {
        return Err(Error::IllConditionedFit(format!(
            "fitted internal loss {inverse_q_int:.3e} is not positive"
        )));
    }
    let q_int = 1.0 / inverse_q_int;

    if !(f0 >= f[0] && f0 <= f[n - 1]) {
        return Err(Error::NoResonance { depth: 0.0, noise: 0.0 });
    }
    let linewidth = f0 / q_tot;
    if linewidth > span / 2.0 {
        return Err(Error::SpanTooNarrow { linewidth, span });
    }

    let normal_inv = lsq::inverse_normal_matrix(&sol.jacobian)
        .ok_or_else(|| Error::IllConditionedFit("Jacobian normal matrix is singular".into()))?;
    if !normal_inv.clone().cholesky().is_some() {
        return Err(Error::IllConditionedFit("covariance is not positive definite".into()));
    }
    let noise_var = off_resonance_variance(&sol.residuals, f, f0, q_tot, sol.params.len());
    let cov = normal_inv * noise_var;

    let sig = lsq::sigmas(&cov);
    let mut grad_qint = DVector::zeros(7);
    grad_qint[1] = q_int * q_int / q_tot;
    grad_qint[2] = -q_int * q_int * angle.cos() / q_ext;
    grad_qint[3] = -q_int * q_int * angle.sin() / q_ext;

    let residual_rms = (sol.rss / n as f64).sqrt() / amplitude;
    let photon_number = trace
        .input_power()
        .map(|p| photon_number(p, 2.0 * PI * f0, q_tot, q_ext))
        .transpose()?;

    Ok(ResonanceFit {
        f0: Uncertain::new(f0, f_ref * sig[0]),
        q_int: Uncertain::new(q_int, lsq::propagate(&grad_qint, &cov).sqrt()),
        q_ext: Uncertain::new(q_ext, q_ext * sig[2]),
        q_tot: Uncertain::new(q_tot, q_tot * sig[1]),
        impedance_mismatch_angle: Uncertain::new(angle, sig[3]),
        residual_rms,
        baseline_amplitude: amplitude,
        baseline_phase: wrap_angle(p[5]),
        cable_delay: p[6] / span,
        coupling_ratio: q_ext / q_int,
        photon_number,
        input_power: trace.input_power(),
    })
}

/// Per-quadrature noise variance from residuals away from resonance.
fn off_resonance_variance(residuals: &DVector<f64>, f: &[f64], f0: f64, q_tot: f64, n_params: usize) -> f64 {
    let n = f.len();
    let total: f64 = residuals.norm_squared();
    let mut off_sum = 0.0;
    let mut off_count = 0usize;
    for (i, &fi) in f.iter().enumerate() {
        if (2.0 * q_tot * (fi / f0 - 1.0)).abs() > 2.0 {
            off_sum += residuals[2 * i].powi(2) + residuals[2 * i + 1].powi(2);
            off_count += 1;
        }
    }
    if off_count >= 10 {
        off_sum / (2 * off_count) as f64 * (2 * n) as f64 / (2 * n - n_params) as f64
    } else {
        total / (2 * n - n_params) as f64
    }
}

/// Rejects traces without a dip at least three noise RMS below baseline.
fn check_dip(z: &[Complex64]) -> Result<()> {
    let n = z.len();
    let edge = (n / 10).max(3);
    let mut edges: Vec<f64> = z[..edge].iter().chain(&z[n - edge..]).map(|c| c.norm()).collect();
    edges.sort_by(f64::total_cmp);
    let baseline = edges[edges.len() / 2];
    let min = z.iter().map(|c| c.norm()).fold(f64::INFINITY, f64::min);
    let depth = baseline - min;

    // Second differences cancel smooth baseline and delay variations.
    let second: Vec<f64> = [&z[..edge], &z[n - edge..]]
        .iter()
        .flat_map(|seg| seg.windows(3).map(|w| (w[0] - 2.0 * w[1] + w[2]).norm_sqr()))
        .collect();
    let noise = if second.is_empty() {
        0.0
    } else {
        (second.iter().sum::<f64>() / second.len() as f64 / 12.0).sqrt()
    };
    if depth > 3.0 * noise && depth > 1e-9 * baseline {
        Ok(())
    } else {
        Err(Error::NoResonance { depth, noise })
    }
}

/// Phase slope of the outer sweep segments, converted to a delay.
fn initial_delay(f: &[f64], z: &[Complex64]) -> f64 {
    let n = f.len();
    let edge = (n * 3 / 20).max(3);
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for seg in [0..edge, n - edge..n] {
        let fs = &f[seg.clone()];
        let mut phase = Vec::with_capacity(fs.len());
        let mut last = z[seg.start].arg();
        let mut offset = 0.0;
        for c in &z[seg] {
            let a = c.arg();
            let mut d = a - last;
            while d > PI {
                d -= 2.0 * PI;
                offset -= 2.0 * PI;
            }
            while d < -PI {
                d += 2.0 * PI;
                offset += 2.0 * PI;
            }
            last = a;
            phase.push(a + offset);
        }
        let fm = fs.iter().sum::<f64>() / fs.len() as f64;
        let pm = phase.iter().sum::<f64>() / phase.len() as f64;
        for (fi, pi) in fs.iter().zip(&phase) {
            sxx += (fi - fm).powi(2);
            sxy += (fi - fm) * (pi - pm);
        }
    }
    if sxx > 0.0 {
        -sxy / sxx / (2.0 * PI)
    } else {
        0.0
    }
}

/// Adjusts the delay to minimize the scatter of the corrected points about a circle.
fn refine_delay(f: &[f64], z: &[Complex64], f_ref: f64, guess: f64) -> f64 {
    let span = f[f.len() - 1] - f[0];
    let cost = |tau: f64| {
        let pts: Vec<Complex64> = f
            .iter()
            .zip(z)
            .map(|(&fi, &zi)| zi * Complex64::from_polar(1.0, 2.0 * PI * tau * (fi - f_ref)))
            .collect();
        match fit_circle(&pts) {
            // Not normalized by the radius: a wrong delay can wind the baseline
            // into a large circle whose relative scatter is small.
            Some(c) => pts.iter().map(|p| ((p - c.center).norm() - c.radius).powi(2)).sum::<f64>(),
            None => f64::INFINITY,
        }
    };
    let half_width = 0.5 / span;
    let steps = 40;
    let mut best = (guess, cost(guess));
    for k in 0..=steps {
        let tau = guess - half_width + 2.0 * half_width * k as f64 / steps as f64;
        let c = cost(tau);
        if c < best.1 {
            best = (tau, c);
        }
    }
    // Golden-section refinement around the best grid point.
    let h = 2.0 * half_width / steps as f64;
    let (mut a, mut b) = (best.0 - h, best.0 + h);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (cost(c), cost(d));
    for _ in 0..60 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = cost(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = cost(d);
        }
    }
    let mid = 0.5 * (a + b);
    if cost(mid) < best.1 {
        mid
    } else {
        best.0
    }
}

#[derive(Debug, Clone, Copy)]
struct Circle {
    center: Complex64,
    radius: f64,
}

/// Algebraic (Kåsa) circle fit.
fn fit_circle(points: &[Complex64]) -> Option<Circle> {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Complex64>() / n;
    let scale = points.iter().map(|p| (p - mean).norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        return None;
    }
    let mut a = DMatrix::zeros(points.len(), 3);
    let mut b = DVector::zeros(points.len());
    for (i, p) in points.iter().enumerate() {
        let q = (p - mean) / scale;
        a[(i, 0)] = q.re;
        a[(i, 1)] = q.im;
        a[(i, 2)] = 1.0;
        b[i] = -(q.re * q.re + q.im * q.im);
    }
    let sol = a.svd(true, true).solve(&b, 1e-14).ok()?;
    let cx = -sol[0] / 2.0;
    let cy = -sol[1] / 2.0;
    let r2 = cx * cx + cy * cy - sol[2];
    if !(r2 > 0.0) {
        return None;
    }
    Some(Circle {
        center: mean + Complex64::new(cx, cy) * scale,
        radius: r2.sqrt() * scale,
    })
}

struct PhaseInit {
    theta0: f64,
    q_tot: f64,
    f0: f64,
}

/// Fits `θ(f) = θ0 - 2·atan(2·Q_tot·(f/f0 - 1))` to the angle about the circle center.
fn fit_circle_phase(f: &[f64], z: &[Complex64], circle: Circle, f_ref: f64, span: f64) -> Result<PhaseInit> {
    let theta: Vec<f64> = z.iter().map(|p| (p - circle.center).arg()).collect();
    let i_min = z
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
        .map(|(i, _)| i)
        .unwrap_or(f.len() / 2);
    let f0_guess = f[i_min];
    let theta_res = theta[i_min];

    // Quarter-turn crossings on either side of the dip bound the linewidth.
    let rel = |i: usize| wrap_angle(theta[i] - theta_res);
    let lower = (0..i_min).rev().find(|&i| rel(i) >= PI / 2.0);
    let upper = (i_min..f.len()).find(|&i| rel(i) <= -PI / 2.0);
    let q_guess = match (lower, upper) {
        (Some(lo), Some(hi)) if f[hi] > f[lo] => f0_guess / (f[hi] - f[lo]),
        _ => f0_guess / (span / 8.0),
    };

    let model = CirclePhaseModel {
        frequency: f,
        theta: &theta,
        f_ref,
    };
    let mut best: Option<lsq::Solution> = None;
    for factor in [1.0, 0.3, 3.0] {
        let x0 = DVector::from_vec(vec![theta_res, (q_guess * factor).ln(), f0_guess / f_ref - 1.0]);
        let sol = LevenbergMarquardt::default().minimize(&model, x0);
        if best.as_ref().map_or(true, |b| sol.rss < b.rss) {
            best = Some(sol);
        }
    }
    let sol = best.expect("at least one start");
    let p = &sol.params;
    if !p.iter().all(|v| v.is_finite()) {
        return Err(Error::IllConditionedFit("circle phase fit diverged".into()));
    }
    Ok(PhaseInit {
        theta0: p[0],
        q_tot: p[1].exp(),
        f0: f_ref * (1.0 + p[2]),
    })
}

struct CirclePhaseModel<'a> {
    frequency: &'a [f64],
    theta: &'a [f64],
    f_ref: f64,
}

impl Model for CirclePhaseModel<'_> {
    fn residual_count(&self) -> usize {
        self.frequency.len()
    }

    fn residuals(&self, p: &DVector<f64>, out: &mut DVector<f64>) {
        let q = p[1].exp();
        let f0 = self.f_ref * (1.0 + p[2]);
        for (i, (&fi, &th)) in self.frequency.iter().zip(self.theta).enumerate() {
            let u = 2.0 * q * (fi / f0 - 1.0);
            out[i] = wrap_angle(p[0] - 2.0 * u.atan() - th);
        }
    }

    fn jacobian(&self, p: &DVector<f64>, out: &mut DMatrix<f64>) {
        let q = p[1].exp();
        let scale = 1.0 + p[2];
        for (i, &fi) in self.frequency.iter().enumerate() {
            let y = fi / self.f_ref;
            let u = 2.0 * q * (y / scale - 1.0);
            let w = 2.0 / (1.0 + u * u);
            out[(i, 0)] = 1.0;
            out[(i, 1)] = -w * u;
            out[(i, 2)] = w * 2.0 * q * y / (scale * scale);
        }
    }
}

/// Complex residuals of the full hanger model, stacked as `[re, im]` pairs.
///
/// Parameters: `[f0/f_ref - 1, ln Q_tot, ln Q_ext, φ, ln|A|, arg A, τ·span]`.
struct HangerModel<'a> {
    frequency: &'a [f64],
    data: &'a [Complex64],
    f_ref: f64,
    span: f64,
}

impl HangerModel<'_> {
    fn terms(&self, p: &DVector<f64>, fi: f64) -> (Complex64, Complex64, Complex64, Complex64) {
        let q_tot = p[1].exp();
        let k = (p[1] - p[2]).exp();
        let x = fi / self.f_ref / (1.0 + p[0]) - 1.0;
        let denom = Complex64::new(1.0, 2.0 * q_tot * x);
        let ke = Complex64::from_polar(k, p[3]);
        let env = Complex64::from_polar(p[4].exp(), p[5] - 2.0 * PI * p[6] * (fi - self.f_ref) / self.span);
        (env, ke, denom, env * (Complex64::new(1.0, 0.0) - ke / denom))
    }
}

impl Model for HangerModel<'_> {
    fn residual_count(&self) -> usize {
        2 * self.frequency.len()
    }

    fn residuals(&self, p: &DVector<f64>, out: &mut DVector<f64>) {
        for (i, (&fi, &zi)) in self.frequency.iter().zip(self.data).enumerate() {
            let (_, _, _, s) = self.terms(p, fi);
            let r = s - zi;
            out[2 * i] = r.re;
            out[2 * i + 1] = r.im;
        }
    }

    fn jacobian(&self, p: &DVector<f64>, out: &mut DMatrix<f64>) {
        let q_tot = p[1].exp();
        let i_unit = Complex64::new(0.0, 1.0);
        for (i, &fi) in self.frequency.iter().enumerate() {
            let (env, ke, denom, s) = self.terms(p, fi);
            let y = fi / self.f_ref;
            let d2 = denom * denom;
            let cols = [
                env * ke / d2 * (2.0 * q_tot * i_unit) * (-y / (1.0 + p[0]).powi(2)),
                -env * ke / d2,
                env * ke / denom,
                -i_unit * env * ke / denom,
                s,
                i_unit * s,
                -i_unit * 2.0 * PI * (fi - self.f_ref) / self.span * s,
            ];
            for (j, c) in cols.iter().enumerate() {
                out[(2 * i, j)] = c.re;
                out[(2 * i + 1, j)] = c.im;
            }
        }
    }
}

fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Circulating photon number of a hanger mode driven with input power `P`:
/// `n̄ = 2·Q_tot²·P / (ħ·ω²·Q_ext)`.
pub fn photon_number(input_power: f64, omega: f64, q_tot: f64, q_ext: f64) -> Result<f64> {
    if !(omega > 0.0) {
        return Err(Error::NonPositiveInput("omega"));
    }
    if !(q_tot > 0.0) {
        return Err(Error::NonPositiveInput("q_tot"));
    }
    if !(q_ext > 0.0) {
        return Err(Error::NonPositiveInput("q_ext"));
    }
    if !(input_power >= 0.0) {
        return Err(Error::NonPositiveInput("input_power"));
    }
    Ok(2.0 / (HBAR * omega * omega) * (q_tot * q_tot / q_ext) * input_power)
}

/// Input power that produces a given photon number; inverse of [`photon_number`].
pub fn input_power_for(nbar: f64, omega: f64, q_tot: f64, q_ext: f64) -> f64 {
    nbar * HBAR * omega * omega * q_ext / (2.0 * q_tot * q_tot)
}

/// `Q_int = ω·T1`.
pub fn q_from_t1(omega: f64, t1: f64) -> Result<f64> {
    if !(omega > 0.0) {
        return Err(Error::NonPositiveInput("omega"));
    }
    if !(t1 >= 0.0) {
        return Err(Error::NonPositiveInput("t1"));
    }
    Ok(omega * t1)
}

/// Excited-state population versus delay.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayTrace {
    delay: Vec<f64>,
    population: Vec<f64>,
}

/// Minimum number of points in a decay trace.
pub const MIN_DECAY_POINTS: usize = 8;

impl DecayTrace {
    pub fn new(delay: Vec<f64>, population: Vec<f64>) -> Result<Self> {
        if delay.len() != population.len() {
            return Err(Error::InvalidInput("delay and population lengths differ".into()));
        }
        if delay.len() < MIN_DECAY_POINTS {
            return Err(Error::InvalidInput(format!(
                "decay trace needs at least {MIN_DECAY_POINTS} points, got {}",
                delay.len()
            )));
        }
        if delay[0] < 0.0 || delay.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("delays must be non-negative and strictly increasing".into()));
        }
        if population.iter().chain(&delay).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("decay trace contains non-finite values".into()));
        }
        Ok(Self { delay, population })
    }

    pub fn delay(&self) -> &[f64] {
        &self.delay
    }

    pub fn population(&self) -> &[f64] {
        &self.population
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T1Fit {
    pub t1: Uncertain,
    pub amplitude: Uncertain,
    pub offset: Uncertain,
    pub residual_rms: f64,
}

/// Least-squares fit of `A·exp(-t/T1) + B`.
pub fn fit_t1_decay(trace: &DecayTrace) -> Result<T1Fit> {
    let t = trace.delay();
    let y = trace.population();
    let n = t.len();
    let span = t[n - 1] - t[0];

    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let magnitude = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if hi - lo <= 1e-12 * magnitude.max(f64::MIN_POSITIVE) {
        return Err(Error::NonDecaying("population is constant".into()));
    }

    // Variable projection over a rate grid gives the starting point.
    let mut best = (f64::INFINITY, 1.0, 0.0, 0.0);
    for k in 0..=80 {
        let rate_span = 0.02 * 10f64.powf(4.0 * k as f64 / 80.0);
        if let Some((a, b, rss)) = linear_exponential(t, y, rate_span / span) {
            if rss < best.0 {
                best = (rss, rate_span, a, b);
            }
        }
    }
    let model = DecayModel { t, y, span };
    let x0 = DVector::from_vec(vec![best.2, best.3, best.1]);
    let sol = LevenbergMarquardt::default().minimize(&model, x0);
    let p = &sol.params;
    let rate = p[2] / span;
    if !(rate > 0.0) || p[2] < 1e-6 {
        return Err(Error::NonDecaying(format!("fitted rate {rate:.3e} 1/s")));
    }
    let t1 = 1.0 / rate;

    let scale = if n > 3 { sol.rss / (n - 3) as f64 } else { 0.0 };
    let cov = lsq::inverse_normal_matrix(&sol.jacobian)
        .ok_or_else(|| Error::NonDecaying("decay parameters are not identifiable".into()))?
        * scale;
    let sig = lsq::sigmas(&cov);
    if sig[0] > 0.0 && p[0].abs() < 3.0 * sig[0] {
        return Err(Error::NonDecaying("amplitude is not significant".into()));
    }
    if span < t1 {
        return Err(Error::SpanTooShort { span, t1 });
    }
    Ok(T1Fit {
        t1: Uncertain::new(t1, sig[2] / span * t1 * t1),
        amplitude: Uncertain::new(p[0], sig[0]),
        offset: Uncertain::new(p[1], sig[1]),
        residual_rms: (sol.rss / n as f64).sqrt(),
    })
}

fn linear_exponential(t: &[f64], y: &[f64], rate: f64) -> Option<(f64, f64, f64)> {
    let t0 = t[0];
    let (mut see, mut se, mut sy, mut sey) = (0.0, 0.0, 0.0, 0.0);
    let n = t.len() as f64;
    for (&ti, &yi) in t.iter().zip(y) {
        let e = (-rate * (ti - t0)).exp();
        see += e * e;
        se += e;
        sy += yi;
        sey += e * yi;
    }
    let det = see * n - se * se;
    if det.abs() < 1e-300 {
        return None;
    }
    let a = (sey * n - se * sy) / det;
    let b = (see * sy - se * sey) / det;
    let a = a * (rate * t0).exp();
    let rss = t.iter().zip(y).map(|(&ti, &yi)| (a * (-rate * ti).exp() + b - yi).powi(2)).sum();
    Some((a, b, rss))
}

/// Parameters: `[A, B, span/T1]`.
struct DecayModel<'a> {
    t: &'a [f64],
    y: &'a [f64],
    span: f64,
}

impl Model for DecayModel<'_> {
    fn residual_count(&self) -> usize {
        self.t.len()
    }

    fn residuals(&self, p: &DVector<f64>, out: &mut DVector<f64>) {
        for (i, (&ti, &yi)) in self.t.iter().zip(self.y).enumerate() {
            out[i] = p[0] * (-p[2] * ti / self.span).exp() + p[1] - yi;
        }
    }

    fn jacobian(&self, p: &DVector<f64>, out: &mut DMatrix<f64>) {
        for (i, &ti) in self.t.iter().enumerate() {
            let e = (-p[2] * ti / self.span).exp();
            out[(i, 0)] = e;
            out[(i, 1)] = 1.0;
            out[(i, 2)] = -p[0] * ti / self.span * e;
        }
    }
}
