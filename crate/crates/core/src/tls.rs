//! Power-dependent two-level-system loss model
//!
//! ```text
//! 1/Q_int(n̄) = 1/Q0 + (1/Q1) / sqrt(1 + (n̄/n_c)^β)
//! ```
//!
//! Fits are carried out on inverse-Q residuals weighted by the propagated
//! measurement uncertainty `σ_q / Q_int²`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsq::{self, LevenbergMarquardt, Model};
use crate::uncertain::Uncertain;

/// Upper bound on the transition-width exponent.
pub const BETA_MAX: f64 = 4.0;
const BETA_MIN: f64 = 1e-3;
pub const MIN_SWEEP_POINTS: usize = 6;
/// Minimum photon-number span of a sweep, in decades.
pub const MIN_SWEEP_DECADES: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSweepPoint {
    pub nbar: f64,
    pub q_int: f64,
    pub sigma_q: f64,
}

impl PowerSweepPoint {
    pub fn new(nbar: f64, q_int: f64, sigma_q: f64) -> Result<Self> {
        if !(nbar > 0.0) || !(q_int > 0.0) || !(sigma_q >= 0.0) || !sigma_q.is_finite() || !q_int.is_finite() {
            return Err(Error::InvalidInput(format!(
                "sweep point requires nbar > 0, q_int > 0, sigma_q >= 0 (got {nbar}, {q_int}, {sigma_q})"
            )));
        }
        Ok(Self { nbar, q_int, sigma_q })
    }
}

/// Fitted TLS parameters.
///
/// The loss channels are stored as inverse quality factors so that a sweep
/// without power dependence is represented by `inverse_q1 = 0` rather than an
/// infinite `Q1`. The covariance is ordered `(1/Q0, 1/Q1, n_c, β)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlsFit {
    pub inverse_q0: Uncertain,
    pub inverse_q1: Uncertain,
    pub n_c: Uncertain,
    pub beta: Uncertain,
    pub covariance: [[f64; 4]; 4],
    /// Photon-number range covered by the fitted sweep.
    pub nbar_range: (f64, f64),
    pub chi_squared: f64,
    /// Set when the sweep shows no resolvable power dependence or when `n_c`
    /// lies more than two decades outside the measured range.
    pub degenerate: Option<String>,
}

impl TlsFit {
    /// Parameters without uncertainty.
    pub fn exact(q0: f64, q1: f64, n_c: f64, beta: f64) -> Self {
        Self {
            inverse_q0: Uncertain::exact(1.0 / q0),
            inverse_q1: Uncertain::exact(1.0 / q1),
            n_c: Uncertain::exact(n_c),
            beta: Uncertain::exact(beta),
            covariance: [[0.0; 4]; 4],
            nbar_range: (0.0, f64::INFINITY),
            chi_squared: 0.0,
            degenerate: None,
        }
    }

    pub fn q0(&self) -> Uncertain {
        self.inverse_q0.recip()
    }

    pub fn q1(&self) -> Uncertain {
        self.inverse_q1.recip()
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(4, 4, |i, j| self.covariance[i][j])
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate.is_some()
    }

    /// Whether `nbar` lies inside the fitted sweep range.
    pub fn interpolates(&self, nbar: f64) -> bool {
        nbar >= self.nbar_range.0 && nbar <= self.nbar_range.1
    }

    fn saturation(&self, nbar: f64) -> f64 {
        1.0 / (1.0 + (nbar / self.n_c.value).powf(self.beta.value)).sqrt()
    }

    /// `∂(1/Q)/∂(1/Q0, 1/Q1, n_c, β)` at `nbar`.
    fn gradient(&self, nbar: f64) -> DVector<f64> {
        let nc = self.n_c.value;
        let beta = self.beta.value;
        let a1 = self.inverse_q1.value;
        let w = (nbar / nc).powf(beta);
        let damp = (1.0 + w).powf(-1.5);
        let log_ratio = if nbar > 0.0 { (nbar / nc).ln() } else { 0.0 };
        DVector::from_vec(vec![
            1.0,
            self.saturation(nbar),
            0.5 * a1 * beta * w * damp / nc,
            -0.5 * a1 * w * log_ratio * damp,
        ])
    }
}

/// Inverse internal quality factor at photon number `nbar`.
pub fn eval_tls(params: &TlsFit, nbar: f64) -> f64 {
    params.inverse_q0.value + params.inverse_q1.value * params.saturation(nbar)
}

/// Inverse internal quality factor at `nbar` with first-order uncertainty.
pub fn inverse_q_at(params: &TlsFit, nbar: f64) -> Uncertain {
    let grad = params.gradient(nbar);
    let var = lsq::propagate(&grad, &params.covariance_matrix());
    Uncertain::new(eval_tls(params, nbar), var.sqrt())
}

/// Internal quality factor at `nbar`.
pub fn qint_at(params: &TlsFit, nbar: f64) -> Uncertain {
    inverse_q_at(params, nbar).recip()
}

/// Internal quality factor at single-photon power.
pub fn qint_at_unity(params: &TlsFit) -> Uncertain {
    qint_at(params, 1.0)
}

/// Weighted nonlinear fit of the TLS model to a power sweep.
pub fn fit_tls(sweep: &[PowerSweepPoint]) -> Result<TlsFit> {
    if sweep.len() < MIN_SWEEP_POINTS {
        return Err(Error::InsufficientSpan(format!(
            "{} points, need at least {MIN_SWEEP_POINTS}",
            sweep.len()
        )));
    }
    let mut points = sweep.to_vec();
    for p in &points {
        PowerSweepPoint::new(p.nbar, p.q_int, p.sigma_q)?;
    }
    // Canonical order makes the fit independent of input ordering.
    points.sort_by(|a, b| {
        a.nbar
            .total_cmp(&b.nbar)
            .then(a.q_int.total_cmp(&b.q_int))
            .then(a.sigma_q.total_cmp(&b.sigma_q))
    });
    let n_min = points[0].nbar;
    let n_max = points[points.len() - 1].nbar;
    let decades = (n_max / n_min).log10();
    if decades < MIN_SWEEP_DECADES {
        return Err(Error::InsufficientSpan(format!(
            "sweep spans {decades:.2} decades of photon number, need {MIN_SWEEP_DECADES}"
        )));
    }

    let nbar: Vec<f64> = points.iter().map(|p| p.nbar).collect();
    let kappa: Vec<f64> = points.iter().map(|p| 1.0 / p.q_int).collect();
    let measured = points.iter().any(|p| p.sigma_q > 0.0);
    let sigma: Vec<f64> = if measured {
        let floor = points
            .iter()
            .filter(|p| p.sigma_q > 0.0)
            .map(|p| p.sigma_q / (p.q_int * p.q_int))
            .fold(f64::INFINITY, f64::min);
        points
            .iter()
            .map(|p| if p.sigma_q > 0.0 { p.sigma_q / (p.q_int * p.q_int) } else { floor })
            .collect()
    } else {
        kappa.clone()
    };

    let top: Vec<f64> = nbar.iter().zip(&kappa).filter(|(n, _)| **n >= n_max / 10.0).map(|(_, k)| *k).collect();
    let bottom: Vec<f64> = nbar.iter().zip(&kappa).filter(|(n, _)| **n <= n_min * 10.0).map(|(_, k)| *k).collect();
    let a0 = top.iter().sum::<f64>() / top.len() as f64;
    let a_low = bottom.iter().sum::<f64>() / bottom.len() as f64;
    let a1 = (a_low - a0).max(0.0);

    let model = TlsModel {
        nbar: &nbar,
        kappa: &kappa,
        sigma: &sigma,
    };
    let ln_lo = n_min.ln() - 6.0 * std::f64::consts::LN_10;
    let ln_hi = n_max.ln() + 6.0 * std::f64::consts::LN_10;
    let lm = LevenbergMarquardt::default().with_bounds(
        DVector::from_vec(vec![0.0, 0.0, ln_lo, BETA_MIN]),
        DVector::from_vec(vec![f64::INFINITY, f64::INFINITY, ln_hi, BETA_MAX]),
    );
    let ln_mid = 0.5 * (n_min.ln() + n_max.ln());
    let ln_half = 0.5 * (n_max.ln() - n_min.ln());
    let mut best: Option<lsq::Solution> = None;
    for ln_nc in [ln_mid, ln_mid - 0.5 * ln_half, ln_mid + 0.5 * ln_half, ln_mid - ln_half, ln_mid + ln_half] {
        for beta in [1.0, 0.5, 2.0] {
            let sol = lm.minimize(&model, DVector::from_vec(vec![a0, a1, ln_nc, beta]));
            if best.as_ref().map_or(true, |b| sol.rss < b.rss) {
                best = Some(sol);
            }
        }
    }
    let sol = best.expect("multi-start produced a solution");
    let p = &sol.params;
    let dof = nbar.len().saturating_sub(4).max(1) as f64;
    let (mut cov, _) = lsq::pseudo_inverse_normal_matrix(&sol.jacobian);
    if !measured {
        cov *= sol.rss / dof;
    }
    // Map the ln n_c coordinate onto n_c.
    let nc = p[2].exp();
    for i in 0..4 {
        cov[(i, 2)] *= nc;
        cov[(2, i)] *= nc;
    }
    let sig = lsq::sigmas(&cov);
    let mut covariance = [[0.0; 4]; 4];
    for (i, row) in covariance.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
        }
    }

    let degenerate = if p[1] <= sig[1] {
        Some(format!("power-dependent loss {:.3e} not resolved above its uncertainty {:.3e}", p[1], sig[1]))
    } else if nc < n_min / 100.0 || nc > n_max * 100.0 {
        Some(format!("critical photon number {nc:.3e} is more than two decades outside [{n_min:.3e}, {n_max:.3e}]"))
    } else {
        None
    };

    Ok(TlsFit {
        inverse_q0: Uncertain::new(p[0], sig[0]),
        inverse_q1: Uncertain::new(p[1], sig[1]),
        n_c: Uncertain::new(nc, sig[2]),
        beta: Uncertain::new(p[3], sig[3]),
        covariance,
        nbar_range: (n_min, n_max),
        chi_squared: sol.rss,
        degenerate,
    })
}

/// Parameters: `[1/Q0, 1/Q1, ln n_c, β]`.
struct TlsModel<'a> {
    nbar: &'a [f64],
    kappa: &'a [f64],
    sigma: &'a [f64],
}

impl Model for TlsModel<'_> {
    fn residual_count(&self) -> usize {
        self.nbar.len()
    }

    fn residuals(&self, p: &DVector<f64>, out: &mut DVector<f64>) {
        let nc = p[2].exp();
        for i in 0..self.nbar.len() {
            let w = (self.nbar[i] / nc).powf(p[3]);
            out[i] = (p[0] + p[1] / (1.0 + w).sqrt() - self.kappa[i]) / self.sigma[i];
        }
    }

    fn jacobian(&self, p: &DVector<f64>, out: &mut DMatrix<f64>) {
        let nc = p[2].exp();
        for i in 0..self.nbar.len() {
            let ratio = self.nbar[i] / nc;
            let w = ratio.powf(p[3]);
            let damp = (1.0 + w).powf(-1.5);
            let s = self.sigma[i];
            out[(i, 0)] = 1.0 / s;
            out[(i, 1)] = 1.0 / (1.0 + w).sqrt() / s;
            out[(i, 2)] = 0.5 * p[1] * p[3] * w * damp / s;
            out[(i, 3)] = -0.5 * p[1] * w * ratio.ln() * damp / s;
        }
    }
}
