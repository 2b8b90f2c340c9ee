//! Participation ratios from field integrals, seam admittances, simulation
//! stitching and mesh-convergence extrapolation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::consts::{EPSILON_0, MU_0};
use crate::error::{Error, Result};
use crate::loss::{LossFactorEstimate, ParticipationUnit};
use crate::lsq::{self, LevenbergMarquardt, Model};
use crate::uncertain::Uncertain;

/// Nominal interface-layer thickness, m.
pub const DEFAULT_INTERFACE_THICKNESS: f64 = 3e-9;
/// Nominal interface-layer relative permittivity.
pub const DEFAULT_INTERFACE_PERMITTIVITY: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegralKind {
    MetalAir,
    MetalSubstrate,
    SubstrateAir,
    Bulk,
    Conductor,
    Seam,
}

impl IntegralKind {
    fn name(self) -> &'static str {
        match self {
            IntegralKind::MetalAir => "metal_air",
            IntegralKind::MetalSubstrate => "metal_substrate",
            IntegralKind::SubstrateAir => "substrate_air",
            IntegralKind::Bulk => "bulk",
            IntegralKind::Conductor => "conductor",
            IntegralKind::Seam => "seam",
        }
    }
}

fn default_thickness() -> f64 {
    DEFAULT_INTERFACE_THICKNESS
}

fn default_permittivity() -> f64 {
    DEFAULT_INTERFACE_PERMITTIVITY
}

/// Field integrals exported from an electromagnetic simulation.
///
/// `integral` holds, depending on `kind`:
/// * surface kinds: `∫|E|² dS` over the interface sheet (V²)
/// * `bulk`: `∫ D·E dV` over the substrate (J)
/// * `conductor`: `∫ B·H dS` over the conductor surface
/// * `seam`: `∫ |H·l̂|² dl` along the seam (A²/m)
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldIntegrals {
    pub kind: IntegralKind,
    pub integral: f64,
    /// `∫ D·E dV` over all space, J.
    #[serde(default)]
    pub total_electric_energy: Option<f64>,
    /// `∫ B·H dV` over all space, J.
    #[serde(default)]
    pub total_magnetic_energy: Option<f64>,
    /// Angular frequency of the mode, rad/s.
    #[serde(default)]
    pub omega: Option<f64>,
    #[serde(default = "default_thickness")]
    pub interface_thickness: f64,
    #[serde(default = "default_permittivity")]
    pub interface_rel_permittivity: f64,
}

impl FieldIntegrals {
    pub fn electric(kind: IntegralKind, integral: f64, total_electric_energy: f64) -> Self {
        Self {
            kind,
            integral,
            total_electric_energy: Some(total_electric_energy),
            total_magnetic_energy: None,
            omega: None,
            interface_thickness: DEFAULT_INTERFACE_THICKNESS,
            interface_rel_permittivity: DEFAULT_INTERFACE_PERMITTIVITY,
        }
    }

    pub fn magnetic(kind: IntegralKind, integral: f64, total_magnetic_energy: f64, omega: f64) -> Self {
        Self {
            kind,
            integral,
            total_electric_energy: None,
            total_magnetic_energy: Some(total_magnetic_energy),
            omega: Some(omega),
            interface_thickness: DEFAULT_INTERFACE_THICKNESS,
            interface_rel_permittivity: DEFAULT_INTERFACE_PERMITTIVITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Participation {
    pub value: f64,
    pub unit: ParticipationUnit,
}

pub fn participation_from_integrals(fi: &FieldIntegrals) -> Result<Participation> {
    let mismatch = |reason| Error::KindMismatch {
        kind: fi.kind.name().to_string(),
        reason,
    };
    if !(fi.integral >= 0.0) || !fi.integral.is_finite() {
        return Err(Error::InvalidInput(format!("field integral must be non-negative, got {}", fi.integral)));
    }
    let t = fi.interface_thickness;
    let eps_r = fi.interface_rel_permittivity;
    if !(t > 0.0) {
        return Err(Error::InvalidInput(format!("interface thickness must be positive, got {t}")));
    }
    if !(eps_r >= 1.0) {
        return Err(Error::InvalidInput(format!("interface permittivity must be >= 1, got {eps_r}")));
    }
    let electric = || {
        let e = fi.total_electric_energy.ok_or_else(|| mismatch("total electric energy required"))?;
        if e > 0.0 {
            Ok(e)
        } else {
            Err(Error::ZeroTotalEnergy)
        }
    };
    let magnetic = || {
        let m = fi.total_magnetic_energy.ok_or_else(|| mismatch("total magnetic energy required"))?;
        let w = fi.omega.ok_or_else(|| mismatch("angular frequency required"))?;
        if !(w > 0.0) {
            return Err(Error::NonPositiveInput("omega"));
        }
        if m > 0.0 {
            Ok((m, w))
        } else {
            Err(Error::ZeroTotalEnergy)
        }
    };
    let dimensionless = |value| Participation {
        value,
        unit: ParticipationUnit::Dimensionless,
    };
    Ok(match fi.kind {
        // E is evaluated in vacuum above the film, so εr divides.
        IntegralKind::MetalAir => dimensionless(t * EPSILON_0 * fi.integral / (eps_r * electric()?)),
        IntegralKind::MetalSubstrate | IntegralKind::SubstrateAir => {
            dimensionless(eps_r * t * EPSILON_0 * fi.integral / electric()?)
        }
        IntegralKind::Bulk => dimensionless(fi.integral / electric()?),
        IntegralKind::Conductor => {
            let (m, w) = magnetic()?;
            Participation {
                value: fi.integral / (MU_0 * w * m),
                unit: ParticipationUnit::PerOhm,
            }
        }
        IntegralKind::Seam => {
            let (m, w) = magnetic()?;
            Participation {
                value: fi.integral / (w * m),
                unit: ParticipationUnit::SiemensPerMeter,
            }
        }
    })
}

/// Ratio of edge to donut stored energy.
pub fn donut_to_edge_factor(edge_energy: f64, donut_energy: f64) -> Result<f64> {
    if !(donut_energy > 0.0) {
        return Err(Error::ZeroDenominator);
    }
    if !(edge_energy > 0.0) {
        return Err(Error::NonPositiveInput("edge_energy"));
    }
    Ok(edge_energy / donut_energy)
}

/// Edge-region participation inferred from the donut participation.
pub fn edge_participation(donut_participation: f64, factor: f64) -> f64 {
    donut_participation * factor
}

/// Trapezoidal integral of samples `y(x)` on a possibly non-uniform grid.
pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1])).sum()
}

/// Geometry entering the closed-form seam admittances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeamGeometry {
    /// Characteristic (distributed) or lumped-element impedance, Ω.
    pub impedance: f64,
    /// Strip or lead width, m.
    pub strip_width: f64,
    /// Strip length, m (distributed case).
    #[serde(default)]
    pub strip_length: Option<f64>,
    /// Seam positions along the strip, m (distributed case).
    #[serde(default)]
    pub seam_positions: Vec<f64>,
}

impl SeamGeometry {
    pub fn lumped(impedance: f64, strip_width: f64) -> Self {
        Self {
            impedance,
            strip_width,
            strip_length: None,
            seam_positions: Vec::new(),
        }
    }

    /// `count` seams at the centers of equal cells along the strip.
    pub fn uniform(impedance: f64, strip_width: f64, strip_length: f64, count: usize) -> Self {
        let pitch = strip_length / count as f64;
        Self {
            impedance,
            strip_width,
            strip_length: Some(strip_length),
            seam_positions: (0..count).map(|i| (i as f64 + 0.5) * pitch).collect(),
        }
    }

    fn check_lumped(&self) -> Result<()> {
        if !(self.impedance > 0.0) {
            return Err(Error::NonPositiveInput("impedance"));
        }
        if !(self.strip_width > 0.0) {
            return Err(Error::NonPositiveInput("strip_width"));
        }
        Ok(())
    }
}

/// Admittance per unit length of seams along a half-wave strip:
/// `y = 2/(π·Z·w) · Σ sin²(π·z_i/l)`.
pub fn seam_admittance_distributed(g: &SeamGeometry) -> Result<f64> {
    g.check_lumped()?;
    let length = g.strip_length.ok_or(Error::InvalidInput("distributed seam admittance needs a strip length".into()))?;
    if !(length > 0.0) {
        return Err(Error::NonPositiveInput("strip_length"));
    }
    let mut sum = 0.0;
    for &z in &g.seam_positions {
        if !(z > 0.0 && z < length) {
            return Err(Error::PositionOutOfRange { position: z, length });
        }
        sum += (PI * z / length).sin().powi(2);
    }
    Ok(2.0 / (PI * g.impedance * g.strip_width) * sum)
}

/// Admittance per unit length of a joint in a lumped element: `y = 2/(Z·w)`.
pub fn seam_admittance_lumped(g: &SeamGeometry) -> Result<f64> {
    g.check_lumped()?;
    Ok(2.0 / (g.impedance * g.strip_width))
}

/// Impedance `sqrt(L/C)` of a lumped LC mode at angular frequency `omega`,
/// with the capacitance set by resonance, `C = 1/(ω²L)`.
pub fn lumped_impedance(inductance: f64, omega: f64) -> f64 {
    let capacitance = 1.0 / (omega * omega * inductance);
    (inductance / capacitance).sqrt()
}

/// `|E|` sampled along a line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldProfile {
    pub position: Vec<f64>,
    pub magnitude: Vec<f64>,
}

/// Field-amplitude ratio matching a local simulation to a global one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StitchFactor {
    pub factor: f64,
}

/// Participation assembled from global and stitched local contributions.
///
/// `linear` multiplies the local participation by the field-amplitude factor
/// itself. `squared` applies the factor squared, which is the energy-scaling
/// reading of the same correction; it is reported for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StitchedParticipation {
    pub linear: f64,
    pub squared: f64,
}

impl StitchFactor {
    pub fn combine(&self, global: f64, local: f64) -> StitchedParticipation {
        StitchedParticipation {
            linear: global + local * self.factor,
            squared: global + local * self.factor * self.factor,
        }
    }
}

/// Mean of `global/local` along a common stitching line.
pub fn stitch_local_to_global(global: &FieldProfile, local: &FieldProfile) -> Result<StitchFactor> {
    for p in [global, local] {
        if p.position.len() != p.magnitude.len() {
            return Err(Error::GridMismatch("position and magnitude lengths differ".into()));
        }
    }
    if global.position.len() != local.position.len() {
        return Err(Error::GridMismatch(format!(
            "{} global samples vs {} local samples",
            global.position.len(),
            local.position.len()
        )));
    }
    if global.position.is_empty() {
        return Err(Error::GridMismatch("empty profiles".into()));
    }
    let scale = global.position.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    for (i, (a, b)) in global.position.iter().zip(&local.position).enumerate() {
        if (a - b).abs() > 1e-9 * scale {
            return Err(Error::GridMismatch(format!("sample {i}: {a:e} vs {b:e}")));
        }
    }
    let mut sum = 0.0;
    for (i, (g, l)) in global.magnitude.iter().zip(&local.magnitude).enumerate() {
        if *l == 0.0 {
            return Err(Error::ZeroLocalField(i));
        }
        sum += g / l;
    }
    Ok(StitchFactor {
        factor: sum / global.magnitude.len() as f64,
    })
}

/// Participation versus mesh size from successive adaptive passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSeries {
    points: Vec<(f64, f64)>,
    dimension: u32,
}

pub const MIN_CONVERGENCE_POINTS: usize = 4;

impl ConvergenceSeries {
    pub fn new(points: Vec<(f64, f64)>, dimension: u32) -> Result<Self> {
        if points.len() < MIN_CONVERGENCE_POINTS {
            return Err(Error::InsufficientPoints {
                needed: MIN_CONVERGENCE_POINTS,
                have: points.len(),
            });
        }
        if points.iter().any(|(n, p)| !(*n > 0.0) || !p.is_finite()) {
            return Err(Error::InvalidInput("element counts must be positive and participations finite".into()));
        }
        if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::InvalidInput("element counts must be strictly increasing".into()));
        }
        if dimension == 0 {
            return Err(Error::InvalidInput("dimension must be positive".into()));
        }
        Ok(Self { points, dimension })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn dimension(&self) -> u32 {
        self.dimension
    }

    pub fn default_tail_points(&self) -> usize {
        3usize.max(self.points.len().div_ceil(3))
    }
}

/// `p_n = p_∞ - A·n^(-c/d)` fitted to the whole series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub p_infinity: Uncertain,
    pub amplitude: f64,
    /// Exponent `c/d`.
    pub exponent: Uncertain,
    /// Order of convergence `c`.
    pub order: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceEstimate {
    /// Intercept of a straight-line fit of `p` against `1/n` over the tail.
    pub p_infinity: Uncertain,
    pub slope: f64,
    pub tail_points: usize,
    pub power_law: Option<PowerLawFit>,
}

/// Extrapolates a participation to infinite mesh density.
pub fn extrapolate_convergence(series: &ConvergenceSeries, tail_points: Option<usize>) -> Result<ConvergenceEstimate> {
    let pts = series.points();
    let tail = tail_points.unwrap_or_else(|| series.default_tail_points());
    if tail < 3 || tail > pts.len() {
        return Err(Error::InsufficientPoints {
            needed: tail.max(3),
            have: pts.len(),
        });
    }
    let tail_pts = &pts[pts.len() - tail..];
    let steps: Vec<f64> = tail_pts.windows(2).map(|w| w[1].1 - w[0].1).filter(|d| *d != 0.0).collect();
    if steps.iter().any(|d| d.signum() != steps[0].signum()) {
        return Err(Error::NonConvergent);
    }

    let m = tail as f64;
    let xs: Vec<f64> = tail_pts.iter().map(|(n, _)| 1.0 / n).collect();
    let ys: Vec<f64> = tail_pts.iter().map(|(_, p)| *p).collect();
    let xm = xs.iter().sum::<f64>() / m;
    let ym = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - xm).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let s2 = rss / (m - 2.0);
    let sum_x2: f64 = xs.iter().map(|x| x * x).sum();
    let sigma = (s2 * sum_x2 / (m * sxx)).sqrt();

    Ok(ConvergenceEstimate {
        p_infinity: Uncertain::new(intercept, sigma),
        slope,
        tail_points: tail,
        power_law: fit_power_law(series),
    })
}

/// Least-squares `(p_∞, A)` for a fixed exponent, with the residual sum of squares.
fn power_law_linear(n: &[f64], p: &[f64], exponent: f64) -> Option<(f64, f64, f64)> {
    let basis: Vec<f64> = n.iter().map(|v| -v.powf(-exponent)).collect();
    let m = n.len() as f64;
    let bm = basis.iter().sum::<f64>() / m;
    let pm = p.iter().sum::<f64>() / m;
    let sbb: f64 = basis.iter().map(|b| (b - bm).powi(2)).sum();
    if !(sbb > 0.0) {
        return None;
    }
    let sbp: f64 = basis.iter().zip(p).map(|(b, y)| (b - bm) * (y - pm)).sum();
    let amplitude = sbp / sbb;
    let p_inf = pm - amplitude * bm;
    let rss = basis.iter().zip(p).map(|(b, y)| (p_inf + amplitude * b - y).powi(2)).sum();
    Some((p_inf, amplitude, rss))
}

fn fit_power_law(series: &ConvergenceSeries) -> Option<PowerLawFit> {
    let pts = series.points();
    if pts.len() < 4 {
        return None;
    }
    let scale = pts.iter().fold(0.0f64, |m, (_, p)| m.max(p.abs()));
    if scale == 0.0 {
        return None;
    }
    let n: Vec<f64> = pts.iter().map(|(n, _)| *n).collect();
    let p: Vec<f64> = pts.iter().map(|(_, p)| p / scale).collect();

    // Profile the exponent on a log grid, then refine all three parameters.
    let (lo, hi) = (0.02f64.ln(), 5f64.ln());
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for k in 0..=240 {
        let e = (lo + (hi - lo) * k as f64 / 240.0).exp();
        if let Some((pi, a, rss)) = power_law_linear(&n, &p, e) {
            if best.map_or(true, |b| rss < b.3) {
                best = Some((e, pi, a, rss));
            }
        }
    }
    let (e0, pi0, a0, _) = best?;
    let model = PowerLawModel { n: &n, p: &p };
    let lm = LevenbergMarquardt::default().with_bounds(
        DVector::from_vec(vec![f64::NEG_INFINITY, f64::NEG_INFINITY, lo]),
        DVector::from_vec(vec![f64::INFINITY, f64::INFINITY, hi]),
    );
    let sol = lm.minimize(&model, DVector::from_vec(vec![pi0, a0, e0.ln()]));
    if !sol.params.iter().all(|v| v.is_finite()) {
        return None;
    }
    let e = sol.params[2].exp();
    if e <= lo.exp() * 1.0001 || e >= hi.exp() * 0.9999 {
        return None;
    }
    let dof = (n.len() - 3).max(1) as f64;
    let cov = lsq::inverse_normal_matrix(&sol.jacobian)? * (sol.rss / dof);
    let sig = lsq::sigmas(&cov);
    Some(PowerLawFit {
        p_infinity: Uncertain::new(sol.params[0] * scale, sig[0] * scale),
        amplitude: sol.params[1] * scale,
        exponent: Uncertain::new(e, sig[2] * e),
        order: e * series.dimension() as f64,
    })
}

/// Parameters: `[p_∞, A, ln(c/d)]` on normalized participations.
struct PowerLawModel<'a> {
    n: &'a [f64],
    p: &'a [f64],
}

impl Model for PowerLawModel<'_> {
    fn residual_count(&self) -> usize {
        self.n.len()
    }

    fn residuals(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        let e = x[2].exp();
        for (i, (&n, &p)) in self.n.iter().zip(self.p).enumerate() {
            out[i] = x[0] - x[1] * n.powf(-e) - p;
        }
    }

    fn jacobian(&self, x: &DVector<f64>, out: &mut DMatrix<f64>) {
        let e = x[2].exp();
        for (i, &n) in self.n.iter().enumerate() {
            let t = n.powf(-e);
            out[(i, 0)] = 1.0;
            out[(i, 1)] = -t;
            out[(i, 2)] = x[1] * t * n.ln() * e;
        }
    }
}

/// Surface participation as the sum of the three interface participations.
pub fn aggregate_surface(p_ma: f64, p_ms: f64, p_sa: f64) -> f64 {
    p_ma + p_ms + p_sa
}

/// Rescales a loss factor for a participation that is `correction` (fractional)
/// higher than the one it was extracted with: `Γ' = Γ / (1 + correction)`.
pub fn rescale_loss_factor(gamma: &LossFactorEstimate, correction: f64) -> Result<LossFactorEstimate> {
    if !(correction >= 0.0) || !correction.is_finite() {
        return Err(Error::NonPositiveCorrection(correction));
    }
    let divisor = 1.0 + correction;
    let mut out = gamma.clone();
    out.value /= divisor;
    out.sigma /= divisor;
    out.bound = gamma.bound.map(|b| b / divisor);
    if correction > 0.0 {
        out.notes.push(format!("rescaled for participation correction {correction}"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{LossUnit, Provenance};

    #[test]
    fn bulk_fills_the_mode() {
        let fi = FieldIntegrals::electric(IntegralKind::Bulk, 2.5e-20, 2.5e-20);
        assert_eq!(participation_from_integrals(&fi).unwrap().value, 1.0);
    }

    #[test]
    fn permittivity_placement() {
        let ma = participation_from_integrals(&FieldIntegrals::electric(IntegralKind::MetalAir, 1e-3, 1e-20)).unwrap();
        let ms = participation_from_integrals(&FieldIntegrals::electric(IntegralKind::MetalSubstrate, 1e-3, 1e-20)).unwrap();
        assert!((ms.value / ma.value - 100.0).abs() < 1e-12);
    }

    #[test]
    fn reverse_engineered_metal_substrate() {
        let energy = 1.0;
        let integral = 6.4e-4 * energy / (10.0 * 3e-9 * 8.8541878128e-12);
        let p = participation_from_integrals(&FieldIntegrals::electric(IntegralKind::MetalSubstrate, integral, energy)).unwrap();
        assert!((p.value - 6.4e-4).abs() < 1e-16);
    }

    #[test]
    fn magnetic_kinds() {
        let omega = 2.0 * PI * 5e9;
        let seam = participation_from_integrals(&FieldIntegrals::magnetic(IntegralKind::Seam, 3.0, 2.0, omega)).unwrap();
        assert_eq!(seam.unit, ParticipationUnit::SiemensPerMeter);
        assert!((seam.value - 1.5 / omega).abs() < 1e-24);
        let cond = participation_from_integrals(&FieldIntegrals::magnetic(IntegralKind::Conductor, 3.0, 2.0, omega)).unwrap();
        assert_eq!(cond.unit, ParticipationUnit::PerOhm);
        assert!((cond.value - 1.5 / (MU_0 * omega)).abs() < 1e-12 * cond.value);
    }

    #[test]
    fn kind_mismatch_and_zero_energy() {
        let fi = FieldIntegrals::electric(IntegralKind::Seam, 1.0, 1.0);
        assert!(matches!(participation_from_integrals(&fi), Err(Error::KindMismatch { .. })));
        let fi = FieldIntegrals::electric(IntegralKind::Bulk, 1.0, 0.0);
        assert!(matches!(participation_from_integrals(&fi), Err(Error::ZeroTotalEnergy)));
    }

    #[test]
    fn surface_participation_homogeneity() {
        for kind in [IntegralKind::MetalAir, IntegralKind::MetalSubstrate, IntegralKind::SubstrateAir] {
            let base = participation_from_integrals(&FieldIntegrals::electric(kind, 2.0, 3.0)).unwrap().value;
            let scaled_integral = participation_from_integrals(&FieldIntegrals::electric(kind, 7.0 * 2.0, 3.0)).unwrap().value;
            let scaled_energy = participation_from_integrals(&FieldIntegrals::electric(kind, 2.0, 7.0 * 3.0)).unwrap().value;
            assert!((scaled_integral / base - 7.0).abs() < 1e-12);
            assert!((scaled_energy * 7.0 / base - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn donut_factor_cases() {
        assert_eq!(donut_to_edge_factor(2.0, 2.0).unwrap(), 1.0);
        assert_eq!(donut_to_edge_factor(6.0, 2.0).unwrap(), 3.0);
        assert!(matches!(donut_to_edge_factor(1.0, 0.0), Err(Error::ZeroDenominator)));
        assert!((edge_participation(1e-5, 3.0) - 3e-5).abs() < 1e-18);
    }

    #[test]
    fn donut_factor_for_inverse_square_root_edge_field() {
        // |E| ∝ r^(-1/2) near a film edge, so the energy density goes as 1/r.
        // Edge region [r0, r0 + w], donut [r0 + w, r0 + 2w].
        let (r0, w) = (5e-9f64, 1e-6f64);
        let analytic = ((r0 + w) / r0).ln() / ((r0 + 2.0 * w) / (r0 + w)).ln();
        let grid = |a: f64, b: f64| -> Vec<f64> { (0..=4000).map(|i| a * (b / a).powf(i as f64 / 4000.0)).collect() };
        let edge_x = grid(r0, r0 + w);
        let donut_x = grid(r0 + w, r0 + 2.0 * w);
        let density = |x: &[f64]| x.iter().map(|r| 1.0 / r).collect::<Vec<_>>();
        let f = donut_to_edge_factor(trapezoid(&edge_x, &density(&edge_x)), trapezoid(&donut_x, &density(&donut_x))).unwrap();
        assert!((f / analytic - 1.0).abs() < 0.01, "{f} vs {analytic}");
    }

    #[test]
    fn seam_symmetry_and_extremes() {
        let l = 1e-2;
        let a = SeamGeometry {
            impedance: 50.0,
            strip_width: 1e-5,
            strip_length: Some(l),
            seam_positions: vec![0.3 * l],
        };
        let mut b = a.clone();
        b.seam_positions = vec![0.7 * l];
        let ya = seam_admittance_distributed(&a).unwrap();
        assert!((ya - seam_admittance_distributed(&b).unwrap()).abs() < 1e-12 * ya);
        let mut mid = a.clone();
        mid.seam_positions = vec![0.5 * l];
        let ymid = seam_admittance_distributed(&mid).unwrap();
        assert!((ymid - 2.0 / (PI * 50.0 * 1e-5)).abs() < 1e-9 * ymid);
        let mut out = a.clone();
        out.seam_positions = vec![l];
        assert!(matches!(seam_admittance_distributed(&out), Err(Error::PositionOutOfRange { .. })));
    }

    #[test]
    fn lumped_seam_scaling() {
        let y1 = seam_admittance_lumped(&SeamGeometry::lumped(283.0, 10e-6)).unwrap();
        let y2 = seam_admittance_lumped(&SeamGeometry::lumped(283.0, 20e-6)).unwrap();
        assert!((y1 / y2 - 2.0).abs() < 1e-12);
        assert!(seam_admittance_lumped(&SeamGeometry::lumped(1e300, 10e-6)).unwrap() < 1e-290);
        assert!(seam_admittance_lumped(&SeamGeometry::lumped(0.0, 10e-6)).is_err());
        // 9 nH at 5 GHz.
        let z = lumped_impedance(9e-9, 2.0 * PI * 5e9);
        assert!((z - (9e-9f64 / 1.126e-13).sqrt()).abs() < 0.5);
    }

    #[test]
    fn stitching() {
        let x: Vec<f64> = (0..20).map(|i| 7.5e-6 + i as f64 * 0.25e-6).collect();
        let g: Vec<f64> = x.iter().map(|v| 1.0 / v.sqrt()).collect();
        let prof = |m: Vec<f64>| FieldProfile {
            position: x.clone(),
            magnitude: m,
        };
        assert_eq!(stitch_local_to_global(&prof(g.clone()), &prof(g.clone())).unwrap().factor, 1.0);
        let half: Vec<f64> = g.iter().map(|v| v / 2.0).collect();
        assert!((stitch_local_to_global(&prof(g.clone()), &prof(half)).unwrap().factor - 2.0).abs() < 1e-14);
        let zero = {
            let mut h = g.clone();
            h[4] = 0.0;
            h
        };
        assert!(matches!(stitch_local_to_global(&prof(g.clone()), &prof(zero)), Err(Error::ZeroLocalField(4))));
        let short = FieldProfile {
            position: x[..10].to_vec(),
            magnitude: g[..10].to_vec(),
        };
        assert!(matches!(stitch_local_to_global(&prof(g.clone()), &short), Err(Error::GridMismatch(_))));
        let s = StitchFactor { factor: 2.0 }.combine(1.0, 0.5);
        assert_eq!((s.linear, s.squared), (2.0, 3.0));
    }

    #[test]
    fn affine_series_is_exact() {
        let pts = (0..8).map(|k| {
            let n = 1e4 * 1.7f64.powi(k);
            (n, 5e-5 * (1.0 - 1.0 / n))
        });
        let s = ConvergenceSeries::new(pts.collect(), 3).unwrap();
        let est = extrapolate_convergence(&s, Some(4)).unwrap();
        assert!((est.p_infinity.value - 5e-5).abs() < 1e-9 * 5e-5);
        assert_eq!(s.default_tail_points(), 3);
    }

    #[test]
    fn convergence_from_above_lands_below_samples() {
        let pts: Vec<_> = (0..6).map(|k| {
            let n = 1e4 * 2f64.powi(k);
            (n, 1e-6 + 3e-3 / n)
        }).collect();
        let min = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let est = extrapolate_convergence(&ConvergenceSeries::new(pts, 3).unwrap(), None).unwrap();
        assert!(est.p_infinity.value < min);
    }

    #[test]
    fn convergence_errors() {
        let pts: Vec<_> = (0..6).map(|k| (1e3 * (k + 1) as f64, if k % 2 == 0 { 1.0 } else { 1.1 })).collect();
        let s = ConvergenceSeries::new(pts, 3).unwrap();
        assert!(matches!(extrapolate_convergence(&s, Some(4)), Err(Error::NonConvergent)));
        assert!(matches!(extrapolate_convergence(&s, Some(2)), Err(Error::InsufficientPoints { .. })));
        assert!(matches!(extrapolate_convergence(&s, Some(7)), Err(Error::InsufficientPoints { .. })));
        assert!(ConvergenceSeries::new(vec![(1.0, 1.0); 3], 3).is_err());
    }

    #[test]
    fn power_law_recovers_limit() {
        let pts: Vec<_> = (0..12).map(|k| {
            let n = 2e3 * 1.6f64.powi(k);
            (n, 4.9e-5 - 3e-4 * n.powf(-2.0 / 3.0))
        }).collect();
        let est = extrapolate_convergence(&ConvergenceSeries::new(pts, 3).unwrap(), None).unwrap();
        let pl = est.power_law.unwrap();
        assert!((pl.p_infinity.value / 4.9e-5 - 1.0).abs() < 5e-3);
        assert!((pl.exponent.value - 2.0 / 3.0).abs() < 1e-6);
        assert!((pl.order - 2.0).abs() < 1e-5);
    }

    #[test]
    fn surface_sum_and_rescaling() {
        assert!((aggregate_surface(3.8e-6, 4.9e-5, 5.6e-5) - 1.088e-4).abs() < 1e-18);
        assert_eq!(aggregate_surface(0.0, 0.0, 0.0), 0.0);
        let g = LossFactorEstimate::new("Ta surface", 4.2e-4, 1.4e-4, LossUnit::Dimensionless, Provenance::Transferred("ta".into()));
        let r = rescale_loss_factor(&g, 0.21).unwrap();
        assert!((r.value - 3.47e-4).abs() < 0.01e-4);
        assert!((r.sigma - 1.4e-4 / 1.21).abs() < 1e-18);
        assert_eq!(r.notes.len(), 1);
        assert_eq!(rescale_loss_factor(&g, 0.0).unwrap().value, g.value);
        assert!(matches!(rescale_loss_factor(&g, -0.5), Err(Error::NonPositiveCorrection(_))));
    }
}
