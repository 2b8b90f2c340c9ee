//! Participation-matrix inversion for loss factors.
//!
//! Each mode's inverse internal quality factor is modelled as a sum of
//! `p_ij·Γ_j` over loss mechanisms. Given a participation table and measured
//! `κ_i = 1/Q_int,i`, the functions here subtract contributions from loss
//! factors known from elsewhere, invert for the rest and propagate
//! uncertainties.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::loss::{LossFactorEstimate, LossUnit, ParticipationUnit, Provenance};
use crate::tls::{self, TlsFit};
use crate::uncertain::Uncertain;

/// Scaled condition numbers above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// One column of a participation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mechanism {
    pub label: String,
    pub unit: ParticipationUnit,
    /// One value per mode, in table mode order.
    pub values: Vec<f64>,
}

/// Named sum of mechanisms, e.g. the three interfaces of one film.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub label: String,
    pub members: Vec<String>,
}

/// Participations `p_ij` for modes × loss mechanisms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipationTable {
    pub modes: Vec<String>,
    pub mechanisms: Vec<Mechanism>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<Group>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn check_unique<'a>(labels: impl Iterator<Item = &'a String>, what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for l in labels {
        if !seen.insert(l.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate {what} label {l:?}")));
        }
    }
    Ok(())
}

impl ParticipationTable {
    pub fn new(modes: Vec<String>, mechanisms: Vec<Mechanism>) -> Result<Self> {
        let t = Self {
            modes,
            mechanisms,
            groups: Vec::new(),
            notes: Vec::new(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        check_unique(self.modes.iter(), "mode")?;
        check_unique(self.mechanisms.iter().map(|m| &m.label), "mechanism")?;
        check_unique(self.groups.iter().map(|g| &g.label), "group")?;
        for m in &self.mechanisms {
            if m.values.len() != self.modes.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} has {} values for {} modes",
                    m.label,
                    m.values.len(),
                    self.modes.len()
                )));
            }
            if let Some(v) = m.values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidInput(format!("participation of {} must be non-negative, got {v}", m.label)));
            }
        }
        for g in &self.groups {
            for member in &g.members {
                self.mechanism(member)?;
            }
        }
        Ok(())
    }

    pub fn mode_index(&self, mode: &str) -> Result<usize> {
        self.modes.iter().position(|m| m == mode).ok_or_else(|| Error::LabelMismatch(format!("mode {mode}")))
    }

    pub fn mechanism(&self, label: &str) -> Result<&Mechanism> {
        self.mechanisms
            .iter()
            .find(|m| m.label == label)
            .ok_or_else(|| Error::LabelMismatch(format!("mechanism {label}")))
    }

    pub fn value(&self, mode: &str, mechanism: &str) -> Result<f64> {
        Ok(self.mechanism(mechanism)?.values[self.mode_index(mode)?])
    }

    pub fn mechanism_labels(&self) -> Vec<String> {
        self.mechanisms.iter().map(|m| m.label.clone()).collect()
    }

    /// Restricts the table to `modes`, in the given order.
    pub fn select_modes<S: AsRef<str>>(&self, modes: &[S]) -> Result<Self> {
        let idx = modes.iter().map(|m| self.mode_index(m.as_ref())).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            modes: modes.iter().map(|m| m.as_ref().to_string()).collect(),
            mechanisms: self
                .mechanisms
                .iter()
                .map(|m| Mechanism {
                    label: m.label.clone(),
                    unit: m.unit,
                    values: idx.iter().map(|&i| m.values[i]).collect(),
                })
                .collect(),
            groups: self.groups.clone(),
            notes: self.notes.clone(),
        })
    }

    /// Restricts the table to the named mechanisms, in the given order.
    pub fn select_mechanisms<S: AsRef<str>>(&self, labels: &[S]) -> Result<Self> {
        Ok(Self {
            modes: self.modes.clone(),
            mechanisms: labels.iter().map(|l| self.mechanism(l.as_ref()).cloned()).collect::<Result<_>>()?,
            groups: Vec::new(),
            notes: self.notes.clone(),
        })
    }

    /// Replaces each group's members by a single summed column placed where
    /// the first member was.
    pub fn aggregate(&self) -> Result<Self> {
        let mut mechanisms = Vec::new();
        let mut consumed = HashSet::new();
        for m in &self.mechanisms {
            if consumed.contains(m.label.as_str()) {
                continue;
            }
            match self.groups.iter().find(|g| g.members.contains(&m.label)) {
                None => mechanisms.push(m.clone()),
                Some(g) => {
                    let mut values = vec![0.0; self.modes.len()];
                    for member in &g.members {
                        let col = self.mechanism(member)?;
                        if col.unit != m.unit {
                            return Err(Error::UnitMismatch {
                                label: g.label.clone(),
                                detail: format!("{member} is in {}, {} is in {}", col.unit, m.label, m.unit),
                            });
                        }
                        for (v, c) in values.iter_mut().zip(&col.values) {
                            *v += c;
                        }
                        consumed.insert(member.as_str());
                    }
                    mechanisms.push(Mechanism {
                        label: g.label.clone(),
                        unit: m.unit,
                        values,
                    });
                }
            }
        }
        let out = Self {
            modes: self.modes.clone(),
            mechanisms,
            groups: Vec::new(),
            notes: self.notes.clone(),
        };
        out.validate()?;
        Ok(out)
    }

    /// Copy with one mechanism's column multiplied by `factor`.
    pub fn with_scaled_column(&self, label: &str, factor: f64) -> Result<Self> {
        let mut out = self.clone();
        let col = out
            .mechanisms
            .iter_mut()
            .find(|m| m.label == label)
            .ok_or_else(|| Error::LabelMismatch(format!("mechanism {label}")))?;
        col.values.iter_mut().for_each(|v| *v *= factor);
        Ok(out)
    }

    /// Participations of one mode as `(label, p, unit)` triples.
    pub fn row(&self, mode: &str) -> Result<Vec<ParticipationEntry>> {
        let i = self.mode_index(mode)?;
        Ok(self
            .mechanisms
            .iter()
            .map(|m| ParticipationEntry {
                label: m.label.clone(),
                value: m.values[i],
                unit: m.unit,
            })
            .collect())
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.modes.len(), self.mechanisms.len(), |i, j| self.mechanisms[j].values[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipationEntry {
    pub label: String,
    pub value: f64,
    pub unit: ParticipationUnit,
}

/// Per-mode `κ_i = 1/Q_int,i` at a stated photon number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseQVector {
    pub modes: Vec<String>,
    pub kappa: Vec<f64>,
    pub sigma: Vec<f64>,
    pub nbar: f64,
    /// Full covariance when the modes are correlated, e.g. after subtracting
    /// an uncertain common loss factor. Row-major, modes × modes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
}

impl InverseQVector {
    pub fn new(modes: Vec<String>, kappa: Vec<f64>, sigma: Vec<f64>, nbar: f64) -> Result<Self> {
        if modes.len() != kappa.len() || kappa.len() != sigma.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} modes, {} κ values, {} σ values",
                modes.len(),
                kappa.len(),
                sigma.len()
            )));
        }
        check_unique(modes.iter(), "mode")?;
        if kappa.iter().any(|k| !(*k > 0.0) || !k.is_finite()) {
            return Err(Error::NonPositiveInput("kappa"));
        }
        if sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidInput("σ must be non-negative".into()));
        }
        Ok(Self {
            modes,
            kappa,
            sigma,
            nbar,
            covariance: None,
        })
    }

    /// From internal quality factors `Q ± σ_Q`.
    pub fn from_q_int(modes: Vec<String>, q: &[Uncertain], nbar: f64) -> Result<Self> {
        if q.iter().any(|q| !(q.value > 0.0)) {
            return Err(Error::NonPositiveInput("q_int"));
        }
        let inv: Vec<Uncertain> = q.iter().map(|q| q.recip()).collect();
        Self::new(modes, inv.iter().map(|u| u.value).collect(), inv.iter().map(|u| u.sigma).collect(), nbar)
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        match &self.covariance {
            Some(c) => DMatrix::from_fn(self.len(), self.len(), |i, j| c[i][j]),
            None => DMatrix::from_diagonal(&DVector::from_iterator(self.len(), self.sigma.iter().map(|s| s * s))),
        }
    }

    pub fn get(&self, mode: &str) -> Result<Uncertain> {
        let i = self.modes.iter().position(|m| m == mode).ok_or_else(|| Error::LabelMismatch(format!("mode {mode}")))?;
        Ok(Uncertain::new(self.kappa[i], self.sigma[i]))
    }
}

/// Result of removing known contributions from `κ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subtracted {
    pub kappa: InverseQVector,
    /// Table with the known mechanisms removed.
    pub remaining: ParticipationTable,
    /// Modes whose residual inverse Q is not positive.
    pub negative_residual: Vec<String>,
}

impl Subtracted {
    pub fn has_negative_residual(&self) -> bool {
        !self.negative_residual.is_empty()
    }
}

/// `κ_i' = κ_i − Σ_known p_ij Γ_j`, with the known `Γ` uncertainties added
/// to the covariance through the same linear map. Central values of bounded
/// entries are used.
pub fn subtract_known(k: &InverseQVector, p: &ParticipationTable, known: &[LossFactorEstimate]) -> Result<Subtracted> {
    check_unique(known.iter().map(|g| &g.label), "known loss factor")?;
    let rows = k.modes.iter().map(|m| p.mode_index(m)).collect::<Result<Vec<_>>>()?;
    let n = k.len();
    let mut kappa = k.kappa.clone();
    let mut cov = k.covariance_matrix();
    for g in known {
        let mech = p.mechanism(&g.label)?;
        g.check_unit(mech.unit)?;
        let col = DVector::from_iterator(n, rows.iter().map(|&i| mech.values[i]));
        for (kap, pv) in kappa.iter_mut().zip(col.iter()) {
            *kap -= pv * g.value;
        }
        cov += &col * col.transpose() * (g.sigma * g.sigma);
    }
    let known_labels: HashSet<&str> = known.iter().map(|g| g.label.as_str()).collect();
    let remaining_labels: Vec<String> = p.mechanism_labels().into_iter().filter(|l| !known_labels.contains(l.as_str())).collect();
    let remaining = p.select_mechanisms(&remaining_labels)?;
    let negative_residual = k.modes.iter().zip(&kappa).filter(|(_, v)| **v <= 0.0).map(|(m, _)| m.clone()).collect();
    let correlated = k.covariance.is_some() || known.iter().any(|g| g.sigma > 0.0);
    Ok(Subtracted {
        kappa: InverseQVector {
            modes: k.modes.clone(),
            sigma: (0..n).map(|i| cov[(i, i)].max(0.0).sqrt()).collect(),
            kappa,
            nbar: k.nbar,
            covariance: correlated.then(|| (0..n).map(|i| (0..n).map(|j| cov[(i, j)]).collect()).collect()),
        },
        remaining,
        negative_residual,
    })
}

/// Solved loss factors with their joint covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSolution {
    pub nbar: f64,
    pub modes: Vec<String>,
    pub estimates: Vec<LossFactorEstimate>,
    /// Row-major covariance of the raw solved values, in estimate order.
    pub covariance: Vec<Vec<f64>>,
    /// 2-norm condition number of `P` as given.
    pub condition_number: f64,
    /// Condition number after normalizing each column to unit max.
    pub scaled_condition_number: f64,
}

impl LossSolution {
    pub fn estimate(&self, label: &str) -> Result<&LossFactorEstimate> {
        self.estimates
            .iter()
            .find(|e| e.label == label)
            .ok_or_else(|| Error::LabelMismatch(format!("mechanism {label}")))
    }
}

fn condition(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let (max, min) = (sv.max(), sv.min());
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Inverts `K = PΓ` for every mechanism in `p`.
///
/// Square systems are solved directly; overdetermined ones by least squares
/// weighted with the inverse κ covariance. Solved values that are not
/// resolved from zero are reported as bounds (see [`bound_or_value`]).
pub fn solve_loss_factors(p: &ParticipationTable, k: &InverseQVector) -> Result<LossSolution> {
    let (n_modes, n_mech) = (k.len(), p.mechanisms.len());
    if n_mech == 0 {
        return Err(Error::ShapeMismatch("no mechanisms to solve for".into()));
    }
    if n_modes < n_mech {
        return Err(Error::ShapeMismatch(format!("{n_modes} modes cannot resolve {n_mech} mechanisms")));
    }
    let p = p.select_modes(&k.modes)?;
    let raw = p.matrix();
    let scale: Vec<f64> = (0..n_mech).map(|j| raw.column(j).amax()).collect();
    if let Some(j) = scale.iter().position(|s| *s == 0.0) {
        return Err(Error::ZeroParticipation(p.mechanisms[j].label.clone()));
    }
    let mut scaled = raw.clone();
    for (j, s) in scale.iter().enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / s);
    }
    let condition_number = condition(&raw);
    let scaled_condition_number = condition(&scaled);
    if !(scaled_condition_number < MAX_CONDITION) {
        return Err(Error::RankDeficient(scaled_condition_number));
    }

    // Γ = D⁻¹ A κ with A the (weighted) inverse of the scaled matrix.
    let sigma_k = k.covariance_matrix();
    let a = if n_modes == n_mech {
        scaled.clone().lu().try_inverse().ok_or(Error::RankDeficient(scaled_condition_number))?
    } else {
        let weights = if k.sigma.iter().all(|s| *s > 0.0) {
            sigma_k.clone().try_inverse().unwrap_or_else(|| DMatrix::identity(n_modes, n_modes))
        } else {
            DMatrix::identity(n_modes, n_modes)
        };
        let normal = scaled.transpose() * &weights * &scaled;
        let inv = normal.try_inverse().ok_or(Error::RankDeficient(scaled_condition_number))?;
        inv * scaled.transpose() * weights
    };
    let kappa = DVector::from_column_slice(&k.kappa);
    let d_inv = DMatrix::from_diagonal(&DVector::from_iterator(n_mech, scale.iter().map(|s| 1.0 / s)));
    let map = d_inv * a;
    let gamma = &map * kappa;
    let cov = &map * sigma_k * map.transpose();

    let estimates = p
        .mechanisms
        .iter()
        .enumerate()
        .map(|(j, m)| {
            bound_or_value(LossFactorEstimate::new(
                m.label.clone(),
                gamma[j],
                cov[(j, j)].max(0.0).sqrt(),
                m.unit.loss_unit(),
                Provenance::Solved,
            ))
        })
        .collect();
    Ok(LossSolution {
        nbar: k.nbar,
        modes: k.modes.clone(),
        estimates,
        covariance: (0..n_mech).map(|i| (0..n_mech).map(|j| cov[(i, j)]).collect()).collect(),
        condition_number,
        scaled_condition_number,
    })
}

/// Subtracts `known` and solves for the remaining mechanisms.
pub fn solve_with_known(p: &ParticipationTable, k: &InverseQVector, known: &[LossFactorEstimate]) -> Result<LossSolution> {
    let sub = subtract_known(k, p, known)?;
    solve_loss_factors(&sub.remaining, &sub.kappa)
}

/// Reports an upper bound `max(value, 0) + σ` when the central value is not
/// larger than its uncertainty; otherwise returns the estimate unchanged.
pub fn bound_or_value(mut gamma: LossFactorEstimate) -> LossFactorEstimate {
    if gamma.value <= 0.0 || gamma.value < gamma.sigma {
        gamma.bound = Some(gamma.value.max(0.0) + gamma.sigma);
    }
    gamma
}

/// Attributes a single mode's residual loss, after subtracting every known
/// mechanism, to `target`.
pub fn remainder_attribution(
    k_single: &InverseQVector,
    p: &ParticipationTable,
    known: &[LossFactorEstimate],
    target: &str,
) -> Result<LossFactorEstimate> {
    if k_single.len() != 1 {
        return Err(Error::ShapeMismatch(format!("remainder attribution takes one mode, got {}", k_single.len())));
    }
    let mode = &k_single.modes[0];
    let i = p.mode_index(mode)?;
    let target_mech = p.mechanism(target)?;
    let p_target = target_mech.values[i];
    if !(p_target > 0.0) {
        return Err(Error::ZeroParticipation(target.to_string()));
    }
    if known.iter().any(|g| g.label == target) {
        return Err(Error::InvalidInput(format!("{target} is both known and the target")));
    }
    for m in &p.mechanisms {
        if m.label != target && m.values[i] != 0.0 && !known.iter().any(|g| g.label == m.label) {
            return Err(Error::LabelMismatch(format!("{} participates in {mode} but has no known loss factor", m.label)));
        }
    }
    let sub = subtract_known(k_single, p, known)?;
    Ok(bound_or_value(LossFactorEstimate::new(
        target,
        sub.kappa.kappa[0] / p_target,
        sub.kappa.sigma[0] / p_target,
        target_mech.unit.loss_unit(),
        Provenance::Remainder,
    )))
}

/// A literature value entering [`combine_transferred`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransferredValue {
    Value { value: f64, sigma: f64 },
    UpperBound { bound: f64 },
    LowerBound { bound: f64 },
}

/// Combines loss factors from several reference devices.
///
/// With any bound present, the result is the mid-range of the interval
/// spanned by all entries (values contribute `value ± σ`, upper bounds their
/// bound, and the lower edge defaults to zero), with the half-range as σ.
/// Without bounds it is the inverse-variance weighted mean.
pub fn combine_transferred(label: &str, unit: LossUnit, values: &[TransferredValue]) -> Result<LossFactorEstimate> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let has_bound = values.iter().any(|v| !matches!(v, TransferredValue::Value { .. }));
    let (value, sigma) = if has_bound {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            match *v {
                TransferredValue::Value { value, sigma } => {
                    lo = lo.min(value - sigma);
                    hi = hi.max(value + sigma);
                }
                TransferredValue::UpperBound { bound } => hi = hi.max(bound),
                TransferredValue::LowerBound { bound } => lo = lo.min(bound),
            }
        }
        if !lo.is_finite() {
            lo = 0.0;
        }
        if !hi.is_finite() {
            return Err(Error::InvalidInput(format!("{label}: only lower bounds given")));
        }
        ((lo + hi) / 2.0, (hi - lo) / 2.0)
    } else {
        let mut wsum = 0.0;
        let mut vsum = 0.0;
        for v in values {
            if let TransferredValue::Value { value, sigma } = *v {
                if !(sigma > 0.0) {
                    return Err(Error::InvalidInput(format!("{label}: σ must be positive for weighting")));
                }
                let w = 1.0 / (sigma * sigma);
                wsum += w;
                vsum += w * value;
            }
        }
        (vsum / wsum, wsum.sqrt().recip())
    };
    Ok(LossFactorEstimate::new(label, value, sigma, unit, Provenance::Combined))
}

/// Mean and sample standard deviation of the central values of several
/// devices' estimates. Bounded entries contribute their central value.
pub fn sample_average(label: &str, estimates: &[LossFactorEstimate]) -> Result<LossFactorEstimate> {
    if estimates.is_empty() {
        return Err(Error::EmptyInput);
    }
    let unit = estimates[0].unit;
    if let Some(e) = estimates.iter().find(|e| e.unit != unit) {
        return Err(Error::UnitMismatch {
            label: label.to_string(),
            detail: format!("{} is in {}, expected {unit}", e.label, e.unit),
        });
    }
    let n = estimates.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("{label}: a sample average needs at least two devices")));
    }
    let mean = estimates.iter().map(|e| e.value).sum::<f64>() / n as f64;
    let var = estimates.iter().map(|e| (e.value - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(LossFactorEstimate::new(label, mean, var.sqrt(), unit, Provenance::Averaged(n)))
}

/// Loss factors at one photon number of a power sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub nbar: f64,
    /// True when `nbar` lies outside some mode's measured range.
    pub extrapolated: bool,
    /// Raw solved values in mechanism order.
    pub gamma: Vec<Uncertain>,
    pub condition_number: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerCurve {
    pub mechanisms: Vec<String>,
    pub points: Vec<CurvePoint>,
}

impl PowerCurve {
    pub fn series(&self, label: &str) -> Result<Vec<(f64, Uncertain)>> {
        let j = self
            .mechanisms
            .iter()
            .position(|m| m == label)
            .ok_or_else(|| Error::LabelMismatch(format!("mechanism {label}")))?;
        Ok(self.points.iter().map(|pt| (pt.nbar, pt.gamma[j])).collect())
    }
}

/// `κ` vector from per-mode TLS fits evaluated at `nbar`.
pub fn kappa_from_tls(fits: &[(String, TlsFit)], nbar: f64) -> Result<InverseQVector> {
    let vals: Vec<Uncertain> = fits.iter().map(|(_, f)| tls::inverse_q_at(f, nbar)).collect();
    InverseQVector::new(
        fits.iter().map(|(m, _)| m.clone()).collect(),
        vals.iter().map(|v| v.value).collect(),
        vals.iter().map(|v| v.sigma).collect(),
        nbar,
    )
}

/// Solves for the loss factors at every photon number of `nbar_grid`, using
/// each mode's TLS fit to interpolate its inverse Q.
pub fn loss_factor_power_curve(
    fits: &[(String, TlsFit)],
    p: &ParticipationTable,
    known: &[LossFactorEstimate],
    nbar_grid: &[f64],
) -> Result<PowerCurve> {
    let mut points = Vec::with_capacity(nbar_grid.len());
    let mut mechanisms = Vec::new();
    for &nbar in nbar_grid {
        let k = kappa_from_tls(fits, nbar).map_err(|e| e.context(format!("n̄ = {nbar}")))?;
        let sol = solve_with_known(p, &k, known).map_err(|e| e.context(format!("n̄ = {nbar}")))?;
        mechanisms = sol.estimates.iter().map(|e| e.label.clone()).collect();
        points.push(CurvePoint {
            nbar,
            extrapolated: fits.iter().any(|(_, f)| !f.interpolates(nbar)),
            gamma: sol.estimates.iter().map(|e| e.estimate()).collect(),
            condition_number: sol.condition_number,
        });
    }
    Ok(PowerCurve { mechanisms, points })
}

/// Monte Carlo check of the linear propagation: resamples `κ` and the known
/// loss factors from independent Gaussians and re-solves. Returns the sample
/// mean and standard deviation of each solved mechanism. Deterministic for a
/// given seed.
pub fn monte_carlo_solve(
    p: &ParticipationTable,
    k: &InverseQVector,
    known: &[LossFactorEstimate],
    samples: usize,
    seed: u64,
) -> Result<Vec<(String, Uncertain)>> {
    if samples < 2 {
        return Err(Error::InvalidInput("Monte Carlo needs at least two samples".into()));
    }
    let base = solve_with_known(p, k, known)?;
    let labels: Vec<String> = base.estimates.iter().map(|e| e.label.clone()).collect();
    let n = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    for _ in 0..samples {
        let mut kk = k.clone();
        kk.covariance = None;
        for (v, s) in kk.kappa.iter_mut().zip(&k.sigma) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += s * z;
        }
        let mut kn = known.to_vec();
        for g in kn.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            g.value += g.sigma * z;
            g.sigma = 0.0;
        }
        // Bypass the κ > 0 check: a draw may cross zero.
        let sub = subtract_known(&kk, p, &kn)?;
        let sol = solve_loss_factors(&sub.remaining, &sub.kappa)?;
        for (j, e) in sol.estimates.iter().enumerate() {
            sum[j] += e.value;
            sum_sq[j] += e.value * e.value;
        }
    }
    let m = samples as f64;
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(j, l)| {
            let mean = sum[j] / m;
            let var = ((sum_sq[j] - m * mean * mean) / (m - 1.0)).max(0.0);
            (l, Uncertain::new(mean, var.sqrt()))
        })
        .collect())
}
