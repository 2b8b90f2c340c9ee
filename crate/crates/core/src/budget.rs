//! Loss budgets: per-mechanism contributions `p·Γ`, their shares and the
//! quality-factor limit each one imposes.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::loss::{LossFactorEstimate, ParticipationUnit, Provenance};
use crate::solver::ParticipationEntry;
use crate::uncertain::Uncertain;

/// Shares below this percentage are printed as `<0.1`.
pub const DISPLAY_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub label: String,
    pub participation: f64,
    pub participation_unit: ParticipationUnit,
    /// Central loss factor, or the bound for bounded rows.
    pub gamma: f64,
    pub gamma_sigma: f64,
    pub bounded: bool,
    pub source: Provenance,
    pub contribution: f64,
    /// Percent of the central total.
    pub share: f64,
    pub q_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBudget {
    pub target: String,
    pub omega: f64,
    /// Rows with resolved loss factors, by descending contribution.
    pub rows: Vec<BudgetRow>,
    /// Rows whose loss factor is only bounded; their share is relative to the
    /// central total and is an upper limit.
    pub bounded_rows: Vec<BudgetRow>,
    pub total_inverse_q: Uncertain,
    /// Central total plus every bounded contribution.
    pub worst_case_inverse_q: f64,
    pub predicted_q: Uncertain,
    /// Seconds.
    pub predicted_t1: Uncertain,
}

/// Builds the budget of one mode.
///
/// Every mechanism with nonzero participation needs a loss factor with a
/// matching unit; mechanisms with zero participation are skipped and extra
/// loss factors are ignored. Uncertainties treat the loss factors as
/// independent and participations as exact.
pub fn build_budget(target: &str, row: &[ParticipationEntry], gammas: &[LossFactorEstimate], omega: f64) -> Result<LossBudget> {
    if !(omega > 0.0) {
        return Err(Error::NonPositiveInput("omega"));
    }
    let mut rows = Vec::new();
    let mut bounded_rows = Vec::new();
    let mut variance = 0.0;
    for entry in row.iter().filter(|e| e.value != 0.0) {
        let g = gammas
            .iter()
            .find(|g| g.label == entry.label)
            .ok_or_else(|| Error::LabelMismatch(format!("no loss factor for {}", entry.label)))?;
        g.check_unit(entry.unit)?;
        let gamma = g.worst_case();
        let contribution = entry.value * gamma;
        let r = BudgetRow {
            label: entry.label.clone(),
            participation: entry.value,
            participation_unit: entry.unit,
            gamma,
            gamma_sigma: g.sigma,
            bounded: g.is_bounded(),
            source: g.source.clone(),
            contribution,
            share: 0.0,
            q_limit: 1.0 / contribution,
        };
        if g.is_bounded() {
            bounded_rows.push(r);
        } else {
            variance += (entry.value * g.sigma).powi(2);
            rows.push(r);
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total: f64 = rows.iter().map(|r| r.contribution).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidInput(format!("total loss of {target} is not positive")));
    }
    for r in rows.iter_mut().chain(bounded_rows.iter_mut()) {
        r.share = 100.0 * r.contribution / total;
    }
    let by_contribution = |a: &BudgetRow, b: &BudgetRow| b.contribution.total_cmp(&a.contribution);
    rows.sort_by(by_contribution);
    bounded_rows.sort_by(by_contribution);
    let total_inverse_q = Uncertain::new(total, variance.sqrt());
    let predicted_q = total_inverse_q.recip();
    Ok(LossBudget {
        target: target.to_string(),
        omega,
        worst_case_inverse_q: total + bounded_rows.iter().map(|r| r.contribution).sum::<f64>(),
        predicted_t1: predicted_q.scale(1.0 / omega),
        predicted_q,
        total_inverse_q,
        rows,
        bounded_rows,
    })
}

impl LossBudget {
    pub fn row(&self, label: &str) -> Option<&BudgetRow> {
        self.rows.iter().chain(&self.bounded_rows).find(|r| r.label == label)
    }

    pub fn share(&self, label: &str) -> Option<f64> {
        self.row(label).map(|r| r.share)
    }

    /// Aligned plain-text table.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let width = self.rows.iter().chain(&self.bounded_rows).map(|r| r.label.len()).max().unwrap_or(0).max(9);
        let _ = writeln!(out, "Loss budget for {}", self.target);
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>12}  {:>12}  {:>8}  {:>12}", "mechanism", "p", "gamma", "p*gamma", "share %", "Q limit");
        for r in self.rows.iter().chain(&self.bounded_rows) {
            let lt = if r.bounded { "<" } else { "" };
            let share = if r.share < DISPLAY_THRESHOLD {
                format!("<{DISPLAY_THRESHOLD}")
            } else {
                format!("{lt}{:.1}", r.share)
            };
            let q_limit = if r.bounded { format!(">{:.3e}", r.q_limit) } else { format!("{:.3e}", r.q_limit) };
            let _ = writeln!(
                out,
                "{:<width$}  {:>12.3e}  {:>12}  {:>12}  {:>8}  {:>12}",
                r.label,
                r.participation,
                format!("{lt}{:.3e}", r.gamma),
                format!("{lt}{:.3e}", r.contribution),
                share,
                q_limit
            );
        }
        let _ = writeln!(out, "total 1/Q      {:.4e} ± {:.2e}", self.total_inverse_q.value, self.total_inverse_q.sigma);
        if !self.bounded_rows.is_empty() {
            let _ = writeln!(out, "worst case 1/Q {:.4e}", self.worst_case_inverse_q);
        }
        let _ = writeln!(out, "predicted Q    {:.4e} ± {:.2e}", self.predicted_q.value, self.predicted_q.sigma);
        let _ = writeln!(
            out,
            "predicted T1   {:.1} ± {:.1} us",
            self.predicted_t1.value * 1e6,
            self.predicted_t1.sigma * 1e6
        );
        out
    }

    /// `label,share,q_limit` rows for charting.
    pub fn plot_csv(&self) -> String {
        let mut out = String::from("label,share,q_limit\n");
        for r in self.rows.iter().chain(&self.bounded_rows) {
            let _ = writeln!(out, "{},{},{}", csv_field(&r.label), r.share, r.q_limit);
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    /// One entry per budget; `None` where the mechanism is absent.
    pub shares: Vec<Option<f64>>,
    pub q_limits: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetComparison {
    pub targets: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

/// Aligns several budgets by mechanism label.
pub fn budget_compare(budgets: &[LossBudget]) -> Result<BudgetComparison> {
    if budgets.len() < 2 {
        return Err(Error::InvalidInput("comparison needs at least two budgets".into()));
    }
    let mut labels: Vec<String> = Vec::new();
    for b in budgets {
        for r in b.rows.iter().chain(&b.bounded_rows) {
            if !labels.contains(&r.label) {
                labels.push(r.label.clone());
            }
        }
    }
    let overlap = labels.iter().any(|l| budgets.iter().filter(|b| b.row(l).is_some()).count() >= 2);
    if !overlap {
        return Err(Error::NoOverlap);
    }
    Ok(BudgetComparison {
        targets: budgets.iter().map(|b| b.target.clone()).collect(),
        rows: labels
            .into_iter()
            .map(|l| ComparisonRow {
                shares: budgets.iter().map(|b| b.share(&l)).collect(),
                q_limits: budgets.iter().map(|b| b.row(&l).map(|r| r.q_limit)).collect(),
                label: l,
            })
            .collect(),
    })
}

impl BudgetComparison {
    pub fn render_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(9);
        let mut out = format!("{:<width$}", "mechanism");
        for t in &self.targets {
            let _ = write!(out, "  {t:>10}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<width$}", r.label);
            for s in &r.shares {
                let cell = match s {
                    None => "-".to_string(),
                    Some(v) if *v < DISPLAY_THRESHOLD => format!("<{DISPLAY_THRESHOLD}"),
                    Some(v) => format!("{v:.1}"),
                };
                let _ = write!(out, "  {cell:>10}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossUnit;

    fn entry(label: &str, value: f64, unit: ParticipationUnit) -> ParticipationEntry {
        ParticipationEntry {
            label: label.into(),
            value,
            unit,
        }
    }

    fn gamma(label: &str, v: f64, s: f64, unit: LossUnit) -> LossFactorEstimate {
        LossFactorEstimate::new(label, v, s, unit, Provenance::Solved)
    }

    #[test]
    fn single_mechanism() {
        let b = build_budget(
            "m",
            &[entry("x", 1.0, ParticipationUnit::Dimensionless)],
            &[gamma("x", 1e-7, 0.0, LossUnit::Dimensionless)],
            1.0,
        )
        .unwrap();
        assert!((b.predicted_q.value - 1e7).abs() < 1e-6);
        assert_eq!(b.rows[0].share, 100.0);
    }

    #[test]
    fn invariants_hold() {
        let row = [
            entry("a", 0.5, ParticipationUnit::Dimensionless),
            entry("b", 1e-4, ParticipationUnit::Dimensionless),
            entry("c", 2e3, ParticipationUnit::SiemensPerMeter),
            entry("d", 0.0, ParticipationUnit::Dimensionless),
        ];
        let gammas = [
            gamma("a", 3e-8, 1e-8, LossUnit::Dimensionless),
            gamma("b", 4e-4, 1e-4, LossUnit::Dimensionless),
            gamma("c", 3e-12, 1e-12, LossUnit::OhmMeter),
        ];
        let b = build_budget("m", &row, &gammas, 2.0 * std::f64::consts::PI * 5e9).unwrap();
        let shares: f64 = b.rows.iter().map(|r| r.share).sum();
        assert!((shares - 100.0).abs() < 1e-9);
        let sum: f64 = b.rows.iter().map(|r| r.contribution).sum();
        assert!((sum / b.total_inverse_q.value - 1.0).abs() < 1e-15);
        for r in &b.rows {
            assert!((r.q_limit * r.contribution - 1.0).abs() < 1e-15);
        }
        assert!(b.rows.windows(2).all(|w| w[0].contribution >= w[1].contribution));
        assert!(b.row("d").is_none());
    }

    #[test]
    fn bounded_rows_stay_out_of_the_central_total() {
        let row = [
            entry("a", 1.0, ParticipationUnit::Dimensionless),
            entry("seam", 1e-8, ParticipationUnit::SiemensPerMeter),
        ];
        let mut seam = gamma("seam", -1e-3, 7.4e-3, LossUnit::OhmMeter);
        seam.bound = Some(7.4e-3);
        let b = build_budget("m", &row, &[gamma("a", 1e-6, 0.0, LossUnit::Dimensionless), seam], 1.0).unwrap();
        assert_eq!(b.total_inverse_q.value, 1e-6);
        assert!((b.worst_case_inverse_q - (1e-6 + 7.4e-11)).abs() < 1e-20);
        assert!(b.render_text().contains("<0.1"));
    }

    #[test]
    fn errors() {
        let row = [entry("a", 1.0, ParticipationUnit::PerOhm)];
        assert!(matches!(build_budget("m", &row, &[], 1.0), Err(Error::LabelMismatch(_))));
        assert!(matches!(
            build_budget("m", &row, &[gamma("a", 1.0, 0.0, LossUnit::Dimensionless)], 1.0),
            Err(Error::UnitMismatch { .. })
        ));
    }

    #[test]
    fn comparison() {
        let row = [entry("a", 1.0, ParticipationUnit::Dimensionless), entry("b", 1.0, ParticipationUnit::Dimensionless)];
        let g = [gamma("a", 1e-6, 0.0, LossUnit::Dimensionless), gamma("b", 3e-6, 0.0, LossUnit::Dimensionless)];
        let b = build_budget("m", &row, &g, 1.0).unwrap();
        let c = budget_compare(&[b.clone(), b.clone()]).unwrap();
        for r in &c.rows {
            assert_eq!(r.shares[0], r.shares[1]);
        }
        let other = build_budget(
            "n",
            &[entry("z", 1.0, ParticipationUnit::Dimensionless)],
            &[gamma("z", 1e-6, 0.0, LossUnit::Dimensionless)],
            1.0,
        )
        .unwrap();
        assert!(matches!(budget_compare(&[b.clone(), other.clone()]), Err(Error::NoOverlap)));
        let c = budget_compare(&[b.clone(), b, other]).unwrap();
        let z = c.rows.iter().find(|r| r.label == "z").unwrap();
        assert_eq!(z.shares[0], None);
        assert!(c.render_text().contains('-'));
    }

    #[test]
    fn plot_csv_header() {
        let b = build_budget(
            "m",
            &[entry("a, b", 1.0, ParticipationUnit::Dimensionless)],
            &[gamma("a, b", 1e-6, 0.0, LossUnit::Dimensionless)],
            1.0,
        )
        .unwrap();
        let csv = b.plot_csv();
        assert!(csv.starts_with("label,share,q_limit\n\"a, b\",100,"));
    }
}
