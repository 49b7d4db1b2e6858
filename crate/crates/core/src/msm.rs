//! Weighted pooled logistic hazard model over the cloned panel, plug-in risk
//! and weighted utilization series.

use ndarray::Array1;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::basis::{BasisError, Design, Factor, FormulaSpec, RowContext, Term};
use crate::data::PanelDataset;
use crate::glm::{fit_pooled_logistic, GlmError, GlmFit, GlmOptions};
use crate::scalar::{expit, CompensatedSum};
use crate::weights::{ClonedPanel, WeightTable};

#[derive(Debug, Error)]
pub enum MsmError {
    #[error("the hazard model uses the regime but only one regime was given")]
    DegenerateZ,
    #[error("the hazard model may only use time, the regime and baseline covariates")]
    NotBaseline,
    #[error("weight table does not match the cloned panel")]
    Mismatch,
    #[error("no uncensored rows to fit")]
    NoRows,
    #[error("weight cap must be positive, got {0}")]
    InvalidCap(f64),
    #[error("hazard model: {0}")]
    Basis(#[from] BasisError),
    #[error("hazard model: {0}")]
    Glm(#[from] GlmError),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MsmOptions {
    /// Truncate case weights above this value.
    pub weight_cap: Option<f64>,
    pub glm: GlmOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedMsm {
    pub gamma: FormulaSpec,
    pub design: Design,
    pub fit: GlmFit<f64>,
    pub labels: Vec<String>,
    pub rows: usize,
    /// Rows whose weight was truncated by the cap.
    pub capped: usize,
    /// Kish effective sample size per `[z][k − 1]`.
    pub n_eff: Vec<Vec<f64>>,
}

/// True when the formula reads any subject covariate.
fn subject_dependent(formula: &FormulaSpec) -> bool {
    fn walk(t: &Term) -> bool {
        match t {
            Term::Covariate(_) | Term::Baseline(_) | Term::CovariateSpline { .. } => true,
            Term::Interaction(parts) => parts.iter().any(walk),
            Term::Saturated(f) => f
                .iter()
                .any(|f| !matches!(f, Factor::Interval | Factor::Regime)),
            _ => false,
        }
    }
    formula.terms.iter().any(walk)
}

/// Fit the hazard model on every uncensored clone-record, weighted by
/// `W_B W_H W_C`.
pub fn fit_msm(
    cloned: &ClonedPanel<'_>,
    weights: &WeightTable,
    gamma: &FormulaSpec,
    opts: &MsmOptions,
) -> Result<FittedMsm, MsmError> {
    if !gamma.baseline_only() {
        return Err(MsmError::NotBaseline);
    }
    let labels = cloned.labels();
    if labels.len() == 1 && gamma.uses_regime() {
        return Err(MsmError::DegenerateZ);
    }
    if weights.labels() != labels.as_slice() || weights.n() != cloned.panel().n() {
        return Err(MsmError::Mismatch);
    }
    if let Some(cap) = opts.weight_cap {
        if !(cap > 0.0) {
            return Err(MsmError::InvalidCap(cap));
        }
    }
    let panel = cloned.panel();
    let horizon = panel.horizon() as usize;
    let mut rows = Vec::new();
    let mut y = Vec::new();
    let mut w = Vec::new();
    let mut capped = 0;
    let mut n_eff = Vec::with_capacity(labels.len());
    for z in 0..labels.len() {
        let mut sums = vec![(CompensatedSum::new(), CompensatedSum::new()); horizon];
        for (i, s) in panel.subjects().iter().enumerate() {
            for (j, (r, rw)) in s.records.iter().zip(weights.subject(z, i)).enumerate() {
                if r.c {
                    continue;
                }
                let mut weight = rw.product();
                if let Some(cap) = opts.weight_cap {
                    if weight > cap {
                        weight = cap;
                        capped += 1;
                    }
                }
                rows.push(RowContext::new(r.k, z, &s.records[..=j]));
                y.push(f64::from(u8::from(r.y)));
                w.push(weight);
                sums[j].0.add(weight);
                sums[j].1.add(weight * weight);
            }
        }
        n_eff.push(
            sums.iter()
                .map(|(a, b)| {
                    let (a, b) = (a.value(), b.value());
                    if b > 0.0 {
                        a * a / b
                    } else {
                        0.0
                    }
                })
                .collect(),
        );
    }
    if rows.is_empty() {
        return Err(MsmError::NoRows);
    }
    if capped > 0 {
        log::warn!("{capped} case weights truncated at {:?}", opts.weight_cap);
    }
    let design = Design::compile(gamma, panel, &labels, &rows)?;
    let x = design.matrix::<f64>(&rows)?;
    let fit = fit_pooled_logistic(
        x.view(),
        Array1::from(y).view(),
        Array1::from(w).view(),
        design.names(),
        &opts.glm,
    )?;
    Ok(FittedMsm {
        gamma: gamma.clone(),
        design,
        fit,
        labels,
        rows: rows.len(),
        capped,
        n_eff,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskCurve {
    pub label: String,
    /// Cumulative incidence at `k = 1..K`.
    pub risk: Vec<f64>,
    pub n_eff: Vec<f64>,
}

impl FittedMsm {
    /// Fitted hazards at `k = 1..horizon` for one subject's baseline record.
    fn hazards(
        &self,
        z: usize,
        baseline: &[crate::data::PanelRecord],
        horizon: usize,
    ) -> Result<Vec<f64>, MsmError> {
        (1..=horizon as u32)
            .map(|t| {
                let row: Vec<f64> = self.design.row(&RowContext::new(t, z, baseline))?;
                Ok(expit(self.fit.linear_predictor(&row)?))
            })
            .collect()
    }
}

/// `Σ_{t ≤ k} h_t Π_{j < t} (1 − h_j)`.
pub fn cumulative_incidence(hazards: &[f64]) -> Vec<f64> {
    let mut surv = 1.0;
    let mut acc = CompensatedSum::new();
    hazards
        .iter()
        .map(|h| {
            acc.add(h * surv);
            surv *= 1.0 - h;
            acc.value()
        })
        .collect()
}

/// Plug-in risk under regime `z`, averaged over the original subjects.
pub fn plugin_risk(
    fit: &FittedMsm,
    panel: &PanelDataset,
    z: usize,
    horizon: usize,
) -> Result<RiskCurve, MsmError> {
    let label = fit.labels.get(z).ok_or(MsmError::Mismatch)?.clone();
    let n_eff = fit.n_eff[z].iter().copied().take(horizon).collect();
    let subjects = panel.subjects();
    if subjects.is_empty() {
        return Err(MsmError::NoRows);
    }
    if !subject_dependent(&fit.gamma) {
        let h = fit.hazards(z, &subjects[0].records[..1], horizon)?;
        return Ok(RiskCurve {
            label,
            risk: cumulative_incidence(&h),
            n_eff,
        });
    }
    let curves: Vec<Vec<f64>> = subjects
        .par_iter()
        .map(|s| Ok(cumulative_incidence(&fit.hazards(z, &s.records[..1], horizon)?)))
        .collect::<Result<_, MsmError>>()?;
    let n = curves.len() as f64;
    let risk = (0..horizon)
        .map(|k| curves.iter().map(|c| c[k]).collect::<CompensatedSum<f64>>().value() / n)
        .collect();
    Ok(RiskCurve { label, risk, n_eff })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtilizationSeries {
    pub label: String,
    pub util_b: Vec<f64>,
    pub util_h: Vec<f64>,
}

/// Weighted utilization of both treatments per regime and interval.
pub fn utilization_curves(weights: &WeightTable) -> Vec<UtilizationSeries> {
    weights
        .labels()
        .iter()
        .enumerate()
        .map(|(z, label)| UtilizationSeries {
            label: label.clone(),
            util_b: weights.steps(z).iter().map(|s| s.util_b).collect(),
            util_h: weights.steps(z).iter().map(|s| s.util_h).collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::SplineSpec;
    use crate::data::{CovariateSpec, PanelRecord, PanelSchema, Timing};
    use crate::regime::{preset, RegimeSpec, Variant};
    use crate::weights::{clone_dataset, compute_weights, fit_treatment_models, TreatmentFormulas};

    fn panel() -> PanelDataset {
        let schema = PanelSchema::new(vec![CovariateSpec::numeric("L", Timing::TimeVarying)]);
        let rows: &[(&str, u32, f64, u8, u8, u8)] = &[
            ("1", 1, 0.0, 1, 0, 0),
            ("1", 2, 1.0, 0, 0, 1),
            ("2", 1, 1.0, 0, 1, 0),
            ("2", 2, 1.0, 0, 0, 0),
            ("3", 1, 0.0, 0, 0, 0),
            ("3", 2, 0.0, 1, 0, 0),
            ("4", 1, 1.0, 0, 0, 0),
            ("4", 2, 0.0, 0, 1, 1),
            ("5", 1, 0.0, 0, 0, 1),
            ("6", 1, 1.0, 1, 0, 0),
            ("6", 2, 0.0, 0, 0, 0),
            ("7", 1, 0.0, 0, 0, 0),
            ("7", 2, 1.0, 0, 0, 1),
            ("8", 1, 1.0, 0, 0, 0),
            ("8", 2, 1.0, 1, 0, 0),
        ];
        let recs = rows
            .iter()
            .map(|&(id, k, l, b, h, y)| {
                (id.to_string(), PanelRecord::new(k, vec![l], b == 1, h == 1, false, y == 1))
            })
            .collect();
        PanelDataset::from_records(schema, recs).unwrap()
    }

    fn formulas() -> TreatmentFormulas {
        let sat = FormulaSpec::new(false, vec![Term::Saturated(vec![Factor::Interval])]);
        TreatmentFormulas {
            b: sat.clone(),
            h: sat,
            c: FormulaSpec::intercept_only(),
        }
    }

    fn saturated_kz() -> FormulaSpec {
        FormulaSpec::new(false, vec![Term::Saturated(vec![Factor::Interval, Factor::Regime])])
    }

    #[test]
    fn geometric_survival() {
        let r = cumulative_incidence(&[0.1; 4]);
        assert!((r[3] - (1.0 - 0.9f64.powi(4))).abs() < 1e-15);
        assert!(cumulative_incidence(&[0.0; 3]).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn saturated_hazards_equal_weighted_ratios() {
        let p = panel();
        let regimes = [preset("g1").unwrap(), RegimeSpec::new("x", 0.6, 1.2)];
        let c = clone_dataset(&p, &regimes).unwrap();
        let m = fit_treatment_models(&p, &formulas(), &GlmOptions::default()).unwrap();
        let w = compute_weights(&c, &m, Variant::Generalized).unwrap();
        let fit = fit_msm(&c, &w, &saturated_kz(), &MsmOptions::default()).unwrap();
        for z in 0..2 {
            let curve = plugin_risk(&fit, &p, z, 2).unwrap();
            let mut hazards = Vec::new();
            for k in 0..2 {
                let (mut num, mut den) = (0.0, 0.0);
                for (i, s) in p.subjects().iter().enumerate() {
                    if let Some(r) = s.records.get(k) {
                        let wt = w.subject(z, i)[k].product();
                        den += wt;
                        num += wt * f64::from(u8::from(r.y));
                    }
                }
                hazards.push(num / den);
            }
            let expect = cumulative_incidence(&hazards);
            for k in 0..2 {
                assert!((curve.risk[k] - expect[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn g0_reproduces_empirical_incidence() {
        let p = panel();
        let c = clone_dataset(&p, &[preset("g0").unwrap()]).unwrap();
        let m = fit_treatment_models(&p, &formulas(), &GlmOptions::default()).unwrap();
        let w = compute_weights(&c, &m, Variant::Generalized).unwrap();
        let gamma = FormulaSpec::new(false, vec![Term::Saturated(vec![Factor::Interval])]);
        let fit = fit_msm(&c, &w, &gamma, &MsmOptions::default()).unwrap();
        let curve = plugin_risk(&fit, &p, 0, 2).unwrap();
        // 1 of 8 dies at k = 1, then 3 of 7 at k = 2
        let expect = [1.0 / 8.0, 1.0 / 8.0 + 7.0 / 8.0 * 3.0 / 7.0];
        assert!((curve.risk[0] - expect[0]).abs() < 1e-12);
        assert!((curve.risk[1] - expect[1]).abs() < 1e-12);
        assert_eq!(curve.n_eff, vec![8.0, 7.0]);
    }

    #[test]
    fn degenerate_z_and_time_varying_rejected() {
        let p = panel();
        let c = clone_dataset(&p, &[preset("g0").unwrap()]).unwrap();
        let m = fit_treatment_models(&p, &formulas(), &GlmOptions::default()).unwrap();
        let w = compute_weights(&c, &m, Variant::Generalized).unwrap();
        assert!(matches!(
            fit_msm(&c, &w, &saturated_kz(), &MsmOptions::default()),
            Err(MsmError::DegenerateZ)
        ));
        let tv = FormulaSpec::new(true, vec![Term::Covariate("L".into())]);
        assert!(matches!(
            fit_msm(&c, &w, &tv, &MsmOptions::default()),
            Err(MsmError::NotBaseline)
        ));
    }

    #[test]
    fn baseline_gamma_averages_over_subjects() {
        let p = panel();
        let regimes = [preset("g0").unwrap(), preset("g1").unwrap()];
        let c = clone_dataset(&p, &regimes).unwrap();
        let m = fit_treatment_models(&p, &formulas(), &GlmOptions::default()).unwrap();
        let w = compute_weights(&c, &m, Variant::Generalized).unwrap();
        let gamma = FormulaSpec::new(
            true,
            vec![Term::TimeLinear, Term::Regime, Term::Baseline("L".into())],
        );
        let fit = fit_msm(&c, &w, &gamma, &MsmOptions::default()).unwrap();
        let curve = plugin_risk(&fit, &p, 1, 2).unwrap();
        let by_hand: f64 = p
            .subjects()
            .iter()
            .map(|s| cumulative_incidence(&fit.hazards(1, &s.records[..1], 2).unwrap())[1])
            .sum::<f64>()
            / 8.0;
        assert!((curve.risk[1] - by_hand).abs() < 1e-15);
        assert!(curve.risk[0] <= curve.risk[1]);
    }

    #[test]
    fn utilization_series_follow_targets() {
        let p = panel();
        let regimes = [preset("g0").unwrap(), preset("g1").unwrap()];
        let c = clone_dataset(&p, &regimes).unwrap();
        let m = fit_treatment_models(&p, &formulas(), &GlmOptions::default()).unwrap();
        let w = compute_weights(&c, &m, Variant::Generalized).unwrap();
        let u = utilization_curves(&w);
        assert!(u[1].util_h.iter().all(|v| *v == 0.0));
        for k in 0..2 {
            assert!((u[0].util_b[k] - u[1].util_b[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn paper_layout_fits() {
        let p = panel();
        let regimes = [preset("g0").unwrap(), preset("g1").unwrap()];
        let c = clone_dataset(&p, &regimes).unwrap();
        let m = fit_treatment_models(&p, &formulas(), &GlmOptions::default()).unwrap();
        let w = compute_weights(&c, &m, Variant::Generalized).unwrap();
        let gamma = FormulaSpec::msm_time_by_regime(SplineSpec::new(vec![], [1.0, 2.0]).unwrap());
        let fit = fit_msm(&c, &w, &gamma, &MsmOptions::default());
        // tiny panel: the layout compiles; the fit may legitimately fail to converge
        if let Ok(fit) = fit {
            assert!(fit.design.names().contains(&"Z[g1]".to_string()));
        }
    }

    #[test]
    fn weight_cap_counts() {
        let p = panel();
        let regimes = [RegimeSpec::new("x", 0.2, 1.5), preset("g0").unwrap()];
        let c = clone_dataset(&p, &regimes).unwrap();
        let m = fit_treatment_models(&p, &formulas(), &GlmOptions::default()).unwrap();
        let w = compute_weights(&c, &m, Variant::Generalized).unwrap();
        let opts = MsmOptions {
            weight_cap: Some(1.0),
            ..MsmOptions::default()
        };
        let fit = fit_msm(&c, &w, &saturated_kz(), &opts).unwrap();
        assert!(fit.capped > 0);
        assert!(matches!(
            fit_msm(&c, &w, &saturated_kz(), &MsmOptions { weight_cap: Some(0.0), ..opts }),
            Err(MsmError::InvalidCap(_))
        ));
    }
}
