//! Cloned panel, treatment and censoring models, and the recursive weights.
//!
//! For each regime the intervals are processed in order. At interval `k` the
//! superior arm is resolved from marginals weighted through `k − 1`, the
//! superior weight is updated, then the inferior arm is resolved from
//! marginals that already carry the interval-`k` superior weight. Censoring
//! weights come last.

use std::collections::HashSet;
use std::io::Write;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BasisError, Design, FormulaSpec, RowContext};
use crate::data::{PanelDataset, PanelRecord};
use crate::glm::{fit_pooled_logistic, GlmError, GlmFit, GlmOptions};
use crate::regime::{resolve_arm, ArmResolution, RegimeError, RegimeSpec, Variant};
use crate::scalar::{clamp_prob, prob_clamp, CompensatedSum};

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("at least one regime is required")]
    NoRegimes,
    #[error("regime label `{0}` is used twice")]
    DuplicateRegime(String),
    #[error("{model} model: {source}")]
    Model {
        model: &'static str,
        #[source]
        source: GlmError,
    },
    #[error("{model} model: {source}")]
    Design {
        model: &'static str,
        #[source]
        source: BasisError,
    },
    #[error("{0} model has no rows to fit")]
    EmptyModel(&'static str),
    #[error("{0} model must not depend on the regime")]
    RegimeTerm(&'static str),
    #[error("regime `{regime}`, interval {k}: {source}")]
    Constraint {
        regime: String,
        k: u32,
        #[source]
        source: RegimeError,
    },
    #[error("positivity violation: regime `{regime}`, interval {k}, subject `{subject}` has a vanishing factual density for its observed treatment")]
    PositivityViolation {
        regime: String,
        k: u32,
        subject: String,
    },
    #[error("regime `{regime}`, interval {k}, subject `{subject}`: intervention density {value} outside [0, 1]")]
    NegativeInterventionDensity {
        regime: String,
        k: u32,
        subject: String,
        value: f64,
    },
    #[error(transparent)]
    Regime(#[from] RegimeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One copy of the panel per regime. Clones share the source records; a
/// clone-record is addressed by `(z, subject, row)`.
#[derive(Debug, Clone)]
pub struct ClonedPanel<'a> {
    panel: &'a PanelDataset,
    regimes: Vec<RegimeSpec>,
}

impl<'a> ClonedPanel<'a> {
    pub fn panel(&self) -> &'a PanelDataset {
        self.panel
    }

    pub fn regimes(&self) -> &[RegimeSpec] {
        &self.regimes
    }

    pub fn labels(&self) -> Vec<String> {
        self.regimes.iter().map(|r| r.label.clone()).collect()
    }

    pub fn n_clones(&self) -> usize {
        self.regimes.len() * self.panel.n()
    }

    pub fn total_rows(&self) -> usize {
        self.regimes.len() * self.panel.total_rows()
    }
}

pub fn clone_dataset<'a>(
    panel: &'a PanelDataset,
    regimes: &[RegimeSpec],
) -> Result<ClonedPanel<'a>, WeightError> {
    if regimes.is_empty() {
        return Err(WeightError::NoRegimes);
    }
    let mut seen = HashSet::new();
    for r in regimes {
        if !seen.insert(r.label.as_str()) {
            return Err(WeightError::DuplicateRegime(r.label.clone()));
        }
        r.validate(panel.horizon())?;
    }
    Ok(ClonedPanel {
        panel,
        regimes: regimes.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentFormulas {
    pub b: FormulaSpec,
    pub h: FormulaSpec,
    #[serde(default = "FormulaSpec::intercept_only")]
    pub c: FormulaSpec,
}

/// A fitted denominator model. A model whose rows all share one outcome
/// value is kept as that constant.
#[derive(Debug, Clone, PartialEq)]
pub enum FittedModel {
    Logistic { design: Design, fit: GlmFit<f64> },
    Constant(bool),
}

impl FittedModel {
    fn fit(
        model: &'static str,
        formula: &FormulaSpec,
        panel: &PanelDataset,
        rows: &[RowContext<'_>],
        outcome: &[bool],
        opts: &GlmOptions,
    ) -> Result<Self, WeightError> {
        if rows.is_empty() {
            return Err(WeightError::EmptyModel(model));
        }
        if formula.uses_regime() {
            return Err(WeightError::RegimeTerm(model));
        }
        let events = outcome.iter().filter(|y| **y).count();
        if events == 0 || events == outcome.len() {
            log::warn!(
                "{model} model: every row has outcome {}, using a constant probability",
                u8::from(events > 0)
            );
            return Ok(FittedModel::Constant(events > 0));
        }
        let design = Design::compile(formula, panel, &[], rows)
            .map_err(|source| WeightError::Design { model, source })?;
        let x: Array2<f64> = design
            .matrix(rows)
            .map_err(|source| WeightError::Design { model, source })?;
        let y = Array1::from_iter(outcome.iter().map(|v| f64::from(u8::from(*v))));
        let w = Array1::ones(rows.len());
        let fit = fit_pooled_logistic(x.view(), y.view(), w.view(), design.names(), opts)
            .map_err(|source| WeightError::Model { model, source })?;
        Ok(FittedModel::Logistic { design, fit })
    }

    /// Clamped fitted probability of the event.
    pub fn predict(&self, ctx: &RowContext<'_>) -> Result<f64, BasisError> {
        match self {
            FittedModel::Constant(v) => Ok(clamp_prob(if *v { 1.0 } else { 0.0 })),
            FittedModel::Logistic { design, fit } => {
                let row: Vec<f64> = design.row(ctx)?;
                Ok(fit.predict_prob(&row).expect("design width matches fit"))
            }
        }
    }

    pub fn glm(&self) -> Option<&GlmFit<f64>> {
        match self {
            FittedModel::Logistic { fit, .. } => Some(fit),
            FittedModel::Constant(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentModels {
    pub b: FittedModel,
    pub h: FittedModel,
    /// `None` when the panel has no censoring.
    pub c: Option<FittedModel>,
}

fn contexts<'p>(
    panel: &'p PanelDataset,
    keep: impl Fn(&PanelRecord) -> bool,
) -> (Vec<RowContext<'p>>, Vec<&'p PanelRecord>) {
    let mut rows = Vec::new();
    let mut recs = Vec::new();
    for s in panel.subjects() {
        for (j, r) in s.records.iter().enumerate() {
            if keep(r) {
                rows.push(RowContext::new(r.k, 0, &s.records[..=j]));
                recs.push(r);
            }
        }
    }
    (rows, recs)
}

/// Fit `B` on rows with `R_k = 1`, `H` on rows with `S_k = 1` and `C` on rows
/// untreated through `k`.
pub fn fit_treatment_models(
    panel: &PanelDataset,
    formulas: &TreatmentFormulas,
    opts: &GlmOptions,
) -> Result<TreatmentModels, WeightError> {
    let (rows, recs) = contexts(panel, |r| r.r);
    let yb: Vec<bool> = recs.iter().map(|r| r.b).collect();
    let b = FittedModel::fit("B", &formulas.b, panel, &rows, &yb, opts)?;
    let (rows, recs) = contexts(panel, |r| r.s);
    let yh: Vec<bool> = recs.iter().map(|r| r.h).collect();
    let h = FittedModel::fit("H", &formulas.h, panel, &rows, &yh, opts)?;
    let c = if panel.has_censoring() {
        let (rows, recs) = contexts(panel, PanelRecord::censor_eligible);
        let yc: Vec<bool> = recs.iter().map(|r| r.c).collect();
        Some(FittedModel::fit("C", &formulas.c, panel, &rows, &yc, opts)?)
    } else {
        None
    };
    Ok(TreatmentModels { b, h, c })
}

/// Cumulative weights of one clone-record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecordWeights {
    pub wb: f64,
    pub wh: f64,
    pub wc: f64,
}

impl RecordWeights {
    pub const ONE: Self = Self {
        wb: 1.0,
        wh: 1.0,
        wc: 1.0,
    };

    pub fn product(&self) -> f64 {
        self.wb * self.wh * self.wc
    }
}

/// Per-`(z, k)` resolution and achieved utilization. The arms carry the
/// factual (`observed`), natural-value (`natural`) and eligibility
/// (`eligible`, i.e. `π̂_R` / `π̂_S`) marginals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub k: u32,
    pub b: ArmResolution<f64>,
    pub h: ArmResolution<f64>,
    /// `n⁻¹ Σ B_k W_{B,k} W_{H,k−1} W_{C,k−1}`.
    pub util_b: f64,
    /// `n⁻¹ Σ H_k W_{B,k} W_{H,k} W_{C,k−1}`.
    pub util_h: f64,
    /// Subjects with a row at `k`.
    pub at_risk: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    labels: Vec<String>,
    n: usize,
    offsets: Vec<usize>,
    /// `[z][offsets[i] + row]`
    records: Vec<Vec<RecordWeights>>,
    steps: Vec<Vec<StepDiagnostics>>,
}

impl WeightTable {
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Weights of subject `i`'s rows under regime `z`.
    pub fn subject(&self, z: usize, i: usize) -> &[RecordWeights] {
        &self.records[z][self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn steps(&self, z: usize) -> &[StepDiagnostics] {
        &self.steps[z]
    }

    pub fn max_weight(&self) -> f64 {
        self.records
            .iter()
            .flatten()
            .map(RecordWeights::product)
            .fold(0.0, f64::max)
    }

    /// Per-`(z, k)` table of scales, indicators and marginals.
    pub fn write_diagnostics<W: Write>(&self, mut out: W) -> Result<(), WeightError> {
        writeln!(
            out,
            "regime,k,at_risk,alpha,aleph_b,beth_b,pi_b_obs,pi_b_nat,pi_r,target_b,util_b,\
             beta,aleph_h,beth_h,pi_h_obs,pi_h_nat,pi_s,target_h,util_h"
        )?;
        for (label, steps) in self.labels.iter().zip(&self.steps) {
            for s in steps {
                let (b, h) = (&s.b, &s.h);
                writeln!(
                    out,
                    "{label},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    s.k,
                    s.at_risk,
                    b.scale,
                    u8::from(b.aleph),
                    u8::from(b.beth),
                    b.observed,
                    b.natural,
                    b.eligible,
                    b.target,
                    s.util_b,
                    h.scale,
                    u8::from(h.aleph),
                    u8::from(h.beth),
                    h.observed,
                    h.natural,
                    h.eligible,
                    h.target,
                    s.util_h
                )?;
            }
        }
        Ok(())
    }
}

/// Factual probabilities of one record; `None` where the record is not in
/// the model's risk set.
#[derive(Debug, Clone, Copy)]
struct Factual {
    b: Option<f64>,
    h: Option<f64>,
    c: Option<f64>,
}

fn factual_probabilities(
    panel: &PanelDataset,
    models: &TreatmentModels,
) -> Result<Vec<Vec<Factual>>, WeightError> {
    let wrap = |model: &'static str| move |source| WeightError::Design { model, source };
    panel
        .subjects()
        .par_iter()
        .map(|s| {
            s.records
                .iter()
                .enumerate()
                .map(|(j, r)| {
                    let ctx = RowContext::new(r.k, 0, &s.records[..=j]);
                    Ok(Factual {
                        b: r.r.then(|| models.b.predict(&ctx)).transpose().map_err(wrap("B"))?,
                        h: r.s.then(|| models.h.predict(&ctx)).transpose().map_err(wrap("H"))?,
                        c: match &models.c {
                            Some(m) if r.censor_eligible() => {
                                Some(m.predict(&ctx).map_err(wrap("C"))?)
                            }
                            _ => None,
                        },
                    })
                })
                .collect()
        })
        .collect()
}

const CHUNK: usize = 4096;

/// Compensated sum of `f(i)` over `0..n`, chunked in parallel and reduced in
/// index order so the result does not depend on scheduling.
fn ordered_sum(n: usize, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    let parts: Vec<CompensatedSum<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| (c * CHUNK..((c + 1) * CHUNK).min(n)).map(&f).collect())
        .collect();
    let mut total = CompensatedSum::new();
    for p in parts {
        total.add(p.value());
    }
    total.value()
}

fn divisor_at_clamp(arm: &ArmResolution<f64>, f: f64, treated: bool) -> bool {
    if arm.scale == 1.0 {
        return false;
    }
    let clamp = prob_clamp::<f64>() * (1.0 + 1e-9);
    match (arm.beth, treated) {
        (true, false) => 1.0 - f <= clamp,
        (false, true) => f <= clamp,
        _ => false,
    }
}

struct RegimeRun<'a> {
    panel: &'a PanelDataset,
    regime: &'a RegimeSpec,
    variant: Variant,
    factual: &'a [Vec<Factual>],
    offsets: &'a [usize],
}

impl RegimeRun<'_> {
    fn constraint(&self, k: u32) -> impl Fn(RegimeError) -> WeightError + '_ {
        move |source| WeightError::Constraint {
            regime: self.regime.label.clone(),
            k,
            source,
        }
    }

    /// Apply one arm's factor to every eligible record at `k`.
    fn apply(
        &self,
        k: u32,
        arm: &ArmResolution<f64>,
        subjects: &[usize],
        pick: impl Fn(&Factual, &PanelRecord) -> Option<(f64, bool)> + Sync,
        weight: impl Fn(&mut RecordWeights) -> &mut f64 + Sync,
        records: &mut [RecordWeights],
    ) -> Result<(), WeightError> {
        let j = k as usize - 1;
        let factors: Vec<Option<f64>> = subjects
            .par_iter()
            .map(|&i| {
                let s = &self.panel.subjects()[i];
                let Some((f, treated)) = pick(&self.factual[i][j], &s.records[j]) else {
                    return Ok(None);
                };
                let p = arm.intervened_prob(f);
                if !(-1e-12..=1.0 + 1e-12).contains(&p) {
                    return Err(WeightError::NegativeInterventionDensity {
                        regime: self.regime.label.clone(),
                        k,
                        subject: s.id.clone(),
                        value: p,
                    });
                }
                let violation = || WeightError::PositivityViolation {
                    regime: self.regime.label.clone(),
                    k,
                    subject: s.id.clone(),
                };
                if divisor_at_clamp(arm, f, treated) {
                    return Err(violation());
                }
                arm.weight_factor(f, treated).map(Some).ok_or_else(violation)
            })
            .collect::<Result<_, _>>()?;
        for (&i, factor) in subjects.iter().zip(factors) {
            if let Some(v) = factor {
                *weight(&mut records[self.offsets[i] + j]) *= v;
            }
        }
        Ok(())
    }

    fn run(&self) -> Result<(Vec<RecordWeights>, Vec<StepDiagnostics>), WeightError> {
        let panel = self.panel;
        let n = panel.n() as f64;
        let subjects = panel.subjects();
        let mut records = vec![RecordWeights::ONE; *self.offsets.last().unwrap_or(&0)];
        let mut steps = Vec::with_capacity(panel.horizon() as usize);
        let mut active: Vec<usize> = (0..subjects.len()).collect();
        for k in 1..=panel.horizon() {
            let j = k as usize - 1;
            active.retain(|&i| subjects[i].records.len() > j);
            // carry weights through k − 1 onto row k
            if j > 0 {
                for &i in &active {
                    records[self.offsets[i] + j] = records[self.offsets[i] + j - 1];
                }
            }
            let rec = |a: usize| &subjects[active[a]].records[j];
            let w = |a: usize| records[self.offsets[active[a]] + j];
            let m = active.len();

            let sum = |f: &(dyn Fn(usize) -> f64 + Sync)| ordered_sum(m, f) / n;
            let ind = |b: bool| f64::from(u8::from(b));
            let obs_b = sum(&|a| ind(rec(a).b) * w(a).wc);
            let obs_h = sum(&|a| ind(rec(a).h) * w(a).wc);
            let pi_r = sum(&|a| ind(rec(a).r) * w(a).product());
            let nat_b = sum(&|a| ind(rec(a).b) * w(a).product());
            let arm_b = resolve_arm(
                self.regime.q_at(k),
                obs_b,
                nat_b,
                pi_r,
                self.variant,
            )
            .map_err(self.constraint(k))?;
            self.apply(
                k,
                &arm_b,
                &active,
                |f, r| f.b.map(|p| (p, r.b)),
                |w| &mut w.wb,
                &mut records,
            )?;

            let w = |a: usize| records[self.offsets[active[a]] + j];
            let sum = |f: &(dyn Fn(usize) -> f64 + Sync)| ordered_sum(m, f) / n;
            let util_b = sum(&|a| ind(rec(a).b) * w(a).product());
            let pi_s = sum(&|a| ind(rec(a).s) * w(a).product());
            let nat_h = sum(&|a| ind(rec(a).h) * w(a).product());
            let arm_h = resolve_arm(
                self.regime.m_at(k),
                obs_h,
                nat_h,
                pi_s,
                self.variant,
            )
            .map_err(self.constraint(k))?;
            self.apply(
                k,
                &arm_h,
                &active,
                |f, r| f.h.map(|p| (p, r.h)),
                |w| &mut w.wh,
                &mut records,
            )?;
            let w = |a: usize| records[self.offsets[active[a]] + j];
            let util_h = ordered_sum(m, |a| ind(rec(a).h) * w(a).product()) / n;

            for &i in &active {
                let r = &subjects[i].records[j];
                let slot = &mut records[self.offsets[i] + j];
                if r.c {
                    slot.wc = 0.0;
                } else if let (Some(pc), true) = (self.factual[i][j].c, self.regime.abolish_censoring) {
                    slot.wc /= 1.0 - pc;
                }
            }
            steps.push(StepDiagnostics {
                k,
                b: arm_b,
                h: arm_h,
                util_b,
                util_h,
                at_risk: m,
            });
        }
        Ok((records, steps))
    }
}

/// Run the weight recursion for every regime of `cloned`.
pub fn compute_weights(
    cloned: &ClonedPanel<'_>,
    models: &TreatmentModels,
    variant: Variant,
) -> Result<WeightTable, WeightError> {
    let panel = cloned.panel();
    let factual = factual_probabilities(panel, models)?;
    let mut offsets = Vec::with_capacity(panel.n() + 1);
    offsets.push(0);
    for s in panel.subjects() {
        offsets.push(offsets.last().unwrap() + s.rows());
    }
    let runs: Vec<(Vec<RecordWeights>, Vec<StepDiagnostics>)> = cloned
        .regimes()
        .par_iter()
        .map(|regime| {
            RegimeRun {
                panel,
                regime,
                variant,
                factual: &factual,
                offsets: &offsets,
            }
            .run()
        })
        .collect::<Result<_, _>>()?;
    let (records, steps) = runs.into_iter().unzip();
    Ok(WeightTable {
        labels: cloned.labels(),
        n: panel.n(),
        offsets,
        records,
        steps,
    })
}
