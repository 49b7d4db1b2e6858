#![allow(dead_code)]

use std::time::Instant;

use prorep::basis::{Factor, FormulaSpec, Term};
use prorep::data::PanelDataset;
use prorep::glm::GlmOptions;
use prorep::oracle::{CptSource, DiscreteDgm, Trt, DEFAULT_STATE_BOUND};
use prorep::regime::{RegimeSpec, Variant};
use prorep::weights::{TreatmentFormulas, WeightTable};
use prorep::PipelineConfig;

pub fn saturated(factors: Vec<Factor>) -> FormulaSpec {
    FormulaSpec::new(false, vec![Term::Saturated(factors)])
}

/// Interval × full covariate history: exact for every discrete DGM.
pub fn history_model() -> FormulaSpec {
    saturated(vec![Factor::Interval, Factor::History("L".into())])
}

pub fn saturated_config(regimes: Vec<RegimeSpec>) -> PipelineConfig {
    PipelineConfig {
        formulas: TreatmentFormulas {
            b: history_model(),
            h: history_model(),
            c: history_model(),
        },
        gamma: saturated(vec![Factor::Interval, Factor::Regime]),
        regimes,
        horizon: None,
        weight_cap: None,
        variant: Variant::Generalized,
        glm: GlmOptions::default(),
    }
}

/// Prints the criterion line and fails the test when `ok` is false.
pub fn report(id: u32, name: &str, ok: bool, start: Instant, detail: String) {
    let tag = if ok { "PASS" } else { "FAIL" };
    println!(
        "[{tag}] criterion {id:>2} {name}: {detail} ({:.1}s)",
        start.elapsed().as_secs_f64()
    );
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

/// Standard error of the saturated IPW cumulative incidence under regime
/// `z`, from the subject-level influence function with weights held fixed.
/// Returns `(risk, se)` per interval.
pub fn ipw_risk_se(panel: &PanelDataset, weights: &WeightTable, z: usize) -> (Vec<f64>, Vec<f64>) {
    let horizon = panel.horizon() as usize;
    let n = panel.n() as f64;
    let mut num = vec![0.0; horizon];
    let mut den = vec![0.0; horizon];
    for (i, s) in panel.subjects().iter().enumerate() {
        for (r, w) in s.records.iter().zip(weights.subject(z, i)) {
            if r.c {
                continue;
            }
            let k = r.k as usize - 1;
            let w = w.product();
            den[k] += w;
            if r.y {
                num[k] += w;
            }
        }
    }
    let lambda: Vec<f64> = num.iter().zip(&den).map(|(a, b)| a / b).collect();
    let mut risk = Vec::with_capacity(horizon);
    let mut se = Vec::with_capacity(horizon);
    let mut surv = 1.0;
    for kk in 0..horizon {
        surv *= 1.0 - lambda[kk];
        risk.push(1.0 - surv);
        let coef: Vec<f64> = (0..=kk)
            .map(|k| surv / (1.0 - lambda[k]) / (den[k] / n))
            .collect();
        let mut var = 0.0;
        for (i, s) in panel.subjects().iter().enumerate() {
            let mut phi = 0.0;
            for (r, w) in s.records.iter().zip(weights.subject(z, i)) {
                let k = r.k as usize - 1;
                if r.c || k > kk {
                    continue;
                }
                phi += coef[k] * w.product() * (f64::from(u8::from(r.y)) - lambda[k]);
            }
            var += phi * phi;
        }
        se.push(var.sqrt() / n);
    }
    (risk, se)
}

/// Every `(k, history, l)` cell a DGM can be queried at, as factual
/// `(f_B, f_H)` pairs.
pub fn treatment_cells(dgm: &DiscreteDgm<f64>) -> Vec<(usize, f64, f64)> {
    let radix = 3 * dgm.levels();
    let mut out = Vec::new();
    for k in 1..=dgm.horizon() {
        for hist in 0..radix.pow(k as u32 - 1) {
            for l in 0..dgm.levels() {
                let row = dgm.cpt(k, hist, l);
                out.push((k, row.b, row.h));
            }
        }
    }
    out
}

/// Binary `L` whose law ignores treatment, with an outcome that depends on
/// `L` only: every regime has the same counterfactual risk.
pub struct NullEffect;

impl CptSource for NullEffect {
    fn l(&self, history: &[prorep::oracle::Step]) -> Vec<f64> {
        match history.last() {
            Some(s) if s.l == 1 => vec![0.3, 0.7],
            Some(_) => vec![0.7, 0.3],
            None => vec![0.5, 0.5],
        }
    }
    fn b(&self, _: &[prorep::oracle::Step], l: usize) -> f64 {
        [0.15, 0.35][l]
    }
    fn h(&self, _: &[prorep::oracle::Step], l: usize) -> f64 {
        [0.3, 0.2][l]
    }
    fn y(&self, _: &[prorep::oracle::Step], l: usize, _: Trt) -> f64 {
        [0.08, 0.22][l]
    }
}

/// Sticky binary `L` that drives both death and censoring, so complete-case
/// analysis underestimates risk.
pub struct InformativeCensoring;

impl CptSource for InformativeCensoring {
    fn l(&self, history: &[prorep::oracle::Step]) -> Vec<f64> {
        match history.last() {
            Some(s) if s.l == 1 => vec![0.15, 0.85],
            Some(_) => vec![0.85, 0.15],
            None => vec![0.5, 0.5],
        }
    }
    fn b(&self, _: &[prorep::oracle::Step], l: usize) -> f64 {
        [0.1, 0.3][l]
    }
    fn h(&self, _: &[prorep::oracle::Step], l: usize) -> f64 {
        [0.1, 0.2][l]
    }
    fn c(&self, _: &[prorep::oracle::Step], l: usize) -> Option<f64> {
        Some([0.03, 0.5][l])
    }
    fn y(&self, _: &[prorep::oracle::Step], l: usize, trt: Trt) -> f64 {
        let base = [0.03, 0.3][l];
        match trt {
            Trt::None => base,
            Trt::B => 0.8 * base,
            Trt::H => 0.5 * base,
        }
    }
}

pub fn build(source: &dyn CptSource, horizon: usize) -> DiscreteDgm<f64> {
    DiscreteDgm::from_source(horizon, 2, source, DEFAULT_STATE_BOUND).unwrap()
}
