//! End-to-end estimation: treatment models, cloning, weights, hazard model
//! and plug-in curves.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::FormulaSpec;
use crate::data::{truncate_horizon, DataError, PanelDataset};
use crate::glm::GlmOptions;
use crate::msm::{
    fit_msm, plugin_risk, utilization_curves, FittedMsm, MsmError, MsmOptions, RiskCurve,
    UtilizationSeries,
};
use crate::regime::{RegimeSpec, Variant};
use crate::weights::{
    clone_dataset, compute_weights, fit_treatment_models, TreatmentFormulas, TreatmentModels,
    WeightError, WeightTable,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error(transparent)]
    Msm(#[from] MsmError),
}

impl PipelineError {
    /// Whether the failure comes from the input rather than the numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            PipelineError::Data(_)
                | PipelineError::Weights(
                    WeightError::NoRegimes
                        | WeightError::DuplicateRegime(_)
                        | WeightError::RegimeTerm(_)
                        | WeightError::Regime(_)
                        | WeightError::Design { .. }
                )
                | PipelineError::Msm(MsmError::DegenerateZ | MsmError::NotBaseline | MsmError::InvalidCap(_))
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub formulas: TreatmentFormulas,
    pub gamma: FormulaSpec,
    pub regimes: Vec<RegimeSpec>,
    /// Truncate follow-up at this interval.
    #[serde(default)]
    pub horizon: Option<u32>,
    #[serde(default)]
    pub weight_cap: Option<f64>,
    #[serde(default)]
    pub variant: Variant,
    #[serde(skip)]
    pub glm: GlmOptions,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub models: TreatmentModels,
    pub weights: WeightTable,
    pub msm: FittedMsm,
    pub curves: Vec<RiskCurve>,
    pub utilization: Vec<UtilizationSeries>,
}

pub fn run_pipeline(
    panel: &PanelDataset,
    cfg: &PipelineConfig,
) -> Result<PipelineResult, PipelineError> {
    let panel: Cow<'_, PanelDataset> = match cfg.horizon {
        Some(h) if h < panel.horizon() => Cow::Owned(truncate_horizon(panel, h)?),
        Some(0) => return Err(DataError::InvalidHorizon(0).into()),
        _ => Cow::Borrowed(panel),
    };
    let cloned = clone_dataset(&panel, &cfg.regimes)?;
    let models = fit_treatment_models(&panel, &cfg.formulas, &cfg.glm)?;
    let weights = compute_weights(&cloned, &models, cfg.variant)?;
    let opts = MsmOptions {
        weight_cap: cfg.weight_cap,
        glm: cfg.glm.clone(),
    };
    let msm = fit_msm(&cloned, &weights, &cfg.gamma, &opts)?;
    let horizon = panel.horizon() as usize;
    let curves = (0..cfg.regimes.len())
        .map(|z| plugin_risk(&msm, &panel, z, horizon))
        .collect::<Result<_, _>>()?;
    let utilization = utilization_curves(&weights);
    Ok(PipelineResult {
        models,
        weights,
        msm,
        curves,
        utilization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{Factor, Term};
    use crate::oracle::RandomRanges;
    use crate::regime::preset;
    use crate::sim::{sample_panel, seeded_dgm, Generator, SimConfig};

    fn saturated(factors: Vec<Factor>) -> FormulaSpec {
        FormulaSpec::new(false, vec![Term::Saturated(factors)])
    }

    #[test]
    fn runs_on_simulated_panel() {
        let dgm = seeded_dgm(2, 2, 2, true, &RandomRanges::default()).unwrap();
        let panel = sample_panel(&SimConfig {
            n: 5_000,
            horizon: 2,
            seed: 1,
            generator: Generator::Dgm(dgm),
        })
        .unwrap();
        let hist = vec![Factor::Interval, Factor::History("L".into())];
        let cfg = PipelineConfig {
            formulas: TreatmentFormulas {
                b: saturated(hist.clone()),
                h: saturated(hist.clone()),
                c: saturated(hist),
            },
            gamma: saturated(vec![Factor::Interval, Factor::Regime]),
            regimes: vec![preset("g0").unwrap(), preset("g1").unwrap()],
            horizon: None,
            weight_cap: None,
            variant: Variant::Generalized,
            glm: GlmOptions::default(),
        };
        let out = run_pipeline(&panel, &cfg).unwrap();
        assert_eq!(out.curves.len(), 2);
        assert!(out.curves.iter().all(|c| c.risk.len() == 2 && c.risk[0] <= c.risk[1]));
        let truncated = run_pipeline(&panel, &PipelineConfig { horizon: Some(1), ..cfg }).unwrap();
        assert_eq!(truncated.curves[0].risk.len(), 1);
    }
}
