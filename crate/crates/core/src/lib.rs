//! Counterfactual survival risk under proportionally-representative
//! interventions on limited treatment resources.
//!
//! The estimator clones the observed panel once per regime, builds inverse
//! probability weights that rescale each subject's factual treatment
//! probability so interval-level utilization meets the regime's resource
//! constraint, and fits a weighted pooled logistic hazard model whose plug-in
//! cumulative incidence is the risk estimate. [`oracle`] evaluates the same
//! quantities exactly on small discrete data-generating models.

pub mod basis;
pub mod boot;
pub mod data;
pub mod glm;
pub mod msm;
pub mod oracle;
pub mod pipeline;
pub mod regime;
pub mod scalar;
pub mod sim;
pub mod weights;

pub use basis::{Design, FormulaSpec, SplineSpec, Term};
pub use data::{load_panel, PanelDataset, PanelRecord, PanelSchema};
pub use msm::{FittedMsm, RiskCurve};
pub use oracle::{DiscreteDgm, OracleError};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineResult};
pub use regime::{preset, RegimeSpec, Variant};
pub use scalar::Scalar;
pub use weights::{ClonedPanel, WeightTable};

pub type GlmFit64 = glm::GlmFit<f64>;
pub type GlmFit32 = glm::GlmFit<f32>;
pub type DiscreteDgm64 = oracle::DiscreteDgm<f64>;
pub type DiscreteDgm32 = oracle::DiscreteDgm<f32>;
pub type ArmResolution64 = regime::ArmResolution<f64>;
