use std::path::{Path, PathBuf};

use prorep::basis::FormulaSpec;
use prorep::glm::GlmOptions;
use prorep::oracle::{VPartition, DEFAULT_STATE_BOUND};
use prorep::regime::{preset, RegimeSpec, Variant};
use prorep::sim::TransplantGenerator;
use prorep::weights::TreatmentFormulas;
use prorep::{PanelSchema, PipelineConfig};
use serde::Deserialize;

use crate::error::{Failure, Kind, ResultExt};

/// Whole run, as read from one TOML file. Relative paths resolve against
/// the file's directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory.
    pub out: Option<PathBuf>,
    #[serde(default = "default_bound")]
    pub oracle_bound: usize,
    pub data: Option<DataSection>,
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub bootstrap: BootstrapSection,
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub validate: ValidateSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_bound() -> usize {
    DEFAULT_STATE_BOUND
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
    pub schema: PanelSchema,
}

/// A named preset or a full specification.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum RegimeEntry {
    Preset(String),
    Spec(RegimeSpec),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub formulas: TreatmentFormulas,
    pub gamma: FormulaSpec,
    pub regimes: Vec<RegimeEntry>,
    pub horizon: Option<u32>,
    pub weight_cap: Option<f64>,
    #[serde(default)]
    pub variant: Variant,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSection {
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Falls back to the top-level seed.
    pub seed: Option<u64>,
}

fn default_replicates() -> usize {
    prorep::boot::DEFAULT_REPLICATES
}

impl Default for BootstrapSection {
    fn default() -> Self {
        Self {
            replicates: default_replicates(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorSection {
    Transplant(#[serde(default)] TransplantGenerator),
    /// DGM document on disk.
    Dgm(PathBuf),
    Seeded {
        seed: u64,
        #[serde(default = "default_levels")]
        levels: usize,
        #[serde(default)]
        censoring: bool,
    },
}

fn default_levels() -> usize {
    2
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub n: usize,
    pub horizon: usize,
    pub generator: GeneratorSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    #[default]
    Empty,
    FirstL,
}

impl From<Partition> for VPartition {
    fn from(p: Partition) -> Self {
        match p {
            Partition::Empty => VPartition::Empty,
            Partition::FirstL => VPartition::FirstL,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateSection {
    /// Validate this DGM document instead of seeded random ones.
    pub dgm: Option<PathBuf>,
    pub dgms: usize,
    pub horizon: usize,
    pub levels: usize,
    pub censoring: bool,
    /// Baseline stratification of the hazard representation.
    pub v: Partition,
    /// Extra regimes checked next to `g0`, `g1` and seeded random ones.
    pub regimes: Vec<RegimeEntry>,
}

impl Default for ValidateSection {
    fn default() -> Self {
        Self {
            dgm: None,
            dgms: 25,
            horizon: 3,
            levels: 2,
            censoring: true,
            v: Partition::FirstL,
            regimes: Vec::new(),
        }
    }
}

pub fn resolve_regimes(entries: &[RegimeEntry]) -> Result<Vec<RegimeSpec>, Failure> {
    entries
        .iter()
        .map(|e| match e {
            RegimeEntry::Preset(name) => preset(name).kind(Kind::Config),
            RegimeEntry::Spec(spec) => Ok(spec.clone()),
        })
        .collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .with_context_kind(Kind::Config, || format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .with_context_kind(Kind::Config, || format!("parsing {}", path.display()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn data(&self) -> Result<&DataSection, Failure> {
        self.data
            .as_ref()
            .ok_or_else(|| Failure::msg(Kind::Config, "missing [data] section"))
    }

    pub fn pipeline(&self) -> Result<PipelineConfig, Failure> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| Failure::msg(Kind::Config, "missing [model] section"))?;
        let regimes = resolve_regimes(&model.regimes)?;
        if regimes.is_empty() {
            return Err(Failure::msg(Kind::Config, "model.regimes must not be empty"));
        }
        Ok(PipelineConfig {
            formulas: model.formulas.clone(),
            gamma: model.gamma.clone(),
            regimes,
            horizon: model.horizon,
            weight_cap: model.weight_cap,
            variant: model.variant,
            glm: GlmOptions::default(),
        })
    }
}
