//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ltsv_core::experiments::{BenchConfig, FinetuneBase, PipelineConfig};
use ltsv_core::forecaster::{Architecture, Checkpoint, ModelSpec, OptimizerConfig, TrainConfig};
use ltsv_core::oracles::{Damping, HessianMode};
use ltsv_core::selection::{CorruptionSpec, Strategy};
use ltsv_core::series::{load_csv, IngestOptions, TimeSeries, TimestampColumn};
use ltsv_core::synth::SyntheticSpec;
use ltsv_core::valuation::ValuationConfig;
use ltsv_core::{Error, Result};

/// Horizon of the value model when `[model]` is omitted.
pub const DEFAULT_HORIZON: usize = 4;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing)]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub corruption: Option<CorruptionSpec>,
    #[serde(default)]
    pub test_fraction: Option<f64>,
    #[serde(default)]
    pub normalize: Option<bool>,
    #[serde(default)]
    pub valuation: ValuationConfig,
    /// Value model; defaults to a linear model whose window is one block.
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub downstream_model: Option<ModelSpec>,
    /// Value-model checkpoint used instead of pretraining.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub pretrain: Option<TrainConfig>,
    #[serde(default)]
    pub finetune: Option<TrainConfig>,
    #[serde(default)]
    pub finetune_from: FinetuneBase,
    #[serde(default)]
    pub selection: SelectionSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub ablate: AblateSection,
    #[serde(default)]
    pub bench: Option<BenchConfig>,
    #[serde(default)]
    pub generalize: GeneralizeSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub interpolate: bool,
    #[serde(default)]
    pub timestamps: TimestampColumn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionSection {
    pub ratio: f64,
    pub strategies: Vec<Strategy>,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self { ratio: 0.5, strategies: Strategy::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMethod {
    Ltsv,
    GradInner,
    ExactInfluence,
    Loo,
    Retrain,
    Shapley,
}

impl OracleMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            OracleMethod::Ltsv => "ltsv",
            OracleMethod::GradInner => "grad_inner",
            OracleMethod::ExactInfluence => "exact_influence",
            OracleMethod::Loo => "loo",
            OracleMethod::Retrain => "retrain",
            OracleMethod::Shapley => "shapley",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapleyMode {
    Enumeration,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapleySection {
    pub mode: ShapleyMode,
    pub permutations: usize,
    pub truncation_tol: f64,
    /// Training run behind each coalition's utility.
    pub train: TrainConfig,
}

impl Default for ShapleySection {
    fn default() -> Self {
        Self {
            mode: ShapleyMode::MonteCarlo,
            permutations: 200,
            truncation_tol: 0.0,
            train: TrainConfig::new(10, 64, OptimizerConfig::sgd(1e-2), 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub methods: Vec<OracleMethod>,
    /// Disjoint blocks scored, taken from the start of the target split.
    pub n_blocks: usize,
    /// Disjoint blocks after the scored ones that form the shared context.
    pub context_blocks: usize,
    /// Defaults to analytic for linear models and finite differences otherwise.
    pub hessian_mode: Option<HessianMode>,
    pub damping: Damping,
    pub ridge: f64,
    /// Training run used by brute-force retraining.
    pub retrain: TrainConfig,
    pub shapley: ShapleySection,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            methods: vec![OracleMethod::Ltsv, OracleMethod::GradInner, OracleMethod::ExactInfluence],
            n_blocks: 20,
            context_blocks: 5,
            hessian_mode: None,
            damping: Damping::Auto,
            ridge: 1e-2,
            retrain: TrainConfig::new(50, 64, OptimizerConfig::sgd(1e-2), 0),
            shapley: ShapleySection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub block_lengths: Vec<usize>,
    pub ratio: Option<f64>,
    pub strategies: Option<Vec<Strategy>>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { block_lengths: vec![50, 75, 100, 125], ratio: None, strategies: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneralizeSection {
    pub ratios: Vec<f64>,
}

impl Default for GeneralizeSection {
    fn default() -> Self {
        Self { ratios: vec![0.2, 0.4, 0.6, 0.8] }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(single_line(&e.to_string())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Canonical JSON of everything that affects outputs.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hash_value(&self.echo())
    }

    pub fn load_series(&self) -> Result<(TimeSeries, String)> {
        let data = self
            .data
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("no [data] section and no --data given".into()))?;
        match (&data.path, &data.synthetic) {
            (Some(path), None) => {
                let opts = IngestOptions { interpolate: data.interpolate, timestamps: data.timestamps };
                let series = load_csv(path, &opts)?;
                let name = path.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned());
                Ok((series, name))
            }
            (None, Some(spec)) => {
                let series = spec.generate()?;
                let name = series.origin().to_string();
                Ok((series, name))
            }
            _ => Err(Error::InvalidConfig("[data] needs exactly one of `path` and `synthetic`".into())),
        }
    }

    /// Valuation-model checkpoint, if one is configured.
    pub fn load_checkpoint(&self) -> Result<Option<Checkpoint>> {
        let Some(path) = &self.checkpoint else { return Ok(None) };
        if !path.exists() {
            return Err(Error::MissingFile(path.clone()));
        }
        Ok(Some(Checkpoint::from_json(&std::fs::read_to_string(path)?)?))
    }

    /// Pipeline settings with the global seed applied to every component.
    pub fn pipeline(&self, channels: usize, checkpoint: Option<&Checkpoint>) -> Result<PipelineConfig> {
        let mut valuation = self.valuation.clone();
        valuation.seed = self.seed;
        let value_model = match (checkpoint, &self.model) {
            (Some(c), Some(m)) if c.spec != *m => {
                return Err(Error::InvalidConfig("checkpoint model differs from [model]".into()))
            }
            (Some(c), _) => c.spec.clone(),
            (None, Some(m)) => m.clone(),
            (None, None) => {
                if valuation.block_length <= DEFAULT_HORIZON {
                    return Err(Error::HorizonTooLong { horizon: DEFAULT_HORIZON, length: valuation.block_length });
                }
                ModelSpec::linear_ar(valuation.block_length - DEFAULT_HORIZON, DEFAULT_HORIZON, channels)
            }
        };
        let seeded = |t: &Option<TrainConfig>, epochs: usize| {
            let mut t = t.clone().unwrap_or_else(|| TrainConfig::new(epochs, 32, OptimizerConfig::adam(1e-2), 0));
            t.seed = self.seed;
            t
        };
        let config = PipelineConfig {
            test_fraction: self.test_fraction.unwrap_or(0.3),
            normalize: self.normalize.unwrap_or(true),
            valuation,
            value_model,
            downstream_model: self.downstream_model.clone(),
            pretrain: seeded(&self.pretrain, 5),
            finetune: seeded(&self.finetune, 20),
            finetune_from: self.finetune_from,
            ratio: self.selection.ratio,
            strategies: self.selection.strategies.clone(),
            seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn hessian_mode(&self, spec: &ModelSpec) -> HessianMode {
        self.oracle.hessian_mode.unwrap_or(match spec.architecture {
            Architecture::LinearAr => HessianMode::Analytic,
            Architecture::Mlp => HessianMode::FiniteDiff,
        })
    }
}

pub fn hash_value(value: &serde_json::Value) -> String {
    let text = serde_json::to_string(value).expect("json serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
