//! Experiment configuration: JSON on disk, validated into library types.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use moesim_core::autotune::{BatchDistribution, TrialBudget};
use moesim_core::{Error as CoreError, HardwareProfile, ModelSpec, Preset, ReuseStrategy, SlowdownConfig, SlowdownTable, Stream};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub hardware: HardwareConfig,
    #[serde(default)]
    pub batch: BatchConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub strategy: StrategyChoice,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Either a named preset or explicit dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_dim: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_experts: Option<u64>,
    #[serde(default = "default_nodes")]
    pub num_nodes: u64,
    #[serde(default = "default_element_bytes")]
    pub element_bytes: u64,
}

fn default_nodes() -> u64 {
    8
}

fn default_element_bytes() -> u64 {
    2
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: Some(Preset::Gpt3Small.name().to_string()),
            model_dim: None,
            hidden_dim: None,
            num_experts: None,
            num_nodes: default_nodes(),
            element_bytes: default_element_bytes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareConfig {
    /// Element-operations per second.
    pub w_comp: f64,
    /// Elements per second through the all-to-all.
    pub w_comm: f64,
    /// Elements per second between host and device.
    pub w_mem: f64,
    #[serde(default)]
    pub slowdown: SlowdownConfig,
    /// Seconds per op launch.
    #[serde(default = "default_launch")]
    pub launch_overhead: f64,
    #[serde(default)]
    pub launch_overrides: LaunchOverrides,
    /// Micro-batch size (tokens) at which compute reaches full speed.
    #[serde(default = "default_saturation")]
    pub compute_saturation: f64,
}

fn default_launch() -> f64 {
    1e-5
}

fn default_saturation() -> f64 {
    1024.0
}

impl Default for HardwareConfig {
    fn default() -> Self {
        Self {
            w_comp: 1.2e14,
            w_comm: 2.5e10,
            w_mem: 1.2e10,
            slowdown: SlowdownConfig::default(),
            launch_overhead: default_launch(),
            launch_overrides: LaunchOverrides::default(),
            compute_saturation: default_saturation(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaunchOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mem: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    #[serde(default = "default_tokens")]
    pub tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload: Option<WorkloadConfig>,
}

fn default_tokens() -> u64 {
    16384
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            tokens: default_tokens(),
            workload: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    #[serde(default)]
    pub seed: u64,
    pub iterations: usize,
    pub b_min: u64,
    pub b_max: u64,
    pub distribution: BatchDistribution,
}

/// A fixed partition count or `"adaptive"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PipelineConfig {
    Fixed(u64),
    Mode(PipelineMode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    Adaptive,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig::Fixed(4)
    }
}

impl std::str::FromStr for PipelineConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("adaptive") {
            return Ok(PipelineConfig::Mode(PipelineMode::Adaptive));
        }
        s.parse()
            .map(PipelineConfig::Fixed)
            .map_err(|_| format!("expected a partition count or `adaptive`, got `{s}`"))
    }
}

/// `none`, `S1`..`S4`, or `auto` (cost-model choice).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum StrategyChoice {
    #[default]
    None,
    Fixed(ReuseStrategy),
    Auto,
}

impl std::str::FromStr for StrategyChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(StrategyChoice::Auto);
        }
        match s.parse::<ReuseStrategy>() {
            Ok(ReuseStrategy::NoReuse) => Ok(StrategyChoice::None),
            Ok(strategy) => Ok(StrategyChoice::Fixed(strategy)),
            Err(_) => Err(format!("unknown strategy `{s}` (expected none, S1, S2, S3, S4 or auto)")),
        }
    }
}

impl std::fmt::Display for StrategyChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StrategyChoice::None => f.write_str(ReuseStrategy::NoReuse.name()),
            StrategyChoice::Fixed(s) => f.write_str(s.name()),
            StrategyChoice::Auto => f.write_str("auto"),
        }
    }
}

impl Serialize for StrategyChoice {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StrategyChoice {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default = "default_candidates")]
    pub candidates: Vec<u64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_min_micro_batch")]
    pub min_micro_batch: u64,
    /// Relative standard deviation of measurement noise; 0 is noiseless.
    #[serde(default)]
    pub noise: f64,
}

fn default_candidates() -> Vec<u64> {
    vec![1, 2, 4, 8, 16]
}

fn default_trials() -> usize {
    1
}

fn default_min_micro_batch() -> u64 {
    1
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            candidates: default_candidates(),
            trials: default_trials(),
            min_micro_batch: default_min_micro_batch(),
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceFormat {
    #[default]
    Jsonl,
    TraceEvent,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub trace_format: TraceFormat,
}

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let config = parse_config(&text)?;
    config.validate()?;
    Ok(config)
}

/// Parses JSON, reporting the key path and line/column of the first error.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        CliError::Parse {
            path: if path == "." { String::new() } else { path },
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })
}

fn in_section(section: &str, err: CoreError) -> CliError {
    match err {
        CoreError::InvalidParameter { field, reason } => CliError::Validation {
            path: format!("{section}.{field}"),
            message: reason,
        },
        other => CliError::Validation {
            path: section.to_string(),
            message: other.to_string(),
        },
    }
}

impl ExperimentConfig {
    /// Checks every section by building the library types it describes.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model_spec()?;
        self.hardware_profile()?;
        self.budget()?;
        if self.batch.tokens == 0 {
            return Err(CliError::validation("batch.tokens", "must be at least 1"));
        }
        if let Some(w) = &self.batch.workload {
            moesim_core::autotune::generate_workload(w.seed, w.iterations, w.b_min, w.b_max, w.distribution)
                .map_err(|e| CliError::validation("batch.workload", e.to_string()))?;
        }
        if self.pipeline == PipelineConfig::Fixed(0) {
            return Err(CliError::validation("pipeline", "partition count must be at least 1"));
        }
        if !(self.search.noise.is_finite() && self.search.noise >= 0.0) {
            return Err(CliError::validation("search.noise", "must be a non-negative number"));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec, CliError> {
        let m = &self.model;
        let dims = match (&m.preset, m.model_dim, m.hidden_dim, m.num_experts) {
            (Some(name), None, None, None) => name
                .parse::<Preset>()
                .map_err(|e| CliError::validation("model.preset", e.to_string()))?
                .dims(),
            (None, Some(md), Some(hd), Some(e)) => (md, hd, e),
            (Some(_), ..) => {
                return Err(CliError::validation(
                    "model.preset",
                    "give either a preset or explicit dimensions, not both",
                ))
            }
            (None, ..) => {
                return Err(CliError::validation(
                    "model",
                    "needs a preset or all of model_dim, hidden_dim, num_experts",
                ))
            }
        };
        ModelSpec::with_element_bytes(dims.0, dims.1, dims.2, m.num_nodes, m.element_bytes)
            .map_err(|e| in_section("model", e))
    }

    pub fn hardware_profile(&self) -> Result<HardwareProfile, CliError> {
        let h = &self.hardware;
        let slowdown = SlowdownTable::try_from(h.slowdown).map_err(|e| in_section("hardware", e))?;
        let mut hw = HardwareProfile::new(h.w_comp, h.w_comm, h.w_mem)
            .and_then(|hw| hw.with_launch_overhead(h.launch_overhead))
            .and_then(|hw| hw.with_compute_saturation(h.compute_saturation))
            .map_err(|e| in_section("hardware", e))?
            .with_slowdown(slowdown);
        let overrides = [
            (Stream::Compute, h.launch_overrides.comp),
            (Stream::Collective, h.launch_overrides.comm),
            (Stream::Copy, h.launch_overrides.mem),
        ];
        for (stream, value) in overrides {
            if let Some(v) = value {
                hw = hw.with_launch_override(stream, v).map_err(|e| in_section("hardware", e))?;
            }
        }
        Ok(hw)
    }

    pub fn budget(&self) -> Result<TrialBudget, CliError> {
        TrialBudget::new(self.search.candidates.clone(), self.search.trials)
            .map(|b| b.with_min_micro_batch(self.search.min_micro_batch))
            .map_err(|e| in_section("search", e))
    }
}
