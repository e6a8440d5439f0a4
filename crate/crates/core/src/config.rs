//! Experiment configuration: one TOML file, every field defaulted, unknown
//! keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EerMode, GroupKey, MetricKind};
use crate::seed;
use crate::synth::SynthSpec;
use crate::training::TrainConfig;
use crate::upstream::{MaskSpec, PretrainConfig, UpstreamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    /// JSONL manifest of the labelled corpus. Ignored when `[synth]` is
    /// present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub metrics: Vec<MetricKind>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            name: "task".into(),
            manifest: None,
            metrics: vec![MetricKind::WeightedAccuracy],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureParams {
    /// MFCC coefficients clustered into pretraining targets.
    pub n_mfcc: usize,
    pub kmeans_max_iters: usize,
    /// Frames are subsampled to at most this many before clustering.
    pub kmeans_max_frames: usize,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            n_mfcc: 13,
            kmeans_max_iters: 100,
            kmeans_max_frames: 50_000,
        }
    }
}

/// Which checkpoints are averaged into the evaluated model. In TOML this is
/// a table with a `kind` key plus that kind's parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AveragingTable", into = "AveragingTable")]
pub enum Averaging {
    /// The best-dev checkpoint alone.
    None,
    /// Mean of the `k` best checkpoints by dev metric.
    TopK { k: usize },
    /// Mean of the best checkpoint and the first one at or after `step`.
    BestPlusStep { step: u64 },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AveragingTable {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step: Option<u64>,
}

impl TryFrom<AveragingTable> for Averaging {
    type Error = String;

    fn try_from(t: AveragingTable) -> std::result::Result<Self, String> {
        // Parameters that do not belong to the kind are reported the same
        // way serde reports unknown fields.
        let stray = |name: &str| format!("unknown field `{name}` for averaging kind `{}`", t.kind);
        match (t.kind.as_str(), t.k, t.step) {
            ("none", None, None) => Ok(Averaging::None),
            ("top_k", k, None) => Ok(Averaging::TopK { k: k.unwrap_or(5) }),
            ("best_plus_step", None, step) => Ok(Averaging::BestPlusStep {
                step: step.unwrap_or(10_000),
            }),
            ("none" | "best_plus_step", Some(_), _) => Err(stray("k")),
            ("none" | "top_k", _, Some(_)) => Err(stray("step")),
            (other, _, _) => Err(format!(
                "unknown averaging kind `{other}`, expected none, top_k or best_plus_step"
            )),
        }
    }
}

impl From<Averaging> for AveragingTable {
    fn from(a: Averaging) -> Self {
        let (kind, k, step) = match a {
            Averaging::None => ("none", None, None),
            Averaging::TopK { k } => ("top_k", Some(k), None),
            Averaging::BestPlusStep { step } => ("best_plus_step", None, Some(step)),
        };
        AveragingTable {
            kind: kind.into(),
            k,
            step,
        }
    }
}

impl Default for Averaging {
    fn default() -> Self {
        Averaging::TopK { k: 5 }
    }
}

impl std::fmt::Display for Averaging {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Averaging::None => write!(f, "none"),
            Averaging::TopK { k } => write!(f, "top_k({k})"),
            Averaging::BestPlusStep { step } => write!(f, "best_plus_step({step})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub folds: usize,
    pub group_key: GroupKey,
    pub dev_fraction: f64,
    /// Low-data sweep points. The full training set is always evaluated
    /// in addition when `include_full` is set.
    pub n_per_class: Vec<usize>,
    pub include_full: bool,
    /// Test durations in seconds; empty means full-length only.
    pub durations: Vec<f64>,
    pub eer_mode: EerMode,
    pub averaging: Averaging,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            group_key: GroupKey::Speaker,
            dev_fraction: 0.12,
            n_per_class: Vec::new(),
            include_full: true,
            durations: Vec::new(),
            eer_mode: EerMode::Pooled,
            averaging: Averaging::default(),
        }
    }
}

impl ProtocolConfig {
    /// Sweep points in evaluation order; `None` is the full training set.
    pub fn sweep_points(&self) -> Vec<Option<usize>> {
        let mut pts: Vec<Option<usize>> = self.n_per_class.iter().copied().map(Some).collect();
        if self.include_full {
            pts.push(None);
        }
        pts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage draws from a named stream derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub task: TaskSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    pub features: FeatureParams,
    pub model: UpstreamConfig,
    pub mask: MaskSpec,
    pub pretrain: PretrainConfig,
    /// Existing upstream container to load instead of pretraining.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upstream_checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            task: TaskSpec::default(),
            synth: None,
            features: FeatureParams::default(),
            model: UpstreamConfig::default(),
            mask: MaskSpec::default(),
            pretrain: PretrainConfig::default(),
            upstream_checkpoint: None,
            train: TrainConfig::default(),
            protocol: ProtocolConfig::default(),
        }
    }
}

fn range(field: &str, message: impl Into<String>) -> Error {
    Error::Range {
        field: field.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.task.name.is_empty() || self.task.name.contains(['/', '\\', ',']) {
            return Err(range("task.name", "must be non-empty without '/', '\\' or ','"));
        }
        if self.task.metrics.is_empty() {
            return Err(range("task.metrics", "at least one metric is required"));
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        if self.features.n_mfcc == 0 || self.features.n_mfcc > self.model.n_mels {
            return Err(range("features.n_mfcc", format!("must be in 1..={}", self.model.n_mels)));
        }
        if self.features.kmeans_max_iters == 0 {
            return Err(range("features.kmeans_max_iters", "must be at least 1"));
        }
        if self.features.kmeans_max_frames < self.model.codebook_size {
            return Err(range("features.kmeans_max_frames", "must be at least model.codebook_size"));
        }
        self.model.validate()?;
        self.mask.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        let p = &self.protocol;
        if p.folds < 2 {
            return Err(range("protocol.folds", "must be at least 2"));
        }
        if !(0.0..1.0).contains(&p.dev_fraction) || p.dev_fraction == 0.0 {
            return Err(range("protocol.dev_fraction", format!("{} is not in (0, 1)", p.dev_fraction)));
        }
        if p.n_per_class.contains(&0) {
            return Err(range("protocol.n_per_class", "entries must be at least 1"));
        }
        if p.sweep_points().is_empty() {
            return Err(range("protocol.include_full", "no sweep points and include_full = false"));
        }
        if p.durations.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(range("protocol.durations", "durations must be positive"));
        }
        match p.averaging {
            Averaging::TopK { k: 0 } => return Err(range("protocol.averaging.k", "must be at least 1")),
            Averaging::BestPlusStep { step: 0 } => {
                return Err(range("protocol.averaging.step", "must be at least 1"))
            }
            _ => {}
        }
        Ok(())
    }

    /// Hash of the canonical serialized form. The output directory is
    /// left out so a run can be reproduced elsewhere.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        seed::fingerprint(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Seed for a named stage, mixed with a section-local seed so either can
    /// be varied independently.
    pub fn stage_seed(&self, stage: &str, local: u64) -> u64 {
        seed::derive_seed(self.seed ^ local, stage)
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses and validates a config held in memory.
pub fn parse_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(0, |s| line_of(text, s.start));
        let msg = e.message().to_string();
        match msg.strip_prefix("unknown field `") {
            Some(rest) => Error::UnknownKey {
                key: rest.split('`').next().unwrap_or_default().to_string(),
                line,
            },
            None => Error::Parse { line, message: msg },
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads, parses and validates a TOML config. Relative `output_dir` and
/// manifest paths are kept as written.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_str(&text)
}
