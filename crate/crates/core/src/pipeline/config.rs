//! Pipeline configuration: one TOML file, presets, and `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::corpus::ToyCorpusConfig;
use crate::dataset::CorruptionKind;
use crate::detector::TrainingConfig;
use crate::detector_filter::DetectorFilterConfig;
use crate::image_filter::ImageFilterConfig;

pub const DEFAULT_COPIES: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Real training corpus (COCO JSON with images next to it). When absent
    /// a toy corpus is built from `toy_train`.
    pub real: Option<PathBuf>,
    /// Held-out evaluation corpus; falls back to `toy_test`.
    pub test: Option<PathBuf>,
    /// Fraction of real images kept (low-data regime).
    pub fraction: f64,
    pub toy_train: ToyCorpusConfig,
    pub toy_test: ToyCorpusConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        let toy_train = ToyCorpusConfig::default();
        let toy_test = ToyCorpusConfig { first_image_id: 100_000, ..toy_train.balanced(150, 40, 1_000) };
        Self { real: None, test: None, fraction: 1.0, toy_train, toy_test }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// Synthetic copies per real image.
    pub copies: u32,
    pub corruption_rate: f64,
    pub hallucination_rate: f64,
    pub hallucination_attempts: u32,
    /// Draw wrong-category substitutes and hallucinations in proportion to
    /// each category's image count in the real set, instead of uniformly.
    pub frequency_weighted: bool,
    /// Hue jitter of the mock generator's palette, as a fraction of half the
    /// hue spacing between categories.
    pub hue_jitter: f64,
    /// Systematic hue shift of the mock generator, as a fraction of the
    /// hue spacing between categories. Stands in for the appearance gap
    /// between generated and real images.
    pub hue_bias: f64,
    pub forced_kind: Option<CorruptionKind>,
    /// Remote inpainting service; the mock generator is used when absent.
    pub endpoint: Option<String>,
    pub max_in_flight: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            copies: DEFAULT_COPIES,
            corruption_rate: 0.3,
            hallucination_rate: 0.7,
            hallucination_attempts: 3,
            frequency_weighted: true,
            hue_jitter: ToyCorpusConfig::default().hue_jitter,
            hue_bias: 0.0,
            forced_kind: None,
            endpoint: None,
            max_in_flight: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerConfig {
    /// Scores derived from the mock generator's corruption metadata.
    Mock,
    Constant { score: f64 },
    Http { endpoint: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageStageConfig {
    pub tau_a: f64,
    pub scorer: ScorerConfig,
}

impl Default for ImageStageConfig {
    fn default() -> Self {
        Self { tau_a: ImageFilterConfig::default().tau_a, scorer: ScorerConfig::Mock }
    }
}

impl ImageStageConfig {
    pub fn filter_config(&self) -> ImageFilterConfig {
        ImageFilterConfig { tau_a: self.tau_a }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceStageConfig {
    pub tau_s: f64,
    pub tau_iou: f64,
    pub class_agnostic: bool,
    /// Training recipe of the real-only filter detector.
    pub detector: TrainingConfig,
}

impl Default for InstanceStageConfig {
    fn default() -> Self {
        let d = DetectorFilterConfig::default();
        Self { tau_s: d.tau_s, tau_iou: d.tau_iou, class_agnostic: d.class_agnostic, detector: TrainingConfig::default() }
    }
}

impl InstanceStageConfig {
    pub fn filter_config(&self) -> DetectorFilterConfig {
        DetectorFilterConfig { tau_s: self.tau_s, tau_iou: self.tau_iou, class_agnostic: self.class_agnostic }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Anchors whose objectness falls below this are not reported.
    pub score_floor: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { score_floor: 1e-4 }
    }
}

/// Which optional components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    /// Draw synthetic batches with probability `training.sampler.p`. When
    /// off, real and synthetic images are mixed in proportion to pool size.
    pub use_sampling: bool,
    pub use_image_filter: bool,
    pub use_detector_filter: bool,
    pub use_bg_ignore: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self { use_sampling: true, use_image_filter: true, use_detector_filter: true, use_bg_ignore: true }
    }
}

impl StageToggles {
    pub fn all_off() -> Self {
        Self { use_sampling: false, use_image_filter: false, use_detector_filter: false, use_bg_ignore: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub preset: Option<String>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub generation: GenerationConfig,
    pub image_filter: ImageStageConfig,
    pub detector_filter: InstanceStageConfig,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
    pub stages: StageToggles,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preset: None,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            generation: GenerationConfig::default(),
            image_filter: ImageStageConfig::default(),
            detector_filter: InstanceStageConfig::default(),
            training: TrainingConfig::default(),
            evaluation: EvaluationConfig::default(),
            stages: StageToggles::default(),
        }
    }
}

pub const PRESETS: [&str; 3] = ["lvis", "coco", "ld-coco"];

impl PipelineConfig {
    pub fn preset(name: &str) -> Result<Self, PipelineError> {
        let mut c = Self { preset: Some(name.to_string()), ..Self::default() };
        match name {
            "lvis" => {}
            "coco" => c.detector_filter.tau_s = DetectorFilterConfig::coco().tau_s,
            "ld-coco" => {
                c.detector_filter.tau_s = DetectorFilterConfig::coco().tau_s;
                c.stages.use_image_filter = false;
                c.stages.use_detector_filter = false;
                c.stages.use_bg_ignore = false;
            }
            other => return Err(PipelineError::Config(format!("unknown preset {other:?}; expected one of {PRESETS:?}"))),
        }
        Ok(c)
    }

    /// Parse TOML. A top-level `preset` selects the base values the file
    /// then overrides.
    pub fn from_toml_str(s: &str) -> Result<Self, PipelineError> {
        let file: toml::Table = toml::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))?;
        Self::from_table(file, &[])
    }

    /// Like [`from_toml_str`](Self::from_toml_str), then applies
    /// `dotted.key=value` overrides in order.
    pub fn from_toml_with_overrides(s: &str, overrides: &[String]) -> Result<Self, PipelineError> {
        let file: toml::Table = toml::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))?;
        Self::from_table(file, overrides)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_with_overrides(&s, overrides)
    }

    fn from_table(file: toml::Table, overrides: &[String]) -> Result<Self, PipelineError> {
        let mut preset_name = file.get("preset").and_then(|v| v.as_str()).map(str::to_string);
        for o in overrides {
            if let Some(v) = o.strip_prefix("preset=") {
                preset_name = Some(v.trim_matches('"').to_string());
            }
        }
        let base = match &preset_name {
            Some(p) => Self::preset(p)?,
            None => Self::default(),
        };
        let mut merged = toml::Table::try_from(&base).map_err(|e| PipelineError::Config(e.to_string()))?;
        merge(&mut merged, file);
        for o in overrides {
            apply_override(&mut merged, o)?;
        }
        let cfg: Self = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Content hash of everything that influences results. The output
    /// directory is excluded.
    pub fn hash(&self) -> String {
        crate::hash::hash_json(&Self { output_dir: PathBuf::new(), ..self.clone() })
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.data.fraction > 0.0 && self.data.fraction <= 1.0) {
            return bad(format!("data.fraction = {} not in (0, 1]", self.data.fraction));
        }
        for (k, v) in [
            ("generation.corruption_rate", self.generation.corruption_rate),
            ("generation.hallucination_rate", self.generation.hallucination_rate),
            ("detector_filter.tau_s", self.detector_filter.tau_s),
            ("detector_filter.tau_iou", self.detector_filter.tau_iou),
            ("training.tau_i", self.training.tau_i),
            ("training.sampler.p", self.training.sampler.p),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{k} = {v} not in [0, 1]"));
            }
        }
        if self.image_filter.tau_a.is_nan() {
            return bad("image_filter.tau_a is NaN".into());
        }
        if self.training.sampler.batch_size == 0 {
            return bad("training.sampler.batch_size must be positive".into());
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Set `a.b.c = value`, where `value` is a TOML literal; bare words are
/// taken as strings.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), PipelineError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override {assignment:?} is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| PipelineError::Config(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
