//! SGD training over a stream of homogeneous real/synthetic batches.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::anchors::{build_anchors, match_anchors, AnchorConfig, AnchorGrid, GtInstance};
use super::features::{featurize, feature_dim, FeatureMatrix};
use super::loss::{build_targets, loss_and_grad, AnchorTargets, LossConfig};
use super::model::{backward_into, forward, Params};
use super::DetectorError;
use crate::corpus::Corpus;
use crate::dataset::Source;
use crate::hash::hash_json;
use crate::sampler::{BatchSampler, SamplerConfig, SamplerState};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrStep {
    pub at: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Background-ignore threshold.
    pub tau_i: f64,
    pub bg_ignore: bool,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub lr_step: Option<LrStep>,
    /// Seeds the sampler; overrides `sampler.seed`.
    pub seed: u64,
    pub sampler: SamplerConfig,
    /// Ablation switch only.
    pub apply_mask_loss_on_synthetic: bool,
    pub anchors: AnchorConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            tau_i: 0.0,
            bg_ignore: true,
            learning_rate: 1.0,
            momentum: 0.9,
            weight_decay: 0.0,
            iterations: 4000,
            lr_step: Some(LrStep { at: 3200, factor: 0.1 }),
            seed: 0,
            sampler: SamplerConfig { batch_size: 32, ..SamplerConfig::default() },
            apply_mask_loss_on_synthetic: false,
            anchors: AnchorConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: &str| Err(DetectorError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.tau_i) {
            return bad("tau_i must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau_i: self.tau_i,
            bg_ignore: self.bg_ignore,
            apply_mask_loss_on_synthetic: self.apply_mask_loss_on_synthetic,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_step {
            Some(s) if step >= s.at => self.learning_rate * s.factor,
            _ => self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub params: Params<T>,
    pub velocity: Vec<T>,
    /// Category id for each head class (background excluded), ascending.
    pub category_ids: Vec<u64>,
    pub anchors: AnchorConfig,
    pub image_size: (u32, u32),
    pub steps: usize,
    pub config_hash: String,
    pub sampler: Option<SamplerState>,
}

impl<T: Scalar> TrainState<T> {
    pub fn grid(&self) -> Result<AnchorGrid<T>, DetectorError> {
        Ok(build_anchors(self.image_size.0, self.image_size.1, self.anchors.stride, &self.anchors.scales)?)
    }
}

/// On-disk layout: named parameter arrays plus the metadata needed to resume.
#[derive(Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct Checkpoint<T> {
    num_classes: usize,
    feature_dim: usize,
    arrays: BTreeMap<String, Vec<T>>,
    velocity: Vec<T>,
    category_ids: Vec<u64>,
    anchors: AnchorConfig,
    image_size: (u32, u32),
    steps: usize,
    config_hash: String,
    sampler: Option<SamplerState>,
}

const ARRAY_ORDER: [&str; 4] = ["objectness", "classification", "box_regression", "mask"];

impl<T: Scalar> TrainState<T> {
    pub fn to_json(&self) -> String {
        let ck = Checkpoint {
            num_classes: self.params.num_classes,
            feature_dim: self.params.dim,
            arrays: self.params.named_arrays().into_iter().map(|(n, v)| (n.to_string(), v)).collect(),
            velocity: self.velocity.clone(),
            category_ids: self.category_ids.clone(),
            anchors: self.anchors.clone(),
            image_size: self.image_size,
            steps: self.steps,
            config_hash: self.config_hash.clone(),
            sampler: self.sampler.clone(),
        };
        serde_json::to_string(&ck).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, DetectorError> {
        let mut ck: Checkpoint<T> = serde_json::from_str(s)?;
        let mut weights = Vec::new();
        for name in ARRAY_ORDER {
            let arr = ck
                .arrays
                .remove(name)
                .ok_or_else(|| DetectorError::InvalidCheckpoint(format!("missing array {name}")))?;
            weights.extend(arr);
        }
        let params = Params { num_classes: ck.num_classes, dim: ck.feature_dim, weights };
        if params.weights.len() != params.num_outputs() * params.dim || ck.velocity.len() != params.weights.len() {
            return Err(DetectorError::InvalidCheckpoint("array sizes do not match the head shape".into()));
        }
        Ok(Self {
            params,
            velocity: ck.velocity,
            category_ids: ck.category_ids,
            anchors: ck.anchors,
            image_size: ck.image_size,
            steps: ck.steps,
            config_hash: ck.config_hash,
            sampler: ck.sampler,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DetectorError> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DetectorError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub objectness: f64,
    pub classification: f64,
    pub box_regression: f64,
    pub mask: f64,
    pub total: f64,
}

/// One telemetry record per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTelemetry {
    pub step: usize,
    pub source: Source,
    pub losses: StepLosses,
    pub ignored_anchor_count: usize,
}

/// Features and targets for one image, computed once up front.
#[derive(Debug, Clone)]
pub struct PreparedImage<T> {
    pub source: Source,
    pub features: FeatureMatrix<T>,
    pub targets: AnchorTargets<T>,
}

/// Ground truth of one image as matcher input. Filtered-out annotations are
/// kept so that their anchors can be ignored.
pub fn gt_instances<T: Scalar>(
    corpus: &Corpus,
    image_id: u64,
    class_of: &BTreeMap<u64, usize>,
) -> Result<Vec<GtInstance<T>>, DetectorError> {
    corpus
        .dataset
        .annotations_of(image_id)
        .into_iter()
        .map(|a| {
            let class = *class_of.get(&a.category_id).ok_or(DetectorError::UnknownCategory(a.category_id))?;
            Ok(GtInstance { bbox: a.bbox.cast(), class, filtered_out: a.filtered_out })
        })
        .collect()
}

pub fn prepare_corpus<T: Scalar>(
    corpus: &Corpus,
    grid: &AnchorGrid<T>,
    class_of: &BTreeMap<u64, usize>,
    image_size: (u32, u32),
) -> Result<BTreeMap<u64, PreparedImage<T>>, DetectorError> {
    let source = corpus.dataset.source;
    corpus
        .dataset
        .images
        .par_iter()
        .map(|im| {
            if (im.width, im.height) != image_size {
                return Err(DetectorError::MixedImageSizes { expected: image_size, got: (im.width, im.height) });
            }
            let px = corpus.pixels_of(im.id)?;
            let gt = gt_instances(corpus, im.id, class_of)?;
            let targets = build_targets(grid, &gt, match_anchors(grid, &gt));
            Ok((im.id, PreparedImage { source, features: featurize(px, grid), targets }))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(|v| v.into_iter().collect())
}

fn image_size_of(corpus: &Corpus) -> Result<(u32, u32), DetectorError> {
    let im = corpus.dataset.images.first().ok_or(DetectorError::EmptyDataset)?;
    Ok((im.width, im.height))
}

/// Train on `real`, interleaving batches from `synth` with probability
/// `cfg.sampler.p`; without `synth` the probability is taken as 0. `on_step`
/// sees every step's telemetry.
pub fn train_with<T: Scalar>(
    real: &Corpus,
    synth: Option<&Corpus>,
    cfg: &TrainingConfig,
    mut on_step: impl FnMut(&StepTelemetry),
) -> Result<TrainState<T>, DetectorError> {
    cfg.validate()?;
    let image_size = image_size_of(real)?;
    let category_ids: Vec<u64> = {
        let mut ids: Vec<u64> = real.dataset.categories.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids
    };
    if let Some(s) = synth {
        let mut ids: Vec<u64> = s.dataset.categories.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if ids != category_ids {
            return Err(DetectorError::CategoryMismatch);
        }
    }
    let class_of: BTreeMap<u64, usize> = category_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let grid = build_anchors::<T>(image_size.0, image_size.1, cfg.anchors.stride, &cfg.anchors.scales)?;

    let mut prepared = prepare_corpus(real, &grid, &class_of, image_size)?;
    let synth_ids: Vec<u64> = match synth {
        Some(s) if !s.dataset.images.is_empty() => {
            let p = prepare_corpus(s, &grid, &class_of, image_size)?;
            let ids: Vec<u64> = p.keys().copied().collect();
            for (id, img) in p {
                if prepared.insert(id, img).is_some() {
                    return Err(DetectorError::InvalidConfig(format!("image id {id} is both real and synthetic")));
                }
            }
            ids
        }
        _ => Vec::new(),
    };
    let real_ids: Vec<u64> = real.dataset.images.iter().map(|im| im.id).collect();
    let p = if synth.is_some() { cfg.sampler.p } else { 0.0 };
    let sampler_cfg = SamplerConfig { seed: cfg.seed, p, ..cfg.sampler };
    let mut sampler = BatchSampler::new(sampler_cfg, real_ids, synth_ids)?;

    let params = Params::<T>::zeros(category_ids.len(), feature_dim(grid.num_scales));
    let config_hash = hash_json(&(cfg, &category_ids));
    let mut state = TrainState {
        velocity: vec![T::zero(); params.weights.len()],
        params,
        category_ids,
        anchors: cfg.anchors.clone(),
        image_size,
        steps: 0,
        config_hash,
        sampler: None,
    };
    let lcfg = cfg.loss_config();
    let momentum = T::of(cfg.momentum);
    let wd = T::of(cfg.weight_decay);
    let mut grad = vec![T::zero(); state.params.weights.len()];
    for step in 0..cfg.iterations {
        let batch = sampler.next_batch();
        let scale = T::one() / T::of(batch.examples.len() as f64);
        grad.iter_mut().for_each(|g| *g = T::zero());
        let mut losses = StepLosses { objectness: 0.0, classification: 0.0, box_regression: 0.0, mask: 0.0, total: 0.0 };
        let mut ignored = 0;
        for id in &batch.examples {
            let img = &prepared[id];
            let out = forward(&state.params, &img.features)?;
            let (b, g) = loss_and_grad(&out, &img.targets, img.source, &lcfg);
            backward_into(&img.features, &g, scale, &mut grad);
            losses.objectness += b.objectness_loss;
            losses.classification += b.classification_loss;
            losses.box_regression += b.box_regression_loss;
            losses.mask += b.mask_loss;
            losses.total += b.total;
            ignored += b.ignored_anchor_count();
        }
        let n = batch.examples.len() as f64;
        for v in [&mut losses.objectness, &mut losses.classification, &mut losses.box_regression, &mut losses.mask, &mut losses.total] {
            *v /= n;
        }
        if !losses.total.is_finite() {
            return Err(DetectorError::Diverged { step });
        }
        let lr = T::of(cfg.lr_at(step));
        for ((w, v), &g) in state.params.weights.iter_mut().zip(state.velocity.iter_mut()).zip(&grad) {
            *v = momentum * *v + g + wd * *w;
            *w = *w - lr * *v;
        }
        state.steps = step + 1;
        on_step(&StepTelemetry { step, source: batch.source, losses, ignored_anchor_count: ignored });
    }
    state.sampler = Some(sampler.state());
    Ok(state)
}

pub fn train<T: Scalar>(real: &Corpus, synth: Option<&Corpus>, cfg: &TrainingConfig) -> Result<TrainState<T>, DetectorError> {
    train_with(real, synth, cfg, |_| {})
}
