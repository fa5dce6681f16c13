//! Stage-by-stage execution with persisted, resumable artifacts.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, ScorerConfig};
use super::PipelineError;
use crate::corpus::{build_toy_corpus, load_corpus, save_corpus, Corpus};
use crate::dataset::{self, assign_frequency_buckets, subsample, Source};
use crate::detection::{self, Detection};
use crate::detector::{TrainState, TrainingConfig, DEFAULT_SCORE_FLOOR};
use crate::detector_filter::{apply_filter, predict_corpus, train_filter_detector, FilterReport};
use crate::evaluator::{evaluate, EvalResult};
use crate::generation::{generate_synthetic_dataset, Generator, HttpGenerator, MockGenConfig, MockGenerator};
use crate::glyph::GlyphPalette;
use crate::hash::hash_json;
use crate::image_filter::{
    filter_by_score, score_images, AestheticScorer, ConstantScorer, CorruptionDensityScorer, HttpScorer, ImageFilterReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Data,
    Generate,
    FilterImages,
    FilterInstances,
    Train,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::Data, Stage::Generate, Stage::FilterImages, Stage::FilterInstances, Stage::Train, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Generate => "generate",
            Stage::FilterImages => "filter-images",
            Stage::FilterInstances => "filter-instances",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn stage_err<E: std::error::Error + Send + Sync + 'static>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage { stage, source: Box::new(e) }
}

/// Artifact locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn real(&self) -> PathBuf {
        self.root.join("real/dataset.json")
    }
    pub fn test(&self) -> PathBuf {
        self.root.join("test/dataset.json")
    }
    pub fn generated(&self) -> PathBuf {
        self.root.join("synthetic/generated.json")
    }
    pub fn image_filtered(&self) -> PathBuf {
        self.root.join("synthetic/image_filtered.json")
    }
    pub fn instance_filtered(&self) -> PathBuf {
        self.root.join("synthetic/instance_filtered.json")
    }
    pub fn image_report(&self) -> PathBuf {
        self.root.join("reports/image_filter.jsonl")
    }
    pub fn instance_report(&self) -> PathBuf {
        self.root.join("reports/instance_filter.jsonl")
    }
    pub fn filter_predictions(&self) -> PathBuf {
        self.root.join("reports/filter_predictions.jsonl")
    }
    pub fn filter_detector(&self) -> PathBuf {
        self.root.join("models/filter_detector.json")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("models/detector.json")
    }
    pub fn telemetry(&self) -> PathBuf {
        self.root.join("reports/train_telemetry.jsonl")
    }
    pub fn detections(&self) -> PathBuf {
        self.root.join("reports/detections.jsonl")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("reports/eval.json")
    }
    pub fn run_report(&self) -> PathBuf {
        self.root.join("run_report.json")
    }
    fn marker(&self, stage: Stage) -> PathBuf {
        self.root.join("stages").join(format!("{}.json", stage.name()))
    }
    fn stage_state(&self, stage: Stage) -> PathBuf {
        self.root.join("stages").join(format!("{}.state.json", stage.name()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Marker {
    stage: Stage,
    key: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// Hash of every setting that influences this stage and those before it.
    pub key: String,
    pub resumed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub real_images: usize,
    pub test_images: usize,
    pub synthetic_generated: usize,
    pub synthetic_after_image_filter: usize,
    pub synthetic_annotations: usize,
    pub annotations_flagged: usize,
    /// Probability of a synthetic batch actually used in training.
    pub effective_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub config_hash: String,
    pub sweep: Option<SweepPoint>,
    pub stages: Vec<StageRecord>,
    pub data: DataSummary,
    pub image_filter: Option<ImageFilterReport>,
    pub detector_filter: Option<FilterReport>,
    pub eval: EvalResult,
    pub wall_time_secs: f64,
}

impl RunReport {
    /// Hash of the report without wall time and resume flags: equal for
    /// any two runs of the same configuration.
    pub fn content_hash(&self) -> String {
        let mut r = self.clone();
        r.wall_time_secs = 0.0;
        for s in &mut r.stages {
            s.resumed = false;
        }
        hash_json(&r)
    }
}

/// Real-world glyph palette matching the toy corpus for the dataset's
/// categories (evenly spaced hues in category order).
pub fn palette_for(d: &dataset::Dataset, hue_jitter: f64) -> GlyphPalette {
    let ids: Vec<u64> = d.categories.iter().map(|c| c.id).collect();
    GlyphPalette::evenly_spaced(&ids, hue_jitter)
}

/// The mock generator's palette: the real one with every hue shifted by
/// `hue_bias` of the spacing between categories.
pub fn generator_palette(d: &dataset::Dataset, hue_jitter: f64, hue_bias: f64) -> GlyphPalette {
    let mut p = palette_for(d, hue_jitter);
    let spacing = 360.0 / p.glyphs.len().max(1) as f64;
    for g in p.glyphs.values_mut() {
        g.hue = (g.hue + hue_bias * spacing).rem_euclid(360.0);
    }
    p
}

pub fn stage_data(cfg: &PipelineConfig) -> Result<(Corpus, Corpus), PipelineError> {
    let err = stage_err(Stage::Data);
    let full = match &cfg.data.real {
        Some(p) => load_corpus(p).map_err(err)?,
        None => build_toy_corpus(&cfg.data.toy_train).map_err(stage_err(Stage::Data))?,
    };
    let mut real = full.clone();
    if cfg.data.fraction < 1.0 {
        let d = subsample(&full.dataset, cfg.data.fraction, cfg.seed).map_err(stage_err(Stage::Data))?;
        real = full.with_dataset(assign_frequency_buckets(&d));
    }
    let mut test = match &cfg.data.test {
        Some(p) => load_corpus(p).map_err(stage_err(Stage::Data))?,
        None => build_toy_corpus(&cfg.data.toy_test).map_err(stage_err(Stage::Data))?,
    };
    // Frequency buckets are defined by the training set.
    test.dataset.categories = real.dataset.categories.clone();
    Ok((real, test))
}

pub fn stage_generate(cfg: &PipelineConfig, real: &Corpus) -> Result<Corpus, PipelineError> {
    let g = &cfg.generation;
    if g.copies == 0 {
        return Ok(real.empty_like(Source::Synthetic));
    }
    let generator: Box<dyn Generator> = match &g.endpoint {
        Some(endpoint) => Box::new(HttpGenerator { endpoint: endpoint.clone(), retry: Default::default() }),
        None => {
            let mut mock = MockGenConfig::new(generator_palette(&real.dataset, g.hue_jitter, g.hue_bias), g.corruption_rate, g.hallucination_rate);
            mock.forced_kind = g.forced_kind;
            mock.hallucination_attempts = g.hallucination_attempts;
            if g.frequency_weighted {
                mock.category_weights = real.dataset.categories.iter().map(|c| (c.id, c.image_count as f64)).collect();
            }
            Box::new(MockGenerator { config: mock })
        }
    };
    generate_synthetic_dataset(real, g.copies, cfg.seed ^ 0x5eed_0001, generator.as_ref(), g.max_in_flight)
        .map_err(stage_err(Stage::Generate))
}

pub fn stage_filter_images(
    cfg: &PipelineConfig,
    synth: &Corpus,
) -> Result<(Corpus, Option<ImageFilterReport>), PipelineError> {
    if !cfg.stages.use_image_filter || synth.dataset.images.is_empty() {
        return Ok((synth.clone(), None));
    }
    let err = stage_err(Stage::FilterImages);
    let scorer: Box<dyn AestheticScorer> = match &cfg.image_filter.scorer {
        ScorerConfig::Mock => Box::new(CorruptionDensityScorer::from_dataset(&synth.dataset)),
        ScorerConfig::Constant { score } => Box::new(ConstantScorer(*score)),
        ScorerConfig::Http { endpoint } => Box::new(HttpScorer { endpoint: endpoint.clone(), retry: Default::default() }),
    };
    let scored = score_images(synth, scorer.as_ref()).map_err(err)?;
    let (kept, report) =
        filter_by_score(&scored.dataset, &cfg.image_filter.filter_config()).map_err(stage_err(Stage::FilterImages))?;
    Ok((scored.with_dataset(kept), Some(report)))
}

pub struct InstanceStageOutput {
    pub synth: Corpus,
    pub report: Option<FilterReport>,
    pub detector: Option<TrainState<f64>>,
    pub predictions: Vec<Detection>,
}

pub fn stage_filter_instances(
    cfg: &PipelineConfig,
    real: &Corpus,
    synth: &Corpus,
) -> Result<InstanceStageOutput, PipelineError> {
    if !cfg.stages.use_detector_filter || synth.dataset.images.is_empty() {
        return Ok(InstanceStageOutput { synth: synth.clone(), report: None, detector: None, predictions: Vec::new() });
    }
    let err = || stage_err(Stage::FilterInstances);
    let dcfg = TrainingConfig { seed: cfg.seed, ..cfg.detector_filter.detector.clone() };
    let det = train_filter_detector::<f64>(real, &dcfg).map_err(err())?;
    let fcfg = cfg.detector_filter.filter_config();
    let preds = predict_corpus(synth, &det, DEFAULT_SCORE_FLOOR.min(fcfg.tau_s)).map_err(err())?;
    let (flagged, report) = apply_filter(&synth.dataset, &preds, &fcfg).map_err(err())?;
    Ok(InstanceStageOutput { synth: synth.with_dataset(flagged), report: Some(report), detector: Some(det), predictions: preds })
}

/// Probability of a synthetic batch. `p = 0` or an empty synthetic pool
/// means real-only training; without sampling, pools are mixed in
/// proportion to their sizes.
pub fn effective_p(cfg: &PipelineConfig, n_real: usize, n_synth: usize) -> f64 {
    let p = cfg.training.sampler.p;
    if n_synth == 0 || p == 0.0 {
        0.0
    } else if cfg.stages.use_sampling {
        p
    } else {
        n_synth as f64 / (n_real + n_synth) as f64
    }
}

pub fn training_config(cfg: &PipelineConfig, p: f64) -> TrainingConfig {
    let mut t = cfg.training.clone();
    t.seed = cfg.seed;
    t.sampler.p = p;
    t.bg_ignore = cfg.stages.use_bg_ignore;
    t
}

pub fn stage_train(
    cfg: &PipelineConfig,
    real: &Corpus,
    synth: &Corpus,
    telemetry: &mut dyn Write,
) -> Result<(TrainState<f64>, f64), PipelineError> {
    let p = effective_p(cfg, real.dataset.images.len(), synth.dataset.images.len());
    let tcfg = training_config(cfg, p);
    let mut io_err = None;
    let state = crate::detector::train_with::<f64>(real, (p > 0.0).then_some(synth), &tcfg, |t| {
        if io_err.is_none() {
            if let Err(e) = serde_json::to_writer(&mut *telemetry, t).map_err(std::io::Error::from).and_then(|_| telemetry.write_all(b"\n")) {
                io_err = Some(e);
            }
        }
    })
    .map_err(stage_err(Stage::Train))?;
    if let Some(e) = io_err {
        return Err(PipelineError::Stage { stage: Stage::Train, source: Box::new(e) });
    }
    Ok((state, p))
}

pub fn stage_evaluate(
    state: &TrainState<f64>,
    test: &Corpus,
    score_floor: f64,
) -> Result<(Vec<Detection>, EvalResult), PipelineError> {
    let dets = predict_corpus(test, state, score_floor).map_err(stage_err(Stage::Evaluate))?;
    let eval = evaluate(&dets, &test.dataset).map_err(stage_err(Stage::Evaluate))?;
    Ok((dets, eval))
}

fn write_jsonl_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    f(&mut w)?;
    w.flush()
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(v).map_err(std::io::Error::from)?)
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Option<D> {
    serde_json::from_str(&fs::read_to_string(path).ok()?).ok()
}

/// Save a synthetic dataset whose pixels already sit next to `generated.json`.
fn save_synthetic_annotations(d: &dataset::Dataset, path: &Path) -> Result<(), dataset::DatasetError> {
    dataset::save_dataset(d, path)
}

/// Small per-stage state that is not itself a dataset or model.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageState {
    image_report: Option<ImageFilterReport>,
    instance_report: Option<FilterReport>,
    effective_p: Option<f64>,
    eval: Option<EvalResult>,
}

/// Run every stage in order, reusing artifacts whose stage key matches.
/// Stages at or after `rerun_from` are recomputed unconditionally.
pub fn run_pipeline_from(cfg: &PipelineConfig, rerun_from: Option<Stage>) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    let t0 = Instant::now();
    let out = Layout::new(&cfg.output_dir);
    fs::create_dir_all(&out.root).map_err(|e| PipelineError::Io { path: out.root.clone(), source: e })?;
    fs::write(out.root.join("config.toml"), cfg.to_toml_string())
        .map_err(|e| PipelineError::Io { path: out.root.join("config.toml"), source: e })?;

    let s = &cfg.stages;
    let keys = {
        let k_data = hash_json(&("data", cfg.seed, &cfg.data));
        let k_gen = hash_json(&(&k_data, "generate", &cfg.generation));
        let k_img = hash_json(&(&k_gen, "filter-images", s.use_image_filter, &cfg.image_filter));
        let k_inst = hash_json(&(&k_img, "filter-instances", s.use_detector_filter, &cfg.detector_filter));
        let k_train = hash_json(&(&k_inst, "train", s.use_sampling, s.use_bg_ignore, &cfg.training));
        let k_eval = hash_json(&(&k_train, "evaluate", &cfg.evaluation));
        [k_data, k_gen, k_img, k_inst, k_train, k_eval]
    };
    let mut records = Vec::new();
    let mut upstream_rerun = false;
    // A stage is reused iff nothing before it ran, its marker matches and
    // its artifacts load.
    let reusable = |stage: Stage, key: &str, upstream_rerun: bool| -> bool {
        let forced = rerun_from.is_some_and(|r| stage >= r);
        !forced && !upstream_rerun && read_json::<Marker>(&out.marker(stage)).is_some_and(|m| m.key == key)
    };
    let finish = |stage: Stage, key: &str, state: &StageState| -> Result<(), PipelineError> {
        let io = |path: PathBuf| move |e| PipelineError::Io { path: path.clone(), source: e };
        write_json(&out.stage_state(stage), state).map_err(io(out.stage_state(stage)))?;
        write_json(&out.marker(stage), &Marker { stage, key: key.to_string() }).map_err(io(out.marker(stage)))
    };

    // Data.
    let (real, test, resumed) = match reusable(Stage::Data, &keys[0], upstream_rerun)
        .then(|| Some((load_corpus(out.real()).ok()?, load_corpus(out.test()).ok()?)))
        .flatten()
    {
        Some((r, t)) => (r, t, true),
        None => {
            let (r, t) = stage_data(cfg)?;
            save_corpus(&r, out.real()).map_err(stage_err(Stage::Data))?;
            save_corpus(&t, out.test()).map_err(stage_err(Stage::Data))?;
            finish(Stage::Data, &keys[0], &StageState { image_report: None, instance_report: None, effective_p: None, eval: None })?;
            (r, t, false)
        }
    };
    upstream_rerun |= !resumed;
    records.push(StageRecord { stage: Stage::Data, key: keys[0].clone(), resumed });

    // Generation.
    let (generated, resumed) = match reusable(Stage::Generate, &keys[1], upstream_rerun)
        .then(|| load_corpus(out.generated()).ok())
        .flatten()
    {
        Some(c) => (c, true),
        None => {
            let c = stage_generate(cfg, &real)?;
            save_corpus(&c, out.generated()).map_err(stage_err(Stage::Generate))?;
            finish(Stage::Generate, &keys[1], &StageState { image_report: None, instance_report: None, effective_p: None, eval: None })?;
            (c, false)
        }
    };
    upstream_rerun |= !resumed;
    records.push(StageRecord { stage: Stage::Generate, key: keys[1].clone(), resumed });

    // Image filter. Pixels stay with the generated set.
    let reuse = reusable(Stage::FilterImages, &keys[2], upstream_rerun)
        .then(|| {
            let d = dataset::load_dataset(out.image_filtered()).ok()?;
            let st: StageState = read_json(&out.stage_state(Stage::FilterImages))?;
            Some((generated.with_dataset(d), st.image_report))
        })
        .flatten();
    let (after_images, image_report, resumed) = match reuse {
        Some((c, r)) => (c, r, true),
        None => {
            let (c, r) = stage_filter_images(cfg, &generated)?;
            save_synthetic_annotations(&c.dataset, &out.image_filtered()).map_err(stage_err(Stage::FilterImages))?;
            if let Some(r) = &r {
                write_jsonl_file(&out.image_report(), |w| r.write_jsonl(w))
                    .map_err(|e| PipelineError::Io { path: out.image_report(), source: e })?;
            }
            finish(Stage::FilterImages, &keys[2], &StageState { image_report: r.clone(), instance_report: None, effective_p: None, eval: None })?;
            (c, r, false)
        }
    };
    upstream_rerun |= !resumed;
    records.push(StageRecord { stage: Stage::FilterImages, key: keys[2].clone(), resumed });

    // Instance filter.
    let reuse = reusable(Stage::FilterInstances, &keys[3], upstream_rerun)
        .then(|| {
            let d = dataset::load_dataset(out.instance_filtered()).ok()?;
            let st: StageState = read_json(&out.stage_state(Stage::FilterInstances))?;
            Some((generated.with_dataset(d), st.instance_report))
        })
        .flatten();
    let (synth, instance_report, resumed) = match reuse {
        Some((c, r)) => (c, r, true),
        None => {
            let o = stage_filter_instances(cfg, &real, &after_images)?;
            save_synthetic_annotations(&o.synth.dataset, &out.instance_filtered()).map_err(stage_err(Stage::FilterInstances))?;
            if let Some(det) = &o.detector {
                det.save(out.filter_detector()).map_err(stage_err(Stage::FilterInstances))?;
                write_jsonl_file(&out.filter_predictions(), |w| detection::write_jsonl(&o.predictions, w))
                    .map_err(|e| PipelineError::Io { path: out.filter_predictions(), source: e })?;
            }
            if let Some(r) = &o.report {
                write_jsonl_file(&out.instance_report(), |w| r.write_jsonl(w))
                    .map_err(|e| PipelineError::Io { path: out.instance_report(), source: e })?;
            }
            finish(Stage::FilterInstances, &keys[3], &StageState { image_report: None, instance_report: o.report.clone(), effective_p: None, eval: None })?;
            (o.synth, o.report, false)
        }
    };
    upstream_rerun |= !resumed;
    records.push(StageRecord { stage: Stage::FilterInstances, key: keys[3].clone(), resumed });

    // Training.
    let reuse = reusable(Stage::Train, &keys[4], upstream_rerun)
        .then(|| {
            let m = TrainState::<f64>::load(out.model()).ok()?;
            let st: StageState = read_json(&out.stage_state(Stage::Train))?;
            Some((m, st.effective_p?))
        })
        .flatten();
    let (model, p_eff, resumed) = match reuse {
        Some((m, p)) => (m, p, true),
        None => {
            let path = out.telemetry();
            let mut sink = Vec::new();
            let (m, p) = stage_train(cfg, &real, &synth, &mut sink)?;
            write_jsonl_file(&path, |w| w.write_all(&sink)).map_err(|e| PipelineError::Io { path: path.clone(), source: e })?;
            m.save(out.model()).map_err(stage_err(Stage::Train))?;
            finish(Stage::Train, &keys[4], &StageState { image_report: None, instance_report: None, effective_p: Some(p), eval: None })?;
            (m, p, false)
        }
    };
    upstream_rerun |= !resumed;
    records.push(StageRecord { stage: Stage::Train, key: keys[4].clone(), resumed });

    // Evaluation.
    let reuse = reusable(Stage::Evaluate, &keys[5], upstream_rerun)
        .then(|| read_json::<StageState>(&out.stage_state(Stage::Evaluate))?.eval)
        .flatten();
    let (eval, resumed) = match reuse {
        Some(e) => (e, true),
        None => {
            let (dets, eval) = stage_evaluate(&model, &test, cfg.evaluation.score_floor)?;
            write_jsonl_file(&out.detections(), |w| detection::write_jsonl(&dets, w))
                .map_err(|e| PipelineError::Io { path: out.detections(), source: e })?;
            write_json(&out.eval(), &eval).map_err(|e| PipelineError::Io { path: out.eval(), source: e })?;
            finish(Stage::Evaluate, &keys[5], &StageState { image_report: None, instance_report: None, effective_p: None, eval: Some(eval.clone()) })?;
            (eval, false)
        }
    };
    records.push(StageRecord { stage: Stage::Evaluate, key: keys[5].clone(), resumed });

    let report = RunReport {
        label: cfg.output_dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        config_hash: cfg.hash(),
        sweep: None,
        stages: records,
        data: DataSummary {
            real_images: real.dataset.images.len(),
            test_images: test.dataset.images.len(),
            synthetic_generated: generated.dataset.images.len(),
            synthetic_after_image_filter: after_images.dataset.images.len(),
            synthetic_annotations: synth.dataset.annotations.len(),
            annotations_flagged: synth.dataset.annotations.iter().filter(|a| a.filtered_out).count(),
            effective_p: p_eff,
        },
        image_filter: image_report,
        detector_filter: instance_report,
        eval,
        wall_time_secs: t0.elapsed().as_secs_f64(),
    };
    write_json(&out.run_report(), &report).map_err(|e| PipelineError::Io { path: out.run_report(), source: e })?;
    Ok(report)
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    run_pipeline_from(cfg, None)
}
