use std::fmt::Display;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use synthdet::corpus::{build_toy_corpus, load_corpus, save_corpus, Corpus};
use synthdet::dataset::Source;
use synthdet::detector::TrainState;
use synthdet::evaluator::format_table;
use synthdet::pipeline::{
    run_pipeline_from, run_sweep, stage_evaluate, stage_filter_images, stage_filter_instances, stage_generate,
    stage_train, write_report, PipelineConfig, PipelineError, Stage, SweepAxis,
};

#[derive(Parser)]
#[command(name = "synthdet", version, about = "Synthetic data pipeline for object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML configuration file; defaults apply when absent.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any key, e.g. `--set training.tau_i=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigArgs {
    fn load(&self, extra: Vec<String>) -> Result<PipelineConfig, PipelineError> {
        let mut overrides = Vec::new();
        if let Some(p) = &self.preset {
            overrides.push(format!("preset={p:?}"));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        overrides.extend(extra);
        overrides.extend(self.set.iter().cloned());
        match &self.config {
            Some(path) => PipelineConfig::load(path, &overrides),
            None => PipelineConfig::from_toml_with_overrides("", &overrides),
        }
    }
}

/// Flag-to-key sugar shared by several subcommands.
fn opt<T: Display>(key: &str, v: Option<T>) -> Option<String> {
    v.map(|v| format!("{key}={v}"))
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Write a toy glyph corpus (COCO JSON plus PNGs).
    Toy {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic copies of a real corpus.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        copies: Option<u32>,
        /// Inpainting service; the built-in mock is used otherwise.
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Drop synthetic images below the aesthetic threshold.
    FilterImages {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tau_a: Option<f64>,
        /// Per-image decisions as JSON lines.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Flag synthetic annotations a real-data detector does not support.
    FilterInstances {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tau_s: Option<f64>,
        #[arg(long)]
        tau_iou: Option<f64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train a detector on real data, optionally mixed with synthetic data.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        tau_i: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Per-step losses as JSON lines.
        #[arg(long)]
        telemetry: Option<PathBuf>,
    },
    /// Evaluate a trained detector on a test corpus.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage, resuming from finished ones.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Recompute this stage and all later ones.
        #[arg(long)]
        from: Option<String>,
    },
    /// Run the pipeline once per value of one parameter.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// One of p, tau_s, tau_iou, tau_i, copies, fraction.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Tables and plots from finished runs.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Failure {
    stage: String,
    message: String,
}

fn at<E: Display>(stage: &str) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure { stage: stage.to_string(), message: e.to_string() }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let stage = match &e {
            PipelineError::Stage { stage, .. } => stage.name().to_string(),
            PipelineError::Io { .. } => "io".to_string(),
            _ => "config".to_string(),
        };
        Failure { stage, message: e.to_string() }
    }
}

fn load(stage: &str, path: &Path) -> Result<Corpus, Failure> {
    load_corpus(path).map_err(|e| Failure { stage: stage.to_string(), message: format!("{}: {e}", path.display()) })
}

fn write_lines(stage: &str, path: &Path, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), Failure> {
    let run = || -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        f(&mut w)?;
        w.flush()
    };
    run().map_err(|e| Failure { stage: stage.to_string(), message: format!("{}: {e}", path.display()) })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Toy { cfg, split, out } => {
            let c = cfg.load(Vec::new())?;
            let toy = match split {
                Split::Train => &c.data.toy_train,
                Split::Test => &c.data.toy_test,
            };
            let corpus = build_toy_corpus(toy).map_err(at("toy"))?;
            save_corpus(&corpus, &out).map_err(at("toy"))?;
            println!("wrote {} images to {}", corpus.dataset.images.len(), out.display());
        }
        Command::Generate { cfg, real, out, copies, endpoint } => {
            let extra = [opt("generation.copies", copies), opt("generation.endpoint", endpoint.map(|e| format!("{e:?}")))];
            let c = cfg.load(extra.into_iter().flatten().collect())?;
            let real = load("generate", &real)?;
            let synth = stage_generate(&c, &real)?;
            save_corpus(&synth, &out).map_err(at("generate"))?;
            println!("generated {} images", synth.dataset.images.len());
        }
        Command::FilterImages { cfg, input, out, tau_a, report } => {
            let c = cfg.load(opt("image_filter.tau_a", tau_a).into_iter().collect())?;
            let synth = load("filter-images", &input)?;
            let (kept, rep) = stage_filter_images(&c, &synth)?;
            save_corpus(&kept, &out).map_err(at("filter-images"))?;
            if let (Some(path), Some(rep)) = (report, &rep) {
                write_lines("filter-images", &path, |w| rep.write_jsonl(w))?;
            }
            println!("kept {} of {} images", kept.dataset.images.len(), synth.dataset.images.len());
        }
        Command::FilterInstances { cfg, real, input, out, tau_s, tau_iou, report } => {
            let extra = [opt("detector_filter.tau_s", tau_s), opt("detector_filter.tau_iou", tau_iou)];
            let c = cfg.load(extra.into_iter().flatten().collect())?;
            let real = load("filter-instances", &real)?;
            let synth = load("filter-instances", &input)?;
            let o = stage_filter_instances(&c, &real, &synth)?;
            save_corpus(&o.synth, &out).map_err(at("filter-instances"))?;
            if let (Some(path), Some(rep)) = (report, &o.report) {
                write_lines("filter-instances", &path, |w| rep.write_jsonl(w))?;
            }
            let flagged = o.synth.dataset.annotations.iter().filter(|a| a.filtered_out).count();
            println!("flagged {flagged} of {} annotations", o.synth.dataset.annotations.len());
        }
        Command::Train { cfg, real, synthetic, out, p, tau_i, iterations, telemetry } => {
            let extra = [opt("training.sampler.p", p), opt("training.tau_i", tau_i), opt("training.iterations", iterations)];
            let c = cfg.load(extra.into_iter().flatten().collect())?;
            let real = load("train", &real)?;
            let synth = match synthetic {
                Some(p) => load("train", &p)?,
                None => real.empty_like(Source::Synthetic),
            };
            let mut sink = Vec::new();
            let (model, p_eff) = stage_train(&c, &real, &synth, &mut sink)?;
            if let Some(path) = telemetry {
                write_lines("train", &path, |w| w.write_all(&sink))?;
            }
            model.save(&out).map_err(at("train"))?;
            println!("trained {} steps (synthetic batch probability {p_eff:.3})", model.steps);
        }
        Command::Evaluate { cfg, model, test, out } => {
            let c = cfg.load(Vec::new())?;
            let model = TrainState::<f64>::load(&model).map_err(at("evaluate"))?;
            let test = load("evaluate", &test)?;
            let (_, eval) = stage_evaluate(&model, &test, c.evaluation.score_floor)?;
            if let Some(path) = out {
                let body = serde_json::to_string_pretty(&eval).map_err(at("evaluate"))?;
                write_lines("evaluate", &path, |w| w.write_all(body.as_bytes()))?;
            }
            print!("{}", format_table(&[("model".to_string(), &eval)]));
        }
        Command::Run { cfg, out_dir, from } => {
            let c = cfg.load(opt("output_dir", out_dir.map(|d| format!("{:?}", d.display().to_string()))).into_iter().collect())?;
            let from = match from {
                Some(s) => Some(Stage::parse(&s).ok_or_else(|| Failure {
                    stage: "config".into(),
                    message: format!("unknown stage {s:?}"),
                })?),
                None => None,
            };
            let r = run_pipeline_from(&c, from)?;
            print!("{}", format_table(&[(r.label.clone(), &r.eval)]));
        }
        Command::Sweep { cfg, out_dir, axis, values } => {
            let c = cfg.load(opt("output_dir", out_dir.map(|d| format!("{:?}", d.display().to_string()))).into_iter().collect())?;
            let axis = SweepAxis::parse(&axis)?;
            let reports = run_sweep(&c, axis, &values)?;
            let rows: Vec<(String, _)> = reports.iter().map(|r| (format!("{}={}", axis.name(), r.sweep.as_ref().map_or(f64::NAN, |p| p.value)), &r.eval)).collect();
            print!("{}", format_table(&rows));
        }
        Command::Report { runs, out } => {
            for p in write_report(&runs, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error [{}]: {}", f.stage, f.message);
            ExitCode::FAILURE
        }
    }
}
