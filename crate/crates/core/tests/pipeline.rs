use std::path::Path;

use synthdet::pipeline::*;

/// A quick configuration: short training, default corpora.
fn quick(dir: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.output_dir = dir.to_path_buf();
    c.training.iterations = 200;
    c.training.lr_step = None;
    c.detector_filter.detector.iterations = 200;
    c.detector_filter.detector.lr_step = None;
    c
}

#[test]
fn resume_reuses_every_stage_and_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path());
    let first = run_pipeline(&cfg).unwrap();
    assert!(first.stages.iter().all(|s| !s.resumed));
    assert_eq!(first.stages.len(), Stage::ALL.len());
    assert!(first.data.synthetic_generated > 0);
    assert!(first.detector_filter.is_some() && first.image_filter.is_some());
    for f in ["run_report.json", "reports/eval.json", "reports/detections.jsonl", "models/detector.json", "config.toml"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }

    let again = run_pipeline(&cfg).unwrap();
    assert!(again.stages.iter().all(|s| s.resumed));
    assert_eq!(first.content_hash(), again.content_hash());

    // A training change keeps the data and filter stages.
    let mut changed = cfg.clone();
    changed.training.tau_i = 0.3;
    let r = run_pipeline(&changed).unwrap();
    let resumed: Vec<bool> = r.stages.iter().map(|s| s.resumed).collect();
    assert_eq!(resumed, [true, true, true, true, false, false]);

    // Forcing a rerun from generation recomputes everything after it.
    let r = run_pipeline_from(&changed, Some(Stage::Generate)).unwrap();
    assert_eq!(r.stages.iter().filter(|s| s.resumed).count(), 1);
}

#[test]
fn fresh_runs_are_bit_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_pipeline(&quick(a.path())).unwrap();
    let rb = run_pipeline(&quick(b.path())).unwrap();
    assert_eq!(ra.eval, rb.eval);
    assert_eq!(ra.content_hash().len(), 64);
    // Labels come from the directory names, which differ.
    assert_eq!(ra.config_hash, rb.config_hash);
}

#[test]
fn real_only_run_skips_synthetic_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(dir.path());
    cfg.training.sampler.p = 0.0;
    cfg.stages = StageToggles::all_off();
    let r = run_pipeline(&cfg).unwrap();
    assert_eq!(r.data.effective_p, 0.0);
    assert!(r.image_filter.is_none() && r.detector_filter.is_none());
}

#[test]
fn naive_mix_uses_pool_proportions() {
    let mut cfg = PipelineConfig::default();
    cfg.stages.use_sampling = false;
    assert!((effective_p(&cfg, 100, 200) - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(effective_p(&cfg, 100, 0), 0.0);
    cfg.stages.use_sampling = true;
    assert_eq!(effective_p(&cfg, 100, 200), 0.2);
    cfg.training.sampler.p = 0.0;
    cfg.stages.use_sampling = false;
    assert_eq!(effective_p(&cfg, 100, 200), 0.0);
}

#[test]
fn missing_real_corpus_names_the_data_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(dir.path());
    cfg.data.real = Some(dir.path().join("nope.json"));
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::Data));
    assert!(err.to_string().contains("stage data failed"));
}

#[test]
fn sweep_points_land_in_their_own_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path());
    let reports = run_sweep(&cfg, SweepAxis::TauI, &[0.0, 0.5]).unwrap();
    assert_eq!(reports.len(), 2);
    for (r, v) in reports.iter().zip([0.0, 0.5]) {
        assert_eq!(r.sweep, Some(SweepPoint { axis: "tau_i".into(), value: v }));
        assert!(dir.path().join(format!("tau_i={v}/run_report.json")).is_file());
    }
    assert!(matches!(SweepAxis::parse("lr"), Err(PipelineError::InvalidAxis(_))));
    assert!(matches!(run_sweep(&cfg, SweepAxis::Copies, &[1.5]), Err(PipelineError::InvalidValue { .. })));
    assert!(matches!(run_sweep(&cfg, SweepAxis::Fraction, &[0.0]), Err(PipelineError::InvalidValue { .. })));

    let out = dir.path().join("report");
    let written = write_report(dir.path(), &out).unwrap();
    let md = std::fs::read_to_string(out.join("report.md")).unwrap();
    assert_eq!(md.lines().count(), 2 + 2);
    assert!(md.contains("tau_i=0.5"));
    let svg = std::fs::read_to_string(out.join("sweep_tau_i.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("τ_i"));
    assert!(written.iter().any(|p| p.file_name().unwrap().to_string_lossy().starts_with("pr_")));
}

#[test]
fn report_needs_runs() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(write_report(dir.path(), &dir.path().join("out")), Err(PipelineError::Config(_))));
}
