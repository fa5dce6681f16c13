//! One-dimensional parameter sweeps over a base configuration.

use rayon::prelude::*;

use super::config::PipelineConfig;
use super::run::{run_pipeline, RunReport, SweepPoint};
use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    P,
    TauS,
    TauIou,
    TauI,
    Copies,
    Fraction,
}

pub const SWEEP_AXES: [SweepAxis; 6] =
    [SweepAxis::P, SweepAxis::TauS, SweepAxis::TauIou, SweepAxis::TauI, SweepAxis::Copies, SweepAxis::Fraction];

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::P => "p",
            SweepAxis::TauS => "tau_s",
            SweepAxis::TauIou => "tau_iou",
            SweepAxis::TauI => "tau_i",
            SweepAxis::Copies => "copies",
            SweepAxis::Fraction => "fraction",
        }
    }

    /// Symbol used on plot axes.
    pub fn symbol(self) -> &'static str {
        match self {
            SweepAxis::P => "p",
            SweepAxis::TauS => "τ_s",
            SweepAxis::TauIou => "τ_iou",
            SweepAxis::TauI => "τ_i",
            SweepAxis::Copies => "k",
            SweepAxis::Fraction => "fraction",
        }
    }

    pub fn parse(s: &str) -> Result<SweepAxis, PipelineError> {
        SWEEP_AXES.into_iter().find(|a| a.name() == s).ok_or_else(|| PipelineError::InvalidAxis(s.to_string()))
    }

    pub fn check(self, value: f64) -> Result<(), PipelineError> {
        let ok = match self {
            SweepAxis::P | SweepAxis::TauS | SweepAxis::TauIou | SweepAxis::TauI => (0.0..=1.0).contains(&value),
            SweepAxis::Copies => value >= 0.0 && value.fract() == 0.0 && value <= u32::MAX as f64,
            SweepAxis::Fraction => value > 0.0 && value <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(PipelineError::InvalidValue { axis: self.name().to_string(), value })
        }
    }

    pub fn apply(self, cfg: &mut PipelineConfig, value: f64) -> Result<(), PipelineError> {
        self.check(value)?;
        match self {
            SweepAxis::P => cfg.training.sampler.p = value,
            SweepAxis::TauS => cfg.detector_filter.tau_s = value,
            SweepAxis::TauIou => cfg.detector_filter.tau_iou = value,
            SweepAxis::TauI => cfg.training.tau_i = value,
            SweepAxis::Copies => cfg.generation.copies = value as u32,
            SweepAxis::Fraction => cfg.data.fraction = value,
        }
        Ok(())
    }
}

/// Run `base` once per value, each in `base.output_dir/<axis>=<value>`.
/// Points run in parallel; results come back in the order of `values`.
pub fn run_sweep(base: &PipelineConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<RunReport>, PipelineError> {
    let cfgs = values
        .iter()
        .map(|&v| {
            let mut c = base.clone();
            axis.apply(&mut c, v)?;
            c.output_dir = base.output_dir.join(format!("{}={v}", axis.name()));
            Ok(c)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    cfgs.par_iter()
        .zip(values.par_iter())
        .map(|(c, &v)| {
            let mut r = run_pipeline(c)?;
            r.sweep = Some(SweepPoint { axis: axis.name().to_string(), value: v });
            let path = super::run::Layout::new(&c.output_dir).run_report();
            let body = serde_json::to_string_pretty(&r).map_err(|e| PipelineError::Config(e.to_string()))?;
            std::fs::write(&path, body).map_err(|e| PipelineError::Io { path, source: e })?;
            Ok(r)
        })
        .collect()
}
