//! Markdown tables and SVG plots from finished runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::run::RunReport;
use super::PipelineError;
use crate::evaluator::EvalResult;

const W: f64 = 480.0;
const H: f64 = 320.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", x * 100.0))
}

/// One row per run, sorted as given.
pub fn render_markdown(reports: &[RunReport]) -> String {
    let mut s = String::from("| run | sweep | AP | AP50 | AP_r | AP_c | AP_f | p_eff | flagged |\n");
    s.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for r in reports {
        let sweep = r.sweep.as_ref().map_or_else(|| "-".to_string(), |p| format!("{}={}", p.axis, p.value));
        let e = &r.eval;
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {:.3} | {} |",
            r.label,
            sweep,
            pct(Some(e.ap)),
            pct(Some(e.ap50)),
            pct(e.ap_rare),
            pct(e.ap_common),
            pct(e.ap_frequent),
            r.data.effective_p,
            r.data.annotations_flagged
        );
    }
    s
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Plot {
    body: String,
    x: (f64, f64),
    y: (f64, f64),
}

impl Plot {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let x = if x.1 > x.0 { x } else { (x.0 - 0.5, x.0 + 0.5) };
        Self { body: String::new(), x, y }
    }

    fn px(&self, v: f64) -> f64 {
        MARGIN + (v - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, v: f64) -> f64 {
        H - MARGIN - (v - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * MARGIN)
    }

    fn series(&mut self, pts: &[(f64, f64)], color: &str, label: &str, slot: usize, markers: bool) {
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y))).collect();
        let _ = writeln!(
            self.body,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        if markers {
            for &(x, y) in pts {
                let _ = writeln!(self.body, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, self.px(x), self.py(y));
            }
        }
        let ly = MARGIN + 14.0 * slot as f64;
        let _ = writeln!(
            self.body,
            r#"<text x="{:.0}" y="{ly:.0}" font-size="11" fill="{color}">{}</text>"#,
            W - MARGIN - 110.0,
            esc(label)
        );
    }

    fn finish(self, title: &str, xlabel: &str, ylabel: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif">"#);
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let (x0, x1, y0, y1) = (MARGIN, W - MARGIN, H - MARGIN, MARGIN);
        let _ = writeln!(s, r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" stroke="black" fill="none"/>"#);
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = self.x.0 + f * (self.x.1 - self.x.0);
            let yv = self.y.0 + f * (self.y.1 - self.y.0);
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.0}" font-size="10" text-anchor="middle">{}</text>"#,
                self.px(xv),
                y0 + 14.0,
                trim(xv)
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.0}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#,
                x0 - 4.0,
                self.py(yv) + 3.0,
                trim(yv)
            );
        }
        let _ = writeln!(s, r#"<text x="{:.0}" y="20" font-size="13" text-anchor="middle">{}</text>"#, W / 2.0, esc(title));
        let _ = writeln!(s, r#"<text x="{:.0}" y="{:.0}" font-size="12" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, esc(xlabel));
        let _ = writeln!(
            s,
            r#"<text x="14" y="{:.0}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.0})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            esc(ylabel)
        );
        s.push_str(&self.body);
        s.push_str("</svg>\n");
        s
    }
}

fn trim(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// AP, AP50 and bucket APs against the swept parameter. Runs without a
/// sweep point are skipped.
pub fn render_sweep_svg(reports: &[RunReport], symbol: &str) -> String {
    let mut pts: Vec<(f64, &EvalResult)> =
        reports.iter().filter_map(|r| r.sweep.as_ref().map(|p| (p.value, &r.eval))).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let xs = pts.iter().map(|p| p.0);
    let lo = xs.clone().fold(f64::INFINITY, f64::min);
    let hi = xs.fold(f64::NEG_INFINITY, f64::max);
    let mut plot = Plot::new(if pts.is_empty() { (0.0, 1.0) } else { (lo, hi) }, (0.0, 1.0));
    let metrics: [(&str, fn(&EvalResult) -> Option<f64>); 5] = [
        ("AP", |e| Some(e.ap)),
        ("AP50", |e| Some(e.ap50)),
        ("AP_r", |e| e.ap_rare),
        ("AP_c", |e| e.ap_common),
        ("AP_f", |e| e.ap_frequent),
    ];
    for (i, (name, f)) in metrics.iter().enumerate() {
        let series: Vec<(f64, f64)> = pts.iter().filter_map(|(x, e)| f(e).map(|y| (*x, y))).collect();
        if !series.is_empty() {
            plot.series(&series, COLORS[i], name, i, true);
        }
    }
    plot.finish(&format!("AP vs {symbol}"), symbol, "AP")
}

/// Interpolated precision-recall curves at IoU 0.5, one per category
/// with ground truth.
pub fn render_pr_svg(eval: &EvalResult, title: &str) -> String {
    let mut plot = Plot::new((0.0, 1.0), (0.0, 1.0));
    for (i, c) in eval.per_category.values().filter(|c| c.num_gt > 0).enumerate() {
        let n = c.pr_curve50.len().saturating_sub(1).max(1) as f64;
        let pts: Vec<(f64, f64)> = c.pr_curve50.iter().enumerate().map(|(k, &p)| (k as f64 / n, p)).collect();
        plot.series(&pts, COLORS[i % COLORS.len()], &c.name, i, false);
    }
    plot.finish(title, "recall", "precision")
}

fn collect_reports(dir: &Path, out: &mut Vec<(PathBuf, RunReport)>) -> Result<(), PipelineError> {
    let io = |e| PipelineError::Io { path: dir.to_path_buf(), source: e };
    let mut entries: Vec<PathBuf> = fs::read_dir(dir).map_err(io)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>().map_err(io)?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_reports(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "run_report.json") {
            let s = fs::read_to_string(&p).map_err(|e| PipelineError::Io { path: p.clone(), source: e })?;
            let r: RunReport =
                serde_json::from_str(&s).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
            out.push((p, r));
        }
    }
    Ok(())
}

/// Gather every `run_report.json` under `runs_dir` and write
/// `report.md`, one sweep plot per swept axis and one PR plot per run
/// into `out_dir`. Returns the written paths.
pub fn write_report(runs_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut found = Vec::new();
    collect_reports(runs_dir, &mut found)?;
    if found.is_empty() {
        return Err(PipelineError::Config(format!("no run_report.json under {}", runs_dir.display())));
    }
    fs::create_dir_all(out_dir).map_err(|e| PipelineError::Io { path: out_dir.to_path_buf(), source: e })?;
    let reports: Vec<RunReport> = found.iter().map(|(_, r)| r.clone()).collect();
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<(), PipelineError> {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(|e| PipelineError::Io { path: path.clone(), source: e })?;
        written.push(path);
        Ok(())
    };
    put("report.md".into(), render_markdown(&reports))?;
    let mut axes: Vec<&str> = reports.iter().filter_map(|r| r.sweep.as_ref().map(|p| p.axis.as_str())).collect();
    axes.sort();
    axes.dedup();
    for axis in axes {
        let sel: Vec<RunReport> =
            reports.iter().filter(|r| r.sweep.as_ref().is_some_and(|p| p.axis == axis)).cloned().collect();
        let symbol = super::sweep::SweepAxis::parse(axis).map(|a| a.symbol()).unwrap_or(axis);
        put(format!("sweep_{axis}.svg"), render_sweep_svg(&sel, symbol))?;
    }
    for (i, r) in reports.iter().enumerate() {
        let label = match &r.sweep {
            Some(p) => format!("{}={}", p.axis, p.value),
            None if r.label.is_empty() => format!("run{i}"),
            None => r.label.clone(),
        };
        let safe: String = label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '=' || c == '-' { c } else { '_' }).collect();
        put(format!("pr_{safe}.svg"), render_pr_svg(&r.eval, &format!("PR at IoU 0.5, {label}")))?;
    }
    Ok(written)
}
