//! CSV tables and SVG plots for a set of stored runs and step evaluations.
//!
//! Every number is copied from a stored record; ROC curves are the exact
//! sweep of stored attack scores. Wall-clock times live in `timing.json`
//! so the CSV tables are byte-identical across reruns.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{IterationRecord, StepEvaluation};
use crate::error::{BenchError, Result};
use crate::metrics::{roc_from_scores, AttackSummary, EpsilonSummary, REPORT_FPRS};
use crate::unlearn::AlgorithmId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecords {
    pub run_id: String,
    pub algorithm: AlgorithmId,
    pub records: Vec<IterationRecord>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportInputs {
    pub runs: Vec<RunRecords>,
    pub steps: Vec<StepEvaluation>,
}

/// What was written, relative to `dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub run_id: String,
    pub dir: PathBuf,
    /// Run ids the trajectories came from.
    pub runs: Vec<String>,
    pub files: Vec<String>,
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#7f7f7f", "#bcbd22",
];

fn csv(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

fn summary_rows(source: &str, iteration: &str, attacks: &[AttackSummary]) -> Vec<String> {
    attacks
        .iter()
        .map(|a| {
            let tprs: Vec<String> = a.tpr_at_fpr.iter().map(|(_, t)| t.to_string()).collect();
            format!("{source},{iteration},{},{},{},{}", a.attack, a.queries, a.auc, tprs.join(","))
        })
        .collect()
}

fn epsilon_row(source: &str, e: &EpsilonSummary) -> String {
    format!("{source},{},{},{},{},{},{}", e.count, e.delta, e.max, e.p50, e.p90, e.p99)
}

#[derive(Clone, Copy)]
struct Axis<'a> {
    label: &'a str,
    min: f64,
    max: f64,
    log: bool,
}

impl Axis<'_> {
    fn frac(&self, v: f64) -> f64 {
        if self.log {
            let v = v.max(self.min);
            (v.ln() - self.min.ln()) / (self.max.ln() - self.min.ln())
        } else {
            (v - self.min) / (self.max - self.min)
        }
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let (a, b) = (self.min.log10().round() as i32, self.max.log10().round() as i32);
            (a..=b).map(|e| 10f64.powi(e)).collect()
        } else {
            (0..=5).map(|k| self.min + (self.max - self.min) * k as f64 / 5.0).collect()
        }
    }
}

/// A labelled line chart with one polyline per series.
fn line_plot(title: &str, x: Axis, y: Axis, series: &[(String, Vec<(f64, f64)>)], diagonal: bool) -> String {
    let (w, h, left, right, top, bottom) = (720.0, 480.0, 70.0, 190.0, 40.0, 60.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let px = |v: f64| left + x.frac(v).clamp(0.0, 1.0) * pw;
    let py = |v: f64| top + (1.0 - y.frac(v).clamp(0.0, 1.0)) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{title}</text>"#, left + pw / 2.0);
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for t in x.ticks() {
        let xx = px(t);
        let _ = writeln!(s, r##"<line x1="{xx:.2}" y1="{top}" x2="{xx:.2}" y2="{}" stroke="#ddd"/>"##, top + ph);
        let _ = writeln!(s, r#"<text x="{xx:.2}" y="{}" text-anchor="middle">{}</text>"#, top + ph + 16.0, fmt_tick(t, x.log));
    }
    for t in y.ticks() {
        let yy = py(t);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{yy:.2}" x2="{}" y2="{yy:.2}" stroke="#ddd"/>"##, left + pw);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, left - 6.0, yy + 4.0, fmt_tick(t, y.log));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 16.0, x.label);
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        y.label
    );
    if diagonal {
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#999" stroke-dasharray="4 4"/>"##,
            px(x.min),
            py(y.min),
            px(x.max),
            py(y.max)
        );
    }
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(a, b)| format!("{:.2},{:.2}", px(a), py(b))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        let ly = top + 14.0 + 18.0 * k as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#, lx + 22.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 28.0, ly + 4.0, xml_escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64, log: bool) -> String {
    if log {
        format!("1e{}", v.log10().round() as i32)
    } else {
        let r = (v * 100.0).round() / 100.0;
        r.to_string()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn render(inputs: &ReportInputs) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    let runs: Vec<&RunRecords> = inputs.runs.iter().filter(|r| !r.records.is_empty()).collect();

    if !runs.is_empty() {
        let traj = runs.iter().flat_map(|r| {
            r.records.iter().map(move |rec| {
                format!(
                    "{},{},{},{},{},{}",
                    r.algorithm, rec.iteration, rec.test_accuracy, rec.retain_accuracy, rec.forget_accuracy, rec.checkpoint_id
                )
            })
        });
        files.push((
            "trajectory.csv".to_string(),
            csv("algorithm,iteration,test_accuracy,retain_accuracy,forget_accuracy,checkpoint_id", traj),
        ));
        let cost = runs.iter().flat_map(|r| {
            r.records.iter().map(move |rec| {
                format!(
                    "{},{},{},{},{}",
                    r.algorithm, rec.iteration, rec.cost.gradient_steps, rec.cost.forward_passes, rec.cost.peak_param_updates
                )
            })
        });
        files.push((
            "cost.csv".to_string(),
            csv("algorithm,iteration,gradient_steps,forward_passes,peak_param_updates", cost),
        ));
        let status = runs.iter().map(|r| {
            format!(
                "{},{},{}",
                r.algorithm,
                r.records.len(),
                if r.failure.is_some() { "failed" } else { "ok" }
            )
        });
        files.push(("runs.csv".to_string(), csv("algorithm,iterations,status", status)));
        let series: Vec<(String, Vec<(f64, f64)>)> = runs
            .iter()
            .map(|r| {
                let label = match &r.failure {
                    Some(_) => format!("{} (failed)", r.algorithm),
                    None => r.algorithm.to_string(),
                };
                (label, r.records.iter().map(|rec| ((rec.iteration + 1) as f64, rec.test_accuracy)).collect())
            })
            .collect();
        let max_iter = runs.iter().map(|r| r.records.len()).max().unwrap_or(1).max(2) as f64;
        files.push((
            "trajectory.svg".to_string(),
            line_plot(
                "Test accuracy over unlearning iterations",
                Axis {
                    label: "iteration",
                    min: 1.0,
                    max: max_iter,
                    log: false,
                },
                Axis {
                    label: "test accuracy",
                    min: 0.0,
                    max: 1.0,
                    log: false,
                },
                &series,
                false,
            ),
        ));
    }

    let mut worst = Vec::new();
    for r in &runs {
        for rec in &r.records {
            if let Some(a) = &rec.attack {
                worst.extend(summary_rows(r.algorithm.as_str(), &rec.iteration.to_string(), &a.attacks));
            }
        }
    }
    for s in &inputs.steps {
        worst.extend(summary_rows(s.algorithm.as_str(), "step", &s.report.attacks));
    }
    if !worst.is_empty() {
        let fprs: Vec<String> = REPORT_FPRS.iter().map(|f| format!("tpr_at_{f}")).collect();
        files.push((
            "worst_case.csv".to_string(),
            csv(&format!("algorithm,iteration,attack,queries,auc,{}", fprs.join(",")), worst),
        ));
    }

    if !inputs.steps.is_empty() {
        let steps = inputs.steps.iter().map(|s| {
            format!(
                "{},{},{},{},{},{},{}",
                s.algorithm,
                s.accuracy.test,
                s.accuracy.retain,
                s.accuracy.forget,
                s.cost.gradient_steps,
                s.cost.forward_passes,
                s.cost.peak_param_updates
            )
        });
        files.push((
            "step.csv".to_string(),
            csv(
                "algorithm,test_accuracy,retain_accuracy,forget_accuracy,gradient_steps,forward_passes,peak_param_updates",
                steps,
            ),
        ));
        let eps = inputs.steps.iter().flat_map(|s| {
            let forget = &s.attacks[0].queries;
            s.epsilon
                .epsilon
                .iter()
                .enumerate()
                .map(move |(k, e)| format!("{},{},{},{},{}", s.algorithm, forget[k], e, s.epsilon.fpr_upper[k], s.epsilon.fnr_upper[k]))
        });
        files.push(("epsilon.csv".to_string(), csv("algorithm,query,epsilon,fpr_upper,fnr_upper", eps)));
        let eps_summary = inputs
            .steps
            .iter()
            .filter_map(|s| s.report.epsilon.as_ref().map(|e| epsilon_row(s.algorithm.as_str(), e)));
        files.push((
            "epsilon_summary.csv".to_string(),
            csv("algorithm,count,delta,max,p50,p90,p99", eps_summary),
        ));
        let verdicts = inputs.steps.iter().map(|s| {
            let v = &s.verdict;
            format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                s.algorithm,
                v.harm,
                v.benefit,
                v.band,
                v.base.auc,
                v.update.auc,
                v.retrain_update.auc,
                v.base.tpr_at_1e2,
                v.update.tpr_at_1e2,
                v.retrain_update.tpr_at_1e2,
                v.base.max_epsilon,
                v.update.max_epsilon,
                v.retrain_update.max_epsilon
            )
        });
        files.push((
            "do_no_harm.csv".to_string(),
            csv(
                "algorithm,harm,benefit,band,base_auc,update_auc,retrain_update_auc,base_tpr_at_0.01,update_tpr_at_0.01,retrain_update_tpr_at_0.01,base_max_epsilon,update_max_epsilon,retrain_update_max_epsilon",
                verdicts,
            ),
        ));

        let mut roc_rows = Vec::new();
        let mut series = Vec::new();
        for s in &inputs.steps {
            for a in &s.attacks {
                let curve = roc_from_scores(&a.scores, &a.labels)?;
                for p in &curve.points {
                    roc_rows.push(format!("{},{},{},{}", s.algorithm, a.attack, p.fpr, p.tpr));
                }
                series.push((
                    format!("{} {}", s.algorithm, a.attack),
                    curve.points.iter().map(|p| (p.fpr.max(1e-4), p.tpr.max(1e-4))).collect(),
                ));
            }
        }
        files.push(("roc.csv".to_string(), csv("algorithm,attack,fpr,tpr", roc_rows)));
        let log = |label| Axis {
            label,
            min: 1e-4,
            max: 1.0,
            log: true,
        };
        files.push((
            "roc.svg".to_string(),
            line_plot("Attack ROC (log-log)", log("false positive rate"), log("true positive rate"), &series, true),
        ));
    }
    Ok(files)
}

fn timing(inputs: &ReportInputs) -> serde_json::Value {
    let runs: Vec<serde_json::Value> = inputs
        .runs
        .iter()
        .map(|r| {
            serde_json::json!({
                "run_id": r.run_id,
                "algorithm": r.algorithm,
                "wall_seconds": r.records.iter().map(|x| x.cost.wall_seconds).collect::<Vec<_>>(),
            })
        })
        .collect();
    let steps: Vec<serde_json::Value> = inputs
        .steps
        .iter()
        .map(|s| serde_json::json!({"algorithm": s.algorithm, "wall_seconds": s.cost.wall_seconds}))
        .collect();
    serde_json::json!({ "runs": runs, "steps": steps })
}

/// Writes every table and plot under `out_dir/run_id/`. Files are staged in
/// a sibling directory and moved into place together; on error nothing is
/// left behind.
pub fn emit_report(inputs: &ReportInputs, out_dir: &Path, run_id: &str) -> Result<ReportBundle> {
    if inputs.runs.iter().all(|r| r.records.is_empty()) && inputs.steps.is_empty() {
        return Err(BenchError::EmptyInput("report records"));
    }
    if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
        return Err(BenchError::Config(format!("invalid report id {run_id:?}")));
    }
    let mut files = render(inputs)?;
    files.push((
        "timing.json".to_string(),
        serde_json::to_string_pretty(&timing(inputs)).expect("timing serializes") + "\n",
    ));
    let final_dir = out_dir.join(run_id);
    let staging = out_dir.join(format!(".{run_id}.staging-{}", std::process::id()));
    let write_all = || -> Result<()> {
        fs::create_dir_all(&staging).map_err(|e| BenchError::io(&staging, e))?;
        for (name, body) in &files {
            let path = staging.join(name);
            fs::write(&path, body).map_err(|e| BenchError::io(&path, e))?;
        }
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir).map_err(|e| BenchError::io(&final_dir, e))?;
        }
        fs::rename(&staging, &final_dir).map_err(|e| BenchError::io(&final_dir, e))
    };
    if let Err(e) = write_all() {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    Ok(ReportBundle {
        run_id: run_id.to_string(),
        dir: final_dir,
        runs: inputs.runs.iter().map(|r| r.run_id.clone()).collect(),
        files: files.into_iter().map(|(n, _)| n).collect(),
    })
}
