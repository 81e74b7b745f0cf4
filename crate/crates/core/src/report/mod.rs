//! Run artifacts on disk (`results.csv`, `summary.json`, `predictions.jsonl`),
//! cross-run comparison tables and SVG plots.

mod ablate;
mod svg;

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{io_err, MrnError, Result};
use crate::glyphgen::GlobalId;
use crate::rehearsal::CoverageReport;
use crate::router::VotingMode;
use crate::trainer::{pooled, Prediction, RunMode, RunReport, StepLog, TaskScore};

pub use ablate::{ablation_markdown, ablation_svg, grid, monotone_violations, read_ablation_csv, write_ablation_csv, AblationRow, Axis};
pub use svg::{line_chart, Series};

pub const RESULTS: &str = "results.csv";
pub const SUMMARY: &str = "summary.json";
pub const PREDICTIONS: &str = "predictions.jsonl";

fn format_err(path: &Path, reason: impl ToString) -> MrnError {
    MrnError::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// One line of `results.csv`. `task` is a script id, or `all` for the pooled row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub step: usize,
    pub task: String,
    pub split: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

pub fn result_rows(report: &RunReport) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for (i, scores) in report.matrix.per_task.iter().enumerate() {
        // the bound reports one row at the final step
        let step = report.steps.get(i).map_or(i + 1, |s| s.step);
        for s in scores {
            rows.push(ResultRow {
                step,
                task: s.task.to_string(),
                split: "test".into(),
                correct: s.correct,
                total: s.total,
                accuracy: s.accuracy(),
            });
        }
        let (correct, total) = scores.iter().fold((0, 0), |(c, t), s| (c + s.correct, t + s.total));
        rows.push(ResultRow {
            step,
            task: "all".into(),
            split: "test".into(),
            correct,
            total,
            accuracy: pooled(scores),
        });
    }
    rows
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| format_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| format_err(path, e))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: RunMode,
    pub voting: VotingMode,
    pub order: Vec<u8>,
    pub avg: f64,
    pub last: f64,
    /// Pooled accuracy per step.
    pub acc: Vec<f64>,
    /// Mean of per-task accuracies per step.
    pub macro_acc: Vec<f64>,
    pub per_task: Vec<Vec<TaskScore>>,
    pub domain_accuracy: Vec<Option<f64>>,
    pub coverage: Vec<CoverageReport>,
    pub audit_violations: usize,
    pub steps: Vec<StepLog>,
    pub seconds: f64,
    pub config: ExperimentConfig,
}

impl Summary {
    pub fn of(report: &RunReport) -> Self {
        Summary {
            mode: report.mode,
            voting: report.voting,
            order: report.order.clone(),
            avg: report.avg,
            last: report.last,
            acc: report.matrix.acc.clone(),
            macro_acc: report.macro_acc.clone(),
            per_task: report.matrix.per_task.clone(),
            domain_accuracy: report.steps.iter().map(|s| s.domain_accuracy).collect(),
            coverage: report.steps.iter().filter_map(|s| s.coverage.clone()).collect(),
            audit_violations: report.audit_violations,
            steps: report.steps.clone(),
            seconds: report.steps.iter().map(|s| s.seconds).sum(),
            config: report.config.clone(),
        }
    }

    /// Steps at which `acc` was measured.
    pub fn step_numbers(&self) -> Vec<usize> {
        if self.steps.len() == self.acc.len() {
            self.steps.iter().map(|s| s.step).collect()
        } else {
            (1..=self.acc.len()).collect()
        }
    }

    /// `(step, accuracy)` on the first task of the schedule.
    pub fn first_task_curve(&self) -> Vec<(usize, f64)> {
        let Some(&first) = self.order.first() else {
            return Vec::new();
        };
        self.step_numbers()
            .into_iter()
            .zip(&self.per_task)
            .filter_map(|(step, row)| row.iter().find(|s| s.task == first).map(|s| (step, s.accuracy())))
            .collect()
    }

    pub fn final_domain_accuracy(&self) -> Option<f64> {
        self.domain_accuracy.iter().rev().find_map(|d| *d)
    }

    pub fn label(&self) -> String {
        match (self.mode, self.voting) {
            (RunMode::Mrn, VotingMode::Hard) => "mrn (hard)".into(),
            (mode, _) => mode.to_string(),
        }
    }
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).map_err(|e| format_err(path, e))?;
    crate::formats::write_file(path, text.as_bytes())
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    for p in predictions {
        serde_json::to_writer(&mut w, p).map_err(|e| format_err(path, e))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

/// Writes the three run files into `dir`, creating it if needed.
pub fn write_run(dir: &Path, report: &RunReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_results_csv(&dir.join(RESULTS), &result_rows(report))?;
    write_summary(&dir.join(SUMMARY), &Summary::of(report))?;
    write_predictions(&dir.join(PREDICTIONS), &report.predictions)
}

/// Pooled accuracy per step recomputed from persisted predictions.
pub fn accuracy_from_predictions(predictions: &[Prediction]) -> Vec<(usize, f64)> {
    let steps: BTreeSet<usize> = predictions.iter().map(|p| p.step).collect();
    steps
        .into_iter()
        .map(|s| {
            let at: Vec<_> = predictions.iter().filter(|p| p.step == s).collect();
            let correct = at.iter().filter(|p| p.correct).count();
            (s, correct as f64 / at.len() as f64)
        })
        .collect()
}

/// Correct final-step predictions on older tasks whose truth contains a
/// character missing from the rehearsal memory of that step.
pub fn uncovered_hits(report: &RunReport) -> Vec<&Prediction> {
    let Some(last) = report.steps.last() else {
        return Vec::new();
    };
    let Some(cov) = &last.coverage else {
        return Vec::new();
    };
    let missing: BTreeSet<GlobalId> = cov.missing_old.iter().copied().collect();
    report
        .predictions
        .iter()
        .filter(|p| p.step == last.step && p.task != last.task && p.correct)
        .filter(|p| p.truth.iter().any(|c| missing.contains(c)))
        .collect()
}

/// Markdown table of Avg and Last per run, plus the per-step accuracies.
pub fn comparison_markdown(runs: &[(String, Summary)]) -> String {
    let steps = runs.iter().map(|(_, s)| s.acc.len()).max().unwrap_or(0);
    let mut out = String::from("| run | mode | voting | Avg | Last |");
    for i in 1..=steps {
        out += &format!(" step {i} |");
    }
    out += "\n|---|---|---|---|---|";
    out += &"---|".repeat(steps);
    out.push('\n');
    for (name, s) in runs {
        out += &format!("| {name} | {} | {} | {:.4} | {:.4} |", s.mode, s.voting, s.avg, s.last);
        let mut cells = vec![String::new(); steps];
        for (step, a) in s.step_numbers().into_iter().zip(&s.acc) {
            if (1..=steps).contains(&step) {
                cells[step - 1] = format!("{a:.4}");
            }
        }
        for c in cells {
            out += &format!(" {c} |");
        }
        out.push('\n');
    }
    out
}

fn legend_names(runs: &[(String, Summary)]) -> Vec<String> {
    runs.iter()
        .map(|(name, s)| {
            let label = s.label();
            if runs.iter().filter(|(_, o)| o.label() == label).count() > 1 {
                format!("{label} [{name}]")
            } else {
                label
            }
        })
        .collect()
}

fn steps_axis(runs: &[(String, Summary)]) -> Vec<String> {
    let n = runs.iter().flat_map(|(_, s)| s.step_numbers()).max().unwrap_or(1);
    (1..=n).map(|i| i.to_string()).collect()
}

/// Pooled accuracy against step, one curve per run.
pub fn accuracy_svg(runs: &[(String, Summary)]) -> String {
    let series: Vec<Series> = legend_names(runs)
        .into_iter()
        .zip(runs)
        .map(|(name, (_, s))| Series {
            name,
            points: s.step_numbers().into_iter().map(|k| k - 1).zip(s.acc.iter().copied()).collect(),
        })
        .collect();
    line_chart("Accuracy over seen tasks", "step", &steps_axis(runs), &series)
}

/// Accuracy on the first task of the schedule at every step.
pub fn first_task_svg(runs: &[(String, Summary)]) -> String {
    let series: Vec<Series> = legend_names(runs)
        .into_iter()
        .zip(runs)
        .map(|(name, (_, s))| Series {
            name,
            points: s.first_task_curve().into_iter().map(|(k, a)| (k - 1, a)).collect(),
        })
        .collect();
    line_chart("Accuracy on task 1", "step", &steps_axis(runs), &series)
}
