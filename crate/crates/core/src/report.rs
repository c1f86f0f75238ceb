//! Evaluation reports and their JSON / aligned-text renderings.
//!
//! Percentages are rendered at two decimal places; the structured reports
//! keep full-precision fractions.

use serde::{Deserialize, Serialize};

use crate::prompt::TemplateId;
use crate::stats::{ConfusionCounts, MetricSet, PairedTestResult, Ratio, ShiftCounts, SignificanceTest};

/// Metrics for one prompt condition of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub condition: String,
    pub template_id: TemplateId,
    pub lesson_ids: Vec<u8>,
    pub total_pairs: u64,
    pub scored: u64,
    pub unparsed: u64,
    pub failed: u64,
    pub counts: ConfusionCounts,
    pub metrics: MetricSet,
    /// Condition that ΔF1, significance and shifts are measured against.
    pub baseline: Option<String>,
    pub significance: Option<PairedTestResult>,
    pub shift: Option<ShiftCounts>,
    /// Pairs scored under both this condition and the baseline.
    pub compared_pairs: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub run_id: String,
    pub lesson_set_version: String,
    pub significance_test: SignificanceTest,
    /// In evaluation order: default, each lesson, all lessons.
    pub conditions: Vec<EvalReport>,
}

impl AblationReport {
    pub fn condition(&self, name: &str) -> Option<&EvalReport> {
        self.conditions.iter().find(|c| c.condition == name)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

pub fn fmt_percent(r: Ratio) -> String {
    r.percent()
}

/// Signed percentage points, e.g. `+4.31`; `-` when absent.
pub fn fmt_delta(d: Option<f64>) -> String {
    match d {
        Some(v) if v.abs() < 0.005 => "0.00".to_string(),
        Some(v) => format!("{v:+.2}"),
        None => "-".to_string(),
    }
}

pub fn fmt_p(p: Option<f64>) -> String {
    match p {
        Some(v) if v < 1e-4 => "<0.0001".to_string(),
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    }
}

/// Aligned plain-text table. The first column is left aligned, the rest right aligned.
pub fn text_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut out = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                out.push_str(&format!("{cell:<w$}"));
            } else {
                out.push_str(&format!("  {cell:>w$}"));
            }
        }
        out.trim_end().to_string() + "\n"
    };
    let mut out = line(headers.to_vec());
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

const METRIC_HEADERS: [&str; 7] = ["Condition", "P", "Acc", "R", "F1", "dF1", "p"];

fn metric_row(r: &EvalReport) -> Vec<String> {
    vec![
        r.condition.clone(),
        fmt_percent(r.metrics.precision),
        fmt_percent(r.metrics.accuracy),
        fmt_percent(r.metrics.recall),
        fmt_percent(r.metrics.f1),
        fmt_delta(r.metrics.delta_f1_points),
        fmt_p(r.metrics.p_value),
    ]
}

pub fn eval_text(r: &EvalReport) -> String {
    let mut out = format!("run {}  condition {}  template {}\n", r.run_id, r.condition, r.template_id);
    out.push_str(&format!(
        "pairs {}  scored {}  unparsed {}  failed {}\n",
        r.total_pairs, r.scored, r.unparsed, r.failed
    ));
    out.push_str(&format!(
        "tp {}  fp {}  tn {}  fn {}\n\n",
        r.counts.tp, r.counts.fp, r.counts.tn, r.counts.fn_
    ));
    out.push_str(&text_table(&METRIC_HEADERS, &[metric_row(r)]));
    out
}

/// Lesson rows first, then all lessons, then the default row.
pub fn ablation_text(a: &AblationReport) -> String {
    let mut rows: Vec<&EvalReport> = a.conditions.iter().filter(|c| c.condition != "default").collect();
    rows.extend(a.conditions.iter().filter(|c| c.condition == "default"));
    let mut out = format!(
        "run {}  lessons {}  test {}\n\n",
        a.run_id,
        &a.lesson_set_version[..a.lesson_set_version.len().min(12)],
        match a.significance_test {
            SignificanceTest::PairedT => "paired t",
            SignificanceTest::McnemarExact => "exact McNemar",
        }
    );
    out.push_str(&text_table(&METRIC_HEADERS, &rows.iter().map(|r| metric_row(r)).collect::<Vec<_>>()));
    out.push('\n');
    let shift_rows: Vec<Vec<String>> = rows
        .iter()
        .filter_map(|r| {
            r.shift.map(|s| {
                vec![
                    r.condition.clone(),
                    s.wrong_to_right.to_string(),
                    s.right_to_wrong.to_string(),
                    r.compared_pairs.unwrap_or(0).to_string(),
                ]
            })
        })
        .collect();
    if !shift_rows.is_empty() {
        out.push_str(&text_table(&["Condition", "Wrong->Right", "Right->Wrong", "Compared"], &shift_rows));
    }
    out
}
