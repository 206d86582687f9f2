//! metrics.csv and report.json writers.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Result;
use crate::metrics::{DareSummary, Metrics};
use crate::params::ParamCounts;
use crate::trainer::{SweepRow, TrainReport, Validation};

#[derive(Clone, Debug)]
pub struct CsvRow<'a> {
    pub step: usize,
    pub split: &'a str,
    pub ratio: f64,
    pub metrics: &'a Metrics,
}

/// `step,split,ratio,overall_acc,acc_c0..acc_cK-1,mean_loss` with one
/// line per row. Floats use the shortest round-trip representation.
pub fn metrics_csv(num_classes: usize, rows: &[CsvRow<'_>]) -> String {
    let mut out = String::from("step,split,ratio,overall_acc");
    for c in 0..num_classes {
        let _ = write!(out, ",acc_c{c}");
    }
    out.push_str(",mean_loss\n");
    for r in rows {
        let _ = write!(out, "{},{},{},{}", r.step, r.split, r.ratio, r.metrics.overall_accuracy);
        for a in &r.metrics.per_class_accuracy {
            let _ = write!(out, ",{a}");
        }
        let _ = writeln!(out, ",{}", r.metrics.mean_loss);
    }
    out
}

/// Validation rows of a run followed by the occlusion sweep rows.
pub fn run_csv(num_classes: usize, report: &TrainReport, sweep: &[SweepRow]) -> String {
    let last = report.validations.last().map_or(0, |v| v.step);
    let mut rows: Vec<CsvRow<'_>> = report
        .validations
        .iter()
        .map(|v| CsvRow {
            step: v.step,
            split: "val",
            ratio: 0.0,
            metrics: &v.metrics,
        })
        .collect();
    rows.extend(sweep.iter().map(|s| CsvRow {
        step: last,
        split: "sweep",
        ratio: s.ratio,
        metrics: &s.metrics,
    }));
    metrics_csv(num_classes, &rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct DareByRatio {
    pub ratio: f64,
    pub summary: DareSummary,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport<'a> {
    pub config: &'a RunConfig,
    pub param_counts: &'a ParamCounts,
    pub final_metrics: Option<&'a Metrics>,
    pub sweep: &'a [SweepRow],
    pub dare: Vec<DareByRatio>,
    pub validations: &'a [Validation],
    pub loss_curve: &'a [f64],
}

impl<'a> RunReport<'a> {
    pub fn new(config: &'a RunConfig, counts: &'a ParamCounts, report: &'a TrainReport, sweep: &'a [SweepRow]) -> Self {
        Self {
            config,
            param_counts: counts,
            final_metrics: report.final_metrics(),
            sweep,
            dare: sweep
                .iter()
                .map(|s| DareByRatio {
                    ratio: s.ratio,
                    summary: s.metrics.dare.clone(),
                })
                .collect(),
            validations: &report.validations,
            loss_curve: &report.step_losses,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
