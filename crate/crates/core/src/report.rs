//! Run artifacts on disk.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Result;
use crate::trainer::RunMetrics;

pub const METRICS_FILE: &str = "metrics.csv";
pub const LOSS_TRACE_FILE: &str = "loss_trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.resolved";

const LOSS_COLUMNS: &str = "alpha,beta,ace,ssl,lc,der,feature_kd,logit_kd,total";

fn loss_fields(l: &crate::losses::LossBreakdown) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        l.alpha, l.beta, l.ace, l.ssl, l.lc, l.der, l.feature_kd, l.logit_kd, l.total
    )
}

/// One row per experience. Holds nothing timing-dependent, so two runs with
/// the same seed produce byte-identical files.
pub fn metrics_csv(metrics: &RunMetrics) -> String {
    let mut out =
        format!("experience,classes,accuracy,single_model_accuracy,steps,buffer_size,pool_size,{LOSS_COLUMNS}\n");
    for e in &metrics.experiences {
        let classes: Vec<String> = e.present_classes.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            e.index,
            classes.join(" "),
            e.accuracy,
            e.single_model_accuracy,
            e.steps,
            e.buffer_size,
            e.pool_size,
            loss_fields(&e.mean_loss)
        );
    }
    out
}

pub fn loss_trace_csv(metrics: &RunMetrics) -> String {
    let mut out = format!("experience,step,{LOSS_COLUMNS}\n");
    for r in &metrics.loss_trace {
        let _ = writeln!(out, "{},{},{}", r.experience, r.step, loss_fields(&r.loss));
    }
    out
}

#[derive(Serialize)]
struct Summary<'a> {
    final_accuracy: f64,
    accuracy_per_experience: Vec<f64>,
    final_per_class_accuracy: &'a [f64],
    wall_clock_secs: &'a [f64],
    total_wall_clock_secs: f64,
}

pub fn summary_json(metrics: &RunMetrics) -> Result<String> {
    let summary = Summary {
        final_accuracy: metrics.final_accuracy,
        accuracy_per_experience: metrics.experiences.iter().map(|e| e.accuracy).collect(),
        final_per_class_accuracy: metrics.experiences.last().map_or(&[], |e| &e.per_class_accuracy),
        wall_clock_secs: &metrics.wall_clock_secs,
        total_wall_clock_secs: metrics.wall_clock_secs.iter().sum(),
    };
    Ok(serde_json::to_string_pretty(&summary)?)
}

/// Writes `metrics.csv`, `loss_trace.csv`, `summary.json` and
/// `config.resolved` into `dir`, creating it if needed.
pub fn write_run(dir: &Path, config: &RunConfig, metrics: &RunMetrics) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(METRICS_FILE), metrics_csv(metrics))?;
    fs::write(dir.join(LOSS_TRACE_FILE), loss_trace_csv(metrics))?;
    fs::write(dir.join(SUMMARY_FILE), summary_json(metrics)?)?;
    fs::write(dir.join(CONFIG_FILE), config.to_text())?;
    Ok(())
}
