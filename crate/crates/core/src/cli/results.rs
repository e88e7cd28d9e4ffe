//! Result files: per-round CSV, a human-readable structured text report, and
//! metric emissions in JSON and CSV.
//!
//! Column order in the round CSV is part of the format contract and is
//! documented in the header comment of every file. `wall_time_s` is
//! informational and the one column exempt from bitwise reproducibility.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::unlearn::RoundRecord;

/// Format version written into every results header.
pub const RESULTS_VERSION: u32 = 1;

pub fn write_rounds_csv(
    records: &[RoundRecord],
    trigger_count: usize,
    path: &Path,
) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "# ibau round records v{RESULTS_VERSION}");
    let _ = writeln!(
        out,
        "# columns: round,delta_norm,h_before,h_after,direct_norm,indirect_norm,fallback,wall_time_s,acc{}",
        (0..trigger_count).map(|i| format!(",asr_{i}")).collect::<String>()
    );
    let mut header = String::from(
        "round,delta_norm,h_before,h_after,direct_norm,indirect_norm,fallback,wall_time_s,acc",
    );
    for i in 0..trigger_count {
        let _ = write!(header, ",asr_{i}");
    }
    let _ = writeln!(out, "{header}");
    for r in records {
        let mut line = format!(
            "{},{},{},{},{},{},{},{}",
            r.round,
            r.delta_norm,
            r.h_before,
            r.h_after,
            r.direct_norm,
            r.indirect_norm,
            r.fallback,
            r.wall_time_s
        );
        match &r.eval {
            Some(snap) => {
                let _ = write!(line, ",{}", snap.acc);
                for i in 0..trigger_count {
                    match snap.asr_per_trigger.get(i) {
                        Some(asr) => {
                            let _ = write!(line, ",{asr}");
                        }
                        None => line.push(','),
                    }
                }
            }
            None => {
                for _ in 0..=trigger_count {
                    line.push(',');
                }
            }
        }
        let _ = writeln!(out, "{line}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Structured text report: one block per round plus a summary block.
pub fn write_results_txt(
    records: &[RoundRecord],
    summary: Option<&MetricsReport>,
    path: &Path,
) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "ibau results v{RESULTS_VERSION}");
    let _ = writeln!(out, "rounds: {}", records.len());
    for r in records {
        let _ = writeln!(out, "\n[round {}]", r.round);
        let _ = writeln!(out, "delta_norm = {}", r.delta_norm);
        let _ = writeln!(out, "h_before = {}", r.h_before);
        let _ = writeln!(out, "h_after = {}", r.h_after);
        let _ = writeln!(out, "direct_norm = {}", r.direct_norm);
        let _ = writeln!(out, "indirect_norm = {}", r.indirect_norm);
        let _ = writeln!(out, "fallback = {}", r.fallback);
        let _ = writeln!(out, "wall_time_s = {}", r.wall_time_s);
        if let Some(snap) = &r.eval {
            let _ = writeln!(out, "acc = {}", snap.acc);
            for (i, asr) in snap.asr_per_trigger.iter().enumerate() {
                let _ = writeln!(out, "asr_{i} = {asr}");
            }
        }
    }
    if let Some(report) = summary {
        let _ = writeln!(out, "\n[summary]");
        out.push_str(&metrics_kv(report));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn metrics_kv(report: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "acc = {}", report.acc);
    let _ = writeln!(out, "asr_overall = {}", report.asr_overall);
    for (idx, target, asr) in &report.asr_per_entry {
        let _ = writeln!(out, "asr_entry_{idx} (target {target}) = {asr}");
    }
    if let Some((gamma, risk)) = report.margin_risk {
        let _ = writeln!(out, "margin_risk (gamma {gamma}) = {risk}");
    }
    if let Some(gap) = report.error_gap {
        let _ = writeln!(out, "error_gap = {gap}");
    }
    out
}

pub fn write_metrics_json(report: &MetricsReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::numeric("metrics serialization", e.to_string()))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Flat `key,value` CSV mirror of the JSON emission; the two carry the same
/// numbers.
pub fn write_metrics_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut out = String::from("# ibau metrics v1\nkey,value\n");
    let _ = writeln!(out, "acc,{}", report.acc);
    let _ = writeln!(out, "asr_overall,{}", report.asr_overall);
    for (idx, target, asr) in &report.asr_per_entry {
        let _ = writeln!(out, "asr_entry_{idx}_target_{target},{asr}");
    }
    if let Some((gamma, risk)) = report.margin_risk {
        let _ = writeln!(out, "margin_risk_gamma_{gamma},{risk}");
    }
    if let Some(gap) = report.error_gap {
        let _ = writeln!(out, "error_gap,{gap}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
