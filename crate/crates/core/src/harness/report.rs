use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::run::{read_trace, TRACE_FILE};
use crate::decoder::GatingMode;
use crate::error::{Error, Result};
use crate::training::TraceRecord;

/// Band within which an ordering still counts as holding (two accuracy points).
pub const ORDERING_TOLERANCE: f64 = 0.02;
/// Depth at which the gating comparisons are made.
pub const PROBE_DEPTH: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub depth: usize,
    pub gating: GatingMode,
    pub baseline: bool,
    pub seeds: usize,
    pub acc_mean: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub acc_sd: f64,
    pub final_mean_abs_tanh_alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// A required cell is missing from the traces.
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub name: String,
    /// `lhs ≥ rhs − tolerance`
    pub lhs: Option<f64>,
    pub rhs: Option<f64>,
    pub status: CheckStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub checks: Vec<OrderingCheck>,
    pub warnings: Vec<String>,
}

/// Mean and sample standard deviation (`n − 1` denominator; 0 when `n = 1`).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Expand directories into the `trace.jsonl` files beneath them, sorted.
pub fn collect_traces(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else if path.file_name().is_some_and(|n| n == TRACE_FILE) {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            walk(p, &mut out)?;
        } else {
            out.push(p.clone());
        }
    }
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::InvalidArgument("no trace files found".into()));
    }
    Ok(out)
}

/// Summarise the final record of each trace per (depth, gating) cell.
pub fn aggregate(traces: &[PathBuf]) -> Result<Report> {
    let mut finals = Vec::with_capacity(traces.len());
    for path in traces {
        let records = read_trace(path)?;
        let last = records
            .last()
            .cloned()
            .ok_or_else(|| Error::Format(format!("{} holds no records", path.display())))?;
        finals.push(last);
    }
    Ok(aggregate_records(&finals))
}

/// [`aggregate`] on final records that are already parsed.
pub fn aggregate_records(finals: &[TraceRecord]) -> Report {
    let mut cells: BTreeMap<(usize, GatingMode), Vec<&TraceRecord>> = BTreeMap::new();
    for r in finals {
        cells.entry((r.m, r.gating)).or_default().push(r);
    }
    let mut warnings = Vec::new();
    let rows: Vec<ReportRow> = cells
        .iter()
        .map(|(&(depth, gating), recs)| {
            let accs: Vec<f64> = recs.iter().map(|r| r.eval_acc).collect();
            let (acc_mean, acc_sd) = mean_sd(&accs);
            if recs.len() == 1 {
                let msg = format!("m={depth} {gating}: single seed, sd reported as 0");
                warn!("{msg}");
                warnings.push(msg);
            }
            let gates: Vec<f64> = recs.iter().map(|r| r.mean_gate_abs_tanh()).collect();
            ReportRow {
                depth,
                gating,
                baseline: depth == 0,
                seeds: recs.len(),
                acc_mean,
                acc_sd,
                final_mean_abs_tanh_alpha: mean_sd(&gates).0,
            }
        })
        .collect();
    let checks = ordering_checks(&rows);
    Report { rows, checks, warnings }
}

fn ordering_checks(rows: &[ReportRow]) -> Vec<OrderingCheck> {
    let acc = |depth: usize, mode: GatingMode| {
        rows.iter()
            .find(|r| r.depth == depth && r.gating == mode)
            .map(|r| r.acc_mean)
    };
    let deepest = rows
        .iter()
        .filter(|r| r.gating == GatingMode::None)
        .map(|r| r.depth)
        .max()
        .filter(|&d| d > PROBE_DEPTH);
    let check = |name: String, lhs: Option<f64>, rhs: Option<f64>| {
        let status = match (lhs, rhs) {
            (Some(l), Some(r)) if l >= r - ORDERING_TOLERANCE => CheckStatus::Pass,
            (Some(_), Some(_)) => CheckStatus::Fail,
            _ => CheckStatus::Skipped,
        };
        OrderingCheck { name, lhs, rhs, status }
    };
    let d = PROBE_DEPTH;
    vec![
        check(
            format!("m={d}: sem+glo >= sem"),
            acc(d, GatingMode::Dual),
            acc(d, GatingMode::Semantic),
        ),
        check(
            format!("m={d}: sem >= none"),
            acc(d, GatingMode::Semantic),
            acc(d, GatingMode::None),
        ),
        check(
            format!("none: m={d} >= m={}", deepest.map_or("max".to_string(), |x| x.to_string())),
            acc(d, GatingMode::None),
            deepest.and_then(|x| acc(x, GatingMode::None)),
        ),
    ]
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("depth,gating,baseline,seeds,acc_mean,acc_sd,final_mean_abs_tanh_alpha\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.depth, r.gating, r.baseline, r.seeds, r.acc_mean, r.acc_sd, r.final_mean_abs_tanh_alpha
            );
        }
        out
    }

    /// Human-readable table plus the ordering checks.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>5}  {:<8} {:>5}  {:>8}  {:>7}  {:>10}\n",
            "depth", "gating", "seeds", "acc mean", "acc sd", "|tanh a|"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>5}  {:<8} {:>5}  {:>8.4}  {:>7.4}  {:>10.4}{}",
                r.depth,
                r.gating.as_str(),
                r.seeds,
                r.acc_mean,
                r.acc_sd,
                r.final_mean_abs_tanh_alpha,
                if r.baseline { "  (baseline)" } else { "" }
            );
        }
        for c in &self.checks {
            let _ = writeln!(out, "{:?}: {}", c.status, c.name);
        }
        out
    }

    /// Write `report.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.to_csv())?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(dir.join("report.json"), json)?;
        Ok(())
    }
}
