//! Aggregation of trial outcomes into success, error, tail-risk, failure and
//! trigger tables, plus CSV / JSON / Markdown rendering.
//!
//! Percentiles use the nearest-rank method: the P-th percentile of `n`
//! sorted values is the `ceil(P·n/100)`-th smallest. Error statistics are
//! computed over finite errors only; trials that failed outright (infinite
//! sentinel errors) are counted as failures and reported in `sentinels`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{invalid_param, Error, Result};
use crate::gating::TriggerStats;
use crate::sim::{GatingMode, TrialOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    /// Percent of successful trials.
    pub success_rate: f64,
    pub successes: u64,
    pub failures: u64,
    pub total: u64,
    pub pos_mean: f64,
    pub pos_std: f64,
    pub ori_mean: f64,
    pub ori_std: f64,
    pub pos_p95: f64,
    pub pos_max: f64,
    /// Orientation tail metrics (extension beyond the position-only tables).
    pub ori_p95: f64,
    pub ori_max: f64,
    /// Trials with non-finite (sentinel) errors.
    pub sentinels: u64,
    /// Trials where the gate changed the command.
    pub gated: u64,
    pub triggers: TriggerStats,
}

/// Nearest-rank percentile of an ascending slice; `pct` in (0, 100].
pub fn nearest_rank(sorted: &[f64], pct: u32) -> Option<f64> {
    if sorted.is_empty() || pct == 0 || pct > 100 {
        return None;
    }
    let n = sorted.len();
    let rank = (pct as usize * n).div_ceil(100);
    Some(sorted[rank.max(1) - 1])
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn tail(values: &mut [f64]) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    (
        nearest_rank(values, 95).unwrap_or(f64::NAN),
        values.last().copied().unwrap_or(f64::NAN),
    )
}

pub fn summarize(outcomes: &[TrialOutcome]) -> Result<MetricsSummary> {
    summarize_refs(&outcomes.iter().collect::<Vec<_>>())
}

fn summarize_refs(outcomes: &[&TrialOutcome]) -> Result<MetricsSummary> {
    if outcomes.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total = outcomes.len() as u64;
    let successes = outcomes.iter().filter(|o| o.success).count() as u64;
    let mut pos: Vec<f64> = outcomes
        .iter()
        .map(|o| o.pos_err_mm)
        .filter(|v| v.is_finite())
        .collect();
    let mut ori: Vec<f64> = outcomes
        .iter()
        .map(|o| o.ori_err_deg)
        .filter(|v| v.is_finite())
        .collect();
    let sentinels = outcomes
        .iter()
        .filter(|o| !(o.pos_err_mm.is_finite() && o.ori_err_deg.is_finite()))
        .count() as u64;
    let (pos_mean, pos_std) = mean_std(&pos);
    let (ori_mean, ori_std) = mean_std(&ori);
    let (pos_p95, pos_max) = tail(&mut pos);
    let (ori_p95, ori_max) = tail(&mut ori);
    let triggers = outcomes.iter().fold(TriggerStats::default(), |s, o| match &o.report {
        Some(r) => s.accumulate(r),
        None => s.accumulate_missing(),
    });
    Ok(MetricsSummary {
        success_rate: 100.0 * successes as f64 / total as f64,
        successes,
        failures: total - successes,
        total,
        pos_mean,
        pos_std,
        ori_mean,
        ori_std,
        pos_p95,
        pos_max,
        ori_p95,
        ori_max,
        sentinels,
        gated: outcomes.iter().filter(|o| o.gated()).count() as u64,
        triggers,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Depth,
    OffAxis,
    Mode,
}

impl GroupKey {
    pub fn as_str(&self) -> &'static str {
        match self {
            GroupKey::Depth => "depth",
            GroupKey::OffAxis => "off_axis",
            GroupKey::Mode => "mode",
        }
    }
}

impl std::str::FromStr for GroupKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(GroupKey::Depth),
            "off_axis" => Ok(GroupKey::OffAxis),
            "mode" => Ok(GroupKey::Mode),
            other => Err(invalid_param("group", format!("unknown key `{other}`"))),
        }
    }
}

fn group_label(o: &TrialOutcome, key: GroupKey) -> (f64, String) {
    match key {
        GroupKey::Depth => (o.depth_mm, format!("{}", o.depth_mm)),
        GroupKey::OffAxis => (o.off_axis_mm, format!("{}", o.off_axis_mm)),
        GroupKey::Mode => (o.mode as u8 as f64, o.mode.as_str().to_string()),
    }
}

/// Partitions by `key` and summarizes each part, in ascending key order.
pub fn group_by(outcomes: &[TrialOutcome], key: GroupKey) -> Result<Vec<(String, MetricsSummary)>> {
    group_refs(&outcomes.iter().collect::<Vec<_>>(), key)
}

fn group_refs(outcomes: &[&TrialOutcome], key: GroupKey) -> Result<Vec<(String, MetricsSummary)>> {
    if outcomes.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut keys: Vec<(f64, String)> = outcomes.iter().map(|o| group_label(o, key)).collect();
    keys.sort_by(|a, b| a.0.total_cmp(&b.0));
    keys.dedup_by(|a, b| a.1 == b.1);
    keys.into_iter()
        .map(|(_, label)| {
            let part: Vec<&TrialOutcome> = outcomes
                .iter()
                .copied()
                .filter(|o| group_label(o, key).1 == label)
                .collect();
            Ok((label, summarize_refs(&part)?))
        })
        .collect()
}

/// Summaries side by side for every mode present in the records.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub modes: Vec<GatingMode>,
    pub overall: Vec<MetricsSummary>,
    pub by_depth: Vec<GroupRow>,
    pub by_off_axis: Vec<GroupRow>,
}

/// One group value with a summary per mode (same order as [`Report::modes`]).
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRow {
    pub label: String,
    pub per_mode: Vec<Option<MetricsSummary>>,
}

impl Report {
    pub fn build(outcomes: &[TrialOutcome]) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut modes: Vec<GatingMode> = outcomes.iter().map(|o| o.mode).collect();
        modes.sort();
        modes.dedup();
        let per_mode: Vec<Vec<&TrialOutcome>> = modes
            .iter()
            .map(|m| outcomes.iter().filter(|o| o.mode == *m).collect())
            .collect();
        let overall = per_mode
            .iter()
            .map(|part| summarize_refs(part))
            .collect::<Result<Vec<_>>>()?;
        let grouped = |key: GroupKey| -> Result<Vec<GroupRow>> {
            let tables: Vec<Vec<(String, MetricsSummary)>> = per_mode
                .iter()
                .map(|part| group_refs(part, key))
                .collect::<Result<_>>()?;
            let labels: Vec<String> = group_by(outcomes, key)?.into_iter().map(|(l, _)| l).collect();
            Ok(labels
                .into_iter()
                .map(|label| GroupRow {
                    per_mode: tables
                        .iter()
                        .map(|t| t.iter().find(|(l, _)| *l == label).map(|(_, s)| *s))
                        .collect(),
                    label,
                })
                .collect())
        };
        Ok(Report {
            by_depth: grouped(GroupKey::Depth)?,
            by_off_axis: grouped(GroupKey::OffAxis)?,
            modes,
            overall,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
    Md,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "md" => Ok(Format::Md),
            other => Err(invalid_param(
                "format",
                format!("unknown format `{other}` (csv|json|md)"),
            )),
        }
    }
}

/// Which groupings to include when rendering a [`Report`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Sections {
    #[default]
    All,
    Only(GroupKey),
}

fn fmt_fixed(v: f64, decimals: usize) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        // avoid "-0.00"
        let s = format!("{v:.decimals$}");
        if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
            s.trim_start_matches('-').to_string()
        } else {
            s
        }
    }
}

fn rate(v: f64) -> String {
    fmt_fixed(v, 1)
}

fn mm(v: f64) -> String {
    fmt_fixed(v, 2)
}

fn round_json(v: f64, decimals: i32) -> Value {
    if !v.is_finite() {
        return Value::Null;
    }
    let f = 10f64.powi(decimals);
    let r = (v * f).round() / f;
    json!(if r == 0.0 { 0.0 } else { r })
}

const SUMMARY_CSV_HEADER: &str = "table,group,mode,total,successes,failures,success_rate_pct,pos_mean_mm,pos_std_mm,ori_mean_deg,ori_std_deg,pos_p95_mm,pos_max_mm,ori_p95_deg,ori_max_deg,sentinels,gated,rep_count,gn_count,prox_count,gated_union_count";

fn summary_csv_row(table: &str, group: &str, mode: GatingMode, s: &MetricsSummary) -> String {
    [
        table.to_string(),
        group.to_string(),
        mode.as_str().to_string(),
        s.total.to_string(),
        s.successes.to_string(),
        s.failures.to_string(),
        rate(s.success_rate),
        mm(s.pos_mean),
        mm(s.pos_std),
        mm(s.ori_mean),
        mm(s.ori_std),
        mm(s.pos_p95),
        mm(s.pos_max),
        mm(s.ori_p95),
        mm(s.ori_max),
        s.sentinels.to_string(),
        s.gated.to_string(),
        s.triggers.rep_count.to_string(),
        s.triggers.gn_count.to_string(),
        s.triggers.prox_count.to_string(),
        s.triggers.gated_union_count.to_string(),
    ]
    .join(",")
}

fn summary_json(s: &MetricsSummary) -> Value {
    json!({
        "total": s.total,
        "successes": s.successes,
        "failures": s.failures,
        "success_rate_pct": round_json(s.success_rate, 1),
        "pos_mean_mm": round_json(s.pos_mean, 2),
        "pos_std_mm": round_json(s.pos_std, 2),
        "ori_mean_deg": round_json(s.ori_mean, 2),
        "ori_std_deg": round_json(s.ori_std, 2),
        "pos_p95_mm": round_json(s.pos_p95, 2),
        "pos_max_mm": round_json(s.pos_max, 2),
        "ori_p95_deg": round_json(s.ori_p95, 2),
        "ori_max_deg": round_json(s.ori_max, 2),
        "sentinels": s.sentinels,
        "gated": s.gated,
        "triggers": {
            "rep_count": s.triggers.rep_count,
            "gn_count": s.triggers.gn_count,
            "prox_count": s.triggers.prox_count,
            "gated_union_count": s.triggers.gated_union_count,
            "total_trials": s.triggers.total_trials,
        },
    })
}

fn md_table(out: &mut String, title: &str, header: &[String], rows: &[Vec<String>]) {
    let cols = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            width[i] = width[i].max(c.chars().count());
        }
    }
    let line = |cells: &[String]| -> String {
        let body: Vec<String> = (0..cols)
            .map(|i| {
                if i == 0 {
                    format!("{:<w$}", cells[i], w = width[i])
                } else {
                    format!("{:>w$}", cells[i], w = width[i])
                }
            })
            .collect();
        format!("| {} |", body.join(" | "))
    };
    let _ = writeln!(out, "### {title}\n");
    let _ = writeln!(out, "{}", line(header));
    let sep: Vec<String> = (0..cols)
        .map(|i| {
            if i == 0 {
                format!(":{}", "-".repeat(width[i].max(1) - 1))
            } else {
                format!("{}:", "-".repeat(width[i].max(1) - 1))
            }
        })
        .collect();
    let _ = writeln!(out, "| {} |", sep.join(" | "));
    for r in rows {
        let _ = writeln!(out, "{}", line(r));
    }
    out.push('\n');
}

fn mode_label(m: GatingMode) -> &'static str {
    match m {
        GatingMode::Off => "No Gating",
        GatingMode::On => "+Gating",
    }
}

/// Renders a [`Report`] in the requested format. Output is byte-stable.
pub fn render(report: &Report, format: Format, sections: Sections) -> String {
    let want = |k: GroupKey| matches!(sections, Sections::All) || sections == Sections::Only(k);
    let groups: Vec<(GroupKey, &Vec<GroupRow>)> = [
        (GroupKey::Depth, &report.by_depth),
        (GroupKey::OffAxis, &report.by_off_axis),
    ]
    .into_iter()
    .filter(|(k, _)| want(*k))
    .collect();
    let include_overall = matches!(sections, Sections::All) || sections == Sections::Only(GroupKey::Mode);

    match format {
        Format::Csv => {
            let mut out = String::from(SUMMARY_CSV_HEADER);
            out.push('\n');
            if include_overall {
                for (m, s) in report.modes.iter().zip(&report.overall) {
                    out.push_str(&summary_csv_row("overall", "all", *m, s));
                    out.push('\n');
                }
            }
            for (key, rows) in &groups {
                for row in rows.iter() {
                    for (m, s) in report.modes.iter().zip(&row.per_mode) {
                        if let Some(s) = s {
                            out.push_str(&summary_csv_row(key.as_str(), &row.label, *m, s));
                            out.push('\n');
                        }
                    }
                }
            }
            out
        }
        Format::Json => {
            let mut root = serde_json::Map::new();
            root.insert(
                "modes".into(),
                json!(report.modes.iter().map(|m| m.as_str()).collect::<Vec<_>>()),
            );
            if include_overall {
                let overall: serde_json::Map<String, Value> = report
                    .modes
                    .iter()
                    .zip(&report.overall)
                    .map(|(m, s)| (m.as_str().to_string(), summary_json(s)))
                    .collect();
                root.insert("overall".into(), Value::Object(overall));
            }
            for (key, rows) in &groups {
                let arr: Vec<Value> = rows
                    .iter()
                    .map(|row| {
                        let per: serde_json::Map<String, Value> = report
                            .modes
                            .iter()
                            .zip(&row.per_mode)
                            .filter_map(|(m, s)| s.as_ref().map(|s| (m.as_str().to_string(), summary_json(s))))
                            .collect();
                        json!({ "group": row.label, "summaries": per })
                    })
                    .collect();
                root.insert(format!("by_{}", key.as_str()), Value::Array(arr));
            }
            let mut s = serde_json::to_string_pretty(&Value::Object(root)).expect("json value");
            s.push('\n');
            s
        }
        Format::Md => render_md(report, include_overall, &groups),
    }
}

fn render_md(report: &Report, include_overall: bool, groups: &[(GroupKey, &Vec<GroupRow>)]) -> String {
    let mut out = String::new();
    let modes = &report.modes;
    let mode_cols = |prefix: &str| -> Vec<String> {
        std::iter::once(prefix.to_string())
            .chain(modes.iter().map(|m| mode_label(*m).to_string()))
            .collect()
    };
    if include_overall {
        let per_mode =
            |f: &dyn Fn(&MetricsSummary) -> String| -> Vec<String> { report.overall.iter().map(f).collect() };
        let row = |name: &str, f: &dyn Fn(&MetricsSummary) -> String| -> Vec<String> {
            std::iter::once(name.to_string()).chain(per_mode(f)).collect()
        };
        md_table(
            &mut out,
            "Overall Success Rate",
            &mode_cols("Metric"),
            &[
                row("Trials", &|s| s.total.to_string()),
                row("Success rate (%)", &|s| rate(s.success_rate)),
            ],
        );
        md_table(
            &mut out,
            "End-effector Error (Mean ± Std)",
            &mode_cols("Metric"),
            &[
                row("Position (mm)", &|s| format!("{} ± {}", mm(s.pos_mean), mm(s.pos_std))),
                row("Orientation (deg)", &|s| {
                    format!("{} ± {}", mm(s.ori_mean), mm(s.ori_std))
                }),
            ],
        );
        md_table(
            &mut out,
            "Tail-risk Metrics",
            &mode_cols("Metric"),
            &[
                row("P95 position error (mm)", &|s| mm(s.pos_p95)),
                row("Max position error (mm)", &|s| mm(s.pos_max)),
                row("P95 orientation error (deg) [ext]", &|s| mm(s.ori_p95)),
                row("Max orientation error (deg) [ext]", &|s| mm(s.ori_max)),
            ],
        );
        md_table(
            &mut out,
            "Failure Count",
            &mode_cols("Metric"),
            &[
                row("Failures", &|s| s.failures.to_string()),
                row("Estimator failures (sentinel)", &|s| s.sentinels.to_string()),
            ],
        );
        md_table(
            &mut out,
            "Trigger Statistics",
            &mode_cols("Criterion"),
            &[
                row("Reprojection error > tau_rep", &|s| s.triggers.rep_count.to_string()),
                row("GN instability (residual / dr)", &|s| s.triggers.gn_count.to_string()),
                row("Proximity risk gamma > tau_gamma", &|s| {
                    s.triggers.prox_count.to_string()
                }),
                row("Total gated trials (union)", &|s| {
                    s.triggers.gated_union_count.to_string()
                }),
                row("Gate applied", &|s| s.gated.to_string()),
            ],
        );
    }
    for (key, rows) in groups {
        let (title, col) = match key {
            GroupKey::Depth => ("Success Rate vs. Depth (%)", "Depth (mm)"),
            GroupKey::OffAxis => ("Success Rate vs. Off-axis (%)", "Off-axis (mm)"),
            GroupKey::Mode => continue,
        };
        let body: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                std::iter::once(r.label.clone())
                    .chain(
                        r.per_mode
                            .iter()
                            .map(|s| s.map(|s| rate(s.success_rate)).unwrap_or_else(|| "-".into())),
                    )
                    .collect()
            })
            .collect();
        md_table(&mut out, title, &mode_cols(col), &body);
    }
    out
}

/// Column order of the per-trial CSV.
pub const TRIAL_CSV_COLUMNS: [&str; 17] = [
    "scenario_id",
    "repeat_id",
    "mode",
    "depth_mm",
    "off_axis_mm",
    "pos_err_mm",
    "ori_err_deg",
    "success",
    "gated",
    "rep_trigger",
    "gn_trigger",
    "prox_trigger",
    "e_rep_px",
    "r_gn_px",
    "delta_r",
    "gamma",
    "seed",
];

/// Plot-ready per-trial CSV; fields without a value are left empty.
pub fn render_trials_csv(outcomes: &[TrialOutcome]) -> String {
    let mut out = TRIAL_CSV_COLUMNS.join(",");
    out.push('\n');
    let f6 = |v: f64| fmt_fixed(v, 6);
    for o in outcomes {
        let r = o.report.as_ref();
        let opt = |f: &dyn Fn(&crate::gating::ReliabilityReport) -> String| r.map(f).unwrap_or_default();
        let cells = [
            o.scenario_id.to_string(),
            o.repeat_id.to_string(),
            o.mode.as_str().to_string(),
            f6(o.depth_mm),
            f6(o.off_axis_mm),
            f6(o.pos_err_mm),
            f6(o.ori_err_deg),
            o.success.to_string(),
            o.gated().to_string(),
            opt(&|r| r.rep_trigger.to_string()),
            opt(&|r| r.gn_trigger.to_string()),
            opt(&|r| r.prox_trigger.to_string()),
            opt(&|r| f6(r.e_rep)),
            opt(&|r| f6(r.r_gn)),
            opt(&|r| r.delta_r.map(f6).unwrap_or_default()),
            opt(&|r| f6(r.gamma)),
            o.seed.to_string(),
        ];
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}
