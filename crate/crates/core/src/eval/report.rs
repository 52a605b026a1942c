use std::fmt::Write as _;
use std::str::FromStr;

use super::{BenchmarkResult, EvalError, MeanStat, ModeAggregate};

/// Placeholder for metrics that were not computed.
pub const DASH: &str = "–";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(EvalError::UnsupportedFormat(s.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReportOptions {
    /// Wall-clock fields vary between runs; leave them out for comparisons.
    pub include_timings: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            include_timings: true,
        }
    }
}

/// Column order of every tabular format.
pub const METRIC_COLUMNS: [&str; 5] = ["PSNR", "SSIM", "LPIPS", "CLIP", "Succ"];

fn metric_stats(m: &ModeAggregate) -> [&MeanStat; 5] {
    [&m.psnr, &m.ssim, &m.lpips, &m.clip, &m.succ]
}

pub fn emit_report(
    result: &BenchmarkResult,
    format: ReportFormat,
    options: ReportOptions,
) -> Result<Vec<u8>, EvalError> {
    if result.modes.is_empty() {
        return Err(EvalError::Empty("report has no rows"));
    }
    Ok(match format {
        ReportFormat::Json => json(result, options),
        ReportFormat::Csv => csv_table(result, options)?,
        ReportFormat::Markdown => markdown(result, options).into_bytes(),
    })
}

fn json(result: &BenchmarkResult, options: ReportOptions) -> Vec<u8> {
    let mut v = serde_json::to_value(result).expect("result serializes");
    if !options.include_timings {
        for key in ["modes", "samples"] {
            if let Some(rows) = v.get_mut(key).and_then(|r| r.as_array_mut()) {
                for row in rows {
                    if let Some(obj) = row.as_object_mut() {
                        obj.remove("timings");
                    }
                }
            }
        }
    }
    let mut out = serde_json::to_vec_pretty(&v).expect("value serializes");
    out.push(b'\n');
    out
}

/// Full-precision number, or the dash.
fn exact(stat: &MeanStat) -> String {
    stat.mean.map_or_else(|| DASH.to_owned(), |v| v.to_string())
}

fn csv_table(result: &BenchmarkResult, options: ReportOptions) -> Result<Vec<u8>, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["config", "mode", "n_reflect", "samples", "ok", "failed", "refused"];
    header.extend(METRIC_COLUMNS);
    header.push("psnr_capped");
    if options.include_timings {
        header.extend(["lcp_ms", "mcp_ms", "overhead_ms", "total_ms", "ratio"]);
    }
    let fail = |e: csv::Error| EvalError::InvalidConfig(format!("csv: {e}"));
    w.write_record(&header).map_err(fail)?;
    for m in &result.modes {
        let mut row = vec![
            m.config.clone(),
            m.mode.to_string(),
            m.n_reflect.to_string(),
            m.samples.to_string(),
            m.ok.to_string(),
            m.failed.to_string(),
            m.refused.to_string(),
        ];
        row.extend(metric_stats(m).into_iter().map(exact));
        row.push(m.psnr_capped.to_string());
        if options.include_timings {
            match &m.timings {
                Some(t) => row.extend(
                    [t.lcp_ms, t.mcp_ms, t.overhead_ms, t.total_ms, t.ratio_to_baseline]
                        .map(|v| v.to_string()),
                ),
                None => row.extend(std::iter::repeat(DASH.to_owned()).take(5)),
            }
        }
        w.write_record(&row).map_err(fail)?;
    }
    w.into_inner()
        .map_err(|e| EvalError::InvalidConfig(format!("csv: {e}")))
}

fn markdown(result: &BenchmarkResult, options: ReportOptions) -> String {
    let mut s = String::new();
    let capped = result.modes.iter().any(|m| m.psnr_capped);
    s.push_str("| Mode | ");
    s.push_str(&METRIC_COLUMNS.join(" | "));
    s.push_str(" |\n|---|");
    s.push_str(&"---:|".repeat(METRIC_COLUMNS.len()));
    s.push('\n');
    for m in &result.modes {
        let cells: Vec<String> = metric_stats(m)
            .into_iter()
            .enumerate()
            .map(|(i, stat)| match stat.mean {
                None => DASH.to_owned(),
                Some(v) if i == 0 && m.psnr_capped => format!("{v:.3}*"),
                Some(v) => format!("{v:.3}"),
            })
            .collect();
        let _ = writeln!(s, "| {} | {} |", m.config, cells.join(" | "));
    }
    if capped {
        let _ = writeln!(
            s,
            "\n\\* includes unchanged keep regions (+∞ dB), averaged as {:.1} dB.",
            super::PSNR_CAP_DB
        );
    }
    let _ = writeln!(s, "\n| Mode | Samples | OK | Failed | Refused |\n|---|---:|---:|---:|---:|");
    for m in &result.modes {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} |",
            m.config, m.samples, m.ok, m.failed, m.refused
        );
    }
    if options.include_timings {
        let _ = writeln!(
            s,
            "\n| Mode | LCP (ms) | MCP (ms) | Overhead (ms) | Total (ms) | LCP share | Ratio vs {} |\n|---|---:|---:|---:|---:|---:|---:|",
            result.baseline
        );
        for m in &result.modes {
            match &m.timings {
                Some(t) => {
                    let _ = writeln!(
                        s,
                        "| {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.1}% | {:.3} |",
                        m.config,
                        t.lcp_ms,
                        t.mcp_ms,
                        t.overhead_ms,
                        t.total_ms,
                        t.lcp_share * 100.0,
                        t.ratio_to_baseline
                    );
                }
                None => {
                    let _ = writeln!(s, "| {} | {DASH} | {DASH} | {DASH} | {DASH} | {DASH} | {DASH} |", m.config);
                }
            }
        }
    }
    s
}
