//! Benchmark harness: dataset ingestion, batch runs across pipeline
//! configurations and report emission.

mod report;

pub use report::{emit_report, ReportFormat, ReportOptions};

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::backends::CallCounts;
use crate::image::{decode_image, decode_mask, sha256_hex, BinaryMask, ImageBuf};
use crate::metrics::{
    clip_alignment, lpips, masked_psnr, masked_ssim, psnr_serde, success, KeepRegion,
    MetricBackend, MetricFlags, MetricReport,
};
use crate::pipeline::{run_round, Backends, PipelineConfig, PipelineError, PipelineMode, RoundTimings};
use crate::prompt::Instruction;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Value substituted for +∞ PSNR when averaging.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const DEFAULT_PARALLELISM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    Understanding,
    Reasoning,
    /// Consistency metrics only count when the judge accepts the edit.
    Responsible,
    #[default]
    Other,
}

/// One line of `manifest.json`. Paths are relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask: Option<String>,
    #[serde(default)]
    pub task: TaskTag,
}

#[derive(Debug, Clone)]
pub struct EvalSample {
    pub id: String,
    pub image_path: PathBuf,
    pub image: ImageBuf,
    pub instruction: Instruction,
    pub gt_mask: Option<BinaryMask>,
    pub task: TaskTag,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no {MANIFEST_FILE} in {0}")]
    MissingManifest(PathBuf),
    #[error("{MANIFEST_FILE}: {0}")]
    BadManifest(String),
    #[error("sample `{id}`: {reason}")]
    BadSample { id: String, reason: String },
    #[error("nothing to run: {0}")]
    Empty(&'static str),
    #[error("every sample failed; first error: {0}")]
    AllSamplesFailed(String),
    #[error("unsupported report format `{0}` (expected json, csv or markdown)")]
    UnsupportedFormat(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Reads `root/manifest.json` and validates every sample up front.
pub fn load_dataset(root: &Path) -> Result<Vec<EvalSample>, EvalError> {
    let manifest = root.join(MANIFEST_FILE);
    let text = match std::fs::read_to_string(&manifest) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(EvalError::MissingManifest(root.to_owned()))
        }
        Err(e) => return Err(EvalError::BadManifest(e.to_string())),
    };
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| EvalError::BadManifest(e.to_string()))?;
    let mut seen = BTreeSet::new();
    entries
        .into_iter()
        .map(|entry| {
            let bad = |reason: String| EvalError::BadSample {
                id: entry.id.clone(),
                reason,
            };
            if !seen.insert(entry.id.clone()) {
                return Err(bad("duplicate id".into()));
            }
            let image_path = root.join(&entry.image);
            let bytes = std::fs::read(&image_path)
                .map_err(|e| bad(format!("{}: {e}", image_path.display())))?;
            let image = decode_image(&bytes).map_err(|e| bad(format!("{}: {e}", entry.image)))?;
            let instruction =
                Instruction::new(entry.instruction.clone()).map_err(|e| bad(e.to_string()))?;
            let gt_mask = match &entry.gt_mask {
                None => None,
                Some(rel) => {
                    let path = root.join(rel);
                    let bytes =
                        std::fs::read(&path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
                    let mask = decode_mask(&bytes, 128).map_err(|e| bad(format!("{rel}: {e}")))?;
                    if mask.dims() != image.dims() {
                        return Err(bad(format!(
                            "mask is {}, image is {}",
                            mask.dims(),
                            image.dims()
                        )));
                    }
                    Some(mask)
                }
            };
            Ok(EvalSample {
                id: entry.id,
                image_path,
                image,
                instruction,
                gt_mask,
                task: entry.task,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Ok,
    Failed,
    /// A backend declined the request; kept apart from failures and zeros.
    Refused,
}

impl fmt::Display for SampleStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SampleStatus::Ok => "ok",
            SampleStatus::Failed => "failed",
            SampleStatus::Refused => "refused",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: String,
    /// Label of the configuration that produced this row.
    pub config: String,
    pub mode: PipelineMode,
    pub task: TaskTag,
    pub status: SampleStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_hash: Option<String>,
    pub metrics: MetricReport,
    /// Consistency metrics withheld because the judge rejected a responsible-task edit.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub consistency_excluded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calls: Option<CallCounts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<RoundTimings>,
}

/// Mean and number of contributing samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStat {
    #[serde(with = "psnr_serde")]
    pub mean: Option<f64>,
    pub n: usize,
}

impl MeanStat {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        Self {
            mean: (n > 0).then(|| sum / n as f64),
            n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingAggregate {
    pub lcp_ms: f64,
    pub mcp_ms: f64,
    pub overhead_ms: f64,
    pub total_ms: f64,
    /// Fraction of end-to-end time spent in localization.
    pub lcp_share: f64,
    /// Mean total time relative to the baseline configuration.
    pub ratio_to_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAggregate {
    pub config: String,
    pub mode: PipelineMode,
    pub n_reflect: usize,
    pub samples: usize,
    pub ok: usize,
    pub failed: usize,
    pub refused: usize,
    pub psnr: MeanStat,
    /// Set when at least one +∞ PSNR was averaged as [`PSNR_CAP_DB`].
    pub psnr_capped: bool,
    pub ssim: MeanStat,
    pub lpips: MeanStat,
    pub clip: MeanStat,
    pub succ: MeanStat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<TimingAggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub schema_version: u32,
    pub metrics: MetricFlags,
    pub baseline: String,
    pub modes: Vec<ModeAggregate>,
    pub samples: Vec<SampleResult>,
}

/// Model and metric services used by a benchmark.
#[derive(Clone)]
pub struct BenchEnv {
    pub backends: Backends,
    /// LPIPS/CLIP service; those metrics are omitted when absent.
    pub metrics: Option<Arc<dyn MetricBackend>>,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    /// Samples evaluated concurrently.
    pub parallel: usize,
    /// Index into the config list used for timing ratios.
    pub baseline: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            parallel: DEFAULT_PARALLELISM,
            baseline: 0,
        }
    }
}

/// Row labels: the mode name, qualified by N when a mode appears twice.
pub fn config_labels(configs: &[PipelineConfig]) -> Vec<String> {
    configs
        .iter()
        .map(|c| {
            let dup = configs.iter().filter(|o| o.mode == c.mode).count() > 1;
            if dup {
                format!("{} (n={})", c.mode, c.n_reflect)
            } else {
                c.mode.to_string()
            }
        })
        .collect()
}

pub fn run_benchmark(
    samples: &[EvalSample],
    configs: &[PipelineConfig],
    flags: MetricFlags,
    env: &BenchEnv,
    options: &BenchOptions,
) -> Result<BenchmarkResult, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty("no samples"));
    }
    if configs.is_empty() {
        return Err(EvalError::Empty("no configurations"));
    }
    for c in configs {
        c.validate()
            .map_err(|e| EvalError::InvalidConfig(e.to_string()))?;
    }
    if options.baseline >= configs.len() {
        return Err(EvalError::InvalidConfig(format!(
            "baseline index {} out of range",
            options.baseline
        )));
    }
    if env.metrics.is_none() && (flags.lpips || flags.clip) {
        warn!("no metric backend configured; LPIPS and CLIP are omitted");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.parallel.max(1))
        .build()
        .map_err(|e| EvalError::InvalidConfig(e.to_string()))?;
    let labels = config_labels(configs);

    let mut rows = Vec::with_capacity(samples.len() * configs.len());
    for (config, label) in configs.iter().zip(&labels) {
        let part: Vec<SampleResult> = pool.install(|| {
            use rayon::prelude::*;
            samples
                .par_iter()
                .map(|s| evaluate_sample(s, config, label, flags, env))
                .collect()
        });
        rows.extend(part);
    }

    if rows.iter().all(|r| r.status != SampleStatus::Ok) {
        let first = rows
            .iter()
            .find_map(|r| r.error.clone())
            .unwrap_or_else(|| "unknown".into());
        return Err(EvalError::AllSamplesFailed(first));
    }

    let mut modes: Vec<ModeAggregate> = configs
        .iter()
        .zip(&labels)
        .map(|(c, label)| aggregate(c, label, rows.iter().filter(|r| &r.config == label)))
        .collect();
    let base_total = modes[options.baseline].timings.map(|t| t.total_ms);
    for m in &mut modes {
        if let (Some(t), Some(base)) = (m.timings.as_mut(), base_total) {
            t.ratio_to_baseline = if base > 0.0 { t.total_ms / base } else { 0.0 };
        }
    }

    Ok(BenchmarkResult {
        schema_version: REPORT_SCHEMA_VERSION,
        metrics: flags,
        baseline: labels[options.baseline].clone(),
        modes,
        samples: rows,
    })
}

fn evaluate_sample(
    sample: &EvalSample,
    config: &PipelineConfig,
    label: &str,
    flags: MetricFlags,
    env: &BenchEnv,
) -> SampleResult {
    let mut row = SampleResult {
        sample_id: sample.id.clone(),
        config: label.to_owned(),
        mode: config.mode,
        task: sample.task,
        status: SampleStatus::Ok,
        error: None,
        stage: None,
        output_hash: None,
        metrics: MetricReport::new(sample.id.clone()),
        consistency_excluded: false,
        calls: None,
        timings: None,
    };
    let gt = if config.mode.needs_gt_mask() {
        sample.gt_mask.as_ref()
    } else {
        None
    };
    let input_hash = sha256_hex(&sample.image.to_png().expect("encoding a valid buffer"));
    let out = match run_round(
        &sample.image,
        &input_hash,
        0,
        &sample.instruction,
        gt,
        config,
        &env.backends,
    ) {
        Ok(o) => o,
        Err(e) => {
            row.status = if e.is_refusal() {
                SampleStatus::Refused
            } else {
                SampleStatus::Failed
            };
            row.stage = e.step().map(|s| s.to_string());
            row.error = Some(e.to_string());
            return row;
        }
    };
    row.output_hash = Some(out.record.output_hash.clone());
    row.calls = Some(out.record.calls);
    row.timings = Some(out.record.timings);

    if let Err((stage, e)) = fill_metrics(&mut row, sample, &out.output, flags, env) {
        row.status = if e.is_refusal() {
            SampleStatus::Refused
        } else {
            SampleStatus::Failed
        };
        row.stage = Some(stage.into());
        row.error = Some(e.to_string());
    }
    row
}

#[derive(Debug)]
struct MetricFailure(String, bool);

impl MetricFailure {
    fn is_refusal(&self) -> bool {
        self.1
    }
}

impl fmt::Display for MetricFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<crate::metrics::MetricError> for MetricFailure {
    fn from(e: crate::metrics::MetricError) -> Self {
        let refused = matches!(
            e,
            crate::metrics::MetricError::Backend(crate::backends::BackendError::Refused(_))
        );
        MetricFailure(e.to_string(), refused)
    }
}

fn fill_metrics(
    row: &mut SampleResult,
    sample: &EvalSample,
    output: &ImageBuf,
    flags: MetricFlags,
    env: &BenchEnv,
) -> Result<(), (&'static str, MetricFailure)> {
    let x = &sample.image;
    let needs_judge = flags.succ || sample.task == TaskTag::Responsible;
    let verdict = if needs_judge {
        Some(
            success(x, output, &sample.instruction, env.backends.reasoner.as_ref())
                .map_err(|e| ("judge", e.into()))?,
        )
    } else {
        None
    };
    if flags.succ {
        row.metrics.succ = verdict;
    }
    let consistency = !(sample.task == TaskTag::Responsible && verdict == Some(false));
    row.consistency_excluded = !consistency;
    let keep = match &sample.gt_mask {
        Some(m) => KeepRegion::outside(m),
        None => KeepRegion::Full,
    };
    let m = &mut row.metrics;
    if consistency {
        if flags.psnr {
            m.psnr_db = Some(masked_psnr(x, output, &keep).map_err(|e| ("metrics", e.into()))?);
        }
        if flags.ssim {
            m.ssim = Some(masked_ssim(x, output, &keep).map_err(|e| ("metrics", e.into()))?);
        }
    }
    if let Some(backend) = &env.metrics {
        if flags.lpips && consistency {
            m.lpips = Some(lpips(x, output, &keep, backend.as_ref()).map_err(|e| ("metrics", e.into()))?);
        }
        if flags.clip {
            m.clip = Some(
                clip_alignment(output, &sample.instruction, backend.as_ref())
                    .map_err(|e| ("metrics", e.into()))?,
            );
        }
    }
    Ok(())
}

fn aggregate<'a>(
    config: &PipelineConfig,
    label: &str,
    rows: impl Iterator<Item = &'a SampleResult> + Clone,
) -> ModeAggregate {
    let count = |s: SampleStatus| rows.clone().filter(|r| r.status == s).count();
    let ok = || rows.clone().filter(|r| r.status == SampleStatus::Ok);
    let psnr_values: Vec<f64> = ok().filter_map(|r| r.metrics.psnr_db).collect();
    let psnr_capped = psnr_values.iter().any(|v| *v > PSNR_CAP_DB);
    let timings: Vec<RoundTimings> = ok().filter_map(|r| r.timings).collect();
    let timing = (!timings.is_empty()).then(|| {
        let n = timings.len() as f64;
        let mean = |f: fn(&RoundTimings) -> f64| timings.iter().map(f).sum::<f64>() / n;
        let (lcp, total) = (mean(|t| t.lcp_ms), mean(|t| t.total_ms));
        TimingAggregate {
            lcp_ms: lcp,
            mcp_ms: mean(|t| t.mcp_ms),
            overhead_ms: mean(|t| t.overhead_ms),
            total_ms: total,
            lcp_share: if total > 0.0 { lcp / total } else { 0.0 },
            ratio_to_baseline: 1.0,
        }
    });
    ModeAggregate {
        config: label.to_owned(),
        mode: config.mode,
        n_reflect: config.effective_n(),
        samples: rows.clone().count(),
        ok: count(SampleStatus::Ok),
        failed: count(SampleStatus::Failed),
        refused: count(SampleStatus::Refused),
        psnr: MeanStat::of(psnr_values.iter().map(|v| v.min(PSNR_CAP_DB))),
        psnr_capped,
        ssim: MeanStat::of(ok().filter_map(|r| r.metrics.ssim)),
        lpips: MeanStat::of(ok().filter_map(|r| r.metrics.lpips)),
        clip: MeanStat::of(ok().filter_map(|r| r.metrics.clip)),
        succ: MeanStat::of(ok().filter_map(|r| r.metrics.succ.map(|b| b as u8 as f64))),
        timings: timing,
    }
}

impl From<PipelineError> for EvalError {
    fn from(e: PipelineError) -> Self {
        EvalError::InvalidConfig(e.to_string())
    }
}
