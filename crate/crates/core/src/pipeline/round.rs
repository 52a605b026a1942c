use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::backends::{checked_inpaint, checked_judge, checked_segment, CallCounts, Verdict};
use crate::image::{full_mask, BinaryMask, ImageBuf};
use crate::lcp::{dilate_with, run_lcp, LocalizationResult};
use crate::mcp::{run_mcp, ModificationResult};
use crate::prompt::{Instruction, Prompt, PromptKind};
use crate::select::CandidateSet;
use crate::stage::{Call, StageStats, Step};

use super::store::ArtifactStore;
use super::{Backends, EmptyMaskPolicy, PipelineConfig, PipelineError, PipelineMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredText {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

fn scored_texts(set: &CandidateSet<Prompt>) -> Vec<ScoredText> {
    set.iter()
        .map(|c| ScoredText {
            text: c.payload.text().to_owned(),
            score: c.score,
        })
        .collect()
}

/// Where the round's edit mask came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Localization stage.
    Lcp,
    /// Instruction segmented directly.
    Instruction,
    /// Whole image.
    FullImage,
    /// Supplied by the caller.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationTrace {
    pub source: MaskSource,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompt_candidates: Vec<ScoredText>,
    /// Referring expression passed to the segmenter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mask_scores: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_mask_index: Option<usize>,
    /// Selected mask before dilation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_mask_hash: Option<String>,
    /// Mask handed to the inpainter.
    pub mask_hash: String,
    pub dilation_radius: u32,
    pub mask_popcount: usize,
    /// Set when an empty selection was replaced by the whole image.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub full_mask_fallback: bool,
    /// Mask found on the edited image by the re-localization hook.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relocalized_mask_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModificationTrace {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub plan_candidates: Vec<ScoredText>,
    /// Prompt passed to the inpainter.
    pub selected_plan: String,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_scores: Vec<Option<f64>>,
    pub selected_index: usize,
    pub selected_seed: u64,
}

/// Who picked the output among the image candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectedBy {
    /// Only one candidate was generated.
    Single,
    /// Argmax of the judge scores.
    Judge,
    /// A person chose; judge scores are kept in the trace.
    Human,
}

/// Milliseconds per phase. `overhead_ms = total_ms - backend_ms`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundTimings {
    pub lcp_ms: f64,
    pub mcp_ms: f64,
    pub backend_ms: f64,
    pub overhead_ms: f64,
    pub total_ms: f64,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Provenance of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub round: usize,
    pub mode: PipelineMode,
    pub instruction: Instruction,
    pub input_hash: String,
    pub localization: LocalizationTrace,
    pub modification: ModificationTrace,
    pub output_hash: String,
    pub selected_by: SelectedBy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    pub timings: RoundTimings,
    pub calls: CallCounts,
}

/// Everything a round produced.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub record: EditRecord,
    pub output: ImageBuf,
    pub mask: BinaryMask,
    /// Scored image candidates when more than one was generated.
    pub image_candidates: Option<CandidateSet<ImageBuf>>,
    /// PNGs referenced by the record.
    pub artifacts: ArtifactStore,
}

struct Localized {
    trace: LocalizationTrace,
    mask: BinaryMask,
}

fn apply_empty_policy(
    mask: BinaryMask,
    config: &PipelineConfig,
    round: usize,
) -> Result<(BinaryMask, bool), PipelineError> {
    if !mask.is_empty() {
        return Ok((mask, false));
    }
    match config.empty_mask_policy {
        EmptyMaskPolicy::Error => Err(PipelineError::EmptyMask { round }),
        EmptyMaskPolicy::FullMaskFallback => Ok((full_mask(mask.width(), mask.height())?, true)),
    }
}

fn trace_from_lcp(
    lcp: &LocalizationResult,
    store: &mut ArtifactStore,
) -> Result<LocalizationTrace, PipelineError> {
    let mask_scores: Vec<Option<f64>> = lcp.mask_candidates.iter().map(|c| c.score).collect();
    Ok(LocalizationTrace {
        source: MaskSource::Lcp,
        prompt_candidates: scored_texts(&lcp.prompt_candidates),
        selected_prompt: Some(lcp.selected_prompt.text().to_owned()),
        mask_scores: if mask_scores.iter().any(Option::is_some) {
            mask_scores
        } else {
            Vec::new()
        },
        selected_mask_index: Some(lcp.selected_mask_index),
        raw_mask_hash: Some(store.put_mask(&lcp.raw_mask)?),
        mask_hash: String::new(),
        dilation_radius: lcp.dilation_radius,
        mask_popcount: 0,
        full_mask_fallback: false,
        relocalized_mask_hash: None,
    })
}

/// Runs one edit of `input` under `config.mode`. `input_hash` is the
/// content hash of `input`'s PNG and is trusted as given.
pub fn run_round(
    input: &ImageBuf,
    input_hash: &str,
    round: usize,
    instruction: &Instruction,
    gt_mask: Option<&BinaryMask>,
    config: &PipelineConfig,
    backends: &Backends,
) -> Result<RoundOutcome, PipelineError> {
    let started = Instant::now();
    config.validate()?;
    match (config.mode.needs_gt_mask(), gt_mask) {
        (true, None) => return Err(PipelineError::MissingGtMask),
        (false, Some(_)) => return Err(PipelineError::UnexpectedGtMask),
        (true, Some(m)) if m.dims() != input.dims() => {
            return Err(PipelineError::GtMaskDims {
                mask: m.dims(),
                image: input.dims(),
            })
        }
        _ => {}
    }
    let reasoner = backends.reasoner.as_ref();
    let segmenter = backends.segmenter.as_ref();
    let inpainter = backends.inpainter.as_ref();
    let mut stats = StageStats::default();
    let mut store = ArtifactStore::default();

    // localization
    let lcp_start = Instant::now();
    let localized = match config.mode {
        PipelineMode::Full | PipelineMode::NoReflect | PipelineMode::NoMcp => {
            let lcp = run_lcp(input, instruction, &config.lcp_config(), reasoner, segmenter)?;
            stats.merge(&lcp.stats);
            let trace = trace_from_lcp(&lcp, &mut store)?;
            Localized {
                trace,
                mask: lcp.final_mask,
            }
        }
        PipelineMode::NoLcp => Localized {
            trace: LocalizationTrace {
                source: MaskSource::FullImage,
                prompt_candidates: Vec::new(),
                selected_prompt: None,
                mask_scores: Vec::new(),
                selected_mask_index: None,
                raw_mask_hash: None,
                mask_hash: String::new(),
                dilation_radius: 0,
                mask_popcount: 0,
                full_mask_fallback: false,
                relocalized_mask_hash: None,
            },
            mask: full_mask(input.width(), input.height())?,
        },
        PipelineMode::NoReasoning => {
            let prompt = Prompt::from_instruction(PromptKind::Localization, instruction);
            let raw = stats.timed(Call::Segment, Step::LcpSegment, || {
                checked_segment(segmenter, input, &prompt, 0)
            })?;
            let mask = dilate_with(&raw, config.dilation_radius, config.element);
            Localized {
                trace: LocalizationTrace {
                    source: MaskSource::Instruction,
                    prompt_candidates: Vec::new(),
                    selected_prompt: Some(prompt.text().to_owned()),
                    mask_scores: Vec::new(),
                    selected_mask_index: None,
                    raw_mask_hash: Some(store.put_mask(&raw)?),
                    mask_hash: String::new(),
                    dilation_radius: config.dilation_radius,
                    mask_popcount: 0,
                    full_mask_fallback: false,
                    relocalized_mask_hash: None,
                },
                mask,
            }
        }
        PipelineMode::NoReasoningGtMask => Localized {
            trace: LocalizationTrace {
                source: MaskSource::GroundTruth,
                prompt_candidates: Vec::new(),
                selected_prompt: None,
                mask_scores: Vec::new(),
                selected_mask_index: None,
                raw_mask_hash: None,
                mask_hash: String::new(),
                dilation_radius: 0,
                mask_popcount: 0,
                full_mask_fallback: false,
                relocalized_mask_hash: None,
            },
            mask: gt_mask.expect("checked above").clone(),
        },
    };
    let Localized { mut trace, mask } = localized;
    let (mask, fallback) = apply_empty_policy(mask, config, round)?;
    trace.full_mask_fallback = fallback;
    trace.mask_popcount = mask.popcount();
    trace.mask_hash = store.put_mask(&mask)?;
    let lcp_time = lcp_start.elapsed();

    // modification
    let mcp_start = Instant::now();
    let (modification, output, image_candidates) = match config.mode {
        PipelineMode::Full | PipelineMode::NoReflect | PipelineMode::NoLcp => {
            let mcp = run_mcp(input, instruction, &mask, &config.mcp_config(), reasoner, inpainter)?;
            stats.merge(&mcp.stats);
            let ModificationResult {
                selected_plan,
                plan_candidates,
                image_candidates,
                selected_index,
                selected_image,
                seeds_used,
                ..
            } = mcp;
            let trace = ModificationTrace {
                plan_candidates: scored_texts(&plan_candidates),
                selected_plan: selected_plan.text().to_owned(),
                image_scores: match image_candidates.scores() {
                    Some(s) => s.into_iter().map(Some).collect(),
                    None => Vec::new(),
                },
                selected_index,
                selected_seed: seeds_used[selected_index],
                seeds: seeds_used,
            };
            let multi = image_candidates.len() > 1;
            (trace, selected_image, multi.then_some(image_candidates))
        }
        PipelineMode::NoMcp | PipelineMode::NoReasoning | PipelineMode::NoReasoningGtMask => {
            let prompt = Prompt::from_instruction(PromptKind::Modification, instruction);
            let seed = config.base_seed;
            let out = stats.timed(Call::Inpaint, Step::McpInpaint, || {
                checked_inpaint(inpainter, input, &mask, &prompt, seed)
            })?;
            let trace = ModificationTrace {
                plan_candidates: Vec::new(),
                selected_plan: prompt.text().to_owned(),
                seeds: vec![seed],
                image_scores: Vec::new(),
                selected_index: 0,
                selected_seed: seed,
            };
            (trace, out, None)
        }
    };

    if config.relocalize_additions
        && matches!(config.mode, PipelineMode::Full | PipelineMode::NoReflect)
    {
        // re-localize on the edited image; the output itself is untouched
        let again = run_lcp(&output, instruction, &config.lcp_config(), reasoner, segmenter)?;
        stats.merge(&again.stats);
        let relocalized = again.final_mask;
        trace.relocalized_mask_hash = Some(store.put_mask(&relocalized)?);
    }

    let verdict = if config.judge_rounds {
        Some(stats.timed(Call::Judge, Step::Judge, || {
            checked_judge(reasoner, input, &output, instruction)
        })?)
    } else {
        None
    };
    let mcp_time = mcp_start.elapsed();

    let output_hash = store.put_image(&output)?;
    let selected_by = if image_candidates.is_some() {
        SelectedBy::Judge
    } else {
        SelectedBy::Single
    };
    let total = started.elapsed();
    let backend = stats.backend_time.min(total);
    let record = EditRecord {
        round,
        mode: config.mode,
        instruction: instruction.clone(),
        input_hash: input_hash.to_owned(),
        localization: trace,
        modification,
        output_hash,
        selected_by,
        verdict,
        timings: RoundTimings {
            lcp_ms: ms(lcp_time),
            mcp_ms: ms(mcp_time),
            backend_ms: ms(backend),
            overhead_ms: ms(total - backend),
            total_ms: ms(total),
        },
        calls: stats.calls,
    };
    Ok(RoundOutcome {
        record,
        output,
        mask,
        image_candidates,
        artifacts: store,
    })
}
