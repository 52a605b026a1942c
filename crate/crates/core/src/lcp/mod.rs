//! Localization stage: decide *what* to edit.
//!
//! The reasoner turns the instruction into a referring expression, the
//! segmenter turns that expression into a mask, and dilation grows the
//! winning mask. With reflection enabled, N expressions are generated and
//! judged, then N mask variants of the winning expression are judged.
//! Masks are judged before dilation; only the winner is dilated.

mod morphology;

pub use morphology::{
    dilate, dilate_with, squared_distance_transform, StructuringElement, DEFAULT_DILATION_RADIUS,
};

use tracing::warn;

use crate::backends::{
    checked_propose_localization, checked_score, checked_segment, Candidates, Reasoner,
    ScoreContext, ScoreStage, Segmenter,
};
use crate::image::{BinaryMask, ImageBuf};
use crate::prompt::{Instruction, Prompt};
use crate::select::{CandidateSet, Provenance};
use crate::stage::{Call, StageError, StageStats, Step};

#[derive(Debug, Clone, PartialEq)]
pub struct LcpConfig {
    /// Number of reflective samples; 1 disables reflection.
    pub n_reflect: usize,
    pub dilation_radius: u32,
    pub element: StructuringElement,
    /// Seed passed to prompt generation.
    pub seed: u64,
    /// Whether the mask judge also sees the instruction.
    pub mask_judge_sees_instruction: bool,
    pub parallel: bool,
}

impl Default for LcpConfig {
    fn default() -> Self {
        Self {
            n_reflect: 5,
            dilation_radius: DEFAULT_DILATION_RADIUS,
            element: StructuringElement::Disk,
            seed: 0,
            mask_judge_sees_instruction: false,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocalizationResult {
    pub selected_prompt: Prompt,
    pub prompt_candidates: CandidateSet<Prompt>,
    pub mask_candidates: CandidateSet<BinaryMask>,
    pub selected_mask_index: usize,
    /// The selected mask before dilation.
    pub raw_mask: BinaryMask,
    pub final_mask: BinaryMask,
    pub dilation_radius: u32,
    /// Set when the segmenter found nothing for the selected prompt.
    pub empty_mask: bool,
    pub stats: StageStats,
}

pub fn run_lcp(
    image: &ImageBuf,
    instruction: &Instruction,
    config: &LcpConfig,
    reasoner: &dyn Reasoner,
    segmenter: &dyn Segmenter,
) -> Result<LocalizationResult, StageError> {
    if config.n_reflect == 0 {
        return Err(StageError::new(
            Step::LcpPropose,
            crate::backends::BackendError::Precondition("n_reflect must be >= 1".into()),
        ));
    }
    let n = config.n_reflect;
    let reflect = n > 1;
    let mut stats = StageStats::default();

    let prompts = stats.timed(Call::ProposeLocalization, Step::LcpPropose, || {
        checked_propose_localization(reasoner, image, instruction, n, config.seed)
    })?;
    let mut prompt_candidates = CandidateSet::from_payloads(prompts.iter().cloned().map(|p| {
        (
            p,
            Provenance {
                seed: config.seed,
                backend: reasoner.id().to_owned(),
            },
        )
    }));

    let prompt_index = if reflect {
        let ctx = ScoreContext {
            image,
            instruction: Some(instruction),
            selected_prompt: None,
            mask: None,
        };
        let scores = stats.timed(Call::Score, Step::LcpScorePrompts, || {
            checked_score(reasoner, ScoreStage::LocPrompt, &ctx, Candidates::Prompts(&prompts))
        })?;
        prompt_candidates
            .assign_scores(&scores)
            .map_err(|e| StageError::selection(Step::LcpScorePrompts, e))?;
        prompt_candidates
            .select()
            .map_err(|e| StageError::selection(Step::LcpScorePrompts, e))?
    } else {
        0
    };
    let selected_prompt = prompts[prompt_index].clone();

    let masks = stats.timed_batch(Call::Segment, Step::LcpSegment, n, config.parallel, |i| {
        checked_segment(segmenter, image, &selected_prompt, i as u64)
    })?;
    let mut mask_candidates = CandidateSet::from_payloads(masks.iter().cloned().enumerate().map(
        |(i, m)| {
            (
                m,
                Provenance {
                    seed: i as u64,
                    backend: segmenter.id().to_owned(),
                },
            )
        },
    ));

    let mask_index = if reflect {
        let ctx = ScoreContext {
            image,
            instruction: config.mask_judge_sees_instruction.then_some(instruction),
            selected_prompt: Some(&selected_prompt),
            mask: None,
        };
        let scores = stats.timed(Call::Score, Step::LcpScoreMasks, || {
            checked_score(reasoner, ScoreStage::Mask, &ctx, Candidates::Masks(&masks))
        })?;
        mask_candidates
            .assign_scores(&scores)
            .map_err(|e| StageError::selection(Step::LcpScoreMasks, e))?;
        mask_candidates
            .select()
            .map_err(|e| StageError::selection(Step::LcpScoreMasks, e))?
    } else {
        0
    };

    let raw_mask = masks[mask_index].clone();
    let empty_mask = raw_mask.is_empty();
    if empty_mask {
        warn!(prompt = selected_prompt.text(), "segmenter returned an empty mask");
    }
    let final_mask = dilate_with(&raw_mask, config.dilation_radius, config.element);

    Ok(LocalizationResult {
        selected_prompt,
        prompt_candidates,
        mask_candidates,
        selected_mask_index: mask_index,
        raw_mask,
        final_mask,
        dilation_radius: config.dilation_radius,
        empty_mask,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mocks::{GeometricSegmenter, MockScenario, RegionRule, ScriptedReasoner};

    fn scenario() -> MockScenario {
        MockScenario {
            localization_prompts: vec!["p0".into(), "p1".into(), "p2".into()],
            regions: (0..3)
                .map(|s| RegionRule {
                    prompt: "p1".into(),
                    seed: Some(s),
                    shape: format!("rect {} {} 4 4", 10 * s + 2, 10 * s + 2).parse().unwrap(),
                })
                .chain(std::iter::once(RegionRule {
                    prompt: "p0".into(),
                    seed: None,
                    shape: "circle 30 30 5".parse().unwrap(),
                }))
                .collect(),
            ..Default::default()
        }
        .with_scores(ScoreStage::LocPrompt, &[2.0, 8.0, 4.0])
        .with_scores(ScoreStage::Mask, &[1.0, 1.0, 9.0])
    }

    fn img() -> ImageBuf {
        ImageBuf::filled(64, 64, [40, 40, 40]).unwrap()
    }

    #[test]
    fn reflective_path_selects_scripted_best() {
        let s = scenario();
        let r = ScriptedReasoner::new(s.clone()).unwrap();
        let seg = GeometricSegmenter::new(s).unwrap();
        let cfg = LcpConfig {
            n_reflect: 3,
            ..Default::default()
        };
        let out = run_lcp(&img(), &Instruction::new("x").unwrap(), &cfg, &r, &seg).unwrap();
        assert_eq!(out.selected_prompt.text(), "p1");
        assert_eq!(out.selected_mask_index, 2);
        let m2 = out.mask_candidates.get(2).unwrap().payload.clone();
        assert_eq!(out.raw_mask, m2);
        assert_eq!(out.final_mask, dilate(&m2, 20));
        assert!(out.final_mask.popcount() >= out.raw_mask.popcount());
        assert_eq!(out.prompt_candidates.scores(), Some(vec![2.0, 8.0, 4.0]));
        assert_eq!(out.mask_candidates.scores(), Some(vec![1.0, 1.0, 9.0]));
        let counts = r.counts();
        assert_eq!(counts.propose_localization, 1);
        assert_eq!(counts.score, 2);
        assert_eq!(seg.counts().segment, 3);
        assert_eq!(out.stats.calls.segment, 3);
    }

    #[test]
    fn single_sample_path_never_scores() {
        let s = scenario();
        let r = ScriptedReasoner::new(s.clone()).unwrap();
        let seg = GeometricSegmenter::new(s).unwrap();
        let cfg = LcpConfig {
            n_reflect: 1,
            ..Default::default()
        };
        let out = run_lcp(&img(), &Instruction::new("x").unwrap(), &cfg, &r, &seg).unwrap();
        assert_eq!(out.selected_prompt.text(), "p0");
        assert_eq!(r.counts().score, 0);
        assert_eq!(r.counts().propose_localization, 1);
        assert_eq!(seg.counts().segment, 1);
        assert_eq!(out.prompt_candidates.scores(), None);
    }

    #[test]
    fn tied_prompt_scores_pick_first() {
        let s = MockScenario {
            localization_prompts: vec!["p0".into(), "p1".into()],
            default_region: Some("rect 0 0 2 2".parse().unwrap()),
            ..Default::default()
        }
        .with_scores(ScoreStage::LocPrompt, &[5.0, 5.0])
        .with_scores(ScoreStage::Mask, &[]);
        let r = ScriptedReasoner::new(s.clone()).unwrap();
        let seg = GeometricSegmenter::new(s).unwrap();
        let cfg = LcpConfig {
            n_reflect: 2,
            ..Default::default()
        };
        let out = run_lcp(&img(), &Instruction::new("x").unwrap(), &cfg, &r, &seg).unwrap();
        assert_eq!(out.selected_prompt.text(), "p0");
        assert_eq!(out.selected_mask_index, 0);
    }

    #[test]
    fn empty_selection_is_flagged_not_failed() {
        let s = MockScenario {
            localization_prompts: vec!["ghost".into()],
            default_region: Some(crate::mocks::Shape::None),
            ..Default::default()
        };
        let r = ScriptedReasoner::new(s.clone()).unwrap();
        let seg = GeometricSegmenter::new(s).unwrap();
        let cfg = LcpConfig {
            n_reflect: 1,
            ..Default::default()
        };
        let out = run_lcp(&img(), &Instruction::new("x").unwrap(), &cfg, &r, &seg).unwrap();
        assert!(out.empty_mask);
        assert!(out.final_mask.is_empty());
    }

    #[test]
    fn missing_region_names_segment_step() {
        let s = MockScenario {
            localization_prompts: vec!["unknown".into()],
            ..Default::default()
        };
        let r = ScriptedReasoner::new(s.clone()).unwrap();
        let seg = GeometricSegmenter::new(s).unwrap();
        let cfg = LcpConfig {
            n_reflect: 1,
            ..Default::default()
        };
        let err = run_lcp(&img(), &Instruction::new("x").unwrap(), &cfg, &r, &seg).unwrap_err();
        assert_eq!(err.step, Step::LcpSegment);
    }
}
