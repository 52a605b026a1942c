//! Modification stage: decide *how* to edit inside the localized mask.
//!
//! The reasoner writes an editing plan for the masked region and the
//! inpainter renders it. With reflection, N plans are judged and the winner
//! is rendered with N seeds whose outputs are judged in turn. Plans and
//! images are ranked independently; only the winning plan is rendered.

use crate::backends::{
    checked_inpaint, checked_propose_modification, checked_score, BackendError, Candidates,
    Inpainter, Reasoner, ScoreContext, ScoreStage, Segmenter,
};
use crate::image::{BinaryMask, ImageBuf};
use crate::lcp::{run_lcp, LcpConfig};
use crate::prompt::{Instruction, Prompt};
use crate::select::{CandidateSet, Provenance};
use crate::stage::{Call, StageError, StageStats, Step};

#[derive(Debug, Clone, PartialEq)]
pub struct McpConfig {
    pub n_reflect: usize,
    /// Seed of the first image candidate; candidate i uses `base_seed + i`.
    pub base_seed: u64,
    pub parallel: bool,
}

impl Default for McpConfig {
    fn default() -> Self {
        Self {
            n_reflect: 5,
            base_seed: 0,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModificationResult {
    pub selected_plan: Prompt,
    pub plan_candidates: CandidateSet<Prompt>,
    pub image_candidates: CandidateSet<ImageBuf>,
    pub selected_index: usize,
    pub selected_image: ImageBuf,
    pub seeds_used: Vec<u64>,
    pub stats: StageStats,
}

pub fn run_mcp(
    image: &ImageBuf,
    instruction: &Instruction,
    mask: &BinaryMask,
    config: &McpConfig,
    reasoner: &dyn Reasoner,
    inpainter: &dyn Inpainter,
) -> Result<ModificationResult, StageError> {
    if config.n_reflect == 0 {
        return Err(StageError::new(
            Step::McpPropose,
            BackendError::Precondition("n_reflect must be >= 1".into()),
        ));
    }
    if image.dims() != mask.dims() {
        return Err(StageError::new(
            Step::McpPropose,
            BackendError::Precondition(format!(
                "mask is {}, image is {}",
                mask.dims(),
                image.dims()
            )),
        ));
    }
    let n = config.n_reflect;
    let reflect = n > 1;
    let mut stats = StageStats::default();

    let plans = stats.timed(Call::ProposeModification, Step::McpPropose, || {
        checked_propose_modification(reasoner, image, instruction, mask, n, config.base_seed)
    })?;
    let mut plan_candidates = CandidateSet::from_payloads(plans.iter().cloned().map(|p| {
        (
            p,
            Provenance {
                seed: config.base_seed,
                backend: reasoner.id().to_owned(),
            },
        )
    }));
    let plan_index = if reflect {
        let ctx = ScoreContext {
            image,
            instruction: Some(instruction),
            selected_prompt: None,
            mask: Some(mask),
        };
        let scores = stats.timed(Call::Score, Step::McpScorePlans, || {
            checked_score(reasoner, ScoreStage::MdfPrompt, &ctx, Candidates::Prompts(&plans))
        })?;
        plan_candidates
            .assign_scores(&scores)
            .map_err(|e| StageError::selection(Step::McpScorePlans, e))?;
        plan_candidates
            .select()
            .map_err(|e| StageError::selection(Step::McpScorePlans, e))?
    } else {
        0
    };
    let selected_plan = plans[plan_index].clone();

    let seeds_used: Vec<u64> = (0..n as u64).map(|i| config.base_seed + i).collect();
    let images = stats.timed_batch(Call::Inpaint, Step::McpInpaint, n, config.parallel, |i| {
        checked_inpaint(inpainter, image, mask, &selected_plan, seeds_used[i])
    })?;
    let mut image_candidates =
        CandidateSet::from_payloads(images.iter().cloned().zip(&seeds_used).map(|(img, s)| {
            (
                img,
                Provenance {
                    seed: *s,
                    backend: inpainter.id().to_owned(),
                },
            )
        }));
    let selected_index = if reflect {
        let ctx = ScoreContext {
            image,
            instruction: Some(instruction),
            selected_prompt: None,
            mask: None,
        };
        let scores = stats.timed(Call::Score, Step::McpScoreImages, || {
            checked_score(reasoner, ScoreStage::EditedImage, &ctx, Candidates::Images(&images))
        })?;
        image_candidates
            .assign_scores(&scores)
            .map_err(|e| StageError::selection(Step::McpScoreImages, e))?;
        image_candidates
            .select()
            .map_err(|e| StageError::selection(Step::McpScoreImages, e))?
    } else {
        0
    };
    let selected_image = images[selected_index].clone();

    Ok(ModificationResult {
        selected_plan,
        plan_candidates,
        image_candidates,
        selected_index,
        selected_image,
        seeds_used,
        stats,
    })
}

/// Optional hook for additions: re-localizes on the edited image so the
/// session knows where the new content ended up. Returns `mask` unchanged
/// when disabled. The edited image itself is never altered.
#[allow(clippy::too_many_arguments)]
pub fn relocalize_after_addition(
    image_before: &ImageBuf,
    image_after: &ImageBuf,
    instruction: &Instruction,
    mask: &BinaryMask,
    enabled: bool,
    config: &LcpConfig,
    reasoner: &dyn Reasoner,
    segmenter: &dyn Segmenter,
) -> Result<BinaryMask, StageError> {
    if image_before.dims() != image_after.dims() {
        return Err(StageError::new(
            Step::LcpPropose,
            BackendError::Precondition(format!(
                "before is {}, after is {}",
                image_before.dims(),
                image_after.dims()
            )),
        ));
    }
    if !enabled {
        return Ok(mask.clone());
    }
    Ok(run_lcp(image_after, instruction, config, reasoner, segmenter)?.final_mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mocks::{stamp_color, GeometricSegmenter, MockScenario, RegionRule, ScriptedReasoner, StampInpainter};

    fn scenario() -> MockScenario {
        MockScenario {
            modification_prompts: vec!["plan a".into(), "plan b".into(), "plan c".into()],
            ..Default::default()
        }
        .with_scores(ScoreStage::MdfPrompt, &[5.0, 5.0, 9.0])
        .with_scores(ScoreStage::EditedImage, &[0.0, 7.0, 3.0])
    }

    fn setup() -> (ImageBuf, BinaryMask) {
        let img = ImageBuf::filled(20, 20, [9, 9, 9]).unwrap();
        let mask = BinaryMask::from_fn(20, 20, |x, y| x < 10 && y < 5).unwrap();
        (img, mask)
    }

    #[test]
    fn reflective_selection_follows_scores() {
        let s = scenario();
        let r = ScriptedReasoner::new(s.clone()).unwrap();
        let inp = StampInpainter::new(s).unwrap();
        let (img, mask) = setup();
        let cfg = McpConfig {
            n_reflect: 3,
            base_seed: 100,
            parallel: true,
        };
        let out = run_mcp(&img, &Instruction::new("x").unwrap(), &mask, &cfg, &r, &inp).unwrap();
        assert_eq!(out.selected_plan.text(), "plan c");
        assert_eq!(out.selected_index, 1);
        assert_eq!(out.seeds_used, vec![100, 101, 102]);
        assert_eq!(out.image_candidates.len(), out.seeds_used.len());
        assert_eq!(
            &out.selected_image,
            &out.image_candidates.get(1).unwrap().payload
        );
        assert_eq!(out.selected_image.pixel(0, 0), stamp_color("plan c", 101));
        for y in 0..20 {
            for x in 0..20 {
                if !mask.get(x, y) {
                    assert_eq!(out.selected_image.pixel(x, y), img.pixel(x, y));
                }
            }
        }
    }

    #[test]
    fn single_sample_equals_direct_inpaint() {
        let s = scenario();
        let r = ScriptedReasoner::new(s.clone()).unwrap();
        let inp = StampInpainter::new(s).unwrap();
        let (img, mask) = setup();
        let cfg = McpConfig {
            n_reflect: 1,
            base_seed: 42,
            parallel: false,
        };
        let out = run_mcp(&img, &Instruction::new("x").unwrap(), &mask, &cfg, &r, &inp).unwrap();
        let direct = inp
            .inpaint(&img, &mask, &Prompt::modification("plan a").unwrap(), 42)
            .unwrap();
        assert_eq!(out.selected_image, direct);
        assert_eq!(r.counts().score, 0);
    }

    #[test]
    fn base_seed_only_changes_masked_pixels() {
        let s = scenario();
        let r = ScriptedReasoner::new(s.clone()).unwrap();
        let inp = StampInpainter::new(s).unwrap();
        let (img, mask) = setup();
        let instr = Instruction::new("x").unwrap();
        let run = |seed| {
            let cfg = McpConfig { n_reflect: 3, base_seed: seed, parallel: true };
            run_mcp(&img, &instr, &mask, &cfg, &r, &inp).unwrap().selected_image
        };
        let (a, b) = (run(0), run(1000));
        assert_ne!(a, b);
        for y in 0..20 {
            for x in 0..20 {
                if !mask.get(x, y) {
                    assert_eq!(a.pixel(x, y), b.pixel(x, y));
                }
            }
        }
    }

    #[test]
    fn mask_dims_are_checked() {
        let s = scenario();
        let r = ScriptedReasoner::new(s.clone()).unwrap();
        let inp = StampInpainter::new(s).unwrap();
        let (img, _) = setup();
        let wrong = BinaryMask::empty(3, 3).unwrap();
        let err = run_mcp(&img, &Instruction::new("x").unwrap(), &wrong, &McpConfig::default(), &r, &inp)
            .unwrap_err();
        assert!(matches!(err.source, BackendError::Precondition(_)));
    }

    #[test]
    fn relocalization_hook() {
        let s = MockScenario {
            localization_prompts: vec!["the new hat".into()],
            regions: vec![RegionRule {
                prompt: "the new hat".into(),
                seed: None,
                shape: "rect 3 4 5 6".parse().unwrap(),
            }],
            ..Default::default()
        };
        let r = ScriptedReasoner::new(s.clone()).unwrap();
        let seg = GeometricSegmenter::new(s).unwrap();
        let (before, mask) = setup();
        let after = ImageBuf::filled(20, 20, [1, 2, 3]).unwrap();
        let instr = Instruction::new("add a hat").unwrap();
        let cfg = LcpConfig { n_reflect: 1, dilation_radius: 0, ..Default::default() };

        let off = relocalize_after_addition(&before, &after, &instr, &mask, false, &cfg, &r, &seg).unwrap();
        assert_eq!(off, mask);
        assert_eq!(r.counts().propose_localization, 0);

        let on = relocalize_after_addition(&before, &after, &instr, &mask, true, &cfg, &r, &seg).unwrap();
        let rect = "rect 3 4 5 6".parse::<crate::mocks::Shape>().unwrap().rasterize(&after);
        assert_eq!(on, rect);

        let small = ImageBuf::filled(4, 4, [0, 0, 0]).unwrap();
        assert!(relocalize_after_addition(&before, &small, &instr, &mask, false, &cfg, &r, &seg).is_err());
    }
}
