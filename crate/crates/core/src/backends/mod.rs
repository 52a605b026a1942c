//! Interfaces to the three external models and their network clients.
//!
//! * [`Reasoner`]: the multimodal planner and judge.
//! * [`Segmenter`]: text-prompted segmentation.
//! * [`Inpainter`]: mask-conditioned image synthesis.
//!
//! Every response crossing one of these boundaries is shape-checked by the
//! `checked_*` helpers before the pipeline sees it.

pub mod chat;
pub mod http;
pub mod wire;

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{BinaryMask, Dims, ImageBuf};
use crate::prompt::{Instruction, Prompt, PromptKind};

pub use chat::ChatReasoner;
pub use http::{HttpInpainter, HttpReasoner, HttpSegmenter};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("backend produced {got} usable texts, {wanted} requested")]
    EmptyGeneration { wanted: usize, got: usize },
    #[error("could not parse judge scores: {0}")]
    ScoreParse(String),
    #[error("backend returned {got}, expected {expected}")]
    DimMismatch { expected: Dims, got: Dims },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("mock scenario has no entry for {0}")]
    ScenarioMiss(String),
    #[error("request refused by backend: {0}")]
    Refused(String),
}

/// The four reflective selection points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreStage {
    LocPrompt,
    Mask,
    MdfPrompt,
    EditedImage,
}

impl ScoreStage {
    pub const ALL: [ScoreStage; 4] = [
        ScoreStage::LocPrompt,
        ScoreStage::Mask,
        ScoreStage::MdfPrompt,
        ScoreStage::EditedImage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreStage::LocPrompt => "loc_prompt",
            ScoreStage::Mask => "mask",
            ScoreStage::MdfPrompt => "mdf_prompt",
            ScoreStage::EditedImage => "edited_image",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str() == s)
    }

    /// Review criteria substituted into the reflection template.
    pub fn criteria(self) -> &'static str {
        match self {
            ScoreStage::LocPrompt | ScoreStage::Mask => {
                "spatial accuracy and semantic relevance to the region the instruction must change"
            }
            ScoreStage::MdfPrompt | ScoreStage::EditedImage => {
                "semantic fidelity to the instruction, visual quality, and consistency with the untouched parts of the image"
            }
        }
    }
}

impl fmt::Display for ScoreStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What the judge sees besides the candidates.
#[derive(Debug, Clone, Copy)]
pub struct ScoreContext<'a> {
    pub image: &'a ImageBuf,
    pub instruction: Option<&'a Instruction>,
    pub selected_prompt: Option<&'a Prompt>,
    pub mask: Option<&'a BinaryMask>,
}

#[derive(Debug, Clone, Copy)]
pub enum Candidates<'a> {
    Prompts(&'a [Prompt]),
    Masks(&'a [BinaryMask]),
    Images(&'a [ImageBuf]),
}

impl Candidates<'_> {
    pub fn len(&self) -> usize {
        match self {
            Candidates::Prompts(p) => p.len(),
            Candidates::Masks(m) => m.len(),
            Candidates::Images(i) => i.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub success: bool,
    pub rationale: String,
}

/// Multimodal planner and judge.
pub trait Reasoner: Send + Sync {
    fn id(&self) -> &str;

    fn propose_localization(
        &self,
        image: &ImageBuf,
        instruction: &Instruction,
        n: usize,
        seed: u64,
    ) -> Result<Vec<Prompt>, BackendError>;

    fn propose_modification(
        &self,
        image: &ImageBuf,
        instruction: &Instruction,
        mask: &BinaryMask,
        n: usize,
        seed: u64,
    ) -> Result<Vec<Prompt>, BackendError>;

    fn score_candidates(
        &self,
        stage: ScoreStage,
        context: &ScoreContext<'_>,
        candidates: Candidates<'_>,
    ) -> Result<Vec<f64>, BackendError>;

    fn judge_success(
        &self,
        original: &ImageBuf,
        edited: &ImageBuf,
        instruction: &Instruction,
    ) -> Result<Verdict, BackendError>;
}

/// Text-prompted segmentation.
pub trait Segmenter: Send + Sync {
    fn id(&self) -> &str;

    fn segment(
        &self,
        image: &ImageBuf,
        prompt: &Prompt,
        variant_seed: u64,
    ) -> Result<BinaryMask, BackendError>;
}

/// Mask-conditioned synthesis.
pub trait Inpainter: Send + Sync {
    fn id(&self) -> &str;

    fn inpaint(
        &self,
        image: &ImageBuf,
        mask: &BinaryMask,
        prompt: &Prompt,
        seed: u64,
    ) -> Result<ImageBuf, BackendError>;
}

/// Per-operation call totals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub propose_localization: u64,
    pub propose_modification: u64,
    pub score: u64,
    pub judge: u64,
    pub segment: u64,
    pub inpaint: u64,
}

impl CallCounts {
    pub fn reasoner(&self) -> u64 {
        self.propose_localization + self.propose_modification + self.score + self.judge
    }

    pub fn generation(&self) -> u64 {
        self.propose_localization + self.propose_modification
    }
}

/// Network location and transport policy of one backend service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendEndpoint {
    pub base_url: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default, skip_serializing)]
    pub auth_token: Option<String>,
}

fn default_timeout_secs() -> f64 {
    120.0
}

fn default_retries() -> u32 {
    2
}

impl BackendEndpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout_secs: default_timeout_secs(),
            retries: default_retries(),
            auth_token: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(BackendError::Precondition(format!(
                "endpoint timeout must be > 0 (got {})",
                self.timeout_secs
            )));
        }
        if self.base_url.trim().is_empty() {
            return Err(BackendError::Precondition("endpoint URL is empty".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), path)
    }
}

pub(crate) fn ensure_kind(prompt: &Prompt, kind: PromptKind) -> Result<(), BackendError> {
    if prompt.kind() != kind {
        return Err(BackendError::Precondition(format!(
            "expected a {kind:?} prompt, got {:?}",
            prompt.kind()
        )));
    }
    Ok(())
}

fn ensure_dims(expected: Dims, got: Dims) -> Result<(), BackendError> {
    if expected != got {
        return Err(BackendError::DimMismatch { expected, got });
    }
    Ok(())
}

fn ensure_generated(texts: Vec<Prompt>, n: usize) -> Result<Vec<Prompt>, BackendError> {
    if texts.len() < n {
        return Err(BackendError::EmptyGeneration {
            wanted: n,
            got: texts.len(),
        });
    }
    Ok(texts.into_iter().take(n).collect())
}

pub fn checked_propose_localization(
    reasoner: &dyn Reasoner,
    image: &ImageBuf,
    instruction: &Instruction,
    n: usize,
    seed: u64,
) -> Result<Vec<Prompt>, BackendError> {
    if n == 0 {
        return Err(BackendError::Precondition("n must be >= 1".into()));
    }
    let out = reasoner.propose_localization(image, instruction, n, seed)?;
    if let Some(p) = out.iter().find(|p| p.kind() != PromptKind::Localization) {
        return Err(BackendError::BadResponse(format!(
            "localization request returned a {:?} prompt",
            p.kind()
        )));
    }
    ensure_generated(out, n)
}

pub fn checked_propose_modification(
    reasoner: &dyn Reasoner,
    image: &ImageBuf,
    instruction: &Instruction,
    mask: &BinaryMask,
    n: usize,
    seed: u64,
) -> Result<Vec<Prompt>, BackendError> {
    if n == 0 {
        return Err(BackendError::Precondition("n must be >= 1".into()));
    }
    ensure_dims(image.dims(), mask.dims())
        .map_err(|e| BackendError::Precondition(e.to_string()))?;
    let out = reasoner.propose_modification(image, instruction, mask, n, seed)?;
    if let Some(p) = out.iter().find(|p| p.kind() != PromptKind::Modification) {
        return Err(BackendError::BadResponse(format!(
            "modification request returned a {:?} prompt",
            p.kind()
        )));
    }
    ensure_generated(out, n)
}

pub fn checked_score(
    reasoner: &dyn Reasoner,
    stage: ScoreStage,
    context: &ScoreContext<'_>,
    candidates: Candidates<'_>,
) -> Result<Vec<f64>, BackendError> {
    if candidates.is_empty() {
        return Err(BackendError::Precondition("no candidates to score".into()));
    }
    let scores = reasoner.score_candidates(stage, context, candidates)?;
    if scores.len() != candidates.len() {
        return Err(BackendError::BadResponse(format!(
            "{} scores for {} candidates",
            scores.len(),
            candidates.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(BackendError::BadResponse(format!("non-finite score {s}")));
    }
    Ok(scores)
}

pub fn checked_judge(
    reasoner: &dyn Reasoner,
    original: &ImageBuf,
    edited: &ImageBuf,
    instruction: &Instruction,
) -> Result<Verdict, BackendError> {
    ensure_dims(original.dims(), edited.dims())
        .map_err(|e| BackendError::Precondition(e.to_string()))?;
    reasoner.judge_success(original, edited, instruction)
}

pub fn checked_segment(
    segmenter: &dyn Segmenter,
    image: &ImageBuf,
    prompt: &Prompt,
    variant_seed: u64,
) -> Result<BinaryMask, BackendError> {
    ensure_kind(prompt, PromptKind::Localization)?;
    let mask = segmenter.segment(image, prompt, variant_seed)?;
    ensure_dims(image.dims(), mask.dims())?;
    Ok(mask)
}

pub fn checked_inpaint(
    inpainter: &dyn Inpainter,
    image: &ImageBuf,
    mask: &BinaryMask,
    prompt: &Prompt,
    seed: u64,
) -> Result<ImageBuf, BackendError> {
    ensure_kind(prompt, PromptKind::Modification)?;
    ensure_dims(image.dims(), mask.dims())
        .map_err(|e| BackendError::Precondition(e.to_string()))?;
    let out = inpainter.inpaint(image, mask, prompt, seed)?;
    ensure_dims(image.dims(), out.dims())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct WrongSize;

    impl Segmenter for WrongSize {
        fn id(&self) -> &str {
            "wrong-size"
        }
        fn segment(&self, _: &ImageBuf, _: &Prompt, _: u64) -> Result<BinaryMask, BackendError> {
            Ok(BinaryMask::empty(3, 3).unwrap())
        }
    }

    impl Inpainter for WrongSize {
        fn id(&self) -> &str {
            "wrong-size"
        }
        fn inpaint(
            &self,
            _: &ImageBuf,
            _: &BinaryMask,
            _: &Prompt,
            _: u64,
        ) -> Result<ImageBuf, BackendError> {
            Ok(ImageBuf::filled(3, 3, [0, 0, 0]).unwrap())
        }
    }

    #[test]
    fn wrong_sized_outputs_are_caught() {
        let img = ImageBuf::filled(4, 4, [1, 1, 1]).unwrap();
        let loc = Prompt::localization("x").unwrap();
        let mdf = Prompt::modification("y").unwrap();
        let mask = BinaryMask::empty(4, 4).unwrap();
        assert!(matches!(
            checked_segment(&WrongSize, &img, &loc, 0),
            Err(BackendError::DimMismatch { .. })
        ));
        assert!(matches!(
            checked_inpaint(&WrongSize, &img, &mask, &mdf, 0),
            Err(BackendError::DimMismatch { .. })
        ));
    }

    #[test]
    fn prompt_kind_precondition() {
        let img = ImageBuf::filled(4, 4, [1, 1, 1]).unwrap();
        let mdf = Prompt::modification("y").unwrap();
        assert!(matches!(
            checked_segment(&WrongSize, &img, &mdf, 0),
            Err(BackendError::Precondition(_))
        ));
    }

    #[test]
    fn endpoint_defaults_and_validation() {
        let ep: BackendEndpoint =
            serde_json::from_str(r#"{"base_url": "http://localhost:9/"}"#).unwrap();
        assert_eq!(ep.timeout_secs, 120.0);
        assert_eq!(ep.retries, 2);
        assert_eq!(ep.url("/v1/reason"), "http://localhost:9/v1/reason");
        let bad = BackendEndpoint {
            timeout_secs: 0.0,
            ..ep
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn auth_token_is_never_serialized() {
        let mut ep = BackendEndpoint::new("http://x");
        ep.auth_token = Some("secret".into());
        assert!(!serde_json::to_string(&ep).unwrap().contains("secret"));
    }

    #[test]
    fn stage_names_round_trip() {
        for st in ScoreStage::ALL {
            assert_eq!(ScoreStage::parse(st.as_str()), Some(st));
        }
    }
}
