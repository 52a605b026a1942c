//! End-to-end orchestration: one round composes localization and
//! modification according to a [`PipelineMode`]; sessions chain rounds.

mod round;
mod session;
mod store;

pub use round::{
    run_round, EditRecord, LocalizationTrace, MaskSource, ModificationTrace, RoundOutcome,
    RoundTimings, ScoredText, SelectedBy,
};
pub use session::{
    run_session, DiverseCandidate, DiverseChoice, SessionAbort, SessionDoc, SessionState,
    SESSION_SCHEMA_VERSION,
};
pub use store::{load_session, save_session, ArtifactStore, StoreError};

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    BackendEndpoint, BackendError, ChatReasoner, HttpInpainter, HttpReasoner, HttpSegmenter,
    Inpainter, Reasoner, Segmenter,
};
use crate::image::ImageError;
use crate::lcp::{LcpConfig, StructuringElement, DEFAULT_DILATION_RADIUS};
use crate::mcp::McpConfig;
use crate::mocks::MockSuite;
use crate::prompt::PromptTemplates;
use crate::stage::{StageError, Step};

/// Which parts of the two-stage pipeline run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    /// Localization and modification, each with reflective selection.
    Full,
    /// As `Full` with a single sample at every selection point.
    NoReflect,
    /// Whole-image mask; modification runs as usual.
    NoLcp,
    /// Localization runs; the raw instruction is inpainted with one seed.
    NoMcp,
    /// Instruction is segmented and inpainted directly.
    NoReasoning,
    /// Caller-supplied mask, raw instruction.
    NoReasoningGtMask,
}

impl PipelineMode {
    pub const ALL: [PipelineMode; 6] = [
        PipelineMode::Full,
        PipelineMode::NoReflect,
        PipelineMode::NoLcp,
        PipelineMode::NoMcp,
        PipelineMode::NoReasoning,
        PipelineMode::NoReasoningGtMask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineMode::Full => "full",
            PipelineMode::NoReflect => "no_reflect",
            PipelineMode::NoLcp => "no_lcp",
            PipelineMode::NoMcp => "no_mcp",
            PipelineMode::NoReasoning => "no_reasoning",
            PipelineMode::NoReasoningGtMask => "no_reasoning_gt_mask",
        }
    }

    pub fn needs_gt_mask(self) -> bool {
        self == PipelineMode::NoReasoningGtMask
    }
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineMode {
    type Err = String;

    /// Accepts the snake_case names with or without underscores or dashes.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| *c != '_' && *c != '-')
            .collect::<String>()
            .to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|m| m.as_str().replace('_', "") == key)
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

/// What to do when localization selects an empty mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyMaskPolicy {
    #[default]
    Error,
    FullMaskFallback,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackendEndpoints {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoner: Option<BackendEndpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmenter: Option<BackendEndpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inpainter: Option<BackendEndpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
    pub n_reflect: usize,
    pub dilation_radius: u32,
    pub element: StructuringElement,
    pub base_seed: u64,
    pub endpoints: BackendEndpoints,
    pub score_includes_instruction_for_masks: bool,
    pub relocalize_additions: bool,
    pub empty_mask_policy: EmptyMaskPolicy,
    /// Ask the judge for a verdict after every round.
    pub judge_rounds: bool,
    /// Issue independent candidate calls concurrently.
    pub parallel: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: PipelineMode::Full,
            n_reflect: 5,
            dilation_radius: DEFAULT_DILATION_RADIUS,
            element: StructuringElement::Disk,
            base_seed: 0,
            endpoints: BackendEndpoints::default(),
            score_includes_instruction_for_masks: false,
            relocalize_additions: false,
            empty_mask_policy: EmptyMaskPolicy::Error,
            judge_rounds: false,
            parallel: true,
        }
    }
}

impl PipelineConfig {
    pub fn with_mode(mode: PipelineMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.n_reflect == 0 {
            return Err(PipelineError::InvalidConfig("n_reflect must be >= 1".into()));
        }
        for ep in [
            &self.endpoints.reasoner,
            &self.endpoints.segmenter,
            &self.endpoints.inpainter,
        ]
        .into_iter()
        .flatten()
        {
            ep.validate()
                .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }

    /// Sample count actually used at the selection points.
    pub fn effective_n(&self) -> usize {
        match self.mode {
            PipelineMode::NoReflect => 1,
            _ => self.n_reflect,
        }
    }

    pub fn lcp_config(&self) -> LcpConfig {
        LcpConfig {
            n_reflect: self.effective_n(),
            dilation_radius: self.dilation_radius,
            element: self.element,
            seed: self.base_seed,
            mask_judge_sees_instruction: self.score_includes_instruction_for_masks,
            parallel: self.parallel,
        }
    }

    pub fn mcp_config(&self) -> McpConfig {
        McpConfig {
            n_reflect: self.effective_n(),
            base_seed: self.base_seed,
            parallel: self.parallel,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error("round {round}: selected mask is empty")]
    EmptyMask { round: usize },
    #[error("mode no_reasoning_gt_mask needs a ground-truth mask")]
    MissingGtMask,
    #[error("a ground-truth mask is only accepted in mode no_reasoning_gt_mask")]
    UnexpectedGtMask,
    #[error("ground-truth mask is {mask}, image is {image}")]
    GtMaskDims {
        mask: crate::image::Dims,
        image: crate::image::Dims,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("k = {k} exceeds the {n} candidates available")]
    KTooLarge { k: usize, n: usize },
    #[error("diverse generation needs k >= 2 (got {0})")]
    KTooSmall(usize),
    #[error("diverse generation needs mode full (session uses {0})")]
    DiverseNeedsFull(PipelineMode),
    #[error("choice {index} is out of range for {len} candidates")]
    BadChoice { index: usize, len: usize },
    #[error("choice was generated for a different session state")]
    StaleChoice,
    #[error("no instructions given")]
    NoInstructions,
    #[error(transparent)]
    Image(#[from] ImageError),
}

impl PipelineError {
    /// Backend step that failed, when the failure came from a backend.
    pub fn step(&self) -> Option<Step> {
        match self {
            PipelineError::Stage(e) => Some(e.step),
            _ => None,
        }
    }

    pub fn is_refusal(&self) -> bool {
        matches!(
            self,
            PipelineError::Stage(StageError {
                source: BackendError::Refused(_),
                ..
            })
        )
    }
}

/// The three model services used by a round.
#[derive(Clone)]
pub struct Backends {
    pub reasoner: Arc<dyn Reasoner>,
    pub segmenter: Arc<dyn Segmenter>,
    pub inpainter: Arc<dyn Inpainter>,
}

impl fmt::Debug for Backends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backends")
            .field("reasoner", &self.reasoner.id())
            .field("segmenter", &self.segmenter.id())
            .field("inpainter", &self.inpainter.id())
            .finish()
    }
}

/// Wire flavour spoken by the reasoner endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReasonerProtocol {
    /// `POST /v1/reason`.
    Native,
    /// OpenAI-compatible chat completions with the given model name.
    Chat { model: String },
}

impl Backends {
    pub fn from_mocks(suite: &MockSuite) -> Self {
        Self {
            reasoner: suite.reasoner.clone(),
            segmenter: suite.segmenter.clone(),
            inpainter: suite.inpainter.clone(),
        }
    }

    /// HTTP clients for all three endpoints.
    pub fn from_endpoints(
        endpoints: &BackendEndpoints,
        protocol: ReasonerProtocol,
        templates: PromptTemplates,
    ) -> Result<Self, BackendError> {
        let need = |ep: &Option<BackendEndpoint>, name: &str| {
            ep.clone()
                .ok_or_else(|| BackendError::Precondition(format!("no {name} endpoint configured")))
        };
        let reasoner_ep = need(&endpoints.reasoner, "reasoner")?;
        let reasoner: Arc<dyn Reasoner> = match protocol {
            ReasonerProtocol::Native => Arc::new(HttpReasoner::new(reasoner_ep, templates)?),
            ReasonerProtocol::Chat { model } => {
                Arc::new(ChatReasoner::new(reasoner_ep, model, templates)?)
            }
        };
        Ok(Self {
            reasoner,
            segmenter: Arc::new(HttpSegmenter::new(need(&endpoints.segmenter, "segmenter")?)?),
            inpainter: Arc::new(HttpInpainter::new(need(&endpoints.inpainter, "inpainter")?)?),
        })
    }
}
