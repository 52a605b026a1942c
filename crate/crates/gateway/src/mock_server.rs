//! Serves the backend wire protocol from a [`MockScenario`], so the HTTP
//! clients and the CLI can be exercised end to end without model servers.

use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use cogedit_core::backends::wire::{
    ErrorBody, InpaintRequest, InpaintResponse, MetricKind, MetricRequest, MetricResponse, ReasonRequest,
    ReasonResponse, ReasonTask, SegmentRequest, SegmentResponse,
};
use cogedit_core::backends::{
    BackendError, Candidates, Inpainter, Reasoner, ScoreContext, ScoreStage, Segmenter,
};
use cogedit_core::image::{BinaryMask, ImageBuf, DEFAULT_MASK_THRESHOLD};
use cogedit_core::metrics::MetricBackend;
use cogedit_core::mocks::MockSuite;
use cogedit_core::prompt::{Instruction, Prompt, PromptKind};

struct WireError(BackendError);

impl IntoResponse for WireError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            BackendError::Refused(_) => StatusCode::FORBIDDEN,
            BackendError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        let body = ErrorBody {
            error: self.0.to_string(),
            stage: None,
            refused: matches!(self.0, BackendError::Refused(_)),
        };
        (status, Json(body)).into_response()
    }
}

impl From<BackendError> for WireError {
    fn from(e: BackendError) -> Self {
        Self(e)
    }
}

type WireResult<T> = Result<Json<T>, WireError>;

fn bad(msg: impl std::fmt::Display) -> WireError {
    WireError(BackendError::Precondition(msg.to_string()))
}

fn image(b64: &str) -> Result<ImageBuf, WireError> {
    ImageBuf::from_base64_png(b64).map_err(bad)
}

fn mask(b64: &str) -> Result<BinaryMask, WireError> {
    BinaryMask::from_base64_png(b64, DEFAULT_MASK_THRESHOLD).map_err(bad)
}

pub fn router(suite: Arc<MockSuite>) -> Router {
    Router::new()
        .route("/v1/reason", post(reason))
        .route("/v1/segment", post(segment))
        .route("/v1/inpaint", post(inpaint))
        .route("/v1/metric", post(metric))
        .layer(DefaultBodyLimit::max(256 * 1024 * 1024))
        .with_state(suite)
}

async fn reason(State(suite): State<Arc<MockSuite>>, Json(req): Json<ReasonRequest>) -> WireResult<ReasonResponse> {
    let r = &suite.reasoner;
    let img = image(&req.image)?;
    let texts = |ps: Vec<Prompt>| ReasonResponse {
        texts: Some(ps.into_iter().map(|p| p.text().to_owned()).collect()),
        ..Default::default()
    };
    let instruction = || Instruction::new(req.instruction.clone()).map_err(bad);
    let n = req.n.unwrap_or(1);
    let resp = match req.task {
        ReasonTask::ProposeLocalization => texts(r.propose_localization(&img, &instruction()?, n, req.seed)?),
        ReasonTask::ProposeModification => {
            let m = mask(req.mask.as_deref().ok_or_else(|| bad("`mask` is required"))?)?;
            texts(r.propose_modification(&img, &instruction()?, &m, n, req.seed)?)
        }
        ReasonTask::Score => {
            let stage = req
                .stage
                .as_deref()
                .and_then(ScoreStage::parse)
                .ok_or_else(|| bad("missing or unknown `stage`"))?;
            let raw = req.candidates.clone().unwrap_or_default();
            let instr = Instruction::new(req.instruction.clone()).ok();
            let ctx = ScoreContext {
                image: &img,
                instruction: instr.as_ref(),
                selected_prompt: None,
                mask: None,
            };
            let scores = match stage {
                ScoreStage::LocPrompt | ScoreStage::MdfPrompt => {
                    let kind = if stage == ScoreStage::LocPrompt {
                        PromptKind::Localization
                    } else {
                        PromptKind::Modification
                    };
                    let ps: Vec<Prompt> = raw
                        .into_iter()
                        .map(|t| Prompt::new(kind, t).map_err(bad))
                        .collect::<Result<_, _>>()?;
                    r.score_candidates(stage, &ctx, Candidates::Prompts(&ps))?
                }
                ScoreStage::Mask | ScoreStage::EditedImage => {
                    let imgs: Vec<ImageBuf> = raw.iter().map(|c| image(c)).collect::<Result<_, _>>()?;
                    r.score_candidates(stage, &ctx, Candidates::Images(&imgs))?
                }
            };
            ReasonResponse {
                scores: Some(scores),
                ..Default::default()
            }
        }
        ReasonTask::Judge => {
            let edited = image(req.edited.as_deref().ok_or_else(|| bad("`edited` is required"))?)?;
            let v = r.judge_success(&img, &edited, &instruction()?)?;
            ReasonResponse {
                verdict: Some(v.success),
                rationale: Some(v.rationale),
                ..Default::default()
            }
        }
    };
    Ok(Json(resp))
}

async fn segment(State(suite): State<Arc<MockSuite>>, Json(req): Json<SegmentRequest>) -> WireResult<SegmentResponse> {
    let img = image(&req.image)?;
    let prompt = Prompt::localization(req.prompt).map_err(bad)?;
    let m = suite.segmenter.segment(&img, &prompt, req.seed)?;
    Ok(Json(SegmentResponse {
        mask: m.to_base64_png().map_err(bad)?,
    }))
}

async fn inpaint(State(suite): State<Arc<MockSuite>>, Json(req): Json<InpaintRequest>) -> WireResult<InpaintResponse> {
    let img = image(&req.image)?;
    let m = mask(&req.mask)?;
    let prompt = Prompt::modification(req.prompt).map_err(bad)?;
    let out = suite.inpainter.inpaint(&img, &m, &prompt, req.seed)?;
    Ok(Json(InpaintResponse {
        image: out.to_base64_png().map_err(bad)?,
    }))
}

async fn metric(State(suite): State<Arc<MockSuite>>, Json(req): Json<MetricRequest>) -> WireResult<MetricResponse> {
    let a = image(&req.image_a)?;
    let value = match req.kind {
        MetricKind::Lpips => {
            let b = image(req.image_b.as_deref().ok_or_else(|| bad("`image_b` is required"))?)?;
            suite.metrics.lpips(&a, &b)?
        }
        MetricKind::Clip => suite
            .metrics
            .clip(&a, req.text.as_deref().ok_or_else(|| bad("`text` is required"))?)?,
    };
    Ok(Json(MetricResponse { value: value.into() }))
}
