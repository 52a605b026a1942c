//! Blocking JSON-over-HTTP clients for the backend wire protocol.

use std::sync::OnceLock;
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tracing::{debug, warn};

use super::wire::{
    ErrorBody, InpaintRequest, InpaintResponse, ReasonRequest, ReasonResponse, ReasonTask,
    SegmentRequest, SegmentResponse,
};
use super::{
    BackendEndpoint, BackendError, Candidates, Inpainter, Reasoner, ScoreContext, ScoreStage,
    Segmenter, Verdict,
};
use crate::image::{render_overlay, BinaryMask, ImageBuf, ImageError, DEFAULT_MASK_THRESHOLD};
use crate::prompt::{Instruction, Prompt, PromptKind, PromptTemplates};

const RETRY_BACKOFF: Duration = Duration::from_millis(200);

fn encode_err(e: ImageError) -> BackendError {
    BackendError::Precondition(format!("could not encode payload: {e}"))
}

fn decode_err(e: ImageError) -> BackendError {
    BackendError::BadResponse(format!("undecodable image payload: {e}"))
}

/// One endpoint plus a lazily built client.
///
/// The client is created on first use so these types can be constructed
/// inside an async runtime and used later from blocking threads.
#[derive(Debug)]
pub struct Transport {
    endpoint: BackendEndpoint,
    client: OnceLock<reqwest::blocking::Client>,
}

impl Transport {
    pub fn new(endpoint: BackendEndpoint) -> Result<Self, BackendError> {
        endpoint.validate()?;
        Ok(Self {
            endpoint,
            client: OnceLock::new(),
        })
    }

    pub fn endpoint(&self) -> &BackendEndpoint {
        &self.endpoint
    }

    fn client(&self) -> Result<&reqwest::blocking::Client, BackendError> {
        if let Some(c) = self.client.get() {
            return Ok(c);
        }
        let built = reqwest::blocking::Client::builder()
            .timeout(self.endpoint.timeout())
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(self.client.get_or_init(|| built))
    }

    fn attempt<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        url: &str,
        body: &Req,
    ) -> Result<Resp, (BackendError, bool)> {
        let client = self.client().map_err(|e| (e, false))?;
        let mut req = client.post(url).json(body);
        if let Some(token) = &self.endpoint.auth_token {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .map_err(|e| (BackendError::Unavailable(format!("{url}: {e}")), true))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| (BackendError::Unavailable(format!("{url}: {e}")), true))?;
        if !status.is_success() {
            let parsed: Option<ErrorBody> = serde_json::from_str(&text).ok();
            let message = parsed
                .as_ref()
                .map(|b| b.error.clone())
                .unwrap_or_else(|| text.chars().take(200).collect());
            if parsed.as_ref().is_some_and(|b| b.refused) {
                return Err((BackendError::Refused(message), false));
            }
            let retry = status.is_server_error();
            let err = if retry {
                BackendError::Unavailable(format!("{url}: HTTP {status}: {message}"))
            } else {
                BackendError::BadResponse(format!("{url}: HTTP {status}: {message}"))
            };
            return Err((err, retry));
        }
        serde_json::from_str(&text)
            .map_err(|e| (BackendError::BadResponse(format!("{url}: {e}")), true))
    }

    /// POSTs `body` and decodes the reply, retrying transport failures,
    /// 5xx responses and undecodable bodies.
    pub fn post_json<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, BackendError> {
        self.post_validated(path, body, Ok)
    }

    /// Like [`post_json`](Self::post_json) but also retries when `validate`
    /// rejects an otherwise well-formed reply.
    pub fn post_validated<Req: Serialize, Resp: DeserializeOwned, T>(
        &self,
        path: &str,
        body: &Req,
        mut validate: impl FnMut(Resp) -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let url = self.endpoint.url(path);
        let mut last = None;
        for attempt in 0..=self.endpoint.retries {
            if attempt > 0 {
                thread::sleep(RETRY_BACKOFF * attempt);
                debug!(%url, attempt, "retrying backend call");
            }
            match self.attempt(&url, body) {
                Ok(resp) => match validate(resp) {
                    Ok(v) => return Ok(v),
                    Err(e) => last = Some(e),
                },
                Err((e, retry)) => {
                    if !retry {
                        return Err(e);
                    }
                    warn!(%url, error = %e, "backend call failed");
                    last = Some(e);
                }
            }
        }
        Err(last.unwrap_or_else(|| BackendError::Unavailable(url)))
    }
}

/// Collects `n` usable texts: one batched request first, then single
/// requests with incremented seeds for whatever is still missing.
pub(crate) fn generate_n(
    n: usize,
    seed: u64,
    mut request: impl FnMut(usize, u64) -> Result<Vec<String>, BackendError>,
) -> Result<Vec<String>, BackendError> {
    let usable = |texts: Vec<String>| -> Vec<String> {
        texts
            .into_iter()
            .map(|t| t.trim().to_owned())
            .filter(|t| !t.is_empty())
            .collect()
    };
    let mut out = usable(request(n, seed)?);
    let mut offset = 1;
    while out.len() < n && offset <= n as u64 {
        out.extend(usable(request(1, seed + offset)?));
        offset += 1;
    }
    if out.len() < n {
        return Err(BackendError::EmptyGeneration {
            wanted: n,
            got: out.len(),
        });
    }
    out.truncate(n);
    Ok(out)
}

/// Reasoner speaking the `/v1/reason` protocol.
#[derive(Debug)]
pub struct HttpReasoner {
    transport: Transport,
    templates: PromptTemplates,
    id: String,
}

impl HttpReasoner {
    pub fn new(endpoint: BackendEndpoint, templates: PromptTemplates) -> Result<Self, BackendError> {
        templates
            .validate()
            .map_err(|e| BackendError::Precondition(e.to_string()))?;
        let id = format!("http-reasoner@{}", endpoint.base_url);
        Ok(Self {
            transport: Transport::new(endpoint)?,
            templates,
            id,
        })
    }

    fn base_request(
        &self,
        task: ReasonTask,
        image: &ImageBuf,
        instruction: &str,
        seed: u64,
        system: String,
    ) -> Result<ReasonRequest, BackendError> {
        Ok(ReasonRequest {
            task,
            image: image.to_base64_png().map_err(encode_err)?,
            instruction: instruction.to_owned(),
            mask: None,
            candidates: None,
            stage: None,
            prompt: None,
            edited: None,
            n: None,
            seed,
            system,
        })
    }

    fn texts(&self, req: &ReasonRequest) -> Result<Vec<String>, BackendError> {
        self.transport
            .post_validated("/v1/reason", req, |r: ReasonResponse| {
                r.texts
                    .ok_or_else(|| BackendError::BadResponse("reply has no `texts`".into()))
            })
    }

    fn generate(
        &self,
        base: ReasonRequest,
        kind: PromptKind,
        n: usize,
    ) -> Result<Vec<Prompt>, BackendError> {
        let seed = base.seed;
        let texts = generate_n(n, seed, |count, s| {
            let req = ReasonRequest {
                n: Some(count),
                seed: s,
                ..base.clone()
            };
            self.texts(&req)
        })?;
        texts
            .into_iter()
            .map(|t| Prompt::new(kind, t).map_err(|e| BackendError::BadResponse(e.to_string())))
            .collect()
    }
}

impl Reasoner for HttpReasoner {
    fn id(&self) -> &str {
        &self.id
    }

    fn propose_localization(
        &self,
        image: &ImageBuf,
        instruction: &Instruction,
        n: usize,
        seed: u64,
    ) -> Result<Vec<Prompt>, BackendError> {
        let base = self.base_request(
            ReasonTask::ProposeLocalization,
            image,
            instruction.as_str(),
            seed,
            self.templates.localization.clone(),
        )?;
        self.generate(base, PromptKind::Localization, n)
    }

    fn propose_modification(
        &self,
        image: &ImageBuf,
        instruction: &Instruction,
        mask: &BinaryMask,
        n: usize,
        seed: u64,
    ) -> Result<Vec<Prompt>, BackendError> {
        let overlay = render_overlay(image, mask).map_err(encode_err)?;
        let mut base = self.base_request(
            ReasonTask::ProposeModification,
            &overlay,
            instruction.as_str(),
            seed,
            self.templates.modification.clone(),
        )?;
        base.mask = Some(mask.to_base64_png().map_err(encode_err)?);
        self.generate(base, PromptKind::Modification, n)
    }

    fn score_candidates(
        &self,
        stage: ScoreStage,
        context: &ScoreContext<'_>,
        candidates: Candidates<'_>,
    ) -> Result<Vec<f64>, BackendError> {
        let encoded: Vec<String> = match candidates {
            Candidates::Prompts(ps) => ps.iter().map(|p| p.text().to_owned()).collect(),
            Candidates::Masks(ms) => ms
                .iter()
                .map(|m| {
                    render_overlay(context.image, m)
                        .and_then(|o| o.to_base64_png())
                        .map_err(encode_err)
                })
                .collect::<Result<_, _>>()?,
            Candidates::Images(is) => is
                .iter()
                .map(|i| i.to_base64_png().map_err(encode_err))
                .collect::<Result<_, _>>()?,
        };
        let expected = encoded.len();
        let mut req = self.base_request(
            ReasonTask::Score,
            context.image,
            context.instruction.map(|i| i.as_str()).unwrap_or(""),
            0,
            self.templates.reflection(stage.criteria()),
        )?;
        req.candidates = Some(encoded);
        req.stage = Some(stage.as_str().to_owned());
        req.prompt = context.selected_prompt.map(|p| p.text().to_owned());
        if let Some(mask) = context.mask {
            req.mask = Some(mask.to_base64_png().map_err(encode_err)?);
        }
        self.transport
            .post_validated("/v1/reason", &req, |r: ReasonResponse| {
                let scores = r
                    .scores
                    .ok_or_else(|| BackendError::ScoreParse("reply has no `scores`".into()))?;
                if scores.len() != expected || scores.iter().any(|s| !s.is_finite()) {
                    return Err(BackendError::ScoreParse(format!(
                        "expected {expected} finite scores, got {scores:?}"
                    )));
                }
                Ok(scores)
            })
    }

    fn judge_success(
        &self,
        original: &ImageBuf,
        edited: &ImageBuf,
        instruction: &Instruction,
    ) -> Result<Verdict, BackendError> {
        let mut req = self.base_request(
            ReasonTask::Judge,
            original,
            instruction.as_str(),
            0,
            format!("{}\n\n{}", self.templates.reflection, super::chat::JUDGE_SUFFIX),
        )?;
        req.edited = Some(edited.to_base64_png().map_err(encode_err)?);
        self.transport
            .post_validated("/v1/reason", &req, |r: ReasonResponse| {
                let success = r
                    .verdict
                    .ok_or_else(|| BackendError::BadResponse("reply has no `verdict`".into()))?;
                Ok(Verdict {
                    success,
                    rationale: r.rationale.unwrap_or_default(),
                })
            })
    }
}

#[derive(Debug)]
pub struct HttpSegmenter {
    transport: Transport,
    id: String,
}

impl HttpSegmenter {
    pub fn new(endpoint: BackendEndpoint) -> Result<Self, BackendError> {
        let id = format!("http-segmenter@{}", endpoint.base_url);
        Ok(Self {
            transport: Transport::new(endpoint)?,
            id,
        })
    }
}

impl Segmenter for HttpSegmenter {
    fn id(&self) -> &str {
        &self.id
    }

    fn segment(
        &self,
        image: &ImageBuf,
        prompt: &Prompt,
        variant_seed: u64,
    ) -> Result<BinaryMask, BackendError> {
        super::ensure_kind(prompt, PromptKind::Localization)?;
        let req = SegmentRequest {
            image: image.to_base64_png().map_err(encode_err)?,
            prompt: prompt.text().to_owned(),
            seed: variant_seed,
        };
        let dims = image.dims();
        self.transport
            .post_validated("/v1/segment", &req, |r: SegmentResponse| {
                let mask = BinaryMask::from_base64_png(&r.mask, DEFAULT_MASK_THRESHOLD)
                    .map_err(decode_err)?;
                if mask.dims() != dims {
                    return Err(BackendError::DimMismatch {
                        expected: dims,
                        got: mask.dims(),
                    });
                }
                Ok(mask)
            })
    }
}

#[derive(Debug)]
pub struct HttpInpainter {
    transport: Transport,
    id: String,
}

impl HttpInpainter {
    pub fn new(endpoint: BackendEndpoint) -> Result<Self, BackendError> {
        let id = format!("http-inpainter@{}", endpoint.base_url);
        Ok(Self {
            transport: Transport::new(endpoint)?,
            id,
        })
    }
}

impl Inpainter for HttpInpainter {
    fn id(&self) -> &str {
        &self.id
    }

    fn inpaint(
        &self,
        image: &ImageBuf,
        mask: &BinaryMask,
        prompt: &Prompt,
        seed: u64,
    ) -> Result<ImageBuf, BackendError> {
        super::ensure_kind(prompt, PromptKind::Modification)?;
        let req = InpaintRequest {
            image: image.to_base64_png().map_err(encode_err)?,
            mask: mask.to_base64_png().map_err(encode_err)?,
            prompt: prompt.text().to_owned(),
            seed,
        };
        let dims = image.dims();
        self.transport
            .post_validated("/v1/inpaint", &req, |r: InpaintResponse| {
                let out = ImageBuf::from_base64_png(&r.image).map_err(decode_err)?;
                if out.dims() != dims {
                    return Err(BackendError::DimMismatch {
                        expected: dims,
                        got: out.dims(),
                    });
                }
                Ok(out)
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_n_uses_one_call_when_enough() {
        let mut calls = 0;
        let out = generate_n(3, 10, |n, _| {
            calls += 1;
            Ok((0..n).map(|i| format!("t{i}")).collect())
        })
        .unwrap();
        assert_eq!(out, vec!["t0", "t1", "t2"]);
        assert_eq!(calls, 1);
    }

    #[test]
    fn generate_n_falls_back_with_incremented_seeds() {
        let mut seeds = Vec::new();
        let out = generate_n(3, 10, |n, s| {
            seeds.push((n, s));
            if n == 3 {
                Ok(vec!["a".into(), "  ".into()])
            } else {
                Ok(vec![format!("s{s}")])
            }
        })
        .unwrap();
        assert_eq!(out, vec!["a", "s11", "s12"]);
        assert_eq!(seeds, vec![(3, 10), (1, 11), (1, 12)]);
    }

    #[test]
    fn generate_n_gives_up_after_n_fallbacks() {
        let mut calls = 0;
        let err = generate_n(2, 0, |_, _| {
            calls += 1;
            Ok(vec![String::new()])
        })
        .unwrap_err();
        assert_eq!(err, BackendError::EmptyGeneration { wanted: 2, got: 0 });
        assert_eq!(calls, 3);
    }

    #[test]
    fn unreachable_endpoint_is_unavailable() {
        let mut ep = BackendEndpoint::new("http://127.0.0.1:1");
        ep.retries = 0;
        ep.timeout_secs = 2.0;
        let seg = HttpSegmenter::new(ep).unwrap();
        let img = ImageBuf::filled(2, 2, [0, 0, 0]).unwrap();
        let err = seg
            .segment(&img, &Prompt::localization("x").unwrap(), 0)
            .unwrap_err();
        assert!(matches!(err, BackendError::Unavailable(_)), "{err:?}");
    }
}
