//! JSON bodies of the backend wire protocol. Images and masks travel as
//! base64-encoded PNG.
//!
//! ```text
//! POST {base}/v1/reason   ReasonRequest  -> ReasonResponse
//! POST {base}/v1/segment  SegmentRequest -> SegmentResponse
//! POST {base}/v1/inpaint  InpaintRequest -> InpaintResponse
//! POST {base}/v1/metric   MetricRequest  -> MetricResponse
//! non-2xx                 ErrorBody
//! ```

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonTask {
    ProposeLocalization,
    ProposeModification,
    Score,
    Judge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonRequest {
    pub task: ReasonTask,
    pub image: String,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    /// Prompt texts, or base64 PNGs for mask and image stages.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    /// Selected localization prompt when scoring masks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    /// Edited image when judging success.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    pub seed: u64,
    pub system: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReasonResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texts: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image: String,
    pub prompt: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintRequest {
    pub image: String,
    pub mask: String,
    pub prompt: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintResponse {
    pub image: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Lpips,
    Clip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRequest {
    pub kind: MetricKind,
    pub image_a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_b: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResponse {
    pub value: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    /// Set when a model declined the request on policy grounds.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub refused: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reason_request_field_names() {
        let req = ReasonRequest {
            task: ReasonTask::ProposeLocalization,
            image: "AA==".into(),
            instruction: "remove the cup".into(),
            mask: None,
            candidates: None,
            stage: None,
            prompt: None,
            edited: None,
            n: Some(3),
            seed: 7,
            system: "sys".into(),
        };
        let v = serde_json::to_value(&req).unwrap();
        assert_eq!(v["task"], "propose_localization");
        assert_eq!(v["n"], 3);
        assert!(v.get("mask").is_none());
    }

    #[test]
    fn error_body_refusal_flag_defaults_off() {
        let e: ErrorBody = serde_json::from_str(r#"{"error": "boom"}"#).unwrap();
        assert!(!e.refused);
        assert_eq!(serde_json::to_string(&e).unwrap(), r#"{"error":"boom"}"#);
    }
}
