//! Reasoner adapter for chat-completion model servers.
//!
//! Each reasoner operation becomes one system + user exchange against
//! `{base}/v1/chat/completions`, with images attached as base64 PNG data
//! URLs. Free-form replies are parsed back into prompts, scores or verdicts.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::http::{generate_n, Transport};
use super::{BackendEndpoint, BackendError, Candidates, Reasoner, ScoreContext, ScoreStage, Verdict};
use crate::image::{render_overlay, BinaryMask, ImageBuf};
use crate::prompt::{Instruction, Prompt, PromptKind, PromptTemplates};

pub(crate) const JUDGE_SUFFIX: &str = "Now decide whether the edited image fulfils the \
instruction. Start your reply with YES or NO, then give a one-sentence rationale.";

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<Value>,
    seed: u64,
    temperature: f64,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

/// Splits a numbered or bulleted reply into items. A reply without any
/// list markers counts as a single item.
pub fn parse_numbered_list(text: &str) -> Vec<String> {
    let mut items = Vec::new();
    let mut saw_marker = false;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = strip_marker(line) {
            saw_marker = true;
            let rest = rest.trim();
            if !rest.is_empty() {
                items.push(rest.to_owned());
            }
        } else if saw_marker {
            // continuation of the previous item
            if let Some(last) = items.last_mut() {
                last.push(' ');
                last.push_str(line);
            }
        }
    }
    if !saw_marker {
        let whole = text.trim();
        if !whole.is_empty() {
            items.push(whole.to_owned());
        }
    }
    items
}

fn strip_marker(line: &str) -> Option<&str> {
    for bullet in ["- ", "* ", "• "] {
        if let Some(rest) = line.strip_prefix(bullet) {
            return Some(rest);
        }
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let rest = &line[digits..];
    rest.strip_prefix('.')
        .or_else(|| rest.strip_prefix(')'))
        .or_else(|| rest.strip_prefix(':'))
}

/// First integer token of every non-empty line, clamped to 0..=10.
///
/// A leading list ordinal such as `3.` or `3)` is skipped so that
/// `"3. 8 - sharp edges"` scores 8.
pub fn parse_scores(text: &str, expected: usize) -> Result<Vec<f64>, BackendError> {
    let mut scores = Vec::new();
    for line in text.lines() {
        let mut line = line.trim();
        if line.is_empty() {
            continue;
        }
        let digits = line.bytes().take_while(u8::is_ascii_digit).count();
        if digits > 0 {
            let after = &line[digits..];
            if (after.starts_with('.') || after.starts_with(')'))
                && after[1..].trim_start().starts_with(|c: char| c.is_ascii_digit())
            {
                line = &after[1..];
            }
        }
        if let Some(v) = first_integer(line) {
            scores.push(v.clamp(0, 10) as f64);
        }
        if scores.len() == expected {
            return Ok(scores);
        }
    }
    Err(BackendError::ScoreParse(format!(
        "found {} scores, expected {expected}",
        scores.len()
    )))
}

fn first_integer(line: &str) -> Option<i64> {
    let start = line.find(|c: char| c.is_ascii_digit())?;
    let digits: String = line[start..]
        .chars()
        .take_while(char::is_ascii_digit)
        .collect();
    digits.parse().ok()
}

/// YES/NO (or true/false) at the start of the reply.
pub fn parse_verdict(text: &str) -> Result<Verdict, BackendError> {
    let trimmed = text.trim();
    let first: String = trimmed
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .collect::<String>()
        .to_ascii_lowercase();
    let success = match first.as_str() {
        "yes" | "true" => true,
        "no" | "false" => false,
        _ => {
            return Err(BackendError::BadResponse(format!(
                "verdict must start with YES or NO: {:?}",
                trimmed.chars().take(60).collect::<String>()
            )))
        }
    };
    Ok(Verdict {
        success,
        rationale: trimmed.to_owned(),
    })
}

#[derive(Debug)]
pub struct ChatReasoner {
    transport: Transport,
    templates: PromptTemplates,
    model: String,
    temperature: f64,
    id: String,
}

impl ChatReasoner {
    pub fn new(
        endpoint: BackendEndpoint,
        model: impl Into<String>,
        templates: PromptTemplates,
    ) -> Result<Self, BackendError> {
        templates
            .validate()
            .map_err(|e| BackendError::Precondition(e.to_string()))?;
        let model = model.into();
        let id = format!("chat-reasoner:{model}@{}", endpoint.base_url);
        Ok(Self {
            transport: Transport::new(endpoint)?,
            templates,
            model,
            temperature: 0.7,
            id,
        })
    }

    fn image_part(image: &ImageBuf) -> Result<Value, BackendError> {
        let b64 = image
            .to_base64_png()
            .map_err(|e| BackendError::Precondition(e.to_string()))?;
        Ok(json!({
            "type": "image_url",
            "image_url": {"url": format!("data:image/png;base64,{b64}")}
        }))
    }

    fn complete<T>(
        &self,
        system: &str,
        parts: Vec<Value>,
        seed: u64,
        parse: impl Fn(&str) -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let req = ChatRequest {
            model: &self.model,
            messages: vec![
                json!({"role": "system", "content": system}),
                json!({"role": "user", "content": parts}),
            ],
            seed,
            temperature: self.temperature,
        };
        self.transport
            .post_validated("/v1/chat/completions", &req, |r: ChatResponse| {
                let content = r
                    .choices
                    .into_iter()
                    .next()
                    .and_then(|c| c.message.content)
                    .ok_or_else(|| BackendError::BadResponse("empty chat completion".into()))?;
                parse(&content)
            })
    }

    fn propose(
        &self,
        system: &str,
        image: &ImageBuf,
        instruction: &Instruction,
        kind: PromptKind,
        n: usize,
        seed: u64,
    ) -> Result<Vec<Prompt>, BackendError> {
        let image_part = Self::image_part(image)?;
        let texts = generate_n(n, seed, |count, s| {
            let ask = if count == 1 {
                "Give one answer.".to_owned()
            } else {
                format!("Give {count} different answers as a numbered list (1., 2., ...), one per line.")
            };
            let parts = vec![
                json!({"type": "text", "text": format!("Instruction: {instruction}\n{ask}")}),
                image_part.clone(),
            ];
            self.complete(system, parts, s, |t| Ok(parse_numbered_list(t)))
        })?;
        texts
            .into_iter()
            .map(|t| Prompt::new(kind, t).map_err(|e| BackendError::BadResponse(e.to_string())))
            .collect()
    }
}

impl Reasoner for ChatReasoner {
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
        self.propose(
            &self.templates.localization,
            image,
            instruction,
            PromptKind::Localization,
            n,
            seed,
        )
    }

    fn propose_modification(
        &self,
        image: &ImageBuf,
        instruction: &Instruction,
        mask: &BinaryMask,
        n: usize,
        seed: u64,
    ) -> Result<Vec<Prompt>, BackendError> {
        let overlay =
            render_overlay(image, mask).map_err(|e| BackendError::Precondition(e.to_string()))?;
        self.propose(
            &self.templates.modification,
            &overlay,
            instruction,
            PromptKind::Modification,
            n,
            seed,
        )
    }

    fn score_candidates(
        &self,
        stage: ScoreStage,
        context: &ScoreContext<'_>,
        candidates: Candidates<'_>,
    ) -> Result<Vec<f64>, BackendError> {
        let mut header = String::new();
        if let Some(i) = context.instruction {
            header.push_str(&format!("Instruction: {i}\n"));
        }
        if let Some(p) = context.selected_prompt {
            header.push_str(&format!("Target region: {}\n", p.text()));
        }
        let n = candidates.len();
        header.push_str(&format!(
            "The first image is the original. Score the {n} candidates below in order."
        ));
        let mut parts = vec![
            json!({"type": "text", "text": header}),
            Self::image_part(context.image)?,
        ];
        match candidates {
            Candidates::Prompts(ps) => {
                let listing: String = ps
                    .iter()
                    .enumerate()
                    .map(|(i, p)| format!("Candidate {}: {}\n", i + 1, p.text()))
                    .collect();
                parts.push(json!({"type": "text", "text": listing}));
            }
            Candidates::Masks(ms) => {
                for (i, m) in ms.iter().enumerate() {
                    let overlay = render_overlay(context.image, m)
                        .map_err(|e| BackendError::Precondition(e.to_string()))?;
                    parts.push(json!({"type": "text", "text": format!("Candidate {}:", i + 1)}));
                    parts.push(Self::image_part(&overlay)?);
                }
            }
            Candidates::Images(is) => {
                for (i, img) in is.iter().enumerate() {
                    parts.push(json!({"type": "text", "text": format!("Candidate {}:", i + 1)}));
                    parts.push(Self::image_part(img)?);
                }
            }
        }
        let system = self.templates.reflection(stage.criteria());
        self.complete(&system, parts, 0, |t| parse_scores(t, n))
    }

    fn judge_success(
        &self,
        original: &ImageBuf,
        edited: &ImageBuf,
        instruction: &Instruction,
    ) -> Result<Verdict, BackendError> {
        let parts = vec![
            json!({"type": "text", "text": format!(
                "Instruction: {instruction}\nThe first image is the original, the second is the edited result."
            )}),
            Self::image_part(original)?,
            Self::image_part(edited)?,
        ];
        let system = format!("{}\n\n{JUDGE_SUFFIX}", self.templates.reflection);
        self.complete(&system, parts, 0, parse_verdict)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbered_lists() {
        assert_eq!(
            parse_numbered_list("1. the red car\n2) the left car\n3: a dog"),
            vec!["the red car", "the left car", "a dog"]
        );
        assert_eq!(
            parse_numbered_list("Sure!\n- one\n- two\n  more"),
            vec!["one", "two more"]
        );
        assert_eq!(parse_numbered_list("  just one answer "), vec!["just one answer"]);
        assert!(parse_numbered_list("   ").is_empty());
    }

    #[test]
    fn scores_take_first_integer_per_line() {
        assert_eq!(parse_scores("7\n3 - blurry\n10", 3).unwrap(), vec![7.0, 3.0, 10.0]);
        assert_eq!(
            parse_scores("1. 8 sharp\n2. 2 off target", 2).unwrap(),
            vec![8.0, 2.0]
        );
        assert_eq!(parse_scores("Scores:\n12\n4", 2).unwrap(), vec![10.0, 4.0]);
        assert!(matches!(
            parse_scores("great\nbad", 2),
            Err(BackendError::ScoreParse(_))
        ));
    }

    #[test]
    fn verdicts() {
        assert!(parse_verdict("YES, the hat was added.").unwrap().success);
        let v = parse_verdict("no - nothing changed").unwrap();
        assert!(!v.success);
        assert_eq!(v.rationale, "no - nothing changed");
        assert!(parse_verdict("maybe").is_err());
    }
}
