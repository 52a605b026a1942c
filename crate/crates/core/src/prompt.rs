//! Instructions, stage prompts and the system-message templates.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TextError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("{0:?} prompt text is empty")]
    EmptyPrompt(PromptKind),
    #[error("prompt template `{0}` is empty")]
    EmptyTemplate(&'static str),
}

/// The user's natural-language edit request.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Instruction(String);

impl Instruction {
    pub fn new(text: impl Into<String>) -> Result<Self, TextError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(TextError::EmptyInstruction);
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Instruction {
    type Error = TextError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<Instruction> for String {
    fn from(value: Instruction) -> Self {
        value.0
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    /// Describes the region to edit.
    Localization,
    /// Describes how to repaint the region.
    Modification,
}

/// A generated prompt. The kind is fixed at construction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    kind: PromptKind,
    text: String,
}

impl Prompt {
    pub fn new(kind: PromptKind, text: impl Into<String>) -> Result<Self, TextError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(TextError::EmptyPrompt(kind));
        }
        Ok(Self { kind, text })
    }

    pub fn localization(text: impl Into<String>) -> Result<Self, TextError> {
        Self::new(PromptKind::Localization, text)
    }

    pub fn modification(text: impl Into<String>) -> Result<Self, TextError> {
        Self::new(PromptKind::Modification, text)
    }

    /// Reuses the raw instruction as a prompt of the given kind.
    pub fn from_instruction(kind: PromptKind, instruction: &Instruction) -> Self {
        Self {
            kind,
            text: instruction.as_str().to_owned(),
        }
    }

    pub fn kind(&self) -> PromptKind {
        self.kind
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

const DEFAULT_LOCALIZATION_SYSTEM: &str = "You are the localization planner of an image editor. \
Look at the image and the user's editing instruction and write a short referring \
expression that names the image region the edit must change. For removals or \
replacements, describe the object itself. For additions, describe the surface or \
area that will host the new content. Answer with the expression only.";

const DEFAULT_MODIFICATION_SYSTEM: &str = "You are the modification planner of an image editor. \
The red overlay marks the region that will be repainted. Write a detailed, \
executable prompt for an inpainting model that describes what the red region \
should contain after the edit, consistent with the surrounding scene. Answer with \
the prompt only.";

const DEFAULT_REFLECTION_SYSTEM: &str = "You are a strict reviewer of image-editing candidates. \
Judge every candidate for {criteria}. Reply with exactly one line per candidate, in \
order, each line starting with an integer score from 0 (useless) to 10 (perfect).";

/// The three system messages sent to the reasoner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub localization: String,
    pub modification: String,
    /// Reflection template; `{criteria}` is replaced per selection stage.
    pub reflection: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            localization: DEFAULT_LOCALIZATION_SYSTEM.into(),
            modification: DEFAULT_MODIFICATION_SYSTEM.into(),
            reflection: DEFAULT_REFLECTION_SYSTEM.into(),
        }
    }
}

impl PromptTemplates {
    pub fn validate(&self) -> Result<(), TextError> {
        for (name, text) in [
            ("localization", &self.localization),
            ("modification", &self.modification),
            ("reflection", &self.reflection),
        ] {
            if text.trim().is_empty() {
                return Err(TextError::EmptyTemplate(name));
            }
        }
        Ok(())
    }

    /// Reflection message with the stage's review criteria filled in.
    pub fn reflection(&self, criteria: &str) -> String {
        self.reflection.replace("{criteria}", criteria)
    }
}
