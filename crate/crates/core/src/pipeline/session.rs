use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::image::{decode_image, BinaryMask, ImageBuf};
use crate::prompt::Instruction;
use crate::select::top_k;

use super::round::{run_round, EditRecord, SelectedBy};
use super::store::{ArtifactStore, StoreError};
use super::{Backends, PipelineConfig, PipelineError, PipelineMode};

pub const SESSION_SCHEMA_VERSION: u32 = 1;

/// On-disk form of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDoc {
    pub schema_version: u32,
    pub session_id: Uuid,
    pub config: PipelineConfig,
    pub initial_hash: String,
    pub current_hash: String,
    pub records: Vec<EditRecord>,
}

impl SessionDoc {
    /// Every artifact hash the document points at, in sorted order.
    pub fn referenced_hashes(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        set.insert(self.initial_hash.clone());
        set.insert(self.current_hash.clone());
        for r in &self.records {
            set.insert(r.input_hash.clone());
            set.insert(r.output_hash.clone());
            set.insert(r.localization.mask_hash.clone());
            set.extend(r.localization.raw_mask_hash.clone());
            set.extend(r.localization.relocalized_mask_hash.clone());
        }
        set.into_iter().collect()
    }

    /// Checks the hash chain: each round consumes the previous output.
    pub fn check_chain(&self) -> Result<(), String> {
        let mut expected = &self.initial_hash;
        for (i, r) in self.records.iter().enumerate() {
            if r.round != i {
                return Err(format!("record {i} is numbered {}", r.round));
            }
            if &r.input_hash != expected {
                return Err(format!("record {i} does not consume the previous output"));
            }
            expected = &r.output_hash;
        }
        if &self.current_hash != expected {
            return Err("current image is not the last output".into());
        }
        Ok(())
    }
}

/// A linear multi-round editing history.
#[derive(Debug, Clone)]
pub struct SessionState {
    id: Uuid,
    config: PipelineConfig,
    initial_hash: String,
    records: Vec<EditRecord>,
    current: ImageBuf,
    current_hash: String,
    artifacts: ArtifactStore,
}

/// Alternatives surfaced by [`SessionState::generate_diverse`], awaiting a choice.
#[derive(Debug, Clone)]
pub struct DiverseChoice {
    pub round: usize,
    pub input_hash: String,
    pub candidates: Vec<DiverseCandidate>,
    artifacts: ArtifactStore,
}

#[derive(Debug, Clone)]
pub struct DiverseCandidate {
    /// Position among the generated image candidates.
    pub index: usize,
    pub seed: u64,
    pub score: f64,
    pub image: ImageBuf,
    /// Record the round would get if this candidate is committed.
    pub record: EditRecord,
}

impl DiverseChoice {
    pub fn records(&self) -> Vec<&EditRecord> {
        self.candidates.iter().map(|c| &c.record).collect()
    }

    pub fn artifacts(&self) -> &ArtifactStore {
        &self.artifacts
    }
}

/// A session aborted by a failing round; `state` holds the completed rounds.
#[derive(Debug)]
pub struct SessionAbort {
    pub state: SessionState,
    pub error: PipelineError,
}

impl fmt::Display for SessionAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "session stopped after {} round(s): {}",
            self.state.records.len(),
            self.error
        )
    }
}

impl std::error::Error for SessionAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl SessionState {
    /// Starts a session whose id is derived from the image and config, so
    /// identical inputs yield identical session documents.
    /// The config is checked when a round runs.
    pub fn new(initial: ImageBuf, config: PipelineConfig) -> Self {
        let mut artifacts = ArtifactStore::default();
        let initial_hash = artifacts
            .put_image(&initial)
            .expect("encoding a valid buffer cannot fail");
        let seed = format!(
            "{initial_hash}:{}",
            serde_json::to_string(&config).expect("config serializes")
        );
        let id = Uuid::new_v5(&Uuid::NAMESPACE_OID, seed.as_bytes());
        Self {
            id,
            config,
            current_hash: initial_hash.clone(),
            initial_hash,
            records: Vec::new(),
            current: initial,
            artifacts,
        }
    }

    pub fn with_id(mut self, id: Uuid) -> Self {
        self.id = id;
        self
    }

    pub fn id(&self) -> Uuid {
        self.id
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn records(&self) -> &[EditRecord] {
        &self.records
    }

    pub fn current_image(&self) -> &ImageBuf {
        &self.current
    }

    pub fn current_hash(&self) -> &str {
        &self.current_hash
    }

    pub fn initial_hash(&self) -> &str {
        &self.initial_hash
    }

    pub fn artifacts(&self) -> &ArtifactStore {
        &self.artifacts
    }

    /// Runs one round on the current image and advances the session.
    pub fn edit_once(
        &mut self,
        instruction: &Instruction,
        gt_mask: Option<&BinaryMask>,
        backends: &Backends,
    ) -> Result<&EditRecord, PipelineError> {
        let out = run_round(
            &self.current,
            &self.current_hash,
            self.records.len(),
            instruction,
            gt_mask,
            &self.config,
            backends,
        )?;
        self.artifacts.merge(out.artifacts);
        self.current_hash = out.record.output_hash.clone();
        self.current = out.output;
        self.records.push(out.record);
        Ok(self.records.last().expect("just pushed"))
    }

    /// Runs one round but returns the `k` best image candidates instead of
    /// committing the top one. The session is unchanged until [`commit`](Self::commit).
    pub fn generate_diverse(
        &self,
        instruction: &Instruction,
        k: usize,
        backends: &Backends,
    ) -> Result<DiverseChoice, PipelineError> {
        if self.config.mode != PipelineMode::Full {
            return Err(PipelineError::DiverseNeedsFull(self.config.mode));
        }
        if k < 2 {
            return Err(PipelineError::KTooSmall(k));
        }
        if k > self.config.n_reflect {
            return Err(PipelineError::KTooLarge {
                k,
                n: self.config.n_reflect,
            });
        }
        let out = run_round(
            &self.current,
            &self.current_hash,
            self.records.len(),
            instruction,
            None,
            &self.config,
            backends,
        )?;
        let set = out
            .image_candidates
            .expect("n_reflect >= k >= 2 yields scored candidates");
        let scores = set.scores().expect("candidates were scored");
        let order = top_k(&scores, k).map_err(|e| {
            PipelineError::Stage(crate::stage::StageError::new(
                crate::stage::Step::McpScoreImages,
                crate::backends::BackendError::BadResponse(e.to_string()),
            ))
        })?;
        let mut artifacts = out.artifacts;
        let mut candidates = Vec::with_capacity(k);
        for index in order {
            let cand = set.get(index).expect("index from top_k");
            let mut record = out.record.clone();
            record.output_hash = artifacts.put_image(&cand.payload)?;
            record.modification.selected_index = index;
            record.modification.selected_seed = record.modification.seeds[index];
            candidates.push(DiverseCandidate {
                index,
                seed: record.modification.selected_seed,
                score: scores[index],
                image: cand.payload.clone(),
                record,
            });
        }
        Ok(DiverseChoice {
            round: self.records.len(),
            input_hash: self.current_hash.clone(),
            candidates,
            artifacts,
        })
    }

    /// Commits the candidate at `position` of a pending choice as a
    /// human-selected round.
    pub fn commit(
        &mut self,
        choice: DiverseChoice,
        position: usize,
    ) -> Result<&EditRecord, PipelineError> {
        if choice.round != self.records.len() || choice.input_hash != self.current_hash {
            return Err(PipelineError::StaleChoice);
        }
        let len = choice.candidates.len();
        let DiverseChoice {
            mut candidates,
            artifacts,
            ..
        } = choice;
        if position >= len {
            return Err(PipelineError::BadChoice { index: position, len });
        }
        let chosen = candidates.swap_remove(position);
        let mut record = chosen.record;
        record.selected_by = SelectedBy::Human;
        self.artifacts.merge(artifacts);
        self.current_hash = record.output_hash.clone();
        self.current = chosen.image;
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn document(&self) -> SessionDoc {
        SessionDoc {
            schema_version: SESSION_SCHEMA_VERSION,
            session_id: self.id,
            config: self.config.clone(),
            initial_hash: self.initial_hash.clone(),
            current_hash: self.current_hash.clone(),
            records: self.records.clone(),
        }
    }

    pub fn referenced_hashes(&self) -> Vec<String> {
        self.document().referenced_hashes()
    }

    /// Pretty JSON of the session document; `include_timings = false`
    /// drops the wall-clock fields so reruns compare byte-for-byte.
    pub fn to_json(&self, include_timings: bool) -> String {
        let mut v = serde_json::to_value(self.document()).expect("document serializes");
        if !include_timings {
            if let Some(records) = v.get_mut("records").and_then(|r| r.as_array_mut()) {
                for r in records {
                    if let Some(obj) = r.as_object_mut() {
                        obj.remove("timings");
                    }
                }
            }
        }
        serde_json::to_string_pretty(&v).expect("value serializes")
    }

    pub(crate) fn from_document(doc: SessionDoc, artifacts: ArtifactStore) -> Result<Self, StoreError> {
        doc.check_chain().map_err(StoreError::Inconsistent)?;
        let png = artifacts
            .get(&doc.current_hash)
            .ok_or_else(|| StoreError::MissingArtifact {
                expected: doc.current_hash.clone(),
            })?;
        let current = decode_image(&png)?;
        Ok(Self {
            id: doc.session_id,
            config: doc.config,
            initial_hash: doc.initial_hash,
            records: doc.records,
            current,
            current_hash: doc.current_hash,
            artifacts,
        })
    }
}

/// Applies the instructions in order, each to the previous output.
pub fn run_session(
    initial: ImageBuf,
    instructions: &[Instruction],
    config: PipelineConfig,
    backends: &Backends,
) -> Result<SessionState, Box<SessionAbort>> {
    let mut state = SessionState::new(initial, config);
    if instructions.is_empty() {
        return Err(Box::new(SessionAbort {
            state,
            error: PipelineError::NoInstructions,
        }));
    }
    for instruction in instructions {
        if let Err(error) = state.edit_once(instruction, None, backends) {
            return Err(Box::new(SessionAbort { state, error }));
        }
    }
    Ok(state)
}
