//! Shared plumbing for the localization and modification stages: step names for error
//! reporting, backend-time metering and index-slotted fan-out.

use std::fmt;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, CallCounts};
use crate::select::SelectError;

/// A backend-facing step of a round, used to name failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    LcpPropose,
    LcpScorePrompts,
    LcpSegment,
    LcpScoreMasks,
    McpPropose,
    McpScorePlans,
    McpInpaint,
    McpScoreImages,
    Judge,
}

impl Step {
    pub fn as_str(self) -> &'static str {
        match self {
            Step::LcpPropose => "lcp.propose",
            Step::LcpScorePrompts => "lcp.score_prompts",
            Step::LcpSegment => "lcp.segment",
            Step::LcpScoreMasks => "lcp.score_masks",
            Step::McpPropose => "mcp.propose",
            Step::McpScorePlans => "mcp.score_plans",
            Step::McpInpaint => "mcp.inpaint",
            Step::McpScoreImages => "mcp.score_images",
            Step::Judge => "judge",
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{step}: {source}")]
pub struct StageError {
    pub step: Step,
    #[source]
    pub source: BackendError,
}

impl StageError {
    pub fn new(step: Step, source: BackendError) -> Self {
        Self { step, source }
    }

    pub(crate) fn selection(step: Step, e: SelectError) -> Self {
        Self::new(step, BackendError::BadResponse(e.to_string()))
    }
}

/// Backend wall time and call counts accumulated by one stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageStats {
    pub backend_time: Duration,
    pub calls: CallCounts,
}

impl StageStats {
    pub fn merge(&mut self, other: &StageStats) {
        self.backend_time += other.backend_time;
        let c = &mut self.calls;
        let o = &other.calls;
        c.propose_localization += o.propose_localization;
        c.propose_modification += o.propose_modification;
        c.score += o.score;
        c.judge += o.judge;
        c.segment += o.segment;
        c.inpaint += o.inpaint;
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Call {
    ProposeLocalization,
    ProposeModification,
    Score,
    Judge,
    Segment,
    Inpaint,
}

impl StageStats {
    fn count(&mut self, call: Call, n: u64) {
        let c = &mut self.calls;
        match call {
            Call::ProposeLocalization => c.propose_localization += n,
            Call::ProposeModification => c.propose_modification += n,
            Call::Score => c.score += n,
            Call::Judge => c.judge += n,
            Call::Segment => c.segment += n,
            Call::Inpaint => c.inpaint += n,
        }
    }

    /// Runs one backend call, charging its wall time to the backend budget.
    pub(crate) fn timed<T>(
        &mut self,
        call: Call,
        step: Step,
        f: impl FnOnce() -> Result<T, BackendError>,
    ) -> Result<T, StageError> {
        let start = Instant::now();
        let out = f();
        self.backend_time += start.elapsed();
        self.count(call, 1);
        out.map_err(|e| StageError::new(step, e))
    }

    /// Runs `n` independent backend calls, concurrently when `parallel`.
    /// Results are slotted by index; the batch's wall time is charged once.
    pub(crate) fn timed_batch<T: Send>(
        &mut self,
        call: Call,
        step: Step,
        n: usize,
        parallel: bool,
        f: impl Fn(usize) -> Result<T, BackendError> + Sync,
    ) -> Result<Vec<T>, StageError> {
        let start = Instant::now();
        let results: Vec<Result<T, BackendError>> = if parallel && n > 1 {
            thread::scope(|scope| {
                let f = &f;
                let handles: Vec<_> = (0..n).map(|i| scope.spawn(move || f(i))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("backend call panicked"))
                    .collect()
            })
        } else {
            (0..n).map(&f).collect()
        };
        self.backend_time += start.elapsed();
        self.count(call, n as u64);
        results
            .into_iter()
            .collect::<Result<Vec<T>, _>>()
            .map_err(|e| StageError::new(step, e))
    }
}
