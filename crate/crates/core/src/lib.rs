//! Training-free image editing: localize the edit region, then modify it,
//! picking the best of several candidates at every step.

pub mod backends;
pub mod eval;
pub mod image;
pub mod lcp;
pub mod mcp;
pub mod metrics;
pub mod mocks;
pub mod pipeline;
pub mod prompt;
pub mod select;
pub mod stage;
