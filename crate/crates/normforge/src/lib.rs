//! normforge: a batch pipeline that generates character pairs, conflict
//! situations, and flow-guided conversations; gates them by
//! summarize-then-verify; discovers social-norm violations with minimal-edit
//! remediations; constructs intervened conversation trajectories; and ships
//! the corpus-diversity and judge-scoring analysis that goes with them.

pub mod dedup;
pub mod domain;
pub mod gateway;
pub mod judge;
pub mod metrics;
pub mod norms;
pub mod parse;
pub mod pipeline;
pub mod prompts;
