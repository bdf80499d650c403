//! Entity-guided hospital-course summarization: synonym groups, content
//! selection, source filtering and tagging, plan-then-write output parsing
//! and entity-grounded evaluation. The language model itself is out of scope.

pub mod corpus;
pub mod entity;
pub mod esg;
pub mod filter;
pub mod guide;
pub mod metrics;
pub mod r3;
pub mod select;
pub mod config;
pub mod pipeline;
pub mod synth;
