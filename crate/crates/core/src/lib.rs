//! Few-shot time-series classification with a self-evolving knowledge bank
//! curated by vision-language model roles.
//!
//! The flow is [`pipeline::Pipeline::warmup`], then
//! [`pipeline::Pipeline::train`], then [`pipeline::Pipeline::run_test`].
//! Each role call goes through a [`vlm::VlmClient`]. With a
//! [`vlm::ScriptedClient`] a run is fully deterministic.

pub mod agents;
pub mod bank;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod pipeline;
pub mod plot;
pub mod prompt;
pub mod vlm;

pub use error::{Error, Result};
