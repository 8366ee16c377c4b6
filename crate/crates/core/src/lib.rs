//! Interactive clinical consultation simulator.
//!
//! Static multiple-choice patient records are turned into two-agent episodes:
//! a [`patient`] simulator grounded in the record's atomic facts answers the
//! follow-up questions of an [`expert`] that decides, turn by turn, whether it
//! is confident enough to commit to an option or should keep asking.
//!
//! Everything that talks to a language model goes through the
//! [`backend::Backend`] trait, so episodes run unchanged against an
//! OpenAI-compatible endpoint or against a deterministic script.

pub mod analysis;
pub mod backend;
pub mod convert;
pub mod episode;
pub mod error;
pub mod expert;
pub mod jsonl;
pub mod metrics;
pub mod patient;
pub mod template;
pub mod text;

#[cfg(test)]
pub(crate) mod fixtures;

pub use error::{Error, Result};
