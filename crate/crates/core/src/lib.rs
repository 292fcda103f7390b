//! Core engine for pairwise evaluation of complete multi-turn dialogues.
//!
//! Annotators are shown two conversations side by side and pick which
//! highlighted speaker is better on one question axis. This crate holds
//! everything that does not touch the outside world:
//!
//! - [`corpus`]: conversation/question data model and validation
//! - [`pairing`]: matchup plans with pair and conversation uniqueness
//! - [`workers`]: QC-first assignment, per-worker caps, gating
//! - [`stats`]: exact binomial tests, win matrices, agreement, bootstrap power
//! - [`selfchat`]: self-chat turn loop over an abstract responder, overlap audit
//! - [`run`]: event-sourced run state and blinded task payloads
//!
//! The crate is `no_std` and only needs `alloc`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod corpus;
pub mod pairing;
pub mod run;
pub mod selfchat;
pub mod stats;
pub mod workers;

mod rng;

pub use corpus::{
    AgentId, AgentKind, Axis, Conversation, Corpus, Provenance, Question, QuestionRegistry,
    SpeakerSlot, Utterance,
};
pub use pairing::{ComparisonSpec, Matchup, Plan, Side};
pub use stats::{Annotation, WinMatrix};

/// Significance level used when none is configured.
pub const DEFAULT_ALPHA: f64 = 0.05;
