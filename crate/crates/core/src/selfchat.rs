//! Self-chat generation and leakage diagnostics.
//!
//! A model plays both speakers. The turn loop here is transport-agnostic:
//! anything implementing [`Responder`] can be driven, and the std companion
//! crate supplies HTTP and subprocess transports.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AgentId, Conversation, Corpus, Provenance, SpeakerSlot, Utterance};
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Transport {
    Subprocess,
    Http,
}

/// Where a model is reached.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub agent: AgentId,
    pub transport: Transport,
    /// Command line or URL.
    pub address: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EndpointError {
    #[error("endpoint timed out")]
    Timeout,
    #[error("endpoint returned an empty response")]
    EmptyResponse,
    #[error("endpoint failure: {0}")]
    Failure(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SelfChatError {
    #[error("endpoint agent must be a model")]
    NotAModel,
    #[error("endpoint address is empty")]
    EmptyAddress,
    #[error("endpoint timeout must be positive")]
    ZeroTimeout,
    #[error("turn range {0}..={1} is empty")]
    EmptyTurnRange(u32, u32),
    #[error("num_conversations must be at least 1")]
    NoConversations,
    #[error("health probe failed: {0}")]
    Probe(EndpointError),
}

impl ModelEndpoint {
    pub fn validate(&self) -> Result<(), SelfChatError> {
        if !self.agent.is_model() {
            return Err(SelfChatError::NotAModel);
        }
        if self.address.trim().is_empty() {
            return Err(SelfChatError::EmptyAddress);
        }
        if self.timeout_ms == 0 {
            return Err(SelfChatError::ZeroTimeout);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub speaker_slot: SpeakerSlot,
    pub text: String,
}

/// One generation request: the full history plus the context of the side
/// being generated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRequest {
    pub context: String,
    pub history: Vec<HistoryEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnResponse {
    pub text: String,
}

/// A stateless model: produces the next utterance for a request.
pub trait Responder {
    fn respond(&mut self, request: &TurnRequest) -> Result<String, EndpointError>;
}

impl<F> Responder for F
where
    F: FnMut(&TurnRequest) -> Result<String, EndpointError>,
{
    fn respond(&mut self, request: &TurnRequest) -> Result<String, EndpointError> {
        self(request)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfChatConfig {
    pub num_conversations: u32,
    /// Inclusive range of turns per speaker.
    pub min_turns: u32,
    pub max_turns: u32,
    /// Opening contexts (personas, topics). Each side draws one per conversation.
    #[serde(default)]
    pub context_seeds: Vec<String>,
    pub rng_seed: u64,
}

impl SelfChatConfig {
    pub fn new(num_conversations: u32, rng_seed: u64) -> Self {
        SelfChatConfig {
            num_conversations,
            min_turns: 6,
            max_turns: 8,
            context_seeds: Vec::new(),
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<(), SelfChatError> {
        if self.num_conversations == 0 {
            return Err(SelfChatError::NoConversations);
        }
        if self.min_turns == 0 || self.min_turns > self.max_turns {
            return Err(SelfChatError::EmptyTurnRange(self.min_turns, self.max_turns));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfChatFailure {
    pub index: u32,
    pub turn_index: u32,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SelfChatOutcome {
    pub conversations: Vec<Conversation>,
    pub failures: Vec<SelfChatFailure>,
}

impl SelfChatOutcome {
    pub fn into_corpus(self) -> Corpus {
        Corpus::from_conversations(self.conversations)
            .expect("self-chat conversations are valid and uniquely named")
    }
}

/// Sends a trivial request and requires a nonempty reply.
pub fn health_probe<R: Responder + ?Sized>(responder: &mut R) -> Result<(), SelfChatError> {
    let probe = TurnRequest {
        context: String::new(),
        history: alloc::vec![HistoryEntry {
            speaker_slot: SpeakerSlot::First,
            text: "Hi!".into(),
        }],
    };
    match responder.respond(&probe) {
        Ok(text) if !text.trim().is_empty() => Ok(()),
        Ok(_) => Err(SelfChatError::Probe(EndpointError::EmptyResponse)),
        Err(e) => Err(SelfChatError::Probe(e)),
    }
}

fn with_retries<R: Responder + ?Sized>(
    responder: &mut R,
    request: &TurnRequest,
    max_retries: u32,
) -> Result<String, EndpointError> {
    let mut last = EndpointError::EmptyResponse;
    for _ in 0..=max_retries {
        match responder.respond(request) {
            Ok(text) if !text.trim().is_empty() => return Ok(text.trim().to_string()),
            Ok(_) => last = EndpointError::EmptyResponse,
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// Generates conversation number `index` of a run.
///
/// Randomness comes from the substream for `index`, so conversations can be
/// produced in any order or in parallel with identical results.
pub fn generate_conversation<R: Responder + ?Sized>(
    responder: &mut R,
    endpoint: &ModelEndpoint,
    config: &SelfChatConfig,
    index: u32,
) -> Result<Conversation, SelfChatFailure> {
    let mut rng = substream(config.rng_seed, index as u64);
    let turns = rng.random_range(config.min_turns..=config.max_turns);
    let mut pick_context = || {
        if config.context_seeds.is_empty() {
            String::new()
        } else {
            config.context_seeds[rng.random_range(0..config.context_seeds.len())].clone()
        }
    };
    let contexts = [pick_context(), pick_context()];

    let mut history: Vec<HistoryEntry> = Vec::with_capacity(2 * turns as usize);
    for turn in 0..2 * turns {
        let slot = if turn % 2 == 0 {
            SpeakerSlot::First
        } else {
            SpeakerSlot::Second
        };
        let request = TurnRequest {
            context: contexts[(turn % 2) as usize].clone(),
            history: history.clone(),
        };
        let text = with_retries(responder, &request, endpoint.max_retries).map_err(|e| {
            SelfChatFailure {
                index,
                turn_index: turn,
                error: e.to_string(),
            }
        })?;
        history.push(HistoryEntry {
            speaker_slot: slot,
            text,
        });
    }

    let mut metadata = BTreeMap::new();
    metadata.insert("context_first".into(), contexts[0].clone());
    metadata.insert("context_second".into(), contexts[1].clone());
    metadata.insert("seed_index".into(), index.to_string());
    Ok(Conversation {
        conv_id: format!("{}-selfchat-{:05}", endpoint.agent.name, index),
        evaluated_agent: endpoint.agent.clone(),
        partner_agent: endpoint.agent.clone(),
        evaluated_slot: SpeakerSlot::First,
        provenance: Provenance::SelfChat,
        utterances: history
            .into_iter()
            .enumerate()
            .map(|(i, h)| Utterance {
                turn_index: i as u32,
                speaker_slot: h.speaker_slot,
                text: h.text,
            })
            .collect(),
        metadata,
    })
}

/// Runs every conversation of `config` sequentially. Failed conversations are
/// dropped and reported; the run continues.
pub fn run_self_chats<R: Responder + ?Sized>(
    responder: &mut R,
    endpoint: &ModelEndpoint,
    config: &SelfChatConfig,
) -> Result<SelfChatOutcome, SelfChatError> {
    endpoint.validate()?;
    config.validate()?;
    let mut out = SelfChatOutcome::default();
    for index in 0..config.num_conversations {
        match generate_conversation(responder, endpoint, config, index) {
            Ok(c) => out.conversations.push(c),
            Err(f) => out.failures.push(f),
        }
    }
    Ok(out)
}

/// An adjacent (call, response) pair of utterances.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UtterancePair {
    pub call: String,
    pub response: String,
}

impl UtterancePair {
    /// Trims both sides; `None` if either is then empty.
    pub fn new(call: &str, response: &str) -> Option<Self> {
        let (call, response) = (call.trim(), response.trim());
        (!call.is_empty() && !response.is_empty()).then(|| UtterancePair {
            call: call.into(),
            response: response.into(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub total_pairs: usize,
    pub matched_pairs: usize,
    pub fraction: f64,
    pub matched: Vec<UtterancePair>,
    /// The training set was empty, so nothing could match.
    pub empty_training_set: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuditError {
    #[error("corpus has no call-response pairs")]
    EmptyCorpus,
}

/// Every adjacent utterance pair of every conversation, trimmed.
pub fn call_response_pairs(corpus: &Corpus) -> Vec<UtterancePair> {
    corpus
        .conversations()
        .flat_map(|c| {
            c.utterances
                .windows(2)
                .filter_map(|w| UtterancePair::new(&w[0].text, &w[1].text))
        })
        .collect()
}

/// Fraction of adjacent call-response pairs found verbatim in the training set.
pub fn training_overlap(
    corpus: &Corpus,
    training_pairs: &BTreeSet<UtterancePair>,
) -> Result<OverlapReport, AuditError> {
    let pairs = call_response_pairs(corpus);
    if pairs.is_empty() {
        return Err(AuditError::EmptyCorpus);
    }
    let matched: Vec<UtterancePair> = pairs
        .iter()
        .filter(|p| training_pairs.contains(*p))
        .cloned()
        .collect();
    Ok(OverlapReport {
        total_pairs: pairs.len(),
        matched_pairs: matched.len(),
        fraction: matched.len() as f64 / pairs.len() as f64,
        matched,
        empty_training_set: training_pairs.is_empty(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionRow {
    pub conv_id: String,
    pub utterances: usize,
    pub repeated: usize,
    pub fraction: f64,
}

/// Share of each conversation's utterances that repeat an earlier one verbatim.
pub fn repetition_report(corpus: &Corpus) -> Vec<RepetitionRow> {
    corpus
        .conversations()
        .map(|c| {
            let mut seen = BTreeSet::new();
            let repeated = c
                .utterances
                .iter()
                .filter(|u| !seen.insert(u.text.trim()))
                .count();
            let n = c.utterances.len();
            RepetitionRow {
                conv_id: c.conv_id.clone(),
                utterances: n,
                repeated,
                fraction: if n == 0 { 0.0 } else { repeated as f64 / n as f64 },
            }
        })
        .collect()
}
