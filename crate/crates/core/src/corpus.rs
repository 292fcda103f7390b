//! Conversations, agents and evaluation questions.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Order of speaking within a conversation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SpeakerSlot {
    First,
    Second,
}

impl SpeakerSlot {
    pub fn other(self) -> Self {
        match self {
            SpeakerSlot::First => SpeakerSlot::Second,
            SpeakerSlot::Second => SpeakerSlot::First,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SpeakerSlot::First => "FIRST",
            SpeakerSlot::Second => "SECOND",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AgentKind {
    Model,
    Human,
}

/// A dialogue agent: either a model under evaluation or a human.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId {
    pub kind: AgentKind,
    pub name: String,
}

impl AgentId {
    /// Shared name used for anonymous human partners.
    pub const HUMAN_NAME: &'static str = "human";

    pub fn model(name: impl Into<String>) -> Self {
        AgentId {
            kind: AgentKind::Model,
            name: name.into(),
        }
    }

    pub fn human() -> Self {
        AgentId {
            kind: AgentKind::Human,
            name: Self::HUMAN_NAME.to_string(),
        }
    }

    pub fn is_model(&self) -> bool {
        self.kind == AgentKind::Model
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Where a conversation came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    HumanModel,
    SelfChat,
    HumanHuman,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::HumanModel => "HUMAN_MODEL",
            Provenance::SelfChat => "SELF_CHAT",
            Provenance::HumanHuman => "HUMAN_HUMAN",
        }
    }
}

impl core::str::FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "HUMAN_MODEL" => Ok(Provenance::HumanModel),
            "SELF_CHAT" => Ok(Provenance::SelfChat),
            "HUMAN_HUMAN" => Ok(Provenance::HumanHuman),
            other => Err(format!("unknown provenance `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub turn_index: u32,
    pub speaker_slot: SpeakerSlot,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub conv_id: String,
    pub evaluated_agent: AgentId,
    pub partner_agent: AgentId,
    pub evaluated_slot: SpeakerSlot,
    pub provenance: Provenance,
    pub utterances: Vec<Utterance>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Conversation {
    /// The agent speaking in `slot`.
    pub fn agent_in(&self, slot: SpeakerSlot) -> &AgentId {
        if slot == self.evaluated_slot {
            &self.evaluated_agent
        } else {
            &self.partner_agent
        }
    }

    /// Trims every utterance in place. Text is otherwise kept verbatim.
    pub fn trim_texts(&mut self) {
        for u in &mut self.utterances {
            let trimmed = u.text.trim();
            if trimmed.len() != u.text.len() {
                u.text = trimmed.to_string();
            }
        }
    }
}

/// Which conversation invariant a [`Violation`] reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    EmptyConvId,
    EmptyAgentName,
    TooFewUtterances,
    MissingSlot,
    TurnIndex,
    EmptyText,
    SelfChatAgent,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::EmptyConvId => "empty-conv-id",
            ViolationKind::EmptyAgentName => "empty-agent-name",
            ViolationKind::TooFewUtterances => "too-few-utterances",
            ViolationKind::MissingSlot => "missing-slot",
            ViolationKind::TurnIndex => "turn-index",
            ViolationKind::EmptyText => "empty-text",
            ViolationKind::SelfChatAgent => "self-chat-agent",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Position in the utterance list, when the violation is local to one.
    pub utterance: Option<usize>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.utterance {
            Some(i) => write!(f, "{} at utterance {}: {}", self.kind.as_str(), i, self.detail),
            None => write!(f, "{}: {}", self.kind.as_str(), self.detail),
        }
    }
}

/// Checks every conversation invariant and returns all failures.
///
/// Never fails itself; an empty list means the conversation is valid.
pub fn validate_conversation(c: &Conversation) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |kind, utterance, detail: String| {
        out.push(Violation {
            kind,
            utterance,
            detail,
        })
    };

    if c.conv_id.trim().is_empty() {
        push(ViolationKind::EmptyConvId, None, "conv_id is empty".into());
    }
    for (role, agent) in [("evaluated", &c.evaluated_agent), ("partner", &c.partner_agent)] {
        if agent.name.trim().is_empty() {
            push(
                ViolationKind::EmptyAgentName,
                None,
                format!("{role} agent has an empty name"),
            );
        }
    }
    if c.utterances.len() < 2 {
        push(
            ViolationKind::TooFewUtterances,
            None,
            format!("{} utterance(s), need at least 2", c.utterances.len()),
        );
    }
    for slot in [SpeakerSlot::First, SpeakerSlot::Second] {
        if !c.utterances.iter().any(|u| u.speaker_slot == slot) {
            push(
                ViolationKind::MissingSlot,
                None,
                format!("speaker slot {} never speaks", slot.as_str()),
            );
        }
    }
    for (i, u) in c.utterances.iter().enumerate() {
        if u.turn_index as usize != i {
            push(
                ViolationKind::TurnIndex,
                Some(i),
                format!("turn_index {} where {} expected", u.turn_index, i),
            );
        }
        if u.text.trim().is_empty() {
            push(ViolationKind::EmptyText, Some(i), "utterance text is empty".into());
        }
    }
    if c.provenance == Provenance::SelfChat
        && (c.evaluated_agent != c.partner_agent || !c.evaluated_agent.is_model())
    {
        push(
            ViolationKind::SelfChatAgent,
            None,
            format!(
                "self-chat needs one model in both slots, got `{}` and `{}`",
                c.evaluated_agent, c.partner_agent
            ),
        );
    }
    out
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CorpusError {
    #[error("duplicate conv_id `{0}`")]
    DuplicateConvId(String),
    #[error("conversation `{conv_id}` is invalid: {first}")]
    Invalid { conv_id: String, first: String },
}

/// Validated conversations keyed by `conv_id`, with an index of which
/// conversations each agent is evaluated in.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    conversations: BTreeMap<String, Conversation>,
    agents: BTreeSet<AgentId>,
    by_evaluated: BTreeMap<AgentId, BTreeSet<String>>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a conversation after validating it.
    pub fn insert(&mut self, conv: Conversation) -> Result<(), CorpusError> {
        if let Some(v) = validate_conversation(&conv).first() {
            return Err(CorpusError::Invalid {
                conv_id: conv.conv_id.clone(),
                first: v.to_string(),
            });
        }
        if self.conversations.contains_key(&conv.conv_id) {
            return Err(CorpusError::DuplicateConvId(conv.conv_id));
        }
        self.agents.insert(conv.evaluated_agent.clone());
        self.agents.insert(conv.partner_agent.clone());
        self.by_evaluated
            .entry(conv.evaluated_agent.clone())
            .or_default()
            .insert(conv.conv_id.clone());
        self.conversations.insert(conv.conv_id.clone(), conv);
        Ok(())
    }

    pub fn from_conversations(
        convs: impl IntoIterator<Item = Conversation>,
    ) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::new();
        for c in convs {
            corpus.insert(c)?;
        }
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.conversations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }

    pub fn get(&self, conv_id: &str) -> Option<&Conversation> {
        self.conversations.get(conv_id)
    }

    /// Conversations in `conv_id` order.
    pub fn conversations(&self) -> impl Iterator<Item = &Conversation> {
        self.conversations.values()
    }

    pub fn agents(&self) -> &BTreeSet<AgentId> {
        &self.agents
    }

    pub fn contains_agent(&self, agent: &AgentId) -> bool {
        self.agents.contains(agent)
    }

    /// Conversations where `agent` is the evaluated speaker, in `conv_id` order,
    /// optionally restricted to one provenance.
    pub fn evaluated_in(
        &self,
        agent: &AgentId,
        provenance: Option<Provenance>,
    ) -> Vec<&Conversation> {
        self.by_evaluated
            .get(agent)
            .into_iter()
            .flatten()
            .filter_map(|id| self.conversations.get(id))
            .filter(|c| provenance.is_none_or(|p| c.provenance == p))
            .collect()
    }

    pub fn with_provenance(&self, provenance: Provenance) -> Vec<&Conversation> {
        self.conversations
            .values()
            .filter(|c| c.provenance == provenance)
            .collect()
    }

    /// Merges `other` into `self`, failing on the first duplicate `conv_id`.
    pub fn extend(&mut self, other: Corpus) -> Result<(), CorpusError> {
        for c in other.conversations.into_values() {
            self.insert(c)?;
        }
        Ok(())
    }
}

/// Evaluation axis a question measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Axis {
    Engagingness,
    Interestingness,
    Humanness,
    Knowledgeable,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub axis: Axis,
    /// Shown to the annotator verbatim.
    pub prompt_text: String,
    /// Per-side choice text; `{n}` is replaced by the speaker number.
    pub choice_text_template: String,
}

impl Question {
    pub const SPEAKER_PLACEHOLDER: &'static str = "{n}";

    pub fn choice_text(&self, speaker_number: u32) -> String {
        self.choice_text_template
            .replace(Self::SPEAKER_PLACEHOLDER, &speaker_number.to_string())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QuestionError {
    #[error("duplicate question_id `{0}`")]
    Duplicate(String),
    #[error("question `{0}` has an empty prompt or choice template")]
    Empty(String),
}

/// The four high-agreement questions, one per axis.
pub fn builtin_questions() -> Vec<Question> {
    let q = |id: &str, axis, prompt: &str, choice: &str| Question {
        question_id: id.to_string(),
        axis,
        prompt_text: prompt.to_string(),
        choice_text_template: choice.to_string(),
    };
    alloc::vec![
        q(
            "engaging",
            Axis::Engagingness,
            "Who would you prefer to talk to for a long conversation?",
            "I would prefer to talk to Speaker {n}",
        ),
        q(
            "interesting",
            Axis::Interestingness,
            "If you had to say one of these speakers is interesting and one is boring, who would you say is more interesting?",
            "Speaker {n} is more interesting",
        ),
        q(
            "humanlike",
            Axis::Humanness,
            "Which speaker sounds more human?",
            "Speaker {n} sounds more human",
        ),
        q(
            "knowledgeable",
            Axis::Knowledgeable,
            "If you had to say that one speaker is more knowledgeable and one is more ignorant, who is more knowledgeable?",
            "Speaker {n} is more knowledgeable",
        ),
    ]
}

/// Questions keyed by id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct QuestionRegistry {
    questions: BTreeMap<String, Question>,
}

impl QuestionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::new();
        for q in builtin_questions() {
            reg.register(q).expect("builtin ids are unique");
        }
        reg
    }

    pub fn register(&mut self, q: Question) -> Result<(), QuestionError> {
        if q.prompt_text.trim().is_empty() || q.choice_text_template.trim().is_empty() {
            return Err(QuestionError::Empty(q.question_id));
        }
        if self.questions.contains_key(&q.question_id) {
            return Err(QuestionError::Duplicate(q.question_id));
        }
        self.questions.insert(q.question_id.clone(), q);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Question> {
        self.questions.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.questions.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Question> {
        self.questions.values()
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }
}
