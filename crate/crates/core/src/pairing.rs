//! Matchup planning.
//!
//! A plan lists every pairwise trial of a run. Within one comparison no
//! unordered pair of conversations is shown twice, and when both agents have
//! at least as many conversations as requested annotations, no conversation is
//! shown twice either. Placement on the left or right is a fair coin per
//! matchup and is recorded so position bias can be tested afterwards.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AgentId, Conversation, Corpus, Provenance, QuestionRegistry};
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn other(self) -> Self {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "LEFT",
            Side::Right => "RIGHT",
        }
    }
}

/// One pairwise trial.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matchup {
    pub matchup_id: String,
    pub left_conv: String,
    pub right_conv: String,
    pub question: String,
    pub left_agent: AgentId,
    pub right_agent: AgentId,
    pub is_qc: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_side: Option<Side>,
    /// Index into [`Plan::comparisons`]; absent for QC matchups.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<u32>,
}

impl Matchup {
    pub fn agent_on(&self, side: Side) -> &AgentId {
        match side {
            Side::Left => &self.left_agent,
            Side::Right => &self.right_agent,
        }
    }

    pub fn conv_on(&self, side: Side) -> &str {
        match side {
            Side::Left => &self.left_conv,
            Side::Right => &self.right_conv,
        }
    }

    /// The conversation pair with the smaller id first.
    pub fn unordered_pair(&self) -> (&str, &str) {
        if self.left_conv <= self.right_conv {
            (&self.left_conv, &self.right_conv)
        } else {
            (&self.right_conv, &self.left_conv)
        }
    }

    /// Whether the structural QC invariants hold.
    pub fn is_well_formed(&self) -> bool {
        self.left_conv != self.right_conv && self.is_qc == self.gold_side.is_some()
    }
}

/// A requested comparison between two agents on one question.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonSpec {
    pub agent_a: AgentId,
    pub agent_b: AgentId,
    pub question: String,
    pub target_annotations: u32,
    /// Restricts both agents' conversations to one provenance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// How strongly a comparison's matchups avoid reuse.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diversity {
    /// Each conversation appears in at most one matchup.
    UniqueConversations,
    /// Only unordered conversation pairs are unique.
    UniquePairs,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub spec: ComparisonSpec,
    pub diversity: Diversity,
    /// Set when an agent had a single conversation to draw from.
    pub degenerate: bool,
    /// Self-vs-self comparison (agent_a == agent_b).
    #[serde(default)]
    pub self_comparison: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub run_id: String,
    pub rng_seed: u64,
    pub comparisons: Vec<ComparisonRecord>,
    pub matchups: Vec<Matchup>,
    #[serde(default)]
    pub qc_pool: Vec<Matchup>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("unknown agent `{0}`")]
    UnknownAgent(AgentId),
    #[error("unknown question `{0}`")]
    UnknownQuestion(String),
    #[error("comparison {index}: agent_a and agent_b are both `{agent}`")]
    SameAgent { index: usize, agent: AgentId },
    #[error("comparison {index}: target_annotations must be at least 1")]
    ZeroTarget { index: usize },
    #[error("comparison {index}: `{agent}` has no eligible conversations")]
    NoConversations { index: usize, agent: AgentId },
    #[error(
        "comparison {index}: insufficient conversation pairs ({available} available, {target} requested)"
    )]
    InsufficientPairs {
        index: usize,
        available: u64,
        target: u32,
    },
    #[error("no conversations by `{0}` with a human partner")]
    NoWeakBaseline(AgentId),
    #[error("no human-human conversations")]
    NoHumanHuman,
}

impl Plan {
    pub fn matchup(&self, id: &str) -> Option<&Matchup> {
        self.matchups
            .iter()
            .chain(&self.qc_pool)
            .find(|m| m.matchup_id == id)
    }

    /// All matchups (regular then QC) keyed by id.
    pub fn index(&self) -> BTreeMap<&str, &Matchup> {
        self.matchups
            .iter()
            .chain(&self.qc_pool)
            .map(|m| (m.matchup_id.as_str(), m))
            .collect()
    }

    pub fn with_qc_pool(mut self, pool: Vec<Matchup>) -> Self {
        self.qc_pool = pool;
        self
    }

    /// Appends the comparisons and matchups of `other`, renumbering its
    /// comparison indices and matchup ids.
    pub fn merge(mut self, other: Plan) -> Self {
        let offset = self.comparisons.len() as u32;
        self.comparisons.extend(other.comparisons);
        for mut m in other.matchups {
            let c = m.comparison.map(|c| c + offset);
            m.comparison = c;
            m.matchup_id = matchup_id(c.unwrap_or(0), &m.matchup_id);
            self.matchups.push(m);
        }
        if self.qc_pool.is_empty() {
            self.qc_pool = other.qc_pool;
        }
        self
    }
}

fn matchup_id(comparison: u32, old: &str) -> String {
    let seq = old.rsplit('-').next().unwrap_or(old);
    format!("c{comparison:03}-{seq}")
}

fn eligible<'a>(
    corpus: &'a Corpus,
    agent: &AgentId,
    provenance: Option<Provenance>,
    index: usize,
) -> Result<Vec<&'a Conversation>, PlanError> {
    if !corpus.contains_agent(agent) {
        return Err(PlanError::UnknownAgent(agent.clone()));
    }
    let convs = corpus.evaluated_in(agent, provenance);
    if convs.is_empty() {
        return Err(PlanError::NoConversations {
            index,
            agent: agent.clone(),
        });
    }
    Ok(convs)
}

fn make_matchup<R: Rng>(
    rng: &mut R,
    comparison: u32,
    seq: usize,
    question: &str,
    a: &Conversation,
    b: &Conversation,
) -> Matchup {
    let (left, right) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
    Matchup {
        matchup_id: format!("c{comparison:03}-{seq:05}"),
        left_conv: left.conv_id.clone(),
        right_conv: right.conv_id.clone(),
        question: question.into(),
        left_agent: left.evaluated_agent.clone(),
        right_agent: right.evaluated_agent.clone(),
        is_qc: false,
        gold_side: None,
        comparison: Some(comparison),
    }
}

/// Builds a plan covering every comparison in `specs`.
///
/// Each comparison draws from its own seeded substream, so adding a
/// comparison never changes the matchups of the ones before it.
pub fn build_plan(
    corpus: &Corpus,
    questions: &QuestionRegistry,
    specs: &[ComparisonSpec],
    seed: u64,
) -> Result<Plan, PlanError> {
    let mut plan = Plan {
        run_id: format!("run-{seed:016x}"),
        rng_seed: seed,
        comparisons: Vec::with_capacity(specs.len()),
        matchups: Vec::new(),
        qc_pool: Vec::new(),
    };

    for (index, spec) in specs.iter().enumerate() {
        if spec.agent_a == spec.agent_b {
            return Err(PlanError::SameAgent {
                index,
                agent: spec.agent_a.clone(),
            });
        }
        if spec.target_annotations == 0 {
            return Err(PlanError::ZeroTarget { index });
        }
        if !questions.contains(&spec.question) {
            return Err(PlanError::UnknownQuestion(spec.question.clone()));
        }
        let mut convs_a = eligible(corpus, &spec.agent_a, spec.provenance, index)?;
        let mut convs_b = eligible(corpus, &spec.agent_b, spec.provenance, index)?;
        let (na, nb) = (convs_a.len(), convs_b.len());
        let target = spec.target_annotations as usize;
        let available = na as u64 * nb as u64;
        if available < target as u64 {
            return Err(PlanError::InsufficientPairs {
                index,
                available,
                target: spec.target_annotations,
            });
        }

        let comparison = index as u32;
        let mut rng = substream(seed, index as u64 + 1);
        let diversity = if na.min(nb) >= target {
            convs_a.partial_shuffle(&mut rng, target);
            convs_b.partial_shuffle(&mut rng, target);
            for i in 0..target {
                let m = make_matchup(&mut rng, comparison, i, &spec.question, convs_a[i], convs_b[i]);
                plan.matchups.push(m);
            }
            Diversity::UniqueConversations
        } else {
            // Both counts are below target here, so the product fits in usize.
            let picks = index::sample(&mut rng, na * nb, target);
            for (i, cell) in picks.into_iter().enumerate() {
                let (a, b) = (convs_a[cell / nb], convs_b[cell % nb]);
                let m = make_matchup(&mut rng, comparison, i, &spec.question, a, b);
                plan.matchups.push(m);
            }
            Diversity::UniquePairs
        };
        plan.comparisons.push(ComparisonRecord {
            spec: spec.clone(),
            diversity,
            degenerate: na == 1 || nb == 1,
            self_comparison: false,
        });
    }
    Ok(plan)
}

/// Builds a self-vs-self plan: pairs of distinct conversations of one agent.
///
/// Used to check that a question and interface show no position bias.
pub fn build_self_plan(
    corpus: &Corpus,
    questions: &QuestionRegistry,
    agent: &AgentId,
    question: &str,
    target_annotations: u32,
    provenance: Option<Provenance>,
    seed: u64,
) -> Result<Plan, PlanError> {
    if target_annotations == 0 {
        return Err(PlanError::ZeroTarget { index: 0 });
    }
    if !questions.contains(question) {
        return Err(PlanError::UnknownQuestion(question.into()));
    }
    let mut convs = eligible(corpus, agent, provenance, 0)?;
    let n = convs.len();
    let target = target_annotations as usize;
    let available = (n as u64 * n.saturating_sub(1) as u64) / 2;
    if available < target as u64 {
        return Err(PlanError::InsufficientPairs {
            index: 0,
            available,
            target: target_annotations,
        });
    }
    let mut rng = substream(seed, 1);
    let mut matchups = Vec::with_capacity(target);
    let diversity = if n >= 2 * target {
        convs.partial_shuffle(&mut rng, 2 * target);
        for i in 0..target {
            matchups.push(make_matchup(&mut rng, 0, i, question, convs[2 * i], convs[2 * i + 1]));
        }
        Diversity::UniqueConversations
    } else {
        // Unordered pairs (i, j), i < j, enumerated row by row.
        let picks = index::sample(&mut rng, available as usize, target);
        for (seq, cell) in picks.into_iter().enumerate() {
            let (i, j) = triangle_pair(cell, n);
            matchups.push(make_matchup(&mut rng, 0, seq, question, convs[i], convs[j]));
        }
        Diversity::UniquePairs
    };
    Ok(Plan {
        run_id: format!("run-{seed:016x}"),
        rng_seed: seed,
        comparisons: alloc::vec![ComparisonRecord {
            spec: ComparisonSpec {
                agent_a: agent.clone(),
                agent_b: agent.clone(),
                question: question.into(),
                target_annotations,
                provenance,
            },
            diversity,
            degenerate: false,
            self_comparison: true,
        }],
        matchups,
        qc_pool: Vec::new(),
    })
}

fn triangle_pair(mut cell: usize, n: usize) -> (usize, usize) {
    for i in 0..n {
        let row = n - 1 - i;
        if cell < row {
            return (i, i + 1 + cell);
        }
        cell -= row;
    }
    unreachable!("cell index beyond n*(n-1)/2")
}

/// QC matchups: a weak model's human-partner conversation against a
/// human-human conversation, with the human-human side as gold.
///
/// Conversations are not reused within the pool, so its size is
/// `min(#weak, #human_human)`.
pub fn make_qc_pool(
    corpus: &Corpus,
    weak_agent: &AgentId,
    question: &str,
    seed: u64,
) -> Result<Vec<Matchup>, PlanError> {
    let mut weak = corpus.evaluated_in(weak_agent, Some(Provenance::HumanModel));
    if weak.is_empty() {
        return Err(PlanError::NoWeakBaseline(weak_agent.clone()));
    }
    let mut human = corpus.with_provenance(Provenance::HumanHuman);
    if human.is_empty() {
        return Err(PlanError::NoHumanHuman);
    }
    let mut rng = substream(seed, 0);
    let size = weak.len().min(human.len());
    weak.partial_shuffle(&mut rng, size);
    human.partial_shuffle(&mut rng, size);
    let pool = (0..size)
        .map(|i| {
            let gold = if rng.random_bool(0.5) { Side::Left } else { Side::Right };
            let (left, right) = match gold {
                Side::Left => (human[i], weak[i]),
                Side::Right => (weak[i], human[i]),
            };
            Matchup {
                matchup_id: format!("qc-{i:05}"),
                left_conv: left.conv_id.clone(),
                right_conv: right.conv_id.clone(),
                question: question.into(),
                left_agent: left.evaluated_agent.clone(),
                right_agent: right.evaluated_agent.clone(),
                is_qc: true,
                gold_side: Some(gold),
                comparison: None,
            }
        })
        .collect();
    Ok(pool)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub comparison: u32,
    pub agent_a: AgentId,
    pub agent_b: AgentId,
    pub question: String,
    pub matchups: usize,
    pub convs_used: usize,
    pub pair_reuse: bool,
    pub conversation_reuse: bool,
    pub diversity: Diversity,
    pub degenerate: bool,
}

/// Per-comparison counts recomputed from the matchup list.
pub fn plan_summary(plan: &Plan) -> Vec<ComparisonSummary> {
    plan.comparisons
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let ms: Vec<&Matchup> = plan
                .matchups
                .iter()
                .filter(|m| m.comparison == Some(i as u32))
                .collect();
            let mut pairs = BTreeSet::new();
            let mut pair_reuse = false;
            let mut uses: BTreeMap<&str, usize> = BTreeMap::new();
            for m in &ms {
                pair_reuse |= !pairs.insert(m.unordered_pair());
                *uses.entry(m.left_conv.as_str()).or_default() += 1;
                *uses.entry(m.right_conv.as_str()).or_default() += 1;
            }
            ComparisonSummary {
                comparison: i as u32,
                agent_a: rec.spec.agent_a.clone(),
                agent_b: rec.spec.agent_b.clone(),
                question: rec.spec.question.clone(),
                matchups: ms.len(),
                convs_used: uses.len(),
                pair_reuse,
                conversation_reuse: uses.values().any(|&n| n > 1),
                diversity: rec.diversity,
                degenerate: rec.degenerate,
            }
        })
        .collect()
}
