//! Run state for one evaluation, rebuilt from its event log.
//!
//! Every mutating call returns the [`EventRecord`]s it produced. Persisting
//! those records in order and replaying them with [`RunState::replay`] gives
//! back an identical state, and therefore an identical [`RunReport`].

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Conversation, Question};
use crate::pairing::{Matchup, Plan, Side};
use crate::stats::{win_matrix, Annotation, StatsError, WinMatrix};
use crate::workers::{
    gate_workers, AssignError, AssignmentPolicy, AssignmentState, GatingReport, SubmitError,
    Submission, WorkerEvent,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub policy: AssignmentPolicy,
    pub alpha: f64,
    #[serde(default)]
    pub justification_required: bool,
}

impl RunSettings {
    pub fn for_plan(plan: &Plan) -> Self {
        RunSettings {
            policy: AssignmentPolicy::for_plan(plan),
            alpha: crate::DEFAULT_ALPHA,
            justification_required: false,
        }
    }
}

/// Everything a run needs, captured in its first log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStart {
    pub run_id: String,
    pub plan: Plan,
    pub settings: RunSettings,
    /// Conversations referenced by the plan.
    pub conversations: Vec<Conversation>,
    /// Questions referenced by the plan.
    pub questions: Vec<Question>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum RunEvent {
    Start(RunStart),
    Worker(WorkerEvent),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    /// Seconds since the Unix epoch.
    pub at: u64,
    pub event: RunEvent,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RunError {
    #[error("plan references unknown conversation `{0}`")]
    MissingConversation(String),
    #[error("plan references unknown question `{0}`")]
    MissingQuestion(String),
    #[error("matchup `{0}` is malformed")]
    MalformedMatchup(String),
    #[error("event log is empty")]
    EmptyLog,
    #[error("event log does not start with a run record")]
    MissingStart,
    #[error("event {found} out of sequence, expected {expected}")]
    Sequence { expected: u64, found: u64 },
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error(transparent)]
    Submit(#[from] SubmitError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DisplayRole {
    Evaluated,
    Partner,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisplayUtterance {
    pub turn_index: u32,
    pub role: DisplayRole,
    pub text: String,
}

/// What an annotator sees. Carries no agent names or conversation ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPayload {
    pub matchup_id: String,
    pub prompt_text: String,
    pub left: Vec<DisplayUtterance>,
    pub right: Vec<DisplayUtterance>,
    pub choice_text_left: String,
    pub choice_text_right: String,
    pub justification_required: bool,
    /// Seconds since the Unix epoch after which a submission is rejected.
    pub deadline: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub planned: usize,
    pub unassigned: usize,
    pub assigned: usize,
    pub completed: usize,
    pub workers: usize,
    pub annotations: usize,
    pub closed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub progress: Progress,
    pub gating: GatingReport,
    pub win_matrix: WinMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub annotation_id: String,
    pub completed: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    start: RunStart,
    conversations: BTreeMap<String, Conversation>,
    questions: BTreeMap<String, Question>,
    assignments: AssignmentState,
    next_seq: u64,
}

impl RunState {
    fn from_start(start: RunStart) -> Result<Self, RunError> {
        let conversations: BTreeMap<_, _> = start
            .conversations
            .iter()
            .map(|c| (c.conv_id.clone(), c.clone()))
            .collect();
        let questions: BTreeMap<_, _> = start
            .questions
            .iter()
            .map(|q| (q.question_id.clone(), q.clone()))
            .collect();
        for m in start.plan.matchups.iter().chain(&start.plan.qc_pool) {
            if !m.is_well_formed() {
                return Err(RunError::MalformedMatchup(m.matchup_id.clone()));
            }
            for c in [&m.left_conv, &m.right_conv] {
                if !conversations.contains_key(c) {
                    return Err(RunError::MissingConversation(c.clone()));
                }
            }
            if !questions.contains_key(&m.question) {
                return Err(RunError::MissingQuestion(m.question.clone()));
            }
        }
        let assignments = AssignmentState::new(&start.plan, start.settings.policy);
        Ok(RunState {
            start,
            conversations,
            questions,
            assignments,
            next_seq: 1,
        })
    }

    /// Opens a run. The returned record must be persisted before any other.
    pub fn start(start: RunStart, now: u64) -> Result<(Self, EventRecord), RunError> {
        let state = Self::from_start(start.clone())?;
        let record = EventRecord {
            seq: 0,
            at: now,
            event: RunEvent::Start(start),
        };
        Ok((state, record))
    }

    /// Rebuilds a run from its full event log.
    pub fn replay(records: impl IntoIterator<Item = EventRecord>) -> Result<Self, RunError> {
        let mut iter = records.into_iter();
        let first = iter.next().ok_or(RunError::EmptyLog)?;
        let RunEvent::Start(start) = first.event else {
            return Err(RunError::MissingStart);
        };
        if first.seq != 0 {
            return Err(RunError::Sequence {
                expected: 0,
                found: first.seq,
            });
        }
        let mut state = Self::from_start(start)?;
        for rec in iter {
            if rec.seq != state.next_seq {
                return Err(RunError::Sequence {
                    expected: state.next_seq,
                    found: rec.seq,
                });
            }
            match &rec.event {
                RunEvent::Start(_) => return Err(RunError::MissingStart),
                RunEvent::Worker(ev) => state.assignments.apply(ev),
            }
            state.next_seq += 1;
        }
        Ok(state)
    }

    pub fn run_id(&self) -> &str {
        &self.start.run_id
    }

    pub fn plan(&self) -> &Plan {
        &self.start.plan
    }

    pub fn settings(&self) -> &RunSettings {
        &self.start.settings
    }

    pub fn start_record(&self) -> &RunStart {
        &self.start
    }

    pub fn assignments(&self) -> &AssignmentState {
        &self.assignments
    }

    pub fn annotations(&self) -> &[Annotation] {
        self.assignments.annotations()
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn is_closed(&self) -> bool {
        self.assignments.is_closed()
    }

    fn wrap(&mut self, events: Vec<WorkerEvent>, now: u64) -> Vec<EventRecord> {
        events
            .into_iter()
            .map(|ev| {
                let rec = EventRecord {
                    seq: self.next_seq,
                    at: now,
                    event: RunEvent::Worker(ev),
                };
                self.next_seq += 1;
                rec
            })
            .collect()
    }

    /// Builds the blinded payload for a matchup.
    pub fn payload(&self, m: &Matchup, deadline: u64) -> TaskPayload {
        let question = &self.questions[&m.question];
        let render = |conv_id: &str| {
            let c = &self.conversations[conv_id];
            c.utterances
                .iter()
                .map(|u| DisplayUtterance {
                    turn_index: u.turn_index,
                    role: if u.speaker_slot == c.evaluated_slot {
                        DisplayRole::Evaluated
                    } else {
                        DisplayRole::Partner
                    },
                    text: u.text.clone(),
                })
                .collect()
        };
        TaskPayload {
            matchup_id: m.matchup_id.clone(),
            prompt_text: question.prompt_text.clone(),
            left: render(&m.left_conv),
            right: render(&m.right_conv),
            choice_text_left: question.choice_text(1),
            choice_text_right: question.choice_text(2),
            justification_required: self.start.settings.justification_required,
            deadline,
        }
    }

    /// Registers the worker on first contact and hands out the next matchup.
    ///
    /// The records are returned even when no task is available, since
    /// registration and expiries still change state.
    pub fn fetch_task(
        &mut self,
        worker_id: &str,
        now: u64,
    ) -> Result<(Option<TaskPayload>, Vec<EventRecord>), RunError> {
        if self.is_closed() {
            return Err(AssignError::Closed.into());
        }
        let mut events = Vec::new();
        if self.assignments.worker(worker_id).is_none() {
            events.push(self.assignments.register_worker(worker_id)?);
        }
        let (matchup, more) = self
            .assignments
            .next_assignment(&self.start.plan, worker_id, now)?;
        events.extend(more);
        let payload = matchup.map(|m| {
            let deadline = events
                .iter()
                .rev()
                .find_map(|e| match e {
                    WorkerEvent::Assigned {
                        matchup_id,
                        deadline,
                        ..
                    } if *matchup_id == m.matchup_id => Some(*deadline),
                    _ => None,
                })
                .or_else(|| self.assignments.deadline_of(worker_id))
                .unwrap_or(now);
            self.payload(&m, deadline)
        });
        Ok((payload, self.wrap(events, now)))
    }

    /// Accepts an annotation. Expiries due at `now` are applied first and
    /// their records are returned even if the submission is rejected.
    pub fn submit(
        &mut self,
        submission: Submission,
        now: u64,
    ) -> (Result<SubmitAck, RunError>, Vec<EventRecord>) {
        if self.is_closed() {
            return (Err(SubmitError::Closed.into()), Vec::new());
        }
        let mut events = self.assignments.expire_due(now);
        let result = self
            .assignments
            .record_submission(&self.start.plan, submission, now)
            .map(|(annotation, ev)| {
                events.push(ev);
                SubmitAck {
                    annotation_id: annotation.annotation_id,
                    completed: self.assignments.annotations().len(),
                }
            })
            .map_err(RunError::from);
        (result, self.wrap(events, now))
    }

    pub fn close(&mut self, now: u64) -> Vec<EventRecord> {
        let ev: Vec<_> = self.assignments.close().into_iter().collect();
        self.wrap(ev, now)
    }

    pub fn progress(&self) -> Progress {
        let (unassigned, assigned, completed) = self.assignments.progress();
        Progress {
            planned: self.start.plan.matchups.len(),
            unassigned,
            assigned,
            completed,
            workers: self.assignments.workers().len(),
            annotations: self.assignments.annotations().len(),
            closed: self.is_closed(),
        }
    }

    pub fn gating(&self) -> GatingReport {
        gate_workers(
            self.assignments.workers().values(),
            self.assignments.annotations(),
            &self.start.plan,
        )
    }

    /// Gated annotations, QC excluded.
    pub fn surviving_annotations(&self) -> Vec<Annotation> {
        self.gating()
            .surviving_annotations(self.assignments.annotations())
    }

    /// Gating followed by the win matrix over what survives.
    pub fn report(&self) -> Result<RunReport, RunError> {
        let gating = self.gating();
        let surviving = gating.surviving_annotations(self.assignments.annotations());
        let matrix = win_matrix(&surviving, &self.start.plan, self.start.settings.alpha)?;
        Ok(RunReport {
            run_id: self.start.run_id.clone(),
            progress: self.progress(),
            gating,
            win_matrix: matrix,
        })
    }

    pub fn side_of_gold(&self, matchup_id: &str) -> Option<Side> {
        self.start.plan.matchup(matchup_id).and_then(|m| m.gold_side)
    }
}
