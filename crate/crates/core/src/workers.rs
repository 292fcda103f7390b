//! Annotator bookkeeping and quality control.
//!
//! [`AssignmentState`] is an event-sourced state machine: every mutation is
//! expressed as a [`WorkerEvent`] and applied through [`AssignmentState::apply`],
//! so replaying the returned events from a fresh state reproduces it exactly.
//! Callers serialize all mutations through one writer.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pairing::{Matchup, Plan, Side};
use crate::stats::Annotation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QcResult {
    Pending,
    Passed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Worker {
    pub worker_id: String,
    pub completed_matchups: Vec<String>,
    pub qc_result: QcResult,
    pub qc_completed: u32,
    pub reasons_given_count: u32,
    /// Maximum number of non-QC annotations.
    pub cap: u32,
}

impl Worker {
    pub fn new(worker_id: impl Into<String>, cap: u32) -> Self {
        Worker {
            worker_id: worker_id.into(),
            completed_matchups: Vec::new(),
            qc_result: QcResult::Pending,
            qc_completed: 0,
            reasons_given_count: 0,
            cap,
        }
    }

    pub fn regular_completed(&self) -> u32 {
        self.completed_matchups.len() as u32 - self.qc_completed
    }
}

/// Assignment rules for one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentPolicy {
    pub cap: u32,
    /// Seconds an assignment may stay unanswered before it returns to the pool.
    pub assignment_timeout_secs: u64,
    /// Distinct workers that annotate each regular matchup.
    pub annotations_per_matchup: u32,
    /// QC matchups each worker answers before regular work.
    pub qc_per_worker: u32,
}

impl AssignmentPolicy {
    pub const DEFAULT_TIMEOUT_SECS: u64 = 30 * 60;

    /// Default policy: cap equals the number of comparisons in the plan.
    pub fn for_plan(plan: &Plan) -> Self {
        AssignmentPolicy {
            cap: (plan.comparisons.len() as u32).max(1),
            assignment_timeout_secs: Self::DEFAULT_TIMEOUT_SECS,
            annotations_per_matchup: 1,
            qc_per_worker: 1,
        }
    }
}

/// One state transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WorkerEvent {
    WorkerRegistered {
        worker_id: String,
        cap: u32,
    },
    Assigned {
        worker_id: String,
        matchup_id: String,
        deadline: u64,
    },
    Expired {
        worker_id: String,
        matchup_id: String,
    },
    Submitted {
        annotation: Annotation,
    },
    Closed,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AssignError {
    #[error("unknown worker `{0}`")]
    UnknownWorker(String),
    #[error("worker `{0}` is already registered")]
    AlreadyRegistered(String),
    #[error("plan is closed")]
    Closed,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SubmitError {
    #[error("unknown worker `{0}`")]
    UnknownWorker(String),
    #[error("matchup `{0}` is not assigned to this worker")]
    Unassigned(String),
    #[error("matchup `{0}` was already answered by this worker")]
    Duplicate(String),
    #[error("assignment of matchup `{0}` passed its deadline")]
    Deadline(String),
    #[error("plan is closed")]
    Closed,
}

/// Assignment status of a regular matchup as seen from outside.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MatchupStatus {
    Unassigned,
    Assigned { worker_id: String, deadline: u64 },
    Completed,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Slot {
    active: BTreeMap<String, u64>,
    completed_by: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Outstanding {
    matchup_id: String,
    deadline: u64,
    is_qc: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct MatchupInfo {
    position: usize,
    is_qc: bool,
    gold_side: Option<Side>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentState {
    policy: AssignmentPolicy,
    info: BTreeMap<String, MatchupInfo>,
    workers: BTreeMap<String, Worker>,
    slots: Vec<Slot>,
    /// Regular matchup positions that still have capacity.
    open: BTreeSet<usize>,
    outstanding: BTreeMap<String, Outstanding>,
    /// (worker, matchup) assignments that expired unanswered.
    lapsed: BTreeSet<(String, String)>,
    qc_cursor: usize,
    annotations: Vec<Annotation>,
    closed: bool,
}

impl AssignmentState {
    pub fn new(plan: &Plan, policy: AssignmentPolicy) -> Self {
        let mut info = BTreeMap::new();
        for (position, m) in plan.matchups.iter().enumerate() {
            info.insert(
                m.matchup_id.clone(),
                MatchupInfo {
                    position,
                    is_qc: m.is_qc,
                    gold_side: m.gold_side,
                },
            );
        }
        for (position, m) in plan.qc_pool.iter().enumerate() {
            info.insert(
                m.matchup_id.clone(),
                MatchupInfo {
                    position,
                    is_qc: true,
                    gold_side: m.gold_side,
                },
            );
        }
        AssignmentState {
            policy,
            info,
            workers: BTreeMap::new(),
            slots: alloc::vec![Slot::default(); plan.matchups.len()],
            open: (0..plan.matchups.len()).collect(),
            outstanding: BTreeMap::new(),
            lapsed: BTreeSet::new(),
            qc_cursor: 0,
            annotations: Vec::new(),
            closed: false,
        }
    }

    pub fn policy(&self) -> &AssignmentPolicy {
        &self.policy
    }

    pub fn workers(&self) -> &BTreeMap<String, Worker> {
        &self.workers
    }

    pub fn worker(&self, id: &str) -> Option<&Worker> {
        self.workers.get(id)
    }

    /// Every accepted annotation, QC included, in submission order.
    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Deadline of the worker's unanswered assignment, if any.
    pub fn deadline_of(&self, worker_id: &str) -> Option<u64> {
        self.outstanding.get(worker_id).map(|o| o.deadline)
    }

    pub fn status(&self, plan: &Plan, matchup_id: &str) -> Option<MatchupStatus> {
        let info = self.info.get(matchup_id).filter(|i| !i.is_qc)?;
        let slot = &self.slots[info.position];
        if slot.completed_by.len() as u32 >= self.policy.annotations_per_matchup {
            return Some(MatchupStatus::Completed);
        }
        debug_assert_eq!(plan.matchups[info.position].matchup_id, matchup_id);
        Some(match slot.active.iter().next() {
            Some((w, &deadline)) => MatchupStatus::Assigned {
                worker_id: w.clone(),
                deadline,
            },
            None => MatchupStatus::Unassigned,
        })
    }

    /// Counts of regular matchups by status: (unassigned, assigned, completed).
    pub fn progress(&self) -> (usize, usize, usize) {
        let per = self.policy.annotations_per_matchup as usize;
        let mut counts = (0, 0, 0);
        for s in &self.slots {
            if s.completed_by.len() >= per {
                counts.2 += 1;
            } else if !s.active.is_empty() {
                counts.1 += 1;
            } else {
                counts.0 += 1;
            }
        }
        counts
    }

    fn has_capacity(&self, position: usize) -> bool {
        let s = &self.slots[position];
        ((s.active.len() + s.completed_by.len()) as u32) < self.policy.annotations_per_matchup
    }

    fn refresh_open(&mut self, position: usize) {
        if self.has_capacity(position) {
            self.open.insert(position);
        } else {
            self.open.remove(&position);
        }
    }

    /// Applies one event. Events produced by this state always apply cleanly;
    /// inconsistent events (from a foreign or corrupted log) are ignored
    /// rather than panicking.
    pub fn apply(&mut self, event: &WorkerEvent) {
        match event {
            WorkerEvent::WorkerRegistered { worker_id, cap } => {
                self.workers
                    .entry(worker_id.clone())
                    .or_insert_with(|| Worker::new(worker_id.clone(), *cap));
            }
            WorkerEvent::Assigned {
                worker_id,
                matchup_id,
                deadline,
            } => {
                let Some(info) = self.info.get(matchup_id).cloned() else {
                    return;
                };
                if !info.is_qc {
                    self.slots[info.position]
                        .active
                        .insert(worker_id.clone(), *deadline);
                    self.refresh_open(info.position);
                } else {
                    self.qc_cursor += 1;
                }
                self.outstanding.insert(
                    worker_id.clone(),
                    Outstanding {
                        matchup_id: matchup_id.clone(),
                        deadline: *deadline,
                        is_qc: info.is_qc,
                    },
                );
            }
            WorkerEvent::Expired {
                worker_id,
                matchup_id,
            } => {
                if self
                    .outstanding
                    .get(worker_id)
                    .is_some_and(|o| &o.matchup_id == matchup_id)
                {
                    self.outstanding.remove(worker_id);
                }
                if let Some(info) = self.info.get(matchup_id).cloned() {
                    if !info.is_qc {
                        self.slots[info.position].active.remove(worker_id);
                        self.refresh_open(info.position);
                    }
                }
                self.lapsed.insert((worker_id.clone(), matchup_id.clone()));
            }
            WorkerEvent::Submitted { annotation } => {
                let Some(info) = self.info.get(&annotation.matchup_id).cloned() else {
                    return;
                };
                let Some(worker) = self.workers.get_mut(&annotation.worker_id) else {
                    return;
                };
                worker
                    .completed_matchups
                    .push(annotation.matchup_id.clone());
                if annotation.has_reason() {
                    worker.reasons_given_count += 1;
                }
                if info.is_qc {
                    worker.qc_completed += 1;
                    let passed = info.gold_side == Some(annotation.chosen_side);
                    worker.qc_result = match (worker.qc_result, passed) {
                        (QcResult::Failed, _) | (_, false) => QcResult::Failed,
                        (_, true) => QcResult::Passed,
                    };
                } else {
                    let slot = &mut self.slots[info.position];
                    slot.active.remove(&annotation.worker_id);
                    slot.completed_by.insert(annotation.worker_id.clone());
                    self.refresh_open(info.position);
                }
                self.outstanding.remove(&annotation.worker_id);
                self.annotations.push(annotation.clone());
            }
            WorkerEvent::Closed => self.closed = true,
        }
    }

    fn emit(&mut self, event: WorkerEvent, out: &mut Vec<WorkerEvent>) {
        self.apply(&event);
        out.push(event);
    }

    pub fn register_worker(&mut self, worker_id: &str) -> Result<WorkerEvent, AssignError> {
        if self.workers.contains_key(worker_id) {
            return Err(AssignError::AlreadyRegistered(worker_id.into()));
        }
        let ev = WorkerEvent::WorkerRegistered {
            worker_id: worker_id.into(),
            cap: self.policy.cap,
        };
        self.apply(&ev);
        Ok(ev)
    }

    /// Returns every assignment whose deadline has passed to the pool.
    pub fn expire_due(&mut self, now: u64) -> Vec<WorkerEvent> {
        let due: Vec<(String, String)> = self
            .outstanding
            .iter()
            .filter(|(_, o)| now > o.deadline)
            .map(|(w, o)| (w.clone(), o.matchup_id.clone()))
            .collect();
        let mut out = Vec::new();
        for (worker_id, matchup_id) in due {
            self.emit(
                WorkerEvent::Expired {
                    worker_id,
                    matchup_id,
                },
                &mut out,
            );
        }
        out
    }

    pub fn close(&mut self) -> Option<WorkerEvent> {
        if self.closed {
            return None;
        }
        self.apply(&WorkerEvent::Closed);
        Some(WorkerEvent::Closed)
    }

    fn seen(worker: &Worker, lapsed: &BTreeSet<(String, String)>, matchup_id: &str) -> bool {
        worker.completed_matchups.iter().any(|m| m == matchup_id)
            || lapsed.contains(&(worker.worker_id.clone(), matchup_id.into()))
    }

    /// Picks the next matchup for `worker_id` and assigns it.
    ///
    /// A worker holding an unanswered assignment gets the same matchup back.
    /// Otherwise a worker gets QC matchups first, then regular matchups in
    /// plan order until the cap is reached. Returns the events to persist
    /// alongside the matchup, which is `None` when nothing is left for this
    /// worker.
    pub fn next_assignment(
        &mut self,
        plan: &Plan,
        worker_id: &str,
        now: u64,
    ) -> Result<(Option<Matchup>, Vec<WorkerEvent>), AssignError> {
        if self.closed {
            return Err(AssignError::Closed);
        }
        if !self.workers.contains_key(worker_id) {
            return Err(AssignError::UnknownWorker(worker_id.into()));
        }
        let mut events = self.expire_due(now);

        if let Some(o) = self.outstanding.get(worker_id) {
            let m = plan.matchup(&o.matchup_id).cloned();
            return Ok((m, events));
        }

        let worker = &self.workers[worker_id];
        let mut pick = None;
        if worker.qc_completed < self.policy.qc_per_worker && !plan.qc_pool.is_empty() {
            let n = plan.qc_pool.len();
            pick = (0..n)
                .map(|i| &plan.qc_pool[(self.qc_cursor + i) % n])
                .find(|m| !Self::seen(worker, &self.lapsed, &m.matchup_id));
        }
        if pick.is_none() && worker.regular_completed() < worker.cap {
            pick = self
                .open
                .iter()
                .map(|&p| &plan.matchups[p])
                .find(|m| !Self::seen(worker, &self.lapsed, &m.matchup_id));
        }
        let Some(m) = pick.cloned() else {
            return Ok((None, events));
        };
        self.emit(
            WorkerEvent::Assigned {
                worker_id: worker_id.into(),
                matchup_id: m.matchup_id.clone(),
                deadline: now + self.policy.assignment_timeout_secs,
            },
            &mut events,
        );
        Ok((Some(m), events))
    }

    /// Records an answer from the worker currently holding the matchup.
    ///
    /// Does not expire anything itself; an assignment past its deadline is
    /// rejected and stays lapsed until [`expire_due`](Self::expire_due) runs.
    pub fn record_submission(
        &mut self,
        plan: &Plan,
        submission: Submission,
        now: u64,
    ) -> Result<(Annotation, WorkerEvent), SubmitError> {
        if self.closed {
            return Err(SubmitError::Closed);
        }
        let Some(worker) = self.workers.get(&submission.worker_id) else {
            return Err(SubmitError::UnknownWorker(submission.worker_id));
        };
        let id = submission.matchup_id;
        if worker.completed_matchups.contains(&id) {
            return Err(SubmitError::Duplicate(id));
        }
        let outstanding = self
            .outstanding
            .get(&worker.worker_id)
            .filter(|o| o.matchup_id == id);
        let Some(outstanding) = outstanding else {
            if self.lapsed.contains(&(worker.worker_id.clone(), id.clone())) {
                return Err(SubmitError::Deadline(id));
            }
            return Err(SubmitError::Unassigned(id));
        };
        if now > outstanding.deadline {
            return Err(SubmitError::Deadline(id));
        }
        let m = plan
            .matchup(&id)
            .ok_or_else(|| SubmitError::Unassigned(id.clone()))?;
        let annotation = Annotation {
            annotation_id: format!("a{:06}", self.annotations.len()),
            matchup_id: id,
            worker_id: submission.worker_id,
            chosen_side: submission.chosen_side,
            chosen_agent: m.agent_on(submission.chosen_side).clone(),
            justification: submission.justification,
            elapsed_seconds: submission.elapsed_seconds.max(0.0),
            submitted_at: now,
        };
        let ev = WorkerEvent::Submitted {
            annotation: annotation.clone(),
        };
        self.apply(&ev);
        Ok((annotation, ev))
    }
}

/// A worker's answer as received from the client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub worker_id: String,
    pub matchup_id: String,
    pub chosen_side: Side,
    #[serde(default)]
    pub justification: String,
    #[serde(default)]
    pub elapsed_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RemovalReason {
    QcFail,
    NoReasons,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerGateRow {
    pub worker_id: String,
    pub qc_result: QcResult,
    pub completed: u32,
    pub reasons_given: u32,
    pub removed: Option<RemovalReason>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatingReport {
    pub removed_workers: BTreeMap<String, RemovalReason>,
    /// Non-QC annotations of workers that were kept.
    pub surviving: Vec<String>,
    /// Everything else: removed workers' annotations and all QC annotations.
    pub removed: Vec<String>,
    /// How many of `removed` are QC annotations.
    pub qc_excluded: usize,
    pub workers: Vec<WorkerGateRow>,
}

impl GatingReport {
    pub fn surviving_count(&self) -> usize {
        self.surviving.len()
    }

    pub fn removed_count(&self) -> usize {
        self.removed.len()
    }

    /// Filters `annotations` down to the surviving set, preserving order.
    pub fn surviving_annotations(&self, annotations: &[Annotation]) -> Vec<Annotation> {
        let keep: BTreeSet<&str> = self.surviving.iter().map(String::as_str).collect();
        annotations
            .iter()
            .filter(|a| keep.contains(a.annotation_id.as_str()))
            .cloned()
            .collect()
    }
}

/// Removes workers who failed QC or never gave a reason, and excludes all
/// QC annotations from analysis.
pub fn gate_workers<'w>(
    workers: impl IntoIterator<Item = &'w Worker>,
    annotations: &[Annotation],
    plan: &Plan,
) -> GatingReport {
    let qc_ids: BTreeSet<&str> = plan
        .qc_pool
        .iter()
        .chain(&plan.matchups)
        .filter(|m| m.is_qc)
        .map(|m| m.matchup_id.as_str())
        .collect();

    let mut report = GatingReport::default();
    for w in workers {
        let reason = if w.qc_result == QcResult::Failed {
            Some(RemovalReason::QcFail)
        } else if w.reasons_given_count == 0 && !w.completed_matchups.is_empty() {
            Some(RemovalReason::NoReasons)
        } else {
            None
        };
        if let Some(r) = reason {
            report.removed_workers.insert(w.worker_id.clone(), r);
        }
        report.workers.push(WorkerGateRow {
            worker_id: w.worker_id.clone(),
            qc_result: w.qc_result,
            completed: w.completed_matchups.len() as u32,
            reasons_given: w.reasons_given_count,
            removed: reason,
        });
    }
    report.workers.sort_by(|a, b| a.worker_id.cmp(&b.worker_id));

    for a in annotations {
        let is_qc = qc_ids.contains(a.matchup_id.as_str());
        if is_qc {
            report.qc_excluded += 1;
        }
        if is_qc || report.removed_workers.contains_key(&a.worker_id) {
            report.removed.push(a.annotation_id.clone());
        } else {
            report.surviving.push(a.annotation_id.clone());
        }
    }
    report
}
