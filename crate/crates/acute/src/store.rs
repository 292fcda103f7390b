//! Directory-per-run persistence: `ROOT/<run_id>/events.jsonl` plus a
//! `run.json` summary written at creation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use acute_core::corpus::{Corpus, QuestionRegistry};
use acute_core::pairing::Plan;
use acute_core::run::{
    Progress, RunError, RunReport, RunSettings, RunStart, RunState, SubmitAck, TaskPayload,
};
use acute_core::workers::Submission;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Error;
use crate::eventlog::EventLog;
use crate::jsonl;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const RUN_FILE: &str = "run.json";

/// Source of "now", in seconds since the Unix epoch.
pub trait Clock: Send + Sync {
    fn now(&self) -> u64;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start: u64) -> Self {
        ManualClock(AtomicU64::new(start))
    }

    pub fn set(&self, t: u64) {
        self.0.store(t, Ordering::SeqCst);
    }

    pub fn advance(&self, secs: u64) {
        self.0.fetch_add(secs, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("run `{0}` already exists")]
    DuplicateRun(String),
    #[error("invalid run id `{0}`")]
    InvalidRunId(String),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Io(#[from] Error),
}

/// Summary written next to the event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub run_id: String,
    pub created_at: u64,
    pub rng_seed: u64,
    pub comparisons: usize,
    pub matchups: usize,
    pub qc_pool: usize,
    pub settings: RunSettings,
}

/// Builds the start record for `plan`, keeping only the conversations and
/// questions it references.
pub fn run_start(
    plan: Plan,
    corpus: &Corpus,
    questions: &QuestionRegistry,
    settings: RunSettings,
) -> Result<RunStart, RunError> {
    let mut conv_ids = BTreeSet::new();
    let mut question_ids = BTreeSet::new();
    for m in plan.matchups.iter().chain(&plan.qc_pool) {
        conv_ids.insert(m.left_conv.as_str());
        conv_ids.insert(m.right_conv.as_str());
        question_ids.insert(m.question.as_str());
    }
    let conversations = conv_ids
        .into_iter()
        .map(|id| {
            corpus
                .get(id)
                .cloned()
                .ok_or_else(|| RunError::MissingConversation(id.into()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let questions = question_ids
        .into_iter()
        .map(|id| {
            questions
                .get(id)
                .cloned()
                .ok_or_else(|| RunError::MissingQuestion(id.into()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RunStart {
        run_id: plan.run_id.clone(),
        plan,
        settings,
        conversations,
        questions,
    })
}

fn valid_run_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// A live run: in-memory state plus its open log.
#[derive(Debug)]
pub struct LiveRun {
    state: RunState,
    log: EventLog,
}

impl LiveRun {
    /// Creates `dir` and writes the opening record.
    pub fn create(dir: &Path, start: RunStart, now: u64) -> Result<Self, StoreError> {
        let run_id = start.run_id.clone();
        let (state, record) = RunState::start(start, now)?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let events = dir.join(EVENTS_FILE);
        if events.exists() {
            return Err(StoreError::DuplicateRun(run_id));
        }
        let mut log = EventLog::create(&events)?;
        log.append(&[record])?;
        let plan = state.plan();
        let info = RunInfo {
            run_id,
            created_at: now,
            rng_seed: plan.rng_seed,
            comparisons: plan.comparisons.len(),
            matchups: plan.matchups.len(),
            qc_pool: plan.qc_pool.len(),
            settings: state.settings().clone(),
        };
        jsonl::write_json(&dir.join(RUN_FILE), &info)?;
        Ok(LiveRun { state, log })
    }

    /// Replays the log in `dir`.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let (log, recovered) = EventLog::open(&dir.join(EVENTS_FILE))?;
        let state = RunState::replay(recovered.records)?;
        Ok(LiveRun { state, log })
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn fetch_task(
        &mut self,
        worker_id: &str,
        now: u64,
    ) -> Result<Option<TaskPayload>, StoreError> {
        let (payload, records) = self.state.fetch_task(worker_id, now)?;
        self.log.append(&records)?;
        Ok(payload)
    }

    pub fn submit(&mut self, submission: Submission, now: u64) -> Result<SubmitAck, StoreError> {
        let (result, records) = self.state.submit(submission, now);
        self.log.append(&records)?;
        Ok(result?)
    }

    pub fn close(&mut self, now: u64) -> Result<Progress, StoreError> {
        let records = self.state.close(now);
        self.log.append(&records)?;
        Ok(self.state.progress())
    }
}

/// All runs under one root directory. Each run is guarded by its own lock,
/// which serializes its writers.
pub struct RunStore {
    root: PathBuf,
    clock: Arc<dyn Clock>,
    runs: Mutex<BTreeMap<String, Arc<Mutex<LiveRun>>>>,
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>, clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(RunStore {
            root,
            clock,
            runs: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    fn table(&self) -> MutexGuard<'_, BTreeMap<String, Arc<Mutex<LiveRun>>>> {
        self.runs.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn create(&self, start: RunStart) -> Result<String, StoreError> {
        let id = start.run_id.clone();
        if !valid_run_id(&id) {
            return Err(StoreError::InvalidRunId(id));
        }
        let mut table = self.table();
        let dir = self.root.join(&id);
        if table.contains_key(&id) || dir.join(EVENTS_FILE).exists() {
            return Err(StoreError::DuplicateRun(id));
        }
        let run = LiveRun::create(&dir, start, self.clock.now())?;
        table.insert(id.clone(), Arc::new(Mutex::new(run)));
        Ok(id)
    }

    /// Returns the run, loading it from disk on first access.
    pub fn get(&self, id: &str) -> Result<Arc<Mutex<LiveRun>>, StoreError> {
        if !valid_run_id(id) {
            return Err(StoreError::UnknownRun(id.into()));
        }
        let mut table = self.table();
        if let Some(run) = table.get(id) {
            return Ok(run.clone());
        }
        let dir = self.root.join(id);
        if !dir.join(EVENTS_FILE).is_file() {
            return Err(StoreError::UnknownRun(id.into()));
        }
        let run = Arc::new(Mutex::new(LiveRun::open(&dir)?));
        table.insert(id.into(), run.clone());
        Ok(run)
    }

    fn with_run<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut LiveRun, u64) -> Result<T, StoreError>,
    ) -> Result<T, StoreError> {
        let run = self.get(id)?;
        let mut guard = run.lock().unwrap_or_else(|p| p.into_inner());
        f(&mut guard, self.clock.now())
    }

    pub fn fetch_task(&self, id: &str, worker_id: &str) -> Result<Option<TaskPayload>, StoreError> {
        self.with_run(id, |run, now| run.fetch_task(worker_id, now))
    }

    pub fn submit(&self, id: &str, submission: Submission) -> Result<SubmitAck, StoreError> {
        self.with_run(id, |run, now| run.submit(submission, now))
    }

    pub fn close(&self, id: &str) -> Result<Progress, StoreError> {
        self.with_run(id, |run, now| run.close(now))
    }

    /// A copy of the run state, taken under the run's lock.
    pub fn snapshot(&self, id: &str) -> Result<RunState, StoreError> {
        self.with_run(id, |run, _| Ok(run.state.clone()))
    }

    pub fn status(&self, id: &str) -> Result<Progress, StoreError> {
        self.with_run(id, |run, _| Ok(run.state.progress()))
    }

    pub fn report(&self, id: &str) -> Result<RunReport, StoreError> {
        Ok(self.snapshot(id)?.report()?)
    }
}
