#![allow(dead_code)]

//! Synthetic corpus, simulated annotators and service drivers shared by the
//! integration tests.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use acute::server::{StartRequest, StartResponse, SubmitResponse, TaskResponse};
use acute_core::corpus::{
    AgentId, Conversation, Corpus, Provenance, QuestionRegistry, SpeakerSlot, Utterance,
};
use acute_core::pairing::{build_plan, make_qc_pool, ComparisonSpec, Plan, Side};
use acute_core::run::{Progress, RunSettings, RunStart, RunState, TaskPayload};
use acute_core::workers::Submission;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STRONG: &str = "PersonaEngine";
pub const OTHER: &str = "KeyValueNet";
pub const WEAK: &str = "RetrievalBaseline";
pub const QUESTION: &str = "engaging";

const WORDS: &[&str] = &[
    "hello", "music", "weather", "garden", "travel", "cooking", "friends", "summer", "books",
    "movies", "coffee", "hiking", "dogs", "painting", "ocean", "city", "school", "guitar",
];

fn text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(3..9);
    (0..n)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn conversation(
    id: String,
    evaluated: AgentId,
    partner: AgentId,
    provenance: Provenance,
    seed: u64,
) -> Conversation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let turns = rng.random_range(6..=8) * 2;
    let evaluated_slot = if rng.random_bool(0.5) {
        SpeakerSlot::First
    } else {
        SpeakerSlot::Second
    };
    Conversation {
        conv_id: id,
        evaluated_agent: evaluated,
        partner_agent: partner,
        evaluated_slot,
        provenance,
        utterances: (0..turns)
            .map(|i| Utterance {
                turn_index: i,
                speaker_slot: if i % 2 == 0 {
                    SpeakerSlot::First
                } else {
                    SpeakerSlot::Second
                },
                text: text(&mut rng),
            })
            .collect(),
        metadata: Default::default(),
    }
}

/// Two models with `per_model` human-model conversations each, plus a weak
/// baseline and human-human conversations for QC.
pub fn synthetic_corpus(per_model: usize, qc: usize) -> Corpus {
    let mut convs = Vec::new();
    let mut seed = 0u64;
    let mut push = |id: String, ev: AgentId, pa: AgentId, prov| {
        seed += 1;
        convs.push(conversation(id, ev, pa, prov, seed));
    };
    for i in 0..per_model {
        push(format!("s{i:04}"), AgentId::model(STRONG), AgentId::human(), Provenance::HumanModel);
        push(format!("o{i:04}"), AgentId::model(OTHER), AgentId::human(), Provenance::HumanModel);
    }
    for i in 0..qc {
        push(format!("w{i:04}"), AgentId::model(WEAK), AgentId::human(), Provenance::HumanModel);
        push(format!("h{i:04}"), AgentId::human(), AgentId::human(), Provenance::HumanHuman);
    }
    Corpus::from_conversations(convs).unwrap()
}

pub fn synthetic_plan(corpus: &Corpus, target: u32, seed: u64) -> Plan {
    let reg = QuestionRegistry::with_builtins();
    let spec = ComparisonSpec {
        agent_a: AgentId::model(STRONG),
        agent_b: AgentId::model(OTHER),
        question: QUESTION.into(),
        target_annotations: target,
        provenance: None,
    };
    let pool = make_qc_pool(corpus, &AgentId::model(WEAK), QUESTION, seed).unwrap();
    build_plan(corpus, &reg, &[spec], seed).unwrap().with_qc_pool(pool)
}

pub fn run_start(corpus: &Corpus, plan: Plan) -> RunStart {
    let settings = RunSettings::for_plan(&plan);
    acute::store::run_start(plan, corpus, &QuestionRegistry::with_builtins(), settings).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Honest,
    /// Picks the weak side of QC matchups and answers at random elsewhere.
    Fraud,
}

/// One worker in ten is fraudulent.
pub fn worker_kind(index: usize) -> Kind {
    if index % 10 == 9 {
        Kind::Fraud
    } else {
        Kind::Honest
    }
}

pub fn worker_id(index: usize) -> String {
    format!("worker-{index:04}")
}

fn fnv(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// The simulated annotator's answer. Depends only on its inputs, so a retried
/// request gets the same answer.
pub fn decide(plan: &Plan, matchup_id: &str, worker: &str, kind: Kind, preference: f64, seed: u64) -> Side {
    let m = plan.matchup(matchup_id).expect("served matchup is in the plan");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv(worker) ^ fnv(matchup_id).rotate_left(17));
    let coin = rng.random_bool(0.5);
    let random = if coin { Side::Left } else { Side::Right };
    match (m.is_qc, kind) {
        (true, Kind::Honest) => m.gold_side.unwrap(),
        (true, Kind::Fraud) => m.gold_side.unwrap().other(),
        (false, Kind::Fraud) => random,
        (false, Kind::Honest) => {
            let strong = if m.left_agent == AgentId::model(STRONG) {
                Side::Left
            } else {
                Side::Right
            };
            if m.left_agent == m.right_agent {
                // Self comparison: no preference.
                random
            } else if rng.random_bool(preference) {
                strong
            } else {
                strong.other()
            }
        }
    }
}

#[derive(Debug, PartialEq)]
pub enum Outcome {
    Accepted,
    Rejected(String),
}

pub trait Service {
    fn fetch(&mut self, worker: &str) -> Option<TaskPayload>;
    fn submit(&mut self, submission: Submission) -> Outcome;
    fn progress(&mut self) -> Progress;
}

/// Pure in-memory run with a fixed clock.
pub struct InMemory {
    pub state: RunState,
    pub now: u64,
}

impl InMemory {
    pub fn new(start: RunStart) -> Self {
        InMemory {
            state: RunState::start(start, 1_000).unwrap().0,
            now: 1_000,
        }
    }
}

impl Service for InMemory {
    fn fetch(&mut self, worker: &str) -> Option<TaskPayload> {
        self.state.fetch_task(worker, self.now).unwrap().0
    }

    fn submit(&mut self, submission: Submission) -> Outcome {
        match self.state.submit(submission, self.now).0 {
            Ok(_) => Outcome::Accepted,
            Err(e) => Outcome::Rejected(e.to_string()),
        }
    }

    fn progress(&mut self) -> Progress {
        self.state.progress()
    }
}

/// Workers arrive one at a time and work until they get no task; stops once
/// every planned matchup is completed.
pub fn drive(
    service: &mut dyn Service,
    plan: &Plan,
    preference: f64,
    seed: u64,
    mut on_payload: impl FnMut(&TaskPayload),
) {
    let limit = 20 * (plan.matchups.len() + 1);
    for index in 0..limit {
        let p = service.progress();
        if p.completed == p.planned {
            return;
        }
        let worker = worker_id(index);
        let kind = worker_kind(index);
        while let Some(task) = service.fetch(&worker) {
            on_payload(&task);
            let side = decide(plan, &task.matchup_id, &worker, kind, preference, seed);
            let outcome = service.submit(Submission {
                worker_id: worker.clone(),
                matchup_id: task.matchup_id.clone(),
                chosen_side: side,
                justification: "more natural replies".into(),
                elapsed_seconds: 30.0,
            });
            assert_eq!(outcome, Outcome::Accepted, "{worker} on {}", task.matchup_id);
        }
    }
    panic!("run did not complete with {limit} workers");
}

pub fn http_agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(30)))
        .build()
        .into()
}

/// `acute serve` running as a child process.
pub struct ServerProcess {
    child: Child,
    pub base: String,
}

impl ServerProcess {
    pub fn spawn(root: &Path) -> Self {
        let mut child = Command::new(env!("CARGO_BIN_EXE_acute"))
            .args(["serve", "--addr", "127.0.0.1:0", "--root"])
            .arg(root)
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .expect("spawn acute serve");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
            .to_string();
        ServerProcess { child, base }
    }

    pub fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    pub fn wait(&mut self) -> std::process::ExitStatus {
        self.child.wait().unwrap()
    }
}

impl Drop for ServerProcess {
    fn drop(&mut self) {
        self.kill();
    }
}

pub fn post_run(agent: &ureq::Agent, base: &str, start: &RunStart) -> String {
    let req = StartRequest {
        plan: start.plan.clone(),
        conversations: start.conversations.clone(),
        questions: Vec::new(),
        settings: Some(start.settings.clone()),
    };
    let mut resp = agent.post(format!("{base}/runs")).send_json(&req).unwrap();
    assert_eq!(resp.status(), 201);
    resp.body_mut().read_json::<StartResponse>().unwrap().run_id
}

/// Drives a server process over HTTP. Before the operations listed in
/// `kill_at`, the request is sent, the process is killed a random moment
/// later, a new process is started on the same root and the request is
/// retried.
pub struct HttpService {
    pub agent: ureq::Agent,
    pub server: ServerProcess,
    pub root: PathBuf,
    pub run_id: String,
    pub ops: usize,
    pub kill_at: BTreeSet<usize>,
    pub kills: usize,
    pub raw_payloads: Vec<String>,
    rng: ChaCha8Rng,
    retried: bool,
}

impl HttpService {
    pub fn new(root: &Path, start: &RunStart, kill_at: BTreeSet<usize>, seed: u64) -> Self {
        let agent = http_agent();
        let server = ServerProcess::spawn(root);
        let run_id = post_run(&agent, &server.base, start);
        HttpService {
            agent,
            server,
            root: root.to_owned(),
            run_id,
            ops: 0,
            kill_at,
            kills: 0,
            raw_payloads: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            retried: false,
        }
    }

    fn url(&self, tail: &str) -> String {
        format!("{}/runs/{}/{tail}", self.server.base, self.run_id)
    }

    fn maybe_crash(&mut self, send: impl FnOnce(ureq::Agent, String) + Send + 'static, url: String) {
        self.ops += 1;
        self.retried = false;
        if !self.kill_at.contains(&self.ops) {
            return;
        }
        let agent = self.agent.clone();
        let inflight = std::thread::spawn(move || send(agent, url));
        std::thread::sleep(Duration::from_micros(self.rng.random_range(0..3_000)));
        self.server.kill();
        let _ = inflight.join();
        self.server = ServerProcess::spawn(&self.root);
        self.kills += 1;
        self.retried = true;
    }

    pub fn get_text(&self, tail: &str) -> (u16, String) {
        let mut r = self.agent.get(self.url(tail)).call().unwrap();
        (r.status().as_u16(), r.body_mut().read_to_string().unwrap())
    }

    pub fn post_text(&self, tail: &str) -> (u16, String) {
        let mut r = self.agent.post(self.url(tail)).send_empty().unwrap();
        (r.status().as_u16(), r.body_mut().read_to_string().unwrap())
    }
}

impl Service for HttpService {
    fn fetch(&mut self, worker: &str) -> Option<TaskPayload> {
        let url = format!("{}?worker={worker}", self.url("task"));
        self.maybe_crash(|a, u| drop(a.get(u).call()), url);
        let url = format!("{}?worker={worker}", self.url("task"));
        let mut r = self.agent.get(url).call().unwrap();
        assert_eq!(r.status(), 200);
        let body = r.body_mut().read_to_string().unwrap();
        match serde_json::from_str::<TaskResponse>(&body).unwrap() {
            TaskResponse::Task { task } => {
                self.raw_payloads.push(body);
                Some(task)
            }
            TaskResponse::NoTask => None,
        }
    }

    fn submit(&mut self, submission: Submission) -> Outcome {
        let body = serde_json::to_value(&submission).unwrap();
        let url = self.url("annotations");
        let b = body.clone();
        self.maybe_crash(move |a, u| drop(a.post(u).send_json(&b)), url);
        let mut r = self.agent.post(self.url("annotations")).send_json(&body).unwrap();
        match r.body_mut().read_json::<SubmitResponse>().unwrap() {
            SubmitResponse::Accepted { .. } => Outcome::Accepted,
            // The lost request may already have been recorded.
            SubmitResponse::Rejected { code, .. } if self.retried && code == "DUPLICATE" => {
                Outcome::Accepted
            }
            SubmitResponse::Rejected { code, .. } => Outcome::Rejected(code),
        }
    }

    fn progress(&mut self) -> Progress {
        let (status, body) = self.get_text("status");
        assert_eq!(status, 200);
        serde_json::from_str(&body).unwrap()
    }
}

/// Exact central acceptance interval of Binomial(n, p) at level 1 - alpha:
/// the largest `lo` and smallest `hi` with P(X < lo) <= alpha/2 and
/// P(X > hi) <= alpha/2.
pub fn binomial_interval(n: u64, p: f64, alpha: f64) -> (u64, u64) {
    let mut pmf = vec![0.0f64; n as usize + 1];
    pmf[0] = (1.0 - p).powi(n as i32);
    for k in 0..n as usize {
        pmf[k + 1] = pmf[k] * (n as f64 - k as f64) / (k as f64 + 1.0) * p / (1.0 - p);
    }
    let mut lo = 0;
    let mut below = 0.0;
    while below + pmf[lo] <= alpha / 2.0 {
        below += pmf[lo];
        lo += 1;
    }
    let mut hi = n as usize;
    let mut above = 0.0;
    while above + pmf[hi] <= alpha / 2.0 {
        above += pmf[hi];
        hi -= 1;
    }
    (lo as u64, hi as u64)
}

/// A run store on disk, driven in-process.
pub struct StoreService {
    pub store: acute::store::RunStore,
    pub run_id: String,
}

impl Service for StoreService {
    fn fetch(&mut self, worker: &str) -> Option<TaskPayload> {
        self.store.fetch_task(&self.run_id, worker).unwrap()
    }

    fn submit(&mut self, submission: Submission) -> Outcome {
        match self.store.submit(&self.run_id, submission) {
            Ok(_) => Outcome::Accepted,
            Err(e) => Outcome::Rejected(e.to_string()),
        }
    }

    fn progress(&mut self) -> Progress {
        self.store.status(&self.run_id).unwrap()
    }
}
