//! Command-line interface.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use acute_core::corpus::{AgentId, Corpus, Provenance};
use acute_core::pairing::{plan_summary, Plan};
use acute_core::run::RunState;
use acute_core::selfchat::{
    repetition_report, training_overlap, ModelEndpoint, SelfChatConfig, Transport,
};
use acute_core::stats::{
    aa_check, agreement, cost_curve, likert_curve, power_points, Annotation, BootstrapConfig,
    LikertProfile, PairOutcomes, ResampleUnit,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{parse_agent, RunConfig};
use crate::endpoint::{responder_for, run_self_chats_parallel};
use crate::error::{exit, Error, Result};
use crate::store::{run_start, LiveRun, RunStore, SystemClock, EVENTS_FILE};
use crate::{eventlog, jsonl, server, tables};

#[derive(Debug, Parser)]
#[command(name = "acute", version, about = "Pairwise human evaluation of multi-turn dialogues")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate conversation logs and write a normalized corpus.
    Ingest(IngestArgs),
    /// Build a matchup plan and initialize its run directory.
    Plan(PlanArgs),
    /// Generate self-chat conversations from a model endpoint.
    Selfchat(SelfchatArgs),
    /// Serve runs over HTTP.
    Serve(ServeArgs),
    /// Write the gated report tables for a run.
    Analyze(AnalyzeArgs),
    /// Bootstrap power and person-hour cost curve for one agent pair.
    Power(PowerArgs),
    /// Dump a run's annotations.
    Export(ExportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProvenanceArg {
    HumanModel,
    SelfChat,
    HumanHuman,
}

impl From<ProvenanceArg> for Provenance {
    fn from(p: ProvenanceArg) -> Self {
        match p {
            ProvenanceArg::HumanModel => Provenance::HumanModel,
            ProvenanceArg::SelfChat => Provenance::SelfChat,
            ProvenanceArg::HumanHuman => Provenance::HumanHuman,
        }
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Conversation log files, one JSON record per line.
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
    /// Provenance for records that do not state one.
    #[arg(long, value_enum, default_value = "human-model")]
    pub provenance: ProvenanceArg,
    /// Output directory.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunDir {
    /// Directory holding one subdirectory per run.
    #[arg(long, default_value = "runs")]
    pub root: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long, short)]
    pub config: PathBuf,
    #[command(flatten)]
    pub dir: RunDir,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Regular matchups per worker.
    #[arg(long)]
    pub cap: Option<u32>,
    /// Use this run id instead of the seed-derived one.
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TransportArg {
    Subprocess,
    Http,
}

#[derive(Debug, Args)]
pub struct SelfchatArgs {
    /// Model name recorded in the generated conversations.
    #[arg(long)]
    pub agent: String,
    #[arg(long, value_enum, default_value = "subprocess")]
    pub transport: TransportArg,
    /// Command line (subprocess) or URL (http).
    #[arg(long)]
    pub address: String,
    #[arg(long, default_value_t = 30_000)]
    pub timeout_ms: u64,
    #[arg(long, default_value_t = 2)]
    pub retries: u32,
    #[arg(long, short)]
    pub num: u32,
    #[arg(long, default_value_t = 6)]
    pub min_turns: u32,
    #[arg(long, default_value_t = 8)]
    pub max_turns: u32,
    /// Opening contexts, one per line.
    #[arg(long)]
    pub contexts: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Concurrent endpoint sessions.
    #[arg(long, short, default_value_t = 1)]
    pub jobs: usize,
    /// Training pairs to audit the output against.
    #[arg(long)]
    pub training: Option<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub dir: RunDir,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

#[derive(Debug, Args)]
pub struct RunSelect {
    #[command(flatten)]
    pub dir: RunDir,
    #[arg(long)]
    pub run: String,
}

impl RunSelect {
    fn path(&self) -> PathBuf {
        self.dir.root.join(&self.run)
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub run: RunSelect,
    /// Training pairs for the overlap audit of the run's conversations.
    #[arg(long)]
    pub training: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ResampleArg {
    Annotation,
    Conversation,
}

#[derive(Debug, Args)]
pub struct PowerArgs {
    #[command(flatten)]
    pub run: RunSelect,
    /// Run config supplying bootstrap defaults.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub agent_a: Option<String>,
    #[arg(long)]
    pub agent_b: Option<String>,
    /// Sample sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<u32>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub trials: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub resample_unit: Option<ResampleArg>,
    #[arg(long)]
    pub seconds_per_annotation: Option<f64>,
    /// Seconds per single-conversation rating for a comparison curve.
    #[arg(long, requires_all = ["likert_variance", "likert_difference"])]
    pub likert_seconds: Option<f64>,
    #[arg(long)]
    pub likert_variance: Option<f64>,
    #[arg(long)]
    pub likert_difference: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub run: RunSelect,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Plan(a) => plan(a),
        Command::Selfchat(a) => selfchat(a),
        Command::Serve(a) => serve(a),
        Command::Analyze(a) => analyze(a),
        Command::Power(a) => power(a),
        Command::Export(a) => export(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn corpus_summary(corpus: &Corpus) -> String {
    let mut counts: BTreeMap<(String, &str), usize> = BTreeMap::new();
    for c in corpus.conversations() {
        *counts
            .entry((c.evaluated_agent.name.clone(), c.provenance.as_str()))
            .or_default() += 1;
    }
    let mut out = String::from("agent\tprovenance\tconversations\n");
    for ((agent, prov), n) in counts {
        out.push_str(&format!("{agent}\t{prov}\t{n}\n"));
    }
    out
}

fn ingest(a: IngestArgs) -> Result<()> {
    let mut corpus = Corpus::new();
    let mut rejects = Vec::new();
    for path in &a.paths {
        let ing = jsonl::parse_log_file(path, a.provenance.into())?;
        for r in ing.rejects {
            rejects.push(serde_json::json!({
                "file": path.display().to_string(),
                "line": r.line,
                "reason": r.reason,
            }));
        }
        corpus
            .extend(ing.corpus)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    jsonl::write_corpus(&a.out.join("corpus.jsonl"), &corpus)?;
    jsonl::write_records(&a.out.join("rejects.jsonl"), &rejects)?;
    let summary = corpus_summary(&corpus);
    write_text(&a.out.join("corpus_summary.tsv"), &summary)?;
    print!("{summary}");
    if !rejects.is_empty() {
        eprintln!("{} rejected line(s), see rejects.jsonl", rejects.len());
    }
    Ok(())
}

fn plan(a: PlanArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(x) = a.alpha {
        cfg.alpha = x;
    }
    if a.cap.is_some() {
        cfg.workers.cap = a.cap;
    }
    cfg.validate()?;
    let corpus = cfg.load_corpus()?;
    let registry = cfg.registry()?;
    let mut plan = cfg.build_plan(&corpus, &registry)?;
    if let Some(id) = a.run_id {
        plan.run_id = id;
    }
    let settings = cfg.settings(&plan);
    let dir = a.dir.root.join(&plan.run_id);
    if dir.join(EVENTS_FILE).exists() {
        return Err(Error::Data(format!("run `{}` already exists", plan.run_id)));
    }
    let summary = tables::plan_summary(&plan_summary(&plan));
    jsonl::write_json(&dir.join("plan.json"), &plan)?;
    write_text(&dir.join("plan_summary.tsv"), &summary)?;
    let start = run_start(plan, &corpus, &registry, settings).map_err(Error::data)?;
    let clock = SystemClock;
    LiveRun::create(&dir, start, crate::store::Clock::now(&clock)).map_err(store_error)?;
    print!("{summary}");
    println!("run directory: {}", dir.display());
    Ok(())
}

fn store_error(e: crate::store::StoreError) -> Error {
    use crate::store::StoreError as S;
    match e {
        S::Io(e) => e,
        S::UnknownRun(_) | S::DuplicateRun(_) | S::InvalidRunId(_) | S::Run(_) => Error::data(e),
    }
}

fn selfchat(a: SelfchatArgs) -> Result<()> {
    let endpoint = ModelEndpoint {
        agent: AgentId::model(a.agent.as_str()),
        transport: match a.transport {
            TransportArg::Subprocess => Transport::Subprocess,
            TransportArg::Http => Transport::Http,
        },
        address: a.address,
        timeout_ms: a.timeout_ms,
        max_retries: a.retries,
    };
    let mut config = SelfChatConfig::new(a.num, a.seed);
    config.min_turns = a.min_turns;
    config.max_turns = a.max_turns;
    if let Some(path) = &a.contexts {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        config.context_seeds = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
    }
    let training = a.training.as_deref().map(jsonl::read_training_pairs).transpose()?;
    endpoint.validate().map_err(|e| Error::Usage(e.to_string()))?;
    config.validate().map_err(|e| Error::Usage(e.to_string()))?;

    let outcome = run_self_chats_parallel(|| responder_for(&endpoint), &endpoint, &config, a.jobs)
        .map_err(|e| Error::Runtime(e.to_string()))?;
    jsonl::write_records(&a.out.join("selfchat.jsonl"), &outcome.conversations)?;
    jsonl::write_records(&a.out.join("selfchat_failures.jsonl"), &outcome.failures)?;
    let (generated, failed) = (outcome.conversations.len(), outcome.failures.len());
    let corpus = outcome.into_corpus();
    write_text(&a.out.join("repetition.tsv"), &tables::repetition(&repetition_report(&corpus)))?;
    if let (Some(pairs), false) = (&training, corpus.is_empty()) {
        let report = training_overlap(&corpus, pairs).map_err(Error::data)?;
        write_text(
            &a.out.join("overlap.tsv"),
            &tables::overlap(&[(endpoint.agent.name.clone(), report.clone())]),
        )?;
        jsonl::write_json(&a.out.join("overlap.json"), &report)?;
    }
    println!("{generated} conversation(s) generated, {failed} failed");
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let store = Arc::new(RunStore::new(&a.dir.root, Arc::new(SystemClock)).map_err(store_error)?);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Runtime(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .map_err(|e| Error::Runtime(format!("cannot listen on {}: {e}", a.addr)))?;
        let local = listener
            .local_addr()
            .map_err(|e| Error::Runtime(e.to_string()))?;
        println!("listening on http://{local}");
        server::serve(listener, store, shutdown_signal())
            .await
            .map_err(|e| Error::Runtime(e.to_string()))
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    log::info!("shutting down");
}

/// Replays a run directory without modifying it.
pub fn load_run(dir: &Path) -> Result<RunState> {
    let recovered = eventlog::read(&dir.join(EVENTS_FILE))?;
    if recovered.truncated_bytes > 0 {
        log::warn!("ignoring incomplete final record in {}", dir.display());
    }
    RunState::replay(recovered.records).map_err(Error::data)
}

/// Groups gated annotations into repeated trials: same two conversations
/// under the same question, with at least two annotations.
fn agreement_trials(
    plan: &Plan,
    annotations: &[Annotation],
) -> BTreeMap<(String, String, String), Vec<Annotation>> {
    let index = plan.index();
    let mut trials: BTreeMap<(String, String, String), Vec<Annotation>> = BTreeMap::new();
    for a in annotations {
        if let Some(m) = index.get(a.matchup_id.as_str()) {
            let (x, y) = m.unordered_pair();
            trials
                .entry((m.question.clone(), x.into(), y.into()))
                .or_default()
                .push(a.clone());
        }
    }
    trials.retain(|_, v| v.len() >= 2);
    trials
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let dir = a.run.path();
    let state = load_run(&dir)?;
    let report = state.report().map_err(Error::data)?;
    let plan = state.plan();
    let surviving = report.gating.surviving_annotations(state.annotations());

    jsonl::write_json(&dir.join("report.json"), &report)?;
    write_text(&dir.join("win_matrix.tsv"), &tables::win_matrix(&report.win_matrix))?;
    write_text(&dir.join("win_cells.tsv"), &tables::win_cells(&report.win_matrix))?;
    let mut cells = Vec::new();
    for (r, row) in report.win_matrix.cells.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            if let Some(cell) = cell {
                cells.push(serde_json::json!({
                    "row_agent": report.win_matrix.agents[r],
                    "col_agent": report.win_matrix.agents[c],
                    "wins": cell.wins,
                    "total": cell.total,
                    "win_rate": cell.win_rate,
                    "p_value": cell.p_value,
                    "significant": cell.significant,
                }));
            }
        }
    }
    jsonl::write_records(&dir.join("win_cells.jsonl"), &cells)?;
    write_text(&dir.join("gating.tsv"), &tables::gating(&report.gating))?;

    let mut agreements = Vec::new();
    for ((question, x, y), anns) in agreement_trials(plan, &surviving) {
        let r = agreement(&anns, plan, &question).map_err(Error::data)?;
        agreements.push((format!("{x}|{y}"), r));
    }
    write_text(&dir.join("agreement.tsv"), &tables::agreement(&agreements))?;

    let mut aa = Vec::new();
    for (i, rec) in plan.comparisons.iter().enumerate() {
        if !rec.self_comparison {
            continue;
        }
        let ids: BTreeSet<&str> = plan
            .matchups
            .iter()
            .filter(|m| m.comparison == Some(i as u32))
            .map(|m| m.matchup_id.as_str())
            .collect();
        let anns: Vec<Annotation> = surviving
            .iter()
            .filter(|x| ids.contains(x.matchup_id.as_str()))
            .cloned()
            .collect();
        if anns.is_empty() {
            continue;
        }
        let r = aa_check(&anns, plan, state.settings().alpha).map_err(Error::data)?;
        aa.push((format!("{}:{}:{}", i, rec.spec.agent_a, rec.spec.question), r));
    }
    write_text(&dir.join("aa.tsv"), &tables::aa(&aa))?;

    if let Some(path) = &a.training {
        let pairs = jsonl::read_training_pairs(path)?;
        let corpus = Corpus::from_conversations(state.start_record().conversations.clone())
            .map_err(Error::data)?;
        let mut rows = Vec::new();
        for agent in corpus.agents().iter().filter(|a| a.is_model()) {
            let own = Corpus::from_conversations(
                corpus
                    .conversations()
                    .filter(|c| &c.evaluated_agent == agent)
                    .cloned(),
            )
            .map_err(Error::data)?;
            if let Ok(r) = training_overlap(&own, &pairs) {
                rows.push((agent.name.clone(), r));
            }
        }
        write_text(&dir.join("overlap.tsv"), &tables::overlap(&rows))?;
    }

    print!("{}", tables::win_matrix(&report.win_matrix));
    Ok(())
}

fn pick_pair(plan: &Plan, a: Option<&str>, b: Option<&str>) -> Result<(AgentId, AgentId)> {
    if let (Some(a), Some(b)) = (a, b) {
        return Ok((parse_agent(a), parse_agent(b)));
    }
    let pairs: BTreeSet<(AgentId, AgentId)> = plan
        .comparisons
        .iter()
        .filter(|c| !c.self_comparison)
        .map(|c| (c.spec.agent_a.clone(), c.spec.agent_b.clone()))
        .collect();
    match pairs.len() {
        1 => Ok(pairs.into_iter().next().expect("one pair")),
        _ => Err(Error::Usage(
            "run has several agent pairs; pass --agent-a and --agent-b".into(),
        )),
    }
}

fn power(a: PowerArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let dir = a.run.path();
    let state = load_run(&dir)?;
    let (agent_a, agent_b) = pick_pair(state.plan(), a.agent_a.as_deref(), a.agent_b.as_deref())?;

    let mut boot: BootstrapConfig = cfg.bootstrap();
    boot.alpha = a.alpha.unwrap_or(if a.config.is_some() {
        cfg.alpha
    } else {
        state.settings().alpha
    });
    boot.trials = a.trials.unwrap_or(boot.trials);
    boot.seed = a.seed.unwrap_or(boot.seed);
    if let Some(u) = a.resample_unit {
        boot.resample_unit = match u {
            ResampleArg::Annotation => ResampleUnit::Annotation,
            ResampleArg::Conversation => ResampleUnit::Conversation,
        };
    }
    let ks = if a.k.is_empty() {
        cfg.bootstrap.sample_sizes.clone()
    } else {
        a.k.clone()
    };
    if ks.is_empty() {
        return Err(Error::Usage("no sample sizes; pass --k".into()));
    }
    let seconds = a
        .seconds_per_annotation
        .or(cfg.seconds_per_annotation)
        .ok_or_else(|| Error::Usage("seconds_per_annotation is required".into()))?;
    if !(boot.alpha > 0.0 && boot.alpha < 1.0) || boot.trials == 0 {
        return Err(Error::Usage("alpha must be in (0, 1) and trials at least 1".into()));
    }

    let outcomes = PairOutcomes::collect(&state.surviving_annotations(), state.plan(), &agent_a, &agent_b)
        .map_err(Error::data)?;
    if outcomes.is_empty() {
        return Err(Error::Data(format!(
            "no gated annotations between {agent_a} and {agent_b}"
        )));
    }
    let usage = |e: acute_core::stats::StatsError| Error::Usage(e.to_string());
    let points = power_points(&outcomes, &ks, &boot).map_err(usage)?;
    let curve = cost_curve(&points, seconds, boot.alpha, boot.trials).map_err(usage)?;
    write_text(&dir.join("power.tsv"), &tables::power_curve(&curve))?;
    jsonl::write_json(&dir.join("power.json"), &curve)?;
    if let (Some(s), Some(v), Some(d)) = (a.likert_seconds, a.likert_variance, a.likert_difference) {
        let profile = LikertProfile {
            seconds_per_annotation: s,
            score_variance: v,
            mean_difference: d,
        };
        let likert = likert_curve(&profile, &ks, boot.alpha).map_err(usage)?;
        write_text(&dir.join("likert_power.tsv"), &tables::power_curve(&likert))?;
    }
    print!("{}", tables::power_curve(&curve));
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let dir = a.run.path();
    let state = load_run(&dir)?;
    jsonl::write_records(&dir.join("annotations.jsonl"), state.annotations())?;
    jsonl::write_records(
        &dir.join("surviving_annotations.jsonl"),
        &state.surviving_annotations(),
    )?;
    println!(
        "{} annotation(s), {} surviving gating",
        state.annotations().len(),
        state.surviving_annotations().len()
    );
    Ok(())
}
