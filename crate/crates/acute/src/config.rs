//! Declarative run configuration (TOML).

use std::path::{Path, PathBuf};

use acute_core::corpus::{AgentId, Corpus, Provenance, QuestionRegistry};
use acute_core::pairing::{build_plan, build_self_plan, make_qc_pool, ComparisonSpec, Plan};
use acute_core::run::RunSettings;
use acute_core::stats::{BootstrapConfig, ResampleUnit};
use acute_core::workers::AssignmentPolicy;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::jsonl;

/// `"human"` names the human agent; anything else is a model.
pub fn parse_agent(name: &str) -> AgentId {
    if name == "human" {
        AgentId::human()
    } else {
        AgentId::model(name)
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonConfig {
    pub agent_a: String,
    pub agent_b: String,
    pub question: String,
    pub target_annotations: u32,
    #[serde(default)]
    pub provenance: Option<Provenance>,
}

/// Self-vs-self comparison for position-bias checks.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfComparisonConfig {
    pub agent: String,
    pub question: String,
    pub target_annotations: u32,
    #[serde(default)]
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QcConfig {
    pub weak_agent: String,
    /// Defaults to the first comparison's question.
    #[serde(default)]
    pub question: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkersConfig {
    /// Defaults to the number of comparisons.
    pub cap: Option<u32>,
    pub assignment_timeout_secs: Option<u64>,
    pub annotations_per_matchup: Option<u32>,
    pub qc_per_worker: Option<u32>,
    #[serde(default)]
    pub justification_required: bool,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSection {
    #[serde(default = "default_trials")]
    pub trials: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub resample_unit: ResampleUnit,
    #[serde(default)]
    pub sample_sizes: Vec<u32>,
}

fn default_trials() -> u32 {
    10_000
}

impl Default for BootstrapSection {
    fn default() -> Self {
        BootstrapSection {
            trials: default_trials(),
            seed: 0,
            resample_unit: ResampleUnit::Annotation,
            sample_sizes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Conversation files written by `acute ingest` (or raw logs).
    #[serde(default)]
    pub corpus: Vec<PathBuf>,
    /// Extra question definitions, one JSON record per line.
    #[serde(default)]
    pub questions: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seconds_per_annotation: Option<f64>,
    #[serde(default)]
    pub comparisons: Vec<ComparisonConfig>,
    #[serde(default)]
    pub self_comparisons: Vec<SelfComparisonConfig>,
    #[serde(default)]
    pub qc: Option<QcConfig>,
    #[serde(default)]
    pub workers: WorkersConfig,
    #[serde(default)]
    pub bootstrap: BootstrapSection,
}

fn default_alpha() -> f64 {
    acute_core::DEFAULT_ALPHA
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: Vec::new(),
            questions: None,
            seed: 0,
            alpha: default_alpha(),
            seconds_per_annotation: None,
            comparisons: Vec::new(),
            self_comparisons: Vec::new(),
            qc: None,
            workers: WorkersConfig::default(),
            bootstrap: BootstrapSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses `path`; relative file paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in cfg.corpus.iter_mut().chain(cfg.questions.as_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| Err(Error::Usage(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return usage(format!("alpha must be in (0, 1), got {}", self.alpha));
        }
        if let Some(s) = self.seconds_per_annotation {
            if !(s > 0.0 && s.is_finite()) {
                return usage(format!("seconds_per_annotation must be positive, got {s}"));
            }
        }
        if self.bootstrap.trials == 0 {
            return usage("bootstrap.trials must be at least 1".into());
        }
        if self.bootstrap.sample_sizes.windows(2).any(|w| w[0] >= w[1])
            || self.bootstrap.sample_sizes.first() == Some(&0)
        {
            return usage("bootstrap.sample_sizes must be positive and strictly increasing".into());
        }
        if self.workers.cap == Some(0) || self.workers.annotations_per_matchup == Some(0) {
            return usage("workers.cap and workers.annotations_per_matchup must be at least 1".into());
        }
        if self.workers.assignment_timeout_secs == Some(0) {
            return usage("workers.assignment_timeout_secs must be positive".into());
        }
        for p in self.corpus.iter().chain(&self.questions) {
            if !p.is_file() {
                return usage(format!("{}: no such file", p.display()));
            }
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<QuestionRegistry> {
        let mut reg = QuestionRegistry::with_builtins();
        if let Some(path) = &self.questions {
            for q in jsonl::read_questions(path)? {
                reg.register(q)
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            }
        }
        Ok(reg)
    }

    /// Loads every corpus file into one corpus.
    pub fn load_corpus(&self) -> Result<Corpus> {
        if self.corpus.is_empty() {
            return Err(Error::Usage("no corpus files configured".into()));
        }
        let mut corpus = Corpus::new();
        for path in &self.corpus {
            let ingest = jsonl::parse_log_file(path, Provenance::HumanModel)?;
            for r in &ingest.rejects {
                log::warn!("{}:{}: {}", path.display(), r.line, r.reason);
            }
            corpus
                .extend(ingest.corpus)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        }
        Ok(corpus)
    }

    pub fn specs(&self) -> Vec<ComparisonSpec> {
        self.comparisons
            .iter()
            .map(|c| ComparisonSpec {
                agent_a: parse_agent(&c.agent_a),
                agent_b: parse_agent(&c.agent_b),
                question: c.question.clone(),
                target_annotations: c.target_annotations,
                provenance: c.provenance,
            })
            .collect()
    }

    /// Builds the full plan: regular comparisons, then self comparisons, then
    /// the QC pool.
    pub fn build_plan(&self, corpus: &Corpus, registry: &QuestionRegistry) -> Result<Plan> {
        if self.comparisons.is_empty() && self.self_comparisons.is_empty() {
            return Err(Error::Usage("no comparisons configured".into()));
        }
        let data = |e: acute_core::pairing::PlanError| Error::Data(e.to_string());
        let mut plan = build_plan(corpus, registry, &self.specs(), self.seed).map_err(data)?;
        for (i, s) in self.self_comparisons.iter().enumerate() {
            let sub = build_self_plan(
                corpus,
                registry,
                &parse_agent(&s.agent),
                &s.question,
                s.target_annotations,
                s.provenance,
                self.seed.wrapping_add(1 + i as u64),
            )
            .map_err(data)?;
            plan = plan.merge(sub);
        }
        if let Some(qc) = &self.qc {
            let question = qc
                .question
                .clone()
                .or_else(|| self.comparisons.first().map(|c| c.question.clone()))
                .or_else(|| self.self_comparisons.first().map(|c| c.question.clone()))
                .expect("at least one comparison");
            let pool = make_qc_pool(corpus, &parse_agent(&qc.weak_agent), &question, self.seed)
                .map_err(data)?;
            plan = plan.with_qc_pool(pool);
        }
        Ok(plan)
    }

    pub fn settings(&self, plan: &Plan) -> RunSettings {
        let mut policy = AssignmentPolicy::for_plan(plan);
        let w = &self.workers;
        policy.cap = w.cap.unwrap_or(policy.cap);
        policy.assignment_timeout_secs = w
            .assignment_timeout_secs
            .unwrap_or(policy.assignment_timeout_secs);
        policy.annotations_per_matchup = w
            .annotations_per_matchup
            .unwrap_or(policy.annotations_per_matchup);
        policy.qc_per_worker = w.qc_per_worker.unwrap_or(policy.qc_per_worker);
        if plan.qc_pool.is_empty() {
            policy.qc_per_worker = 0;
        }
        RunSettings {
            policy,
            alpha: self.alpha,
            justification_required: w.justification_required,
        }
    }

    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig {
            alpha: self.alpha,
            trials: self.bootstrap.trials,
            seed: self.bootstrap.seed,
            resample_unit: self.bootstrap.resample_unit,
        }
    }
}
