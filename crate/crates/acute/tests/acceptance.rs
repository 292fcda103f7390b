//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use acute_core::corpus::{
    AgentId, Conversation, Corpus, Provenance, QuestionRegistry, SpeakerSlot, Utterance,
};
use acute_core::pairing::{build_plan, build_self_plan, plan_summary, ComparisonSpec};
use acute_core::run::{RunSettings, RunState};
use acute_core::selfchat::{call_response_pairs, training_overlap, UtterancePair};
use acute_core::stats::{
    aa_check, binom_two_sided, bootstrap_power, BootstrapConfig, PairOutcomes, ResampleUnit,
};
use common::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, limit: Duration) -> Result<(), String> {
    let took = started.elapsed();
    ensure(took < limit, || format!("took {took:.1?}, limit {limit:?}"))
}

/// Exact two-sided p-value for p = 1/2 from an integer Pascal row:
/// mass of outcomes no more likely than `k`, divided by 2^n.
fn exact_p(k: usize, n: usize) -> f64 {
    let mut row = vec![1u128];
    for _ in 0..n {
        let mut next = vec![1u128; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    let mass: u128 = row.iter().filter(|&&c| c <= row[k]).sum();
    mass as f64 / 2f64.powi(n as i32)
}

fn binomial_oracle() -> Check {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for n in 1..=30 {
        for k in 0..=n {
            let got = binom_two_sided(k as u64, n as u64).map_err(|e| e.to_string())?;
            worst = worst.max((got - exact_p(k, n)).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max error {worst:e} over n <= 30"))?;
    let p60 = binom_two_sided(60, 100).unwrap();
    let p61 = binom_two_sided(61, 100).unwrap();
    ensure(p60 >= 0.05 && p61 < 0.05, || format!("p(60/100)={p60}, p(61/100)={p61}"))?;
    ensure((p60 - exact_p(60, 100)).abs() < 1e-12 && (p61 - exact_p(61, 100)).abs() < 1e-12, || {
        "n=100 boundary values disagree with the exact sum".into()
    })?;
    within(t, Duration::from_secs(5))?;
    Ok(format!(
        "max |err| {worst:.1e} for n<=30; p(60/100)={p60:.6} p(61/100)={p61:.6}; {:.2?}",
        t.elapsed()
    ))
}

fn two_agent_corpus(na: usize, nb: usize) -> Corpus {
    let mut convs = Vec::new();
    for i in 0..na {
        convs.push(conversation(format!("a{i}"), AgentId::model("A"), AgentId::human(), Provenance::HumanModel, i as u64));
    }
    for i in 0..nb {
        convs.push(conversation(format!("b{i}"), AgentId::model("B"), AgentId::human(), Provenance::HumanModel, 10_000 + i as u64));
    }
    Corpus::from_conversations(convs).unwrap()
}

fn plan_constraints() -> Check {
    let t = Instant::now();
    let reg = QuestionRegistry::with_builtins();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut pair_violations, mut diversity_violations, mut diversity_cases) = (0, 0, 0);
    for _ in 0..1000 {
        let na = rng.random_range(1..=60usize);
        let nb = rng.random_range(1..=60usize);
        let cells = na * nb;
        // Half the configs stay within the strong-diversity regime.
        let target = if rng.random_bool(0.5) {
            rng.random_range(1..=na.min(nb))
        } else {
            rng.random_range(1..=cells)
        };
        let spec = ComparisonSpec {
            agent_a: AgentId::model("A"),
            agent_b: AgentId::model("B"),
            question: "engaging".into(),
            target_annotations: target as u32,
            provenance: None,
        };
        let plan = build_plan(&two_agent_corpus(na, nb), &reg, &[spec], rng.random())
            .map_err(|e| format!("na={na} nb={nb} target={target}: {e}"))?;
        let pairs: BTreeSet<_> = plan.matchups.iter().map(|m| m.unordered_pair()).collect();
        if pairs.len() != plan.matchups.len() || plan.matchups.len() != target {
            pair_violations += 1;
        }
        if na.min(nb) >= target {
            diversity_cases += 1;
            let mut convs = BTreeSet::new();
            let reused = plan
                .matchups
                .iter()
                .any(|m| !convs.insert(m.left_conv.clone()) | !convs.insert(m.right_conv.clone()));
            if reused || plan_summary(&plan)[0].conversation_reuse {
                diversity_violations += 1;
            }
        }
    }
    ensure(pair_violations == 0, || format!("{pair_violations} pair-uniqueness violations"))?;
    ensure(diversity_violations == 0, || {
        format!("{diversity_violations} diversity violations in {diversity_cases} cases")
    })?;
    within(t, Duration::from_secs(30))?;
    Ok(format!(
        "1000 configs, 0 pair violations, 0 diversity violations ({diversity_cases} strong cases); {:.2?}",
        t.elapsed()
    ))
}

fn synthetic_runs() -> Check {
    let t = Instant::now();
    let corpus = synthetic_corpus(100, 30);
    let mut covered = 0;
    let mut fraud_removed = 0usize;
    let mut sizes = BTreeSet::new();
    for seed in 0..100u64 {
        let plan = synthetic_plan(&corpus, 100, seed);
        let mut svc = InMemory::new(run_start(&corpus, plan.clone()));
        drive(&mut svc, &plan, 0.60, seed, |_| {});
        let state = &svc.state;
        let gating = state.gating();
        let survivors: BTreeSet<&str> = gating.surviving.iter().map(String::as_str).collect();
        for a in state.annotations() {
            let idx: usize = a.worker_id["worker-".len()..].parse().unwrap();
            let qc = plan.matchup(&a.matchup_id).unwrap().is_qc;
            if worker_kind(idx) == Kind::Fraud && !qc {
                ensure(!survivors.contains(a.annotation_id.as_str()), || {
                    format!("seed {seed}: fraudulent annotation {} survived", a.annotation_id)
                })?;
                fraud_removed += 1;
            }
        }
        let report = state.report().map_err(|e| e.to_string())?;
        let cell = report
            .win_matrix
            .cell(&AgentId::model(OTHER), &AgentId::model(STRONG))
            .ok_or_else(|| format!("seed {seed}: no cell"))?;
        let (lo, hi) = binomial_interval(cell.total as u64, 0.60, 0.05);
        sizes.insert(cell.total);
        if (lo..=hi).contains(&(cell.wins as u64)) {
            covered += 1;
        }
    }
    ensure(fraud_removed > 0, || "no fraudulent regular annotations were produced".into())?;
    ensure(covered >= 93, || format!("win rate inside the 95% interval in {covered}/100 seeds"))?;
    within(t, Duration::from_secs(120))?;
    Ok(format!(
        "inside interval in {covered}/100 seeds; {fraud_removed} fraudulent annotations all removed; surviving n in {}..={}; {:.2?}",
        sizes.first().unwrap(),
        sizes.last().unwrap(),
        t.elapsed()
    ))
}

fn aa_soundness() -> Check {
    let t = Instant::now();
    let convs: Vec<Conversation> = (0..100)
        .map(|i| conversation(format!("p{i}"), AgentId::model(STRONG), AgentId::human(), Provenance::HumanModel, i))
        .collect();
    let corpus = Corpus::from_conversations(convs).unwrap();
    let reg = QuestionRegistry::with_builtins();
    // Exact test size at n = 160 is 0.0478.
    let n = 160;
    let mut rejections = 0;
    for seed in 0..1000u64 {
        let plan = build_self_plan(&corpus, &reg, &AgentId::model(STRONG), QUESTION, n, None, seed)
            .map_err(|e| e.to_string())?;
        let mut settings = RunSettings::for_plan(&plan);
        settings.policy.cap = 40;
        settings.policy.qc_per_worker = 0;
        let start = acute::store::run_start(plan.clone(), &corpus, &reg, settings).unwrap();
        let mut svc = InMemory { state: RunState::start(start, 0).unwrap().0, now: 0 };
        drive(&mut svc, &plan, 0.5, seed, |_| {});
        let survivors = svc.state.surviving_annotations();
        let r = aa_check(&survivors, &plan, 0.05).map_err(|e| e.to_string())?;
        ensure(r.n_annotations == n, || format!("seed {seed}: {} annotations", r.n_annotations))?;
        if r.p_value < 0.05 {
            rejections += 1;
        }
    }
    let rate = rejections as f64 / 1000.0;
    ensure((rate - 0.05).abs() <= 0.02, || format!("p < 0.05 in {rate:.3} of runs"))?;
    within(t, Duration::from_secs(60))?;
    Ok(format!("p < 0.05 in {rejections}/1000 runs ({:.1}%); {:.2?}", rate * 100.0, t.elapsed()))
}

fn bootstrap() -> Check {
    let t = Instant::now();
    let cfg = BootstrapConfig {
        alpha: 0.05,
        trials: 10_000,
        seed: 11,
        resample_unit: ResampleUnit::Annotation,
    };
    let sixty = PairOutcomes::from_outcomes((0..100).map(|i| i < 60));
    let ks = [1u32, 10, 20, 40, 60, 80, 100, 150, 200, 300];
    let powers: Vec<f64> = ks
        .iter()
        .map(|&k| bootstrap_power(&sixty, k, &cfg).unwrap())
        .collect();
    for w in powers.windows(2) {
        ensure(w[1] >= w[0] - 0.03, || format!("power not monotone: {powers:?}"))?;
    }
    let all_a = PairOutcomes::from_outcomes((0..50).map(|_| true));
    let full = bootstrap_power(&all_a, 61, &cfg).unwrap();
    ensure(full == 1.0, || format!("all-one-side power at k=61 is {full}"))?;
    let even = PairOutcomes::from_outcomes((0..100).map(|i| i % 2 == 0));
    let mut null_powers = Vec::new();
    for k in [100u32, 250] {
        let p = bootstrap_power(&even, k, &cfg).unwrap();
        ensure((p - 0.05).abs() <= 0.03, || format!("50/50 power at k={k} is {p}"))?;
        null_powers.push(p);
    }
    within(t, Duration::from_secs(60))?;
    Ok(format!(
        "60% set powers {:?} over k={ks:?}; all-one-side k=61 -> {full}; 50/50 -> {null_powers:?}; {:.2?}",
        powers.iter().map(|p| (p * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        t.elapsed()
    ))
}

/// Self-chat corpus whose call-response pairs are all distinct.
fn audit_corpus(conversations: usize, utterances: usize) -> Corpus {
    let convs = (0..conversations).map(|c| Conversation {
        conv_id: format!("sc{c}"),
        evaluated_agent: AgentId::model(STRONG),
        partner_agent: AgentId::model(STRONG),
        evaluated_slot: SpeakerSlot::First,
        provenance: Provenance::SelfChat,
        utterances: (0..utterances)
            .map(|u| Utterance {
                turn_index: u as u32,
                speaker_slot: if u % 2 == 0 { SpeakerSlot::First } else { SpeakerSlot::Second },
                text: format!("line {c} {u}"),
            })
            .collect(),
        metadata: Default::default(),
    });
    Corpus::from_conversations(convs).unwrap()
}

fn overlap_audit() -> Check {
    let t = Instant::now();
    let corpus = audit_corpus(20, 11);
    let mut pairs = call_response_pairs(&corpus);
    ensure(pairs.len() == 200, || format!("{} pairs", pairs.len()))?;
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    let decoys = (0..500).map(|i| UtterancePair::new(&format!("unrelated {i}"), "reply").unwrap());
    let mut found = Vec::new();
    for (planted, expect) in [(0usize, 0.0), (20, 0.1), (200, 1.0), (1, 0.005)] {
        let training: BTreeSet<UtterancePair> =
            pairs[..planted].iter().cloned().chain(decoys.clone()).collect();
        let r = training_overlap(&corpus, &training).map_err(|e| e.to_string())?;
        ensure(r.fraction == expect && r.matched_pairs == planted, || {
            format!("planted {planted}/200, recovered {} ({})", r.fraction, r.matched_pairs)
        })?;
        found.push(r.fraction);
    }
    ensure(found[3] < 0.01 && (found[1] - 0.10).abs() < 1e-12, || "fixture regimes".into())?;
    within(t, Duration::from_secs(5))?;
    Ok(format!("planted {{0, 0.1, 1.0, 0.005}} recovered as {found:?}; {:.2?}", t.elapsed()))
}

struct HttpRuns {
    ops: usize,
    payloads: Vec<String>,
    model_names: Vec<String>,
}

fn full_http_run(
    root: &std::path::Path,
    kill_at: BTreeSet<usize>,
) -> Result<(String, HttpService), String> {
    let corpus = synthetic_corpus(100, 30);
    let plan = synthetic_plan(&corpus, 100, 77);
    let start = run_start(&corpus, plan.clone());
    let mut svc = HttpService::new(root, &start, kill_at, 99);
    drive(&mut svc, &plan, 0.60, 77, |_| {});
    let (status, _) = svc.post_text("close");
    ensure(status == 200, || format!("close returned {status}"))?;
    let (status, report) = svc.get_text("report");
    ensure(status == 200, || format!("report returned {status}"))?;
    Ok((report, svc))
}

fn crash_replay(reference: &mut Option<HttpRuns>) -> Check {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (report, svc) = full_http_run(&dir.path().join("clean"), BTreeSet::new())?;
    let corpus = synthetic_corpus(100, 30);
    *reference = Some(HttpRuns {
        ops: svc.ops,
        payloads: svc.raw_payloads.clone(),
        model_names: corpus.agents().iter().filter(|a| a.is_model()).map(|a| a.name.clone()).collect(),
    });
    drop(svc);

    let mut rng = ChaCha8Rng::seed_from_u64(31337);
    let mut kill_at = BTreeSet::new();
    while kill_at.len() < 10 {
        kill_at.insert(rng.random_range(1..=reference.as_ref().unwrap().ops));
    }
    let points: Vec<_> = kill_at.iter().copied().collect();
    let (crashed, svc) = full_http_run(&dir.path().join("crashed"), kill_at)?;
    ensure(svc.kills == 10, || format!("{} kills", svc.kills))?;
    ensure(crashed == report, || "report after crashes differs from the clean run".into())?;

    // A cold replay of the log file gives the same bytes too.
    let run_dir = svc.root.join(&svc.run_id);
    drop(svc);
    let replayed = acute::cli::load_run(&run_dir).map_err(|e| e.to_string())?;
    let cold = serde_json::to_string(&replayed.report().unwrap()).unwrap();
    ensure(cold == report, || "cold replay differs".into())?;
    Ok(format!(
        "10 kills at ops {points:?} of {}; report {} bytes identical; {:.2?}",
        reference.as_ref().unwrap().ops,
        report.len(),
        t.elapsed()
    ))
}

fn blinding(reference: &Option<HttpRuns>) -> Check {
    let runs = reference.as_ref().ok_or("no synthetic run available")?;
    ensure(!runs.payloads.is_empty(), || "no payloads served".into())?;
    let mut leaks = 0;
    for p in &runs.payloads {
        if runs.model_names.iter().any(|n| p.contains(n.as_str())) {
            leaks += 1;
        }
    }
    ensure(leaks == 0, || format!("{leaks} payloads contain a model name"))?;
    Ok(format!(
        "{} payloads, 0 contain any of {:?}",
        runs.payloads.len(),
        runs.model_names
    ))
}

fn main() {
    let mut reference = None;
    let results: Vec<(&str, Check)> = vec![
        ("exact binomial oracle", binomial_oracle()),
        ("plan constraints", plan_constraints()),
        ("end-to-end synthetic run", synthetic_runs()),
        ("A/A soundness", aa_soundness()),
        ("bootstrap power", bootstrap()),
        ("overlap audit", overlap_audit()),
        ("crash replay", crash_replay(&mut reference)),
        ("blinding", blinding(&reference)),
    ];
    let mut failed = 0;
    for (i, (name, r)) in results.iter().enumerate() {
        match r {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
