//! Significance testing and analysis over collected annotations.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::AgentId;
use crate::pairing::{Matchup, Plan, Side};
use crate::rng::substream;

/// One worker's binary judgment on a matchup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub annotation_id: String,
    pub matchup_id: String,
    pub worker_id: String,
    pub chosen_side: Side,
    /// The agent placed on `chosen_side` of the matchup.
    pub chosen_agent: AgentId,
    #[serde(default)]
    pub justification: String,
    pub elapsed_seconds: f64,
    /// Seconds since the Unix epoch.
    pub submitted_at: u64,
}

impl Annotation {
    pub fn has_reason(&self) -> bool {
        !self.justification.trim().is_empty()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("successes {k} exceed trials {n}")]
    SuccessesExceedTrials { k: u64, n: u64 },
    #[error("binomial test needs at least one trial")]
    NoTrials,
    #[error("annotation `{annotation}` references unknown matchup `{matchup}`")]
    UnknownMatchup { annotation: String, matchup: String },
    #[error("annotation `{0}` is on a QC matchup")]
    QcAnnotation(String),
    #[error("annotation `{0}` names an agent not on its chosen side")]
    AgentMismatch(String),
    #[error("annotation set is empty")]
    Empty,
    #[error("annotations span more than one conversation pair or question")]
    MixedTrial,
    #[error("matchup `{0}` is not a self-vs-self comparison")]
    NotSelfComparison(String),
    #[error("parameter `{0}` is out of range")]
    Parameter(&'static str),
}

// Relative slack when deciding whether a point probability is "as extreme";
// keeps mathematically equal terms equal despite rounding.
const EXTREME_RTOL: f64 = 1e-7;

/// Natural log of the point probabilities of Binomial(n, 1/2), for 0..=n.
fn ln_pmf_half(n: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    let base = -(n as f64) * core::f64::consts::LN_2;
    let mut ln_choose = 0.0;
    out.push(base);
    for i in 0..n {
        ln_choose += libm::log((n - i) as f64 / (i + 1) as f64);
        out.push(base + ln_choose);
    }
    // Symmetrise so equal terms compare equal exactly.
    let len = out.len();
    for i in 0..len / 2 {
        let avg = 0.5 * (out[i] + out[len - 1 - i]);
        out[i] = avg;
        out[len - 1 - i] = avg;
    }
    out
}

fn check_counts(k: u64, n: u64) -> Result<(), StatsError> {
    if n == 0 {
        return Err(StatsError::NoTrials);
    }
    if k > n {
        return Err(StatsError::SuccessesExceedTrials { k, n });
    }
    Ok(())
}

fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let peak = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.map(|t| libm::exp(t - peak)).sum();
    peak + libm::log(sum)
}

fn two_sided_from_ln_pmf(ln_pmf: &[f64], k: usize) -> f64 {
    let threshold = ln_pmf[k] + libm::log1p(EXTREME_RTOL);
    let selected = ln_pmf.iter().copied().filter(|&lp| lp <= threshold);
    // Dividing by the total mass cancels rounding in the log coefficients,
    // and gives exactly 1 when every outcome is selected.
    let ln_p = log_sum_exp(selected) - log_sum_exp(ln_pmf.iter().copied());
    libm::exp(ln_p).clamp(f64::MIN_POSITIVE, 1.0)
}

/// Exact two-sided binomial p-value for `k` successes in `n` trials under
/// success probability 1/2.
///
/// Sums the probabilities of every outcome no more likely than `k` (the
/// minimum-likelihood convention). Works in log space, so large `n` is fine;
/// results below the smallest normal `f64` are reported as that value.
pub fn binom_two_sided(k: u64, n: u64) -> Result<f64, StatsError> {
    check_counts(k, n)?;
    Ok(two_sided_from_ln_pmf(&ln_pmf_half(n), k as usize))
}

/// p-values for every success count 0..=n at once.
pub fn binom_two_sided_table(n: u64) -> Result<Vec<f64>, StatsError> {
    check_counts(0, n)?;
    let ln_pmf = ln_pmf_half(n);
    Ok((0..=n as usize)
        .map(|k| two_sided_from_ln_pmf(&ln_pmf, k))
        .collect())
}

/// Pairwise results oriented row-loses / column-wins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinCell {
    /// Times the column agent was chosen over the row agent.
    pub wins: u32,
    pub total: u32,
    pub win_rate: f64,
    pub p_value: f64,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinMatrix {
    pub agents: Vec<AgentId>,
    pub alpha: f64,
    /// `cells[row][col]`; `None` on the diagonal and for pairs never compared.
    pub cells: Vec<Vec<Option<WinCell>>>,
}

impl WinMatrix {
    pub fn cell(&self, row: &AgentId, col: &AgentId) -> Option<&WinCell> {
        let r = self.agents.iter().position(|a| a == row)?;
        let c = self.agents.iter().position(|a| a == col)?;
        self.cells[r][c].as_ref()
    }

    /// Sum of totals over unordered agent pairs.
    pub fn total_annotations(&self) -> u64 {
        let mut sum = 0u64;
        for (r, row) in self.cells.iter().enumerate() {
            for cell in row.iter().skip(r + 1).flatten() {
                sum += cell.total as u64;
            }
        }
        sum
    }

    pub fn is_empty(&self) -> bool {
        self.cells.iter().flatten().all(Option::is_none)
    }
}

fn resolve<'p>(
    index: &BTreeMap<&str, &'p Matchup>,
    a: &Annotation,
) -> Result<&'p Matchup, StatsError> {
    let m = index
        .get(a.matchup_id.as_str())
        .copied()
        .ok_or_else(|| StatsError::UnknownMatchup {
            annotation: a.annotation_id.clone(),
            matchup: a.matchup_id.clone(),
        })?;
    if m.agent_on(a.chosen_side) != &a.chosen_agent {
        return Err(StatsError::AgentMismatch(a.annotation_id.clone()));
    }
    Ok(m)
}

/// Tallies which agent was chosen for every compared pair.
///
/// QC annotations must already be filtered out; passing one is an error.
/// Self-vs-self matchups carry no between-agent information and are skipped.
pub fn win_matrix(
    annotations: &[Annotation],
    plan: &Plan,
    alpha: f64,
) -> Result<WinMatrix, StatsError> {
    let index = plan.index();
    let agents: Vec<AgentId> = plan
        .matchups
        .iter()
        .flat_map(|m| [m.left_agent.clone(), m.right_agent.clone()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let pos = |a: &AgentId| agents.binary_search(a).ok();

    let n = agents.len();
    let mut wins = vec![vec![0u32; n]; n];
    for a in annotations {
        let m = resolve(&index, a)?;
        if m.is_qc {
            return Err(StatsError::QcAnnotation(a.annotation_id.clone()));
        }
        if m.left_agent == m.right_agent {
            continue;
        }
        let winner = pos(&a.chosen_agent).expect("plan agent");
        let loser = pos(m.agent_on(a.chosen_side.other())).expect("plan agent");
        wins[loser][winner] += 1;
    }

    let mut cells = vec![vec![None; n]; n];
    for r in 0..n {
        for c in 0..n {
            let total = wins[r][c] + wins[c][r];
            if r == c || total == 0 {
                continue;
            }
            let w = wins[r][c];
            let p_value = binom_two_sided(w.max(total - w) as u64, total as u64)?;
            cells[r][c] = Some(WinCell {
                wins: w,
                total,
                win_rate: w as f64 / total as f64,
                p_value,
                significant: p_value < alpha,
            });
        }
    }
    Ok(WinMatrix {
        agents,
        alpha,
        cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementResult {
    pub question_id: String,
    pub n_annotations: u32,
    pub majority_count: u32,
    pub agreement_rate: f64,
    pub p_value: f64,
}

/// Inter-annotator agreement on one repeated trial: the share of annotators
/// who picked the most chosen conversation.
///
/// Annotations may come from different matchups as long as all show the same
/// two conversations under the same question; the choice is compared by
/// conversation, so side swaps between matchups do not matter.
pub fn agreement(
    annotations: &[Annotation],
    plan: &Plan,
    question: &str,
) -> Result<AgreementResult, StatsError> {
    if annotations.is_empty() {
        return Err(StatsError::Empty);
    }
    let index = plan.index();
    let mut pair = None;
    let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
    for a in annotations {
        let m = resolve(&index, a)?;
        if m.question != question || *pair.get_or_insert(m.unordered_pair()) != m.unordered_pair() {
            return Err(StatsError::MixedTrial);
        }
        *counts.entry(m.conv_on(a.chosen_side)).or_default() += 1;
    }
    let n = annotations.len() as u32;
    let majority = counts.values().copied().max().unwrap_or(0);
    Ok(AgreementResult {
        question_id: question.into(),
        n_annotations: n,
        majority_count: majority,
        agreement_rate: majority as f64 / n as f64,
        p_value: binom_two_sided(majority as u64, n as u64)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AaResult {
    pub n_annotations: u32,
    pub left_wins: u32,
    pub left_win_rate: f64,
    pub p_value: f64,
    /// Left/right choices are significantly unbalanced at `alpha`.
    pub position_bias: bool,
}

/// Position-bias check over a self-vs-self comparison.
pub fn aa_check(
    annotations: &[Annotation],
    plan: &Plan,
    alpha: f64,
) -> Result<AaResult, StatsError> {
    if annotations.is_empty() {
        return Err(StatsError::Empty);
    }
    let index = plan.index();
    let mut left = 0u32;
    for a in annotations {
        let m = resolve(&index, a)?;
        if m.left_agent != m.right_agent {
            return Err(StatsError::NotSelfComparison(m.matchup_id.clone()));
        }
        if a.chosen_side == Side::Left {
            left += 1;
        }
    }
    let n = annotations.len() as u32;
    let p_value = binom_two_sided(left as u64, n as u64)?;
    Ok(AaResult {
        n_annotations: n,
        left_wins: left,
        left_win_rate: left as f64 / n as f64,
        p_value,
        position_bias: p_value < alpha,
    })
}

/// What a bootstrap resample draws with replacement.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleUnit {
    /// Individual annotations.
    #[default]
    Annotation,
    /// All annotations of one conversation pair at a time.
    Conversation,
}

/// Outcomes of one agent pair, grouped by conversation pair.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairOutcomes {
    /// One entry per conversation pair; `true` means agent A was chosen.
    pub clusters: Vec<Vec<bool>>,
}

impl PairOutcomes {
    /// Collects A-vs-B outcomes from annotations, ignoring any other pair.
    pub fn collect(
        annotations: &[Annotation],
        plan: &Plan,
        agent_a: &AgentId,
        agent_b: &AgentId,
    ) -> Result<Self, StatsError> {
        let index = plan.index();
        let mut clusters: BTreeMap<(&str, &str), Vec<bool>> = BTreeMap::new();
        for a in annotations {
            let m = resolve(&index, a)?;
            let pair = (&m.left_agent, &m.right_agent);
            if pair != (agent_a, agent_b) && pair != (agent_b, agent_a) {
                continue;
            }
            clusters
                .entry(m.unordered_pair())
                .or_default()
                .push(&a.chosen_agent == agent_a);
        }
        Ok(PairOutcomes {
            clusters: clusters.into_values().collect(),
        })
    }

    pub fn from_outcomes(outcomes: impl IntoIterator<Item = bool>) -> Self {
        PairOutcomes {
            clusters: outcomes.into_iter().map(|o| vec![o]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn wins_a(&self) -> usize {
        self.clusters.iter().flatten().filter(|&&o| o).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub alpha: f64,
    pub trials: u32,
    pub seed: u64,
    #[serde(default)]
    pub resample_unit: ResampleUnit,
}

/// Estimated chance that `k` annotations drawn at random reach significance.
///
/// Each trial draws with replacement from its own seeded substream, so the
/// estimate does not depend on how trials are partitioned.
pub fn bootstrap_power(
    outcomes: &PairOutcomes,
    k: u32,
    config: &BootstrapConfig,
) -> Result<f64, StatsError> {
    if outcomes.is_empty() {
        return Err(StatsError::Empty);
    }
    if k == 0 {
        return Err(StatsError::Parameter("k"));
    }
    if config.trials == 0 {
        return Err(StatsError::Parameter("trials"));
    }
    let significant: Vec<bool> = binom_two_sided_table(k as u64)?
        .into_iter()
        .map(|p| p < config.alpha)
        .collect();
    let flat: Vec<bool> = outcomes.clusters.iter().flatten().copied().collect();
    let clusters: Vec<&Vec<bool>> = outcomes.clusters.iter().filter(|c| !c.is_empty()).collect();

    let mut hits = 0u32;
    for trial in 0..config.trials {
        let mut rng = substream(config.seed, trial as u64);
        let wins = match config.resample_unit {
            ResampleUnit::Annotation => (0..k)
                .filter(|_| flat[rng.random_range(0..flat.len())])
                .count(),
            ResampleUnit::Conversation => {
                let mut drawn = 0usize;
                let mut wins = 0usize;
                while drawn < k as usize {
                    let c = clusters[rng.random_range(0..clusters.len())];
                    let take = c.len().min(k as usize - drawn);
                    wins += c[..take].iter().filter(|&&o| o).count();
                    drawn += take;
                }
                wins
            }
        };
        // Two-sided and symmetric, so the count for either agent works.
        if significant[wins] {
            hits += 1;
        }
    }
    Ok(hits as f64 / config.trials as f64)
}

/// Power at each sample size in `ks`.
pub fn power_points(
    outcomes: &PairOutcomes,
    ks: &[u32],
    config: &BootstrapConfig,
) -> Result<Vec<(u32, f64)>, StatsError> {
    ks.iter()
        .map(|&k| Ok((k, bootstrap_power(outcomes, k, config)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerCurve {
    pub sample_sizes: Vec<u32>,
    pub power_at_k: Vec<f64>,
    pub alpha: f64,
    pub bootstrap_trials: u32,
    pub seconds_per_annotation: f64,
    pub person_hours_at_k: Vec<f64>,
}

/// Attaches a person-hours axis to measured power points.
pub fn cost_curve(
    points: &[(u32, f64)],
    seconds_per_annotation: f64,
    alpha: f64,
    bootstrap_trials: u32,
) -> Result<PowerCurve, StatsError> {
    if !seconds_per_annotation.is_finite() || seconds_per_annotation <= 0.0 {
        return Err(StatsError::Parameter("seconds_per_annotation"));
    }
    if points.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(StatsError::Parameter("sample_sizes"));
    }
    if points.iter().any(|&(_, p)| !(0.0..=1.0).contains(&p)) {
        return Err(StatsError::Parameter("power"));
    }
    Ok(PowerCurve {
        sample_sizes: points.iter().map(|p| p.0).collect(),
        power_at_k: points.iter().map(|p| p.1).collect(),
        alpha,
        bootstrap_trials,
        seconds_per_annotation,
        person_hours_at_k: points
            .iter()
            .map(|&(k, _)| k as f64 * seconds_per_annotation / 3600.0)
            .collect(),
    })
}

/// Summary of a single-conversation rating (Likert) collection, used to draw
/// a comparison cost curve without raw ratings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikertProfile {
    pub seconds_per_annotation: f64,
    /// Variance of one rating.
    pub score_variance: f64,
    /// Difference in mean rating between the two agents.
    pub mean_difference: f64,
}

/// Power of a two-sample z-test on mean ratings with `k` ratings split
/// evenly between the two agents.
pub fn likert_power(profile: &LikertProfile, k: u32, alpha: f64) -> Result<f64, StatsError> {
    if profile.score_variance.is_nan() || profile.score_variance <= 0.0 {
        return Err(StatsError::Parameter("score_variance"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::Parameter("alpha"));
    }
    if k < 2 {
        return Ok(0.0);
    }
    let per_agent = k as f64 / 2.0;
    let se = libm::sqrt(2.0 * profile.score_variance / per_agent);
    let shift = libm::fabs(profile.mean_difference) / se;
    let z = normal_quantile(1.0 - alpha / 2.0);
    Ok(normal_cdf(shift - z) + normal_cdf(-shift - z))
}

/// Likert comparison curve on the same person-hours axis.
pub fn likert_curve(
    profile: &LikertProfile,
    ks: &[u32],
    alpha: f64,
) -> Result<PowerCurve, StatsError> {
    let points = ks
        .iter()
        .map(|&k| Ok((k, likert_power(profile, k, alpha)?)))
        .collect::<Result<Vec<_>, StatsError>>()?;
    cost_curve(&points, profile.seconds_per_annotation, alpha, 0)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / core::f64::consts::SQRT_2)
}

fn normal_quantile(p: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairing::{ComparisonRecord, ComparisonSpec, Diversity};
    use alloc::format;

    #[test]
    fn binom_trivial_values() {
        assert!((binom_two_sided(2, 2).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(binom_two_sided(50, 100).unwrap(), 1.0);
        assert_eq!(binom_two_sided(0, 1).unwrap(), 1.0);
        assert_eq!(binom_two_sided(3, 2), Err(StatsError::SuccessesExceedTrials { k: 3, n: 2 }));
        assert_eq!(binom_two_sided(0, 0), Err(StatsError::NoTrials));
    }

    #[test]
    fn binom_all_one_side_61() {
        let p = binom_two_sided(61, 61).unwrap();
        let expect = 2.0 * libm::pow(0.5, 61.0);
        assert!((p - expect).abs() / expect < 1e-9);
    }

    #[test]
    fn binom_large_n_is_finite() {
        let p = binom_two_sided(5100, 10_000).unwrap();
        assert!(p > 0.04 && p < 0.06, "{p}");
        assert_eq!(binom_two_sided(5000, 10_000).unwrap(), 1.0);
        assert_eq!(binom_two_sided(10_000, 10_000).unwrap(), f64::MIN_POSITIVE);
    }

    fn plan_with(matchups: Vec<Matchup>) -> Plan {
        Plan {
            run_id: "t".into(),
            rng_seed: 0,
            comparisons: vec![ComparisonRecord {
                spec: ComparisonSpec {
                    agent_a: AgentId::model("A"),
                    agent_b: AgentId::model("B"),
                    question: "engaging".into(),
                    target_annotations: matchups.len() as u32,
                    provenance: None,
                },
                diversity: Diversity::UniquePairs,
                degenerate: false,
                self_comparison: false,
            }],
            matchups,
            qc_pool: Vec::new(),
        }
    }

    fn matchup(id: usize, left: &str, right: &str, lc: &str, rc: &str) -> Matchup {
        Matchup {
            matchup_id: format!("m{id}"),
            left_conv: lc.into(),
            right_conv: rc.into(),
            question: "engaging".into(),
            left_agent: AgentId::model(left),
            right_agent: AgentId::model(right),
            is_qc: false,
            gold_side: None,
            comparison: Some(0),
        }
    }

    fn vote(id: usize, m: &Matchup, side: Side) -> Annotation {
        Annotation {
            annotation_id: format!("a{id}"),
            matchup_id: m.matchup_id.clone(),
            worker_id: format!("w{id}"),
            chosen_side: side,
            chosen_agent: m.agent_on(side).clone(),
            justification: "because".into(),
            elapsed_seconds: 10.0,
            submitted_at: 0,
        }
    }

    /// `a_wins` of `n` matchups go to A; A alternates sides.
    fn ab_fixture(n: usize, a_wins: usize) -> (Plan, Vec<Annotation>) {
        let ms: Vec<_> = (0..n)
            .map(|i| {
                if i % 2 == 0 {
                    matchup(i, "A", "B", &format!("a{i}"), &format!("b{i}"))
                } else {
                    matchup(i, "B", "A", &format!("b{i}"), &format!("a{i}"))
                }
            })
            .collect();
        let anns = ms
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let a_side = if m.left_agent.name == "A" { Side::Left } else { Side::Right };
                vote(i, m, if i < a_wins { a_side } else { a_side.other() })
            })
            .collect();
        (plan_with(ms), anns)
    }

    #[test]
    fn win_matrix_sixty_seven_to_thirty_three() {
        let (plan, anns) = ab_fixture(100, 67);
        let wm = win_matrix(&anns, &plan, 0.05).unwrap();
        let (a, b) = (AgentId::model("A"), AgentId::model("B"));
        let cell = wm.cell(&b, &a).unwrap();
        assert_eq!((cell.wins, cell.total), (67, 100));
        assert!((cell.win_rate - 0.67).abs() < 1e-12);
        assert!(cell.significant && cell.p_value < 0.05);
        let mirror = wm.cell(&a, &b).unwrap();
        assert_eq!(mirror.wins + cell.wins, 100);
        assert_eq!(mirror.p_value, cell.p_value);
        assert_eq!(wm.total_annotations(), 100);
    }

    #[test]
    fn win_matrix_even_split_and_empty() {
        let (plan, anns) = ab_fixture(10, 5);
        let wm = win_matrix(&anns, &plan, 0.05).unwrap();
        let cell = wm.cell(&AgentId::model("B"), &AgentId::model("A")).unwrap();
        assert_eq!(cell.win_rate, 0.5);
        assert_eq!(cell.p_value, 1.0);
        let empty = win_matrix(&[], &plan, 0.05).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.agents.len(), 2);
    }

    #[test]
    fn win_matrix_rejects_unknown_and_qc() {
        let (mut plan, mut anns) = ab_fixture(4, 2);
        anns[0].matchup_id = "zzz".into();
        assert!(matches!(
            win_matrix(&anns, &plan, 0.05),
            Err(StatsError::UnknownMatchup { .. })
        ));
        let (_, anns) = ab_fixture(4, 2);
        plan.matchups[1].is_qc = true;
        plan.matchups[1].gold_side = Some(Side::Left);
        assert_eq!(
            win_matrix(&anns, &plan, 0.05),
            Err(StatsError::QcAnnotation("a1".into()))
        );
    }

    fn trial_fixture(n: usize, majority: usize) -> (Plan, Vec<Annotation>) {
        // Same two conversations shown n times with alternating placement.
        let ms: Vec<_> = (0..n)
            .map(|i| {
                if i % 2 == 0 {
                    matchup(i, "A", "B", "x", "y")
                } else {
                    matchup(i, "B", "A", "y", "x")
                }
            })
            .collect();
        let anns = ms
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let x_side = if m.left_conv == "x" { Side::Left } else { Side::Right };
                vote(i, m, if i < majority { x_side } else { x_side.other() })
            })
            .collect();
        (plan_with(ms), anns)
    }

    #[test]
    fn agreement_rates() {
        let (plan, anns) = trial_fixture(20, 16);
        let r = agreement(&anns, &plan, "engaging").unwrap();
        assert_eq!((r.n_annotations, r.majority_count), (20, 16));
        assert!((r.agreement_rate - 0.8).abs() < 1e-12);
        let (plan, anns) = trial_fixture(20, 10);
        let r = agreement(&anns, &plan, "engaging").unwrap();
        assert_eq!((r.agreement_rate, r.p_value), (0.5, 1.0));
        assert_eq!(agreement(&[], &plan, "engaging"), Err(StatsError::Empty));
    }

    #[test]
    fn agreement_fixture_rate_seven_of_eight() {
        // 87.5% is 7 of 8 or 35 of 40; only the latter is significant at .05.
        let (plan, anns) = trial_fixture(40, 35);
        let r = agreement(&anns, &plan, "engaging").unwrap();
        assert_eq!(r.agreement_rate, 0.875);
        assert!(r.p_value < 0.05);
        let (plan, anns) = trial_fixture(8, 7);
        let r = agreement(&anns, &plan, "engaging").unwrap();
        assert_eq!(r.agreement_rate, 0.875);
        assert!(r.p_value > 0.05);
    }

    #[test]
    fn agreement_rejects_mixed_pairs() {
        let (mut plan, anns) = trial_fixture(4, 3);
        plan.matchups[2].right_conv = "z".into();
        assert_eq!(agreement(&anns, &plan, "engaging"), Err(StatsError::MixedTrial));
        let (plan, anns) = trial_fixture(4, 3);
        assert_eq!(agreement(&anns, &plan, "humanlike"), Err(StatsError::MixedTrial));
    }

    fn aa_fixture(n: usize, left: usize) -> (Plan, Vec<Annotation>) {
        let ms: Vec<_> = (0..n)
            .map(|i| matchup(i, "A", "A", &format!("p{i}"), &format!("q{i}")))
            .collect();
        let anns = ms
            .iter()
            .enumerate()
            .map(|(i, m)| vote(i, m, if i < left { Side::Left } else { Side::Right }))
            .collect();
        (plan_with(ms), anns)
    }

    #[test]
    fn aa_check_cases() {
        let (plan, anns) = aa_fixture(100, 50);
        let r = aa_check(&anns, &plan, 0.05).unwrap();
        assert_eq!((r.left_win_rate, r.p_value, r.position_bias), (0.5, 1.0, false));
        let (plan, anns) = aa_fixture(100, 70);
        let r = aa_check(&anns, &plan, 0.05).unwrap();
        assert!(r.p_value < 0.05 && r.position_bias);
        assert_eq!(aa_check(&[], &plan, 0.05), Err(StatsError::Empty));
        let (plan, anns) = ab_fixture(4, 2);
        assert!(matches!(aa_check(&anns, &plan, 0.05), Err(StatsError::NotSelfComparison(_))));
    }

    #[test]
    fn self_matchups_do_not_enter_win_matrix() {
        let (plan, anns) = aa_fixture(6, 4);
        let wm = win_matrix(&anns, &plan, 0.05).unwrap();
        assert!(wm.is_empty());
    }

    fn cfg(trials: u32) -> BootstrapConfig {
        BootstrapConfig {
            alpha: 0.05,
            trials,
            seed: 5,
            resample_unit: ResampleUnit::Annotation,
        }
    }

    #[test]
    fn bootstrap_extremes() {
        let all_a = PairOutcomes::from_outcomes(core::iter::repeat_n(true, 40));
        assert_eq!(bootstrap_power(&all_a, 61, &cfg(500)).unwrap(), 1.0);
        let mixed = PairOutcomes::from_outcomes((0..40).map(|i| i % 3 == 0));
        assert_eq!(bootstrap_power(&mixed, 1, &cfg(500)).unwrap(), 0.0);
        assert_eq!(
            bootstrap_power(&PairOutcomes::default(), 5, &cfg(10)),
            Err(StatsError::Empty)
        );
    }

    #[test]
    fn bootstrap_is_seeded() {
        let o = PairOutcomes::from_outcomes((0..50).map(|i| i % 5 < 3));
        let a = bootstrap_power(&o, 40, &cfg(300)).unwrap();
        let b = bootstrap_power(&o, 40, &cfg(300)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conversation_resampling_matches_annotation_for_singletons() {
        let o = PairOutcomes::from_outcomes((0..50).map(|i| i % 5 < 3));
        let mut c = cfg(300);
        let a = bootstrap_power(&o, 30, &c).unwrap();
        c.resample_unit = ResampleUnit::Conversation;
        let b = bootstrap_power(&o, 30, &c).unwrap();
        assert!((a - b).abs() < 0.15, "{a} vs {b}");
    }

    #[test]
    fn cost_curve_hours() {
        let c = cost_curve(&[(0, 0.0), (360, 0.8)], 100.0, 0.05, 10).unwrap();
        assert_eq!(c.person_hours_at_k, vec![0.0, 10.0]);
        let d = cost_curve(&[(0, 0.0), (360, 0.8)], 50.0, 0.05, 10).unwrap();
        assert_eq!(c.power_at_k, d.power_at_k);
        assert_eq!(d.person_hours_at_k[1], 5.0);
        assert_eq!(
            cost_curve(&[(1, 0.1)], 0.0, 0.05, 1),
            Err(StatsError::Parameter("seconds_per_annotation"))
        );
        assert!(cost_curve(&[(5, 0.1), (5, 0.2)], 1.0, 0.05, 1).is_err());
    }

    #[test]
    fn likert_power_grows_with_k() {
        let profile = LikertProfile {
            seconds_per_annotation: 60.0,
            score_variance: 1.0,
            mean_difference: 0.3,
        };
        let curve = likert_curve(&profile, &[10, 100, 1000], 0.05).unwrap();
        assert!(curve.power_at_k.windows(2).all(|w| w[0] < w[1]));
        assert!(curve.power_at_k[2] > 0.99);
        // No effect: power equals alpha.
        let null = LikertProfile { mean_difference: 0.0, ..profile };
        assert!((likert_power(&null, 500, 0.05).unwrap() - 0.05).abs() < 1e-9);
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-9);
    }
}
