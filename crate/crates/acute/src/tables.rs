//! Tab-separated report tables. Every function returns the full file text.

use std::fmt::Write;

use acute_core::corpus::AgentId;
use acute_core::pairing::{ComparisonSummary, Diversity};
use acute_core::selfchat::{OverlapReport, RepetitionRow};
use acute_core::stats::{AaResult, AgreementResult, PowerCurve, WinMatrix};
use acute_core::workers::{GatingReport, QcResult, RemovalReason};

fn agent(a: &AgentId) -> &str {
    &a.name
}

pub fn plan_summary(rows: &[ComparisonSummary]) -> String {
    let mut out = String::from(
        "comparison\tagent_a\tagent_b\tquestion\tmatchups\tconvs_used\tdiversity\tpair_reuse\tconversation_reuse\tdegenerate\n",
    );
    for r in rows {
        let diversity = match r.diversity {
            Diversity::UniqueConversations => "unique-conversations",
            Diversity::UniquePairs => "unique-pairs",
        };
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.comparison,
            agent(&r.agent_a),
            agent(&r.agent_b),
            r.question,
            r.matchups,
            r.convs_used,
            diversity,
            r.pair_reuse,
            r.conversation_reuse,
            r.degenerate
        )
        .unwrap();
    }
    out
}

/// Row agent loses, column agent wins. Cells read as the column agent's win
/// percentage with `*` marking significance.
pub fn win_matrix(m: &WinMatrix) -> String {
    let mut out = String::from("loses \\ wins");
    for a in &m.agents {
        write!(out, "\t{}", agent(a)).unwrap();
    }
    out.push('\n');
    for (r, row) in m.cells.iter().enumerate() {
        out.push_str(agent(&m.agents[r]));
        for (c, cell) in row.iter().enumerate() {
            out.push('\t');
            match cell {
                _ if r == c => out.push('-'),
                Some(cell) => write!(
                    out,
                    "{:.0}{}",
                    cell.win_rate * 100.0,
                    if cell.significant { "*" } else { "" }
                )
                .unwrap(),
                None => {}
            }
        }
        out.push('\n');
    }
    out
}

/// One line per present cell.
pub fn win_cells(m: &WinMatrix) -> String {
    let mut out = String::from("row_agent\tcol_agent\twins\ttotal\twin_rate\tp_value\tsignificant\n");
    for (r, row) in m.cells.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            if let Some(cell) = cell {
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{:.4}\t{:.6e}\t{}",
                    agent(&m.agents[r]),
                    agent(&m.agents[c]),
                    cell.wins,
                    cell.total,
                    cell.win_rate,
                    cell.p_value,
                    cell.significant
                )
                .unwrap();
            }
        }
    }
    out
}

pub fn gating(g: &GatingReport) -> String {
    let mut out = String::from("worker_id\tqc_result\tcompleted\treasons_given\tremoved\n");
    for w in &g.workers {
        let qc = match w.qc_result {
            QcResult::Passed => "PASSED",
            QcResult::Failed => "FAILED",
            QcResult::Pending => "PENDING",
        };
        let removed = match w.removed {
            None => "",
            Some(RemovalReason::QcFail) => "QC_FAIL",
            Some(RemovalReason::NoReasons) => "NO_REASONS",
        };
        writeln!(
            out,
            "{}\t{qc}\t{}\t{}\t{removed}",
            w.worker_id, w.completed, w.reasons_given
        )
        .unwrap();
    }
    writeln!(
        out,
        "# surviving={} removed={} qc_excluded={}",
        g.surviving_count(),
        g.removed_count(),
        g.qc_excluded
    )
    .unwrap();
    out
}

pub fn agreement(rows: &[(String, AgreementResult)]) -> String {
    let mut out =
        String::from("trial\tquestion_id\tn_annotations\tmajority_count\tagreement_rate\tp_value\n");
    for (trial, r) in rows {
        writeln!(
            out,
            "{trial}\t{}\t{}\t{}\t{:.4}\t{:.6e}",
            r.question_id, r.n_annotations, r.majority_count, r.agreement_rate, r.p_value
        )
        .unwrap();
    }
    out
}

pub fn aa(rows: &[(String, AaResult)]) -> String {
    let mut out =
        String::from("comparison\tn_annotations\tleft_wins\tleft_win_rate\tp_value\tposition_bias\n");
    for (name, r) in rows {
        writeln!(
            out,
            "{name}\t{}\t{}\t{:.4}\t{:.6e}\t{}",
            r.n_annotations, r.left_wins, r.left_win_rate, r.p_value, r.position_bias
        )
        .unwrap();
    }
    out
}

/// Plot data: one line per sample size.
pub fn power_curve(curve: &PowerCurve) -> String {
    let mut out = String::from("k\tpower\tperson_hours\n");
    for i in 0..curve.sample_sizes.len() {
        writeln!(
            out,
            "{}\t{:.4}\t{:.4}",
            curve.sample_sizes[i], curve.power_at_k[i], curve.person_hours_at_k[i]
        )
        .unwrap();
    }
    out
}

pub fn overlap(rows: &[(String, OverlapReport)]) -> String {
    let mut out = String::from("source\ttotal_pairs\tmatched_pairs\tfraction\n");
    for (source, r) in rows {
        writeln!(
            out,
            "{source}\t{}\t{}\t{:.4}",
            r.total_pairs, r.matched_pairs, r.fraction
        )
        .unwrap();
    }
    out
}

pub fn repetition(rows: &[RepetitionRow]) -> String {
    let mut out = String::from("conv_id\tutterances\trepeated\tfraction\n");
    for r in rows {
        writeln!(out, "{}\t{}\t{}\t{:.4}", r.conv_id, r.utterances, r.repeated, r.fraction).unwrap();
    }
    out
}
