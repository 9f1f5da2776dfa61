//! Output rendering for the CLI: deterministic JSON documents and human
//! text views. Unresolved runs always surface their findings under an
//! `UNVERIFIED:` marker.

use anyhow::Result;
use serde::Serialize;

use txlens_core::flow::TokenFlowGraph;
use txlens_core::pipeline::FinalExplanation;
use txlens_core::profiler::Hypothesis;
use txlens_core::{
    compute_net_balances, render_amount_for, MacroAction, TransactionBundle, Verdict,
};

/// Tag for the grouping heuristic recorded in decode output metadata.
pub const GROUPING_HEURISTIC: &str = "subtree-anchor-v1";

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct NetBalanceView {
    holder: String,
    token: String,
    symbol: String,
    delta: String,
    display: String,
}

fn net_balance_views(bundle: &TransactionBundle) -> Vec<NetBalanceView> {
    compute_net_balances(&bundle.transfers, bundle.user())
        .into_iter()
        .map(|n| {
            let magnitude = n.delta.magnitude();
            let sign = if n.delta.is_negative() { "-" } else { "+" };
            NetBalanceView {
                holder: n.holder.to_string(),
                token: n.token.to_string(),
                symbol: bundle.symbol(&n.token),
                delta: n.delta.to_string(),
                display: format!(
                    "{sign}{} {}",
                    render_amount_for(bundle, &n.token, &magnitude),
                    bundle.symbol(&n.token)
                ),
            }
        })
        .collect()
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct ExplainView<'a> {
    tx_hash: String,
    verdict: Verdict,
    iterations: u32,
    unverified: bool,
    summary: &'a [txlens_core::AttributedClaim],
    rendered_summary: Vec<String>,
    steps: &'a [txlens_core::StepAnnotation],
    findings: &'a [txlens_core::AuditFinding],
    #[serde(skip_serializing_if = "Vec::is_empty")]
    unverified_notices: Vec<String>,
    flags: Vec<String>,
    net_balances: Vec<NetBalanceView>,
    macro_actions: &'a [MacroAction],
}

pub fn explain_json(out: &FinalExplanation) -> Result<String> {
    let bundle = out.board.bundle();
    let view = ExplainView {
        tx_hash: bundle.metadata.hash.to_string(),
        verdict: out.report.verdict,
        iterations: out.draft.iteration,
        unverified: out.report.verdict != Verdict::Pass,
        summary: &out.draft.summary,
        rendered_summary: out.draft.summary.iter().map(|c| c.rendered()).collect(),
        steps: &out.draft.steps,
        findings: &out.report.findings,
        unverified_notices: if out.report.verdict == Verdict::Pass {
            vec![]
        } else {
            out.report
                .findings
                .iter()
                .map(|f| format!("UNVERIFIED: {}", f.detail))
                .collect()
        },
        flags: out
            .board
            .flags()
            .iter()
            .map(|f| f.description.clone())
            .collect(),
        net_balances: net_balance_views(bundle),
        macro_actions: &out.macro_actions,
    };
    Ok(serde_json::to_string_pretty(&view)?)
}

pub fn explain_text(out: &FinalExplanation) -> String {
    let bundle = out.board.bundle();
    let mut text = String::new();
    let verdict = match out.report.verdict {
        Verdict::Pass => "pass",
        Verdict::Revise => "revise",
        Verdict::Unresolved => "unresolved",
    };
    text.push_str(&format!(
        "tx {}\nverdict: {verdict} after {} iteration(s)\n",
        bundle.metadata.hash, out.draft.iteration
    ));
    if out.report.verdict != Verdict::Pass {
        text.push_str("UNVERIFIED: the explanation below failed grounding checks:\n");
        for f in &out.report.findings {
            text.push_str(&format!("UNVERIFIED:   {}\n", f.detail));
        }
    }
    text.push_str("\nsummary:\n");
    for claim in &out.draft.summary {
        text.push_str(&format!("  {}\n", claim.rendered()));
    }
    text.push_str("\nsteps:\n");
    for (i, step) in out.draft.steps.iter().enumerate() {
        let flows: Vec<String> = step.flow_refs.iter().map(|r| r.to_string()).collect();
        text.push_str(&format!(
            "  {}. [{}] flows {}\n",
            i + 1,
            step.action_type.as_str(),
            flows.join(",")
        ));
        text.push_str(&format!("     intent:        {}\n", step.intent));
        text.push_str(&format!("     mechanism:     {}\n", step.mechanism));
        text.push_str(&format!(
            "     preconditions: {}\n",
            step.preconditions.join("; ")
        ));
        text.push_str(&format!("     result:        {}\n", step.result));
    }
    if !out.board.flags().is_empty() {
        text.push_str("\nuncertainty flags:\n");
        for f in out.board.flags() {
            text.push_str(&format!("  - {}\n", f.description));
        }
    }
    text.push_str("\nnet balance changes:\n");
    for view in net_balance_views(bundle) {
        text.push_str(&format!("  {} {}\n", view.holder, view.display));
    }
    text
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct DecodeView<'a> {
    edges: &'a [txlens_core::FlowEdge],
    macro_actions: &'a [MacroAction],
    net_balances: Vec<NetBalanceView>,
    meta: DecodeMeta,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct DecodeMeta {
    grouping: String,
}

pub fn decode_json(
    bundle: &TransactionBundle,
    graph: &TokenFlowGraph,
    macros: &[MacroAction],
) -> Result<String> {
    let view = DecodeView {
        edges: &graph.edges,
        macro_actions: macros,
        net_balances: net_balance_views(bundle),
        meta: DecodeMeta {
            grouping: format!("heuristic:{GROUPING_HEURISTIC}"),
        },
    };
    Ok(serde_json::to_string_pretty(&view)?)
}

pub fn decode_text(
    bundle: &TransactionBundle,
    graph: &TokenFlowGraph,
    macros: &[MacroAction],
) -> String {
    let mut text = String::new();
    text.push_str(&format!(
        "flows ({} edges, {} nodes):\n",
        graph.edges.len(),
        graph.nodes.len()
    ));
    for e in &graph.edges {
        text.push_str(&format!(
            "  #{} {} -> {}: {} {}\n",
            e.log_index,
            e.from.short(),
            e.to.short(),
            render_amount_for(bundle, &e.token, &e.amount),
            bundle.symbol(&e.token)
        ));
    }
    text.push_str(&format!("macro-actions (grouping {GROUPING_HEURISTIC}):\n"));
    for m in macros {
        let flows: Vec<String> = m.member_flows.iter().map(|f| f.to_string()).collect();
        text.push_str(&format!(
            "  {}: {} flows [{}] anchor {:?}\n",
            m.id,
            m.kind.as_str(),
            flows.join(","),
            m.call_anchor
        ));
    }
    text.push_str("net balance changes:\n");
    for view in net_balance_views(bundle) {
        text.push_str(&format!("  {} {}\n", view.holder, view.display));
    }
    text
}

pub fn hypothesis_text(h: &Hypothesis) -> String {
    let mut text = String::new();
    text.push_str(&format!("confidence: {:?}\n", h.confidence));
    text.push_str("classified flows:\n");
    for (idx, ty) in &h.classified_flows {
        let rule = h
            .rule_fired
            .get(idx)
            .map(String::as_str)
            .unwrap_or("none");
        text.push_str(&format!("  #{idx}: {} ({rule})\n", ty.as_str()));
    }
    text.push_str("narrative skeleton:\n");
    for clause in &h.narrative_skeleton {
        text.push_str(&format!("  - {clause}\n"));
    }
    if h.flags.is_empty() {
        text.push_str("flags: none\n");
    } else {
        text.push_str("flags:\n");
        for f in &h.flags {
            text.push_str(&format!("  - {}\n", f.description));
        }
    }
    text
}
