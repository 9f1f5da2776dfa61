//! Flow engine: per-token net balances, conservation checking, the token
//! flow graph, and grouping of classified flows into macro-actions.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use num_bigint::BigInt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::function_selector;
use crate::model::{
    Address, Amount, CallNode, Delta, NetBalanceChange, Selector, TokenStandard, TokenTransfer,
    TransactionBundle,
};
use crate::profiler::{ActionType, FlowClassification};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConservationError {
    #[error("bundle declares no net balances to verify")]
    NoDeclaredBalances,
}

/// Net balance change per token for one holder: inflows minus outflows,
/// zero deltas omitted, sorted by token address.
pub fn compute_net_balances(transfers: &[TokenTransfer], holder: &Address) -> Vec<NetBalanceChange> {
    let mut per_token: BTreeMap<Address, BigInt> = BTreeMap::new();
    for t in transfers {
        let signed = BigInt::from(t.amount.0.clone());
        if &t.to == holder {
            *per_token.entry(t.token.clone()).or_default() += &signed;
        }
        if &t.from == holder {
            *per_token.entry(t.token.clone()).or_default() -= &signed;
        }
    }
    per_token
        .into_iter()
        .filter(|(_, delta)| !num_traits::Zero::is_zero(delta))
        .map(|(token, delta)| NetBalanceChange {
            holder: holder.clone(),
            token,
            delta: Delta(delta),
        })
        .collect()
}

/// One edge of the token flow graph, referencing its transfer by log index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FlowEdge {
    pub log_index: u64,
    pub from: Address,
    pub to: Address,
    pub token: Address,
    pub amount: Amount,
}

/// Token flow graph: nodes are transfer endpoints (token contracts are not
/// nodes), edges follow log-index order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TokenFlowGraph {
    pub nodes: BTreeSet<Address>,
    pub edges: Vec<FlowEdge>,
}

pub fn build_flow_graph(bundle: &TransactionBundle) -> TokenFlowGraph {
    let mut nodes = BTreeSet::new();
    let mut edges = Vec::with_capacity(bundle.transfers.len());
    for t in &bundle.transfers {
        nodes.insert(t.from.clone());
        nodes.insert(t.to.clone());
        edges.push(FlowEdge {
            log_index: t.log_index,
            from: t.from.clone(),
            to: t.to.clone(),
            token: t.token.clone(),
            amount: t.amount.clone(),
        });
    }
    TokenFlowGraph { nodes, edges }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConservationRow {
    pub holder: Address,
    pub token: Address,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub declared: Option<Delta>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recomputed: Option<Delta>,
    pub matches: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConservationReport {
    pub rows: Vec<ConservationRow>,
    pub ok: bool,
}

/// Compare declared net balances against recomputation, per (holder, token).
/// A mismatch is a report outcome, never a silent repair. Duplicate declared
/// entries for one (holder, token) are summed before comparison.
pub fn verify_conservation(
    bundle: &TransactionBundle,
) -> Result<ConservationReport, ConservationError> {
    let declared = bundle
        .declared_net_balances
        .as_ref()
        .ok_or(ConservationError::NoDeclaredBalances)?;

    let mut declared_map: BTreeMap<(Address, Address), BigInt> = BTreeMap::new();
    for n in declared {
        *declared_map
            .entry((n.holder.clone(), n.token.clone()))
            .or_default() += &n.delta.0;
    }
    let holders: BTreeSet<Address> = declared.iter().map(|n| n.holder.clone()).collect();

    let mut rows = Vec::new();
    for holder in holders {
        let recomputed: BTreeMap<Address, BigInt> = compute_net_balances(&bundle.transfers, &holder)
            .into_iter()
            .map(|n| (n.token, n.delta.0))
            .collect();
        let mut tokens: BTreeSet<Address> = recomputed.keys().cloned().collect();
        tokens.extend(
            declared_map
                .keys()
                .filter(|(h, _)| h == &holder)
                .map(|(_, t)| t.clone()),
        );
        for token in tokens {
            let d = declared_map.get(&(holder.clone(), token.clone())).cloned();
            let r = recomputed.get(&token).cloned();
            let matches = match (&d, &r) {
                (Some(a), Some(b)) => a == b,
                _ => false,
            };
            rows.push(ConservationRow {
                holder: holder.clone(),
                token,
                declared: d.map(Delta),
                recomputed: r.map(Delta),
                matches,
            });
        }
    }
    let ok = rows.iter().all(|r| r.matches);
    Ok(ConservationReport { rows, ok })
}

/// Trace-path anchor per transfer log index.
pub type FlowAnchors = BTreeMap<u64, Vec<usize>>;

fn read_only_selectors() -> &'static BTreeSet<Selector> {
    static SET: OnceLock<BTreeSet<Selector>> = OnceLock::new();
    SET.get_or_init(|| {
        [
            "approve(address,uint256)",
            "allowance(address,address)",
            "balanceOf(address)",
            "symbol()",
            "decimals()",
            "name()",
            "totalSupply()",
            "getReserves()",
            "ownerOf(uint256)",
        ]
        .iter()
        .map(|sig| function_selector(sig))
        .collect()
    })
}

/// Associate each transfer with a call-tree position.
///
/// A token transfer is emitted by the token contract, so the k-th transfer
/// of token T is anchored at the k-th state-changing call whose callee is T
/// (read-only and approval selectors are skipped). When the tree holds fewer
/// matching calls than transfers, the last one is reused; with none, the
/// anchor is the root. Native transfers map one-to-one onto value-carrying
/// calls in depth-first order.
pub fn anchor_transfers(bundle: &TransactionBundle) -> FlowAnchors {
    let nodes = bundle.root_call.preorder();
    let skip = read_only_selectors();

    let mut token_calls: BTreeMap<Address, Vec<&CallNode>> = BTreeMap::new();
    let mut value_calls: Vec<&CallNode> = Vec::new();
    for node in &nodes {
        if !node.eth_value.is_zero() {
            value_calls.push(node);
        }
        if node.selector.map(|s| skip.contains(&s)).unwrap_or(false) {
            continue;
        }
        token_calls.entry(node.callee.clone()).or_default().push(node);
    }

    let mut anchors = FlowAnchors::new();
    let mut token_seen: BTreeMap<Address, usize> = BTreeMap::new();
    let mut native_seen = 0usize;
    for t in &bundle.transfers {
        let path = if t.standard == TokenStandard::Native {
            let p = value_calls
                .get(native_seen.min(value_calls.len().saturating_sub(1)))
                .map(|n| n.trace_path.clone())
                .unwrap_or_default();
            native_seen += 1;
            p
        } else {
            let k = token_seen.entry(t.token.clone()).or_insert(0);
            let calls = token_calls.get(&t.token);
            let p = match calls {
                Some(calls) if !calls.is_empty() => {
                    calls[(*k).min(calls.len() - 1)].trace_path.clone()
                }
                _ => vec![],
            };
            *k += 1;
            p
        };
        anchors.insert(t.log_index, path);
    }
    anchors
}

/// Nearest common ancestor of a set of trace paths (longest shared prefix).
pub fn nearest_common_anchor(paths: &[&[usize]]) -> Vec<usize> {
    let Some(first) = paths.first() else {
        return vec![];
    };
    let mut prefix: Vec<usize> = first.to_vec();
    for path in &paths[1..] {
        let common = prefix
            .iter()
            .zip(path.iter())
            .take_while(|(a, b)| a == b)
            .count();
        prefix.truncate(common);
    }
    prefix
}

/// The top-level call subtree containing a path: the root's direct child
/// index on the path, or `None` for the root itself.
pub fn top_level_subtree(path: &[usize]) -> Option<usize> {
    path.first().copied()
}

/// A group of token flows constituting one economic operation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MacroAction {
    pub id: u64,
    pub kind: ActionType,
    pub member_flows: Vec<u64>,
    pub call_anchor: Vec<usize>,
    pub aggregate_in: BTreeMap<Address, Amount>,
    pub aggregate_out: BTreeMap<Address, Amount>,
}

/// Group classified flows into macro-actions.
///
/// Paired rules (swap, wrap/unwrap, deposit/stake receipts) arrive as group
/// hints from classification and merge even across sibling venue subtrees —
/// a multi-venue swap is one economic action. Everything else groups by
/// (kind, token, top-level call subtree), so unrelated same-kind flows in
/// disjoint subtrees stay separate. Output is ordered by first member flow.
pub fn group_macro_actions(
    bundle: &TransactionBundle,
    _graph: &TokenFlowGraph,
    classification: &FlowClassification,
) -> Vec<MacroAction> {
    let anchors = anchor_transfers(bundle);
    let user = bundle.user();

    let mut grouped: Vec<(ActionType, Vec<u64>)> = Vec::new();
    let mut taken: BTreeSet<u64> = BTreeSet::new();
    for hint in &classification.group_hints {
        let mut members = hint.members.clone();
        members.sort_unstable();
        for m in &members {
            taken.insert(*m);
        }
        grouped.push((hint.kind, members));
    }

    let mut keyed: BTreeMap<(ActionType, Address, Option<usize>), Vec<u64>> = BTreeMap::new();
    for t in &bundle.transfers {
        if taken.contains(&t.log_index) {
            continue;
        }
        let kind = classification
            .types
            .get(&t.log_index)
            .copied()
            .unwrap_or(ActionType::Unknown);
        let subtree = anchors
            .get(&t.log_index)
            .map(|p| top_level_subtree(p))
            .unwrap_or(None);
        keyed
            .entry((kind, t.token.clone(), subtree))
            .or_default()
            .push(t.log_index);
    }
    for ((kind, _, _), members) in keyed {
        grouped.push((kind, members));
    }

    grouped.sort_by_key(|(_, members)| members.first().copied().unwrap_or(u64::MAX));

    grouped
        .into_iter()
        .enumerate()
        .map(|(id, (kind, members))| {
            let mut aggregate_in: BTreeMap<Address, Amount> = BTreeMap::new();
            let mut aggregate_out: BTreeMap<Address, Amount> = BTreeMap::new();
            let mut paths: Vec<&[usize]> = Vec::new();
            for idx in &members {
                let t = bundle
                    .transfer_by_log_index(*idx)
                    .expect("grouping only references bundle flows");
                if &t.to == user {
                    let e = aggregate_in.entry(t.token.clone()).or_insert_with(Amount::zero);
                    e.0 += &t.amount.0;
                }
                if &t.from == user {
                    let e = aggregate_out.entry(t.token.clone()).or_insert_with(Amount::zero);
                    e.0 += &t.amount.0;
                }
                if let Some(p) = anchors.get(idx) {
                    paths.push(p.as_slice());
                }
            }
            MacroAction {
                id: id as u64,
                kind,
                member_flows: members,
                call_anchor: nearest_common_anchor(&paths),
                aggregate_in,
                aggregate_out,
            }
        })
        .collect()
}
