//! Fast first-pass profiling: classify each token flow with a deterministic
//! pattern rule, sketch a narrative, and emit structured uncertainty flags
//! instead of guessing at anything outside the rule set.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::board::{EvidenceBoard, EvidencePayload, Stage};
use crate::flow::{anchor_transfers, top_level_subtree, verify_conservation, FlowAnchors};
use crate::knowledge::{CardKind, CardStore, SelectorDb};
use crate::model::{Address, Selector, TokenStandard, TransactionBundle};
use crate::synth::render_amount_for;

/// Closed vocabulary of economic primitives. `swap` labels a merged
/// macro-action; individual flows are classified `swap_in`/`swap_out`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ActionType {
    Transfer,
    Swap,
    SwapIn,
    SwapOut,
    Deposit,
    Withdraw,
    Mint,
    Burn,
    Stake,
    Unstake,
    Borrow,
    Repay,
    Fee,
    Wrap,
    Unwrap,
    Unknown,
}

impl ActionType {
    pub fn as_str(&self) -> &'static str {
        match self {
            ActionType::Transfer => "transfer",
            ActionType::Swap => "swap",
            ActionType::SwapIn => "swap_in",
            ActionType::SwapOut => "swap_out",
            ActionType::Deposit => "deposit",
            ActionType::Withdraw => "withdraw",
            ActionType::Mint => "mint",
            ActionType::Burn => "burn",
            ActionType::Stake => "stake",
            ActionType::Unstake => "unstake",
            ActionType::Borrow => "borrow",
            ActionType::Repay => "repay",
            ActionType::Fee => "fee",
            ActionType::Wrap => "wrap",
            ActionType::Unwrap => "unwrap",
            ActionType::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagKind {
    UnknownSelector,
    UnverifiedContract,
    UnmatchedTransfer,
    AnomalousFlow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum FlagSubject {
    Address(Address),
    Selector(Selector),
}

/// Where in the transaction a flag points: a call-tree position or a log
/// index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum FlagLocation {
    CallPath(Vec<usize>),
    LogIndex(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct UncertaintyFlag {
    pub kind: FlagKind,
    pub subject: FlagSubject,
    pub trace_path: FlagLocation,
    pub description: String,
    /// Contract the flag arose on, when the subject itself is a selector;
    /// gives the investigator an ABI lookup target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_address: Option<Address>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    High,
    Medium,
    Low,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Hypothesis {
    pub classified_flows: BTreeMap<u64, ActionType>,
    pub narrative_skeleton: Vec<String>,
    pub flags: Vec<UncertaintyFlag>,
    pub confidence: Confidence,
    /// Which rule produced each non-unknown classification.
    pub rule_fired: BTreeMap<u64, String>,
}

/// Flows that one rule decided belong to a single economic operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupHint {
    pub kind: ActionType,
    pub members: Vec<u64>,
}

/// Full classification result: per-flow types, rule provenance, and pairing
/// hints consumed by macro-action grouping.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FlowClassification {
    pub types: BTreeMap<u64, ActionType>,
    pub rule_fired: BTreeMap<u64, String>,
    pub group_hints: Vec<GroupHint>,
}

#[derive(Debug, Clone)]
pub struct ProfileConfig {
    /// Fee rule threshold as a fraction: amount < num/den of the main flow.
    pub fee_threshold_num: u32,
    pub fee_threshold_den: u32,
    /// Symbol of the wrapped-native token used by the wrap/unwrap rule.
    pub wrapped_native_symbol: String,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            fee_threshold_num: 5,
            fee_threshold_den: 100,
            wrapped_native_symbol: "WETH".to_string(),
        }
    }
}

fn keys_compatible(a: Option<usize>, b: Option<usize>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => x == y,
        // A root-anchored flow shares its subtree with everything.
        _ => true,
    }
}

fn shared_prefix_len(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b.iter()).take_while(|(x, y)| x == y).count()
}

struct Ctx<'a> {
    bundle: &'a TransactionBundle,
    anchors: &'a FlowAnchors,
    store: &'a CardStore,
    cfg: &'a ProfileConfig,
    user: &'a Address,
}

impl<'a> Ctx<'a> {
    fn key(&self, log_index: u64) -> Option<usize> {
        self.anchors
            .get(&log_index)
            .and_then(|p| top_level_subtree(p))
    }

    fn anchor(&self, log_index: u64) -> &[usize] {
        self.anchors
            .get(&log_index)
            .map(|p| p.as_slice())
            .unwrap_or(&[])
    }
}

/// Apply pattern rules P1..P7 in fixed precedence (P2 > P3 > P7 > P4 >
/// P5/P6 > P1, first match wins) and record which rule fired per flow.
pub fn classify_flows(
    bundle: &TransactionBundle,
    store: &CardStore,
    cfg: &ProfileConfig,
) -> FlowClassification {
    let anchors = anchor_transfers(bundle);
    let user = bundle.user().clone();
    let ctx = Ctx {
        bundle,
        anchors: &anchors,
        store,
        cfg,
        user: &user,
    };

    let mut out = FlowClassification::default();
    rule_p2_mint_burn(&ctx, &mut out);
    rule_p3_wrap_unwrap(&ctx, &mut out);
    rule_p7_fee(&ctx, &mut out);
    rule_p4_swap(&ctx, &mut out);
    rule_p5_p6_deposit_family(&ctx, &mut out);
    rule_p1_plain_transfer(&ctx, &mut out);

    for t in &bundle.transfers {
        out.types.entry(t.log_index).or_insert(ActionType::Unknown);
    }
    out
}

fn set(out: &mut FlowClassification, idx: u64, ty: ActionType, rule: &str) {
    out.types.insert(idx, ty);
    out.rule_fired.insert(idx, rule.to_string());
}

fn classified(out: &FlowClassification, idx: u64) -> bool {
    out.types.contains_key(&idx)
}

fn rule_p2_mint_burn(ctx: &Ctx<'_>, out: &mut FlowClassification) {
    for t in &ctx.bundle.transfers {
        if t.from.is_zero() && &t.to == ctx.user {
            set(out, t.log_index, ActionType::Mint, "P2");
        } else if &t.from == ctx.user && t.to.is_zero() {
            set(out, t.log_index, ActionType::Burn, "P2");
        }
    }
}

fn rule_p3_wrap_unwrap(ctx: &Ctx<'_>, out: &mut FlowClassification) {
    let wrapped = &ctx.cfg.wrapped_native_symbol;
    let natives: Vec<_> = ctx
        .bundle
        .transfers
        .iter()
        .filter(|t| t.standard == TokenStandard::Native && !classified(out, t.log_index))
        .cloned()
        .collect();
    for n in natives {
        let wants_wrap = &n.from == ctx.user;
        let partner = ctx.bundle.transfers.iter().find(|w| {
            w.standard == TokenStandard::Erc20
                && !classified(out, w.log_index)
                && ctx.bundle.symbol(&w.token) == *wrapped
                && w.amount == n.amount
                && keys_compatible(ctx.key(w.log_index), ctx.key(n.log_index))
                && if wants_wrap {
                    &w.to == ctx.user
                } else {
                    &w.from == ctx.user
                }
        });
        if let Some(w) = partner {
            let ty = if wants_wrap {
                ActionType::Wrap
            } else {
                ActionType::Unwrap
            };
            let (w_idx, n_idx) = (w.log_index, n.log_index);
            set(out, w_idx, ty, "P3");
            set(out, n_idx, ty, "P3");
            let mut members = vec![w_idx, n_idx];
            members.sort_unstable();
            out.group_hints.push(GroupHint { kind: ty, members });
        }
    }
}

fn rule_p7_fee(ctx: &Ctx<'_>, out: &mut FlowClassification) {
    // Cluster user outflows per token by top-level subtree; root-anchored
    // flows join the cluster of the largest sibling.
    let mut by_token: BTreeMap<Address, Vec<&crate::model::TokenTransfer>> = BTreeMap::new();
    for t in &ctx.bundle.transfers {
        if &t.from == ctx.user && !classified(out, t.log_index) {
            by_token.entry(t.token.clone()).or_default().push(t);
        }
    }
    for (_token, flows) in by_token {
        if flows.len() < 2 {
            continue;
        }
        let mut clusters: Vec<Vec<&crate::model::TokenTransfer>> = Vec::new();
        for f in flows {
            let key = ctx.key(f.log_index);
            match clusters
                .iter_mut()
                .find(|c| keys_compatible(ctx.key(c[0].log_index), key))
            {
                Some(c) => c.push(f),
                None => clusters.push(vec![f]),
            }
        }
        for cluster in clusters {
            if cluster.len() < 2 {
                continue;
            }
            let main = cluster
                .iter()
                .max_by(|a, b| a.amount.0.cmp(&b.amount.0).then(b.log_index.cmp(&a.log_index)))
                .copied()
                .expect("cluster non-empty");
            for f in &cluster {
                if f.log_index == main.log_index || f.to == main.to {
                    continue;
                }
                let lhs = &f.amount.0 * ctx.cfg.fee_threshold_den;
                let rhs = &main.amount.0 * ctx.cfg.fee_threshold_num;
                if lhs < rhs {
                    set(out, f.log_index, ActionType::Fee, "P7");
                }
            }
        }
    }
}

fn rule_p4_swap(ctx: &Ctx<'_>, out: &mut FlowClassification) {
    // Receipt mechanics are not swap proceeds: a contract paying in its own
    // address-token issues a receipt, and sending a contract its own token
    // returns one. Both stay out of the swap rule so the deposit family can
    // claim them.
    let outflows: Vec<_> = ctx
        .bundle
        .transfers
        .iter()
        .filter(|t| {
            &t.from == ctx.user
                && &t.to != ctx.user
                && t.token != t.to
                && !classified(out, t.log_index)
        })
        .collect();
    let inflows: Vec<_> = ctx
        .bundle
        .transfers
        .iter()
        .filter(|t| {
            &t.to == ctx.user
                && &t.from != ctx.user
                && t.token != t.from
                && !classified(out, t.log_index)
        })
        .collect();
    if outflows.is_empty() || inflows.is_empty() {
        return;
    }

    let deposit_family = |addr: &Address| {
        matches!(
            ctx.store.lookup(addr).map(|c| c.kind),
            Some(CardKind::Vault | CardKind::Staking | CardKind::LendingPool)
        )
    };

    // Each inflow picks the outflow of a different token whose call anchor
    // is nearest; connected components become one swap group (the
    // multi-venue case keeps all inflows of the counter-token together).
    let mut links: Vec<(u64, u64)> = Vec::new();
    for i in &inflows {
        let mut best: Option<(usize, u64)> = None;
        for o in &outflows {
            if o.token == i.token {
                continue;
            }
            // a deposit-family counterparty on both legs is not a venue
            if i.from == o.to && deposit_family(&o.to) {
                continue;
            }
            let depth = shared_prefix_len(ctx.anchor(o.log_index), ctx.anchor(i.log_index));
            let better = match best {
                None => true,
                Some((d, idx)) => depth > d || (depth == d && o.log_index < idx),
            };
            if better {
                best = Some((depth, o.log_index));
            }
        }
        if let Some((_, o_idx)) = best {
            links.push((o_idx, i.log_index));
        }
    }
    if links.is_empty() {
        return;
    }

    let mut component: BTreeMap<u64, usize> = BTreeMap::new();
    let mut groups: Vec<BTreeSet<u64>> = Vec::new();
    for (o, i) in &links {
        match (component.get(o).copied(), component.get(i).copied()) {
            (None, None) => {
                let id = groups.len();
                groups.push(BTreeSet::from([*o, *i]));
                component.insert(*o, id);
                component.insert(*i, id);
            }
            (Some(g), None) => {
                groups[g].insert(*i);
                component.insert(*i, g);
            }
            (None, Some(g)) => {
                groups[g].insert(*o);
                component.insert(*o, g);
            }
            (Some(a), Some(b)) if a != b => {
                let merged: BTreeSet<u64> = groups[b].iter().copied().collect();
                for m in merged {
                    groups[a].insert(m);
                    component.insert(m, a);
                }
                groups[b].clear();
            }
            _ => {}
        }
    }

    let linked_out: BTreeSet<u64> = links.iter().map(|(o, _)| *o).collect();
    let linked_in: BTreeSet<u64> = links.iter().map(|(_, i)| *i).collect();
    for idx in &linked_out {
        set(out, *idx, ActionType::SwapOut, "P4");
    }
    for idx in &linked_in {
        set(out, *idx, ActionType::SwapIn, "P4");
    }
    for g in groups {
        if g.is_empty() {
            continue;
        }
        out.group_hints.push(GroupHint {
            kind: ActionType::Swap,
            members: g.into_iter().collect(),
        });
    }
}

fn card_kind(ctx: &Ctx<'_>, addr: &Address) -> Option<CardKind> {
    ctx.store.lookup(addr).map(|c| c.kind)
}

fn rule_p5_p6_deposit_family(ctx: &Ctx<'_>, out: &mut FlowClassification) {
    let transfers = &ctx.bundle.transfers;

    // Outflow-led: user pays token A to contract C and gets a receipt back
    // (minted by C or sent from C).
    let outflow_indices: Vec<u64> = transfers
        .iter()
        .filter(|t| &t.from == ctx.user && &t.to != ctx.user && !classified(out, t.log_index))
        .map(|t| t.log_index)
        .collect();
    for o_idx in outflow_indices {
        let o = ctx.bundle.transfer_by_log_index(o_idx).unwrap().clone();
        let counterparty = o.to.clone();
        if counterparty.is_zero() {
            continue;
        }
        let receipt = transfers.iter().find(|i| {
            &i.to == ctx.user
                && i.log_index != o.log_index
                && (i.from == counterparty || i.token == counterparty)
                && match out.types.get(&i.log_index) {
                    None => true,
                    Some(ActionType::Mint) => true,
                    Some(_) => false,
                }
        });

        let kind = card_kind(ctx, &counterparty);
        let sends_receipt_back = o.token == counterparty;
        match (kind, receipt) {
            (Some(CardKind::Staking), Some(i)) => {
                let ty = if sends_receipt_back {
                    ActionType::Unstake
                } else {
                    ActionType::Stake
                };
                let i_idx = i.log_index;
                set(out, o_idx, ty, "P6");
                if !out.types.contains_key(&i_idx) {
                    set(out, i_idx, ty, "P6");
                }
                push_pair_hint(out, ty, o_idx, i_idx);
            }
            (Some(CardKind::LendingPool), _) => {
                let prior_borrow = transfers.iter().any(|i| {
                    &i.to == ctx.user
                        && i.from == counterparty
                        && i.token == o.token
                        && i.log_index < o.log_index
                });
                if prior_borrow {
                    set(out, o_idx, ActionType::Repay, "P6");
                } else if let Some(i) = receipt {
                    let i_idx = i.log_index;
                    set(out, o_idx, ActionType::Deposit, "P6");
                    if !out.types.contains_key(&i_idx) {
                        set(out, i_idx, ActionType::Deposit, "P6");
                    }
                    push_pair_hint(out, ActionType::Deposit, o_idx, i_idx);
                }
            }
            (_, Some(i)) => {
                let ty = if sends_receipt_back {
                    ActionType::Withdraw
                } else {
                    ActionType::Deposit
                };
                let i_idx = i.log_index;
                set(out, o_idx, ty, "P5");
                if !out.types.contains_key(&i_idx) {
                    set(out, i_idx, ty, "P5");
                }
                push_pair_hint(out, ty, o_idx, i_idx);
            }
            _ => {}
        }
    }

    // Inflow-led: lending pool pays the user with no outflow obligation yet.
    let inflow_indices: Vec<u64> = transfers
        .iter()
        .filter(|t| &t.to == ctx.user && !classified(out, t.log_index))
        .map(|t| t.log_index)
        .collect();
    for i_idx in inflow_indices {
        let i = ctx.bundle.transfer_by_log_index(i_idx).unwrap();
        if card_kind(ctx, &i.from) == Some(CardKind::LendingPool) {
            let prior_outflow = transfers
                .iter()
                .any(|o| &o.from == ctx.user && o.to == i.from && o.log_index < i.log_index);
            if !prior_outflow {
                set(out, i_idx, ActionType::Borrow, "P6");
            }
        }
    }
}

fn push_pair_hint(out: &mut FlowClassification, kind: ActionType, a: u64, b: u64) {
    let mut members = vec![a, b];
    members.sort_unstable();
    out.group_hints.push(GroupHint { kind, members });
}

fn rule_p1_plain_transfer(ctx: &Ctx<'_>, out: &mut FlowClassification) {
    let unclassified: Vec<u64> = ctx
        .bundle
        .transfers
        .iter()
        .filter(|t| !classified(out, t.log_index))
        .map(|t| t.log_index)
        .collect();
    for idx in unclassified {
        let t = ctx.bundle.transfer_by_log_index(idx).unwrap();
        if &t.from != ctx.user && &t.to != ctx.user {
            continue;
        }
        let key = ctx.key(idx);
        let has_sibling = ctx
            .bundle
            .transfers
            .iter()
            .any(|g| g.log_index != idx && keys_compatible(ctx.key(g.log_index), key));
        if !has_sibling {
            set(out, idx, ActionType::Transfer, "P1");
        }
    }
}

fn display_party(bundle: &TransactionBundle, store: &CardStore, addr: &Address) -> String {
    if let Some(card) = store.lookup(addr) {
        return card.name.clone();
    }
    if addr == bundle.user() {
        return "the user".to_string();
    }
    addr.short()
}

fn skeleton_clause(
    bundle: &TransactionBundle,
    store: &CardStore,
    t: &crate::model::TokenTransfer,
    ty: ActionType,
) -> String {
    let amt = render_amount_for(bundle, &t.token, &t.amount);
    let sym = bundle.symbol(&t.token);
    let user = bundle.user();
    match ty {
        ActionType::Mint => format!("user minted {amt} {sym}"),
        ActionType::Burn => format!("user burned {amt} {sym}"),
        ActionType::Fee => format!(
            "user paid a fee of {amt} {sym} to {}",
            display_party(bundle, store, &t.to)
        ),
        ActionType::Unknown => format!("unclassified movement of {amt} {sym}"),
        _ if &t.from == user => format!(
            "user sent {amt} {sym} to {}",
            display_party(bundle, store, &t.to)
        ),
        _ if &t.to == user => format!(
            "user received {amt} {sym} from {}",
            display_party(bundle, store, &t.from)
        ),
        _ => format!(
            "{} sent {amt} {sym} to {}",
            display_party(bundle, store, &t.from),
            display_party(bundle, store, &t.to)
        ),
    }
}

fn collect_flags(
    bundle: &TransactionBundle,
    db: &SelectorDb,
    store: &CardStore,
    classification: &FlowClassification,
) -> Vec<UncertaintyFlag> {
    let mut flags = Vec::new();

    for node in bundle.root_call.preorder() {
        if let Some(sel) = node.selector {
            if db.lookup(sel).is_none() {
                flags.push(UncertaintyFlag {
                    kind: FlagKind::UnknownSelector,
                    subject: FlagSubject::Selector(sel),
                    trace_path: FlagLocation::CallPath(node.trace_path.clone()),
                    description: format!("unknown function at {sel}"),
                    context_address: Some(node.callee.clone()),
                });
            }
        }
    }

    let mut seen: BTreeSet<Address> = BTreeSet::new();
    for node in bundle.root_call.preorder() {
        let callee = &node.callee;
        if seen.contains(callee) {
            continue;
        }
        seen.insert(callee.clone());
        if callee.is_zero() || callee.is_native_token() {
            continue;
        }
        if store.lookup(callee).is_none() && !bundle.tokens.contains_key(callee) {
            flags.push(UncertaintyFlag {
                kind: FlagKind::UnverifiedContract,
                subject: FlagSubject::Address(callee.clone()),
                trace_path: FlagLocation::CallPath(node.trace_path.clone()),
                description: format!("unverified contract {callee}"),
                context_address: None,
            });
        }
    }

    for t in &bundle.transfers {
        if classification.types.get(&t.log_index) == Some(&ActionType::Unknown) {
            flags.push(UncertaintyFlag {
                kind: FlagKind::UnmatchedTransfer,
                subject: FlagSubject::Address(t.token.clone()),
                trace_path: FlagLocation::LogIndex(t.log_index),
                description: format!(
                    "unmatched transfer of {} at log index {}",
                    bundle.symbol(&t.token),
                    t.log_index
                ),
                context_address: None,
            });
        }
    }

    if bundle.declared_net_balances.is_some() {
        if let Ok(report) = verify_conservation(bundle) {
            if !report.ok {
                for row in report.rows.iter().filter(|r| !r.matches) {
                    flags.push(UncertaintyFlag {
                        kind: FlagKind::AnomalousFlow,
                        subject: FlagSubject::Address(row.holder.clone()),
                        trace_path: FlagLocation::CallPath(vec![]),
                        description: format!(
                            "net balance mismatch for {}: declared {}, recomputed {}",
                            bundle.symbol(&row.token),
                            row.declared
                                .as_ref()
                                .map(|d| d.to_string())
                                .unwrap_or_else(|| "nothing".into()),
                            row.recomputed
                                .as_ref()
                                .map(|d| d.to_string())
                                .unwrap_or_else(|| "zero".into()),
                        ),
                        context_address: None,
                    });
                }
            }
        }
    }

    flags
}

pub struct ProfileOutcome {
    pub hypothesis: Hypothesis,
    pub classification: FlowClassification,
}

/// Run the profiler over the board's bundle: classify flows, build the
/// skeleton and flags, and append the hypothesis plus one entry per flag.
pub fn profile(
    board: &mut EvidenceBoard,
    db: &SelectorDb,
    store: &CardStore,
    cfg: &ProfileConfig,
) -> ProfileOutcome {
    let (hypothesis, classification) = {
        let bundle = board.bundle();
        let classification = classify_flows(bundle, store, cfg);
        let flags = collect_flags(bundle, db, store, &classification);
        let skeleton: Vec<String> = bundle
            .transfers
            .iter()
            .map(|t| {
                let ty = classification
                    .types
                    .get(&t.log_index)
                    .copied()
                    .unwrap_or(ActionType::Unknown);
                skeleton_clause(bundle, store, t, ty)
            })
            .collect();
        let unknown_count = classification
            .types
            .values()
            .filter(|ty| **ty == ActionType::Unknown)
            .count();
        let total = bundle.transfers.len();
        let confidence = if flags.is_empty() {
            Confidence::High
        } else if unknown_count * 2 > total {
            Confidence::Low
        } else {
            Confidence::Medium
        };
        (
            Hypothesis {
                classified_flows: classification.types.clone(),
                narrative_skeleton: skeleton,
                flags,
                confidence,
                rule_fired: classification.rule_fired.clone(),
            },
            classification,
        )
    };

    board
        .append(
            EvidencePayload::Hypothesis(hypothesis.clone()),
            Stage::Profiler,
            "trace pattern analysis",
        )
        .expect("hypothesis is not a bundle");
    for flag in &hypothesis.flags {
        board
            .append(
                EvidencePayload::Flag(flag.clone()),
                Stage::Profiler,
                "profiler uncertainty",
            )
            .expect("flag is not a bundle");
    }

    ProfileOutcome {
        hypothesis,
        classification,
    }
}
