//! Synthesizer: fuses the board (bundle, hypothesis, patches) and the
//! macro-actions into an explanation draft with inline provenance. The
//! template backend renders deterministically; the external backend speaks a
//! JSON request/response protocol over a subprocess or HTTP and its output
//! is validated against the same draft invariants.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use num_bigint::BigUint;
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::AuditFinding;
use crate::board::{EvidenceBoard, EvidencePayload, Stage};
use crate::flow::{compute_net_balances, MacroAction};
use crate::hash::function_selector;
use crate::knowledge::{CardStore, SelectorDb};
use crate::model::{Address, Amount, TransactionBundle};
use crate::profiler::ActionType;

/// Version tag of the builtin template set; recorded as the draft citation.
pub const TEMPLATE_VERSION: &str = "v1";

/// Character cap for the external backend digest.
pub const DIGEST_CHAR_CAP: usize = 200_000;

const DEFAULT_BACKEND_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("backend protocol error: {0}")]
    BackendProtocol(String),
    #[error("draft misses macro-action coverage: {0}")]
    Coverage(String),
    #[error("revise requires a revise verdict, got {0}")]
    VerdictNotRevise(String),
    #[error("backend transport: {0}")]
    Transport(String),
}

/// Scale a base-unit amount for display: decimal point per `decimals`,
/// thousands separators, trailing zeros trimmed, at most six fractional
/// digits shown. Full precision stays in the base-unit value.
pub fn render_amount(value: &Amount, decimals: u32) -> String {
    let scale = BigUint::from(10u32).pow(decimals);
    let int_part = &value.0 / &scale;
    let rem = &value.0 % &scale;
    let mut int_str = int_part.to_string();
    // thousands grouping
    let digits: Vec<char> = int_str.chars().collect();
    let mut grouped = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.iter().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            grouped.push(',');
        }
        grouped.push(*c);
    }
    int_str = grouped;
    if rem.is_zero() {
        return int_str;
    }
    let mut frac = format!("{:0>width$}", rem.to_string(), width = decimals as usize);
    frac.truncate(6);
    while frac.ends_with('0') {
        frac.pop();
    }
    if frac.is_empty() {
        return int_str;
    }
    format!("{int_str}.{frac}")
}

/// Render an amount using the bundle's token metadata (default 18 decimals
/// for unlisted tokens).
pub fn render_amount_for(bundle: &TransactionBundle, token: &Address, value: &Amount) -> String {
    let decimals = bundle.token_info(token).map(|i| i.decimals).unwrap_or(18);
    render_amount(value, decimals)
}

/// A display literal tied to its exact base-unit value. The auditor checks
/// the value against board evidence, so display rounding can never hide a
/// wrong number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GroundedNumber {
    pub literal: String,
    pub value: Amount,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<Address>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AttributedClaim {
    pub text: String,
    #[serde(default)]
    pub citations: Vec<String>,
    #[serde(default)]
    pub grounded_numbers: Vec<GroundedNumber>,
}

impl AttributedClaim {
    /// Rendered form with `[Source: ...]` suffix.
    pub fn rendered(&self) -> String {
        if self.citations.is_empty() {
            self.text.clone()
        } else {
            format!("{} [Source: {}]", self.text, self.citations.join("; "))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StepAnnotation {
    pub flow_refs: Vec<u64>,
    pub action_type: ActionType,
    pub intent: String,
    pub mechanism: String,
    pub preconditions: Vec<String>,
    pub result: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DraftBackendKind {
    Template,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExplanationDraft {
    pub summary: Vec<AttributedClaim>,
    pub steps: Vec<StepAnnotation>,
    pub iteration: u32,
    pub backend: DraftBackendKind,
}

/// Count sentences by terminal punctuation. A punctuation run only ends a
/// sentence when followed by whitespace or the end of the text, so decimal
/// points and the dots of abbreviated addresses (`0x3333...3333`) do not
/// count.
pub fn count_sentences(text: &str) -> usize {
    let chars: Vec<char> = text.chars().collect();
    let mut count = 0;
    let mut i = 0;
    while i < chars.len() {
        if matches!(chars[i], '.' | '!' | '?') {
            let mut j = i;
            while j < chars.len() && matches!(chars[j], '.' | '!' | '?') {
                j += 1;
            }
            if j >= chars.len() || chars[j].is_whitespace() {
                count += 1;
            }
            i = j;
        } else {
            i += 1;
        }
    }
    count
}

// --- external backend protocol -------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Constraints {
    pub max_sentences: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BackendRequest {
    pub board_digest: String,
    pub macro_actions: Vec<MacroAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_draft: Option<ExplanationDraft>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit_findings: Option<Vec<AuditFinding>>,
    pub constraints: Constraints,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ResponseClaim {
    pub text: String,
    #[serde(default)]
    pub citations: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BackendResponse {
    pub summary: Vec<ResponseClaim>,
    pub steps: Vec<StepAnnotation>,
}

/// Transport carrying one request/response pair to an external draft
/// backend. Implementations: subprocess, HTTP POST, and test stubs.
pub trait ExternalTransport: Send + Sync {
    fn name(&self) -> String;
    fn roundtrip(&self, request: &BackendRequest) -> Result<BackendResponse, SynthError>;
}

/// Backend selection for synthesize/revise.
#[derive(Clone)]
pub enum BackendChoice {
    Template,
    External(Arc<dyn ExternalTransport>),
}

impl fmt::Debug for BackendChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendChoice::Template => write!(f, "BackendChoice::Template"),
            BackendChoice::External(t) => write!(f, "BackendChoice::External({})", t.name()),
        }
    }
}

impl BackendChoice {
    pub fn kind(&self) -> DraftBackendKind {
        match self {
            BackendChoice::Template => DraftBackendKind::Template,
            BackendChoice::External(_) => DraftBackendKind::External,
        }
    }
}

/// Subprocess transport: request JSON on stdin, response JSON on stdout.
pub struct CmdTransport {
    pub program: PathBuf,
    pub timeout: Duration,
}

impl CmdTransport {
    pub fn new(program: PathBuf) -> Self {
        CmdTransport {
            program,
            timeout: DEFAULT_BACKEND_TIMEOUT,
        }
    }
}

impl ExternalTransport for CmdTransport {
    fn name(&self) -> String {
        format!("cmd:{}", self.program.display())
    }

    fn roundtrip(&self, request: &BackendRequest) -> Result<BackendResponse, SynthError> {
        let body = serde_json::to_vec(request)
            .map_err(|e| SynthError::Transport(format!("encode request: {e}")))?;
        let mut child = Command::new(&self.program)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| SynthError::Transport(format!("spawn {}: {e}", self.program.display())))?;

        if let Some(mut stdin) = child.stdin.take() {
            // The backend may exit without reading; a broken pipe here is
            // not an error as long as it still produces a response.
            let _ = stdin.write_all(&body);
        }
        let mut stdout = child
            .stdout
            .take()
            .ok_or_else(|| SynthError::Transport("no stdout handle".into()))?;

        let (tx, rx) = mpsc::channel();
        let reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let res = stdout.read_to_end(&mut buf).map(|_| buf);
            let _ = tx.send(res);
        });
        let output = match rx.recv_timeout(self.timeout) {
            Ok(Ok(buf)) => buf,
            Ok(Err(e)) => {
                let _ = child.kill();
                return Err(SynthError::Transport(format!("read response: {e}")));
            }
            Err(_) => {
                let _ = child.kill();
                let _ = reader.join();
                return Err(SynthError::Transport(format!(
                    "backend timed out after {:?}",
                    self.timeout
                )));
            }
        };
        let _ = reader.join();
        let _ = child.wait();
        serde_json::from_slice(&output)
            .map_err(|e| SynthError::BackendProtocol(format!("malformed response JSON: {e}")))
    }
}

/// HTTP transport: one POST per request.
pub struct HttpTransport {
    pub url: String,
    pub timeout: Duration,
}

impl HttpTransport {
    pub fn new(url: String) -> Self {
        HttpTransport {
            url,
            timeout: DEFAULT_BACKEND_TIMEOUT,
        }
    }
}

impl ExternalTransport for HttpTransport {
    fn name(&self) -> String {
        format!("http:{}", self.url)
    }

    fn roundtrip(&self, request: &BackendRequest) -> Result<BackendResponse, SynthError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut resp = agent
            .post(&self.url)
            .send_json(request)
            .map_err(|e| SynthError::Transport(format!("POST {}: {e}", self.url)))?;
        resp.body_mut()
            .read_json()
            .map_err(|e| SynthError::BackendProtocol(format!("malformed response JSON: {e}")))
    }
}

// --- board digest ----------------------------------------------------------

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct DigestCall {
    from: Address,
    to: Address,
    call_type: crate::model::CallKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    selector: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<String>,
    value: String,
    children: Vec<DigestCall>,
}

fn digest_call(node: &crate::model::CallNode, keep_input: bool) -> DigestCall {
    DigestCall {
        from: node.caller.clone(),
        to: node.callee.clone(),
        call_type: node.call_kind,
        selector: node.selector.map(|s| s.to_string()),
        input: if keep_input {
            node.input_data.clone()
        } else {
            None
        },
        value: node.eth_value.to_string(),
        children: node
            .children
            .iter()
            .map(|c| digest_call(c, keep_input))
            .collect(),
    }
}

/// Serialize the board facts for an external backend, capped at
/// [`DIGEST_CHAR_CAP`] characters. Raw call input data is dropped first,
/// then the call tree, then the transfer list is truncated.
pub fn build_digest(board: &EvidenceBoard, macros: &[MacroAction]) -> String {
    let bundle = board.bundle();
    for stage in 0..3 {
        let mut doc = serde_json::Map::new();
        doc.insert("txHash".into(), bundle.metadata.hash.to_string().into());
        doc.insert("blockNumber".into(), bundle.metadata.block_number.into());
        doc.insert("timestamp".into(), bundle.metadata.timestamp.into());
        doc.insert("from".into(), bundle.metadata.sender.to_string().into());
        if let Some(to) = &bundle.metadata.recipient {
            doc.insert("to".into(), to.to_string().into());
        }
        doc.insert(
            "status".into(),
            serde_json::to_value(bundle.metadata.status).unwrap(),
        );

        let mut transfers: Vec<serde_json::Value> = bundle
            .transfers
            .iter()
            .map(|t| {
                serde_json::json!({
                    "logIndex": t.log_index,
                    "token": t.token.to_string(),
                    "symbol": bundle.symbol(&t.token),
                    "standard": serde_json::to_value(t.standard).unwrap(),
                    "from": t.from.to_string(),
                    "to": t.to.to_string(),
                    "amount": t.amount.to_string(),
                    "display": render_amount_for(bundle, &t.token, &t.amount),
                })
            })
            .collect();
        if stage >= 2 && transfers.len() > 32 {
            transfers.truncate(32);
            transfers.push(serde_json::json!({"truncated": true}));
        }
        doc.insert("transfers".into(), transfers.into());

        let nets: Vec<serde_json::Value> = compute_net_balances(&bundle.transfers, bundle.user())
            .iter()
            .map(|n| {
                serde_json::json!({
                    "token": n.token.to_string(),
                    "symbol": bundle.symbol(&n.token),
                    "delta": n.delta.to_string(),
                })
            })
            .collect();
        doc.insert("netBalances".into(), nets.into());

        if stage < 2 {
            doc.insert(
                "callTree".into(),
                serde_json::to_value(digest_call(&bundle.root_call, stage == 0)).unwrap(),
            );
        }

        if let Some(h) = board.hypothesis() {
            doc.insert(
                "narrativeSkeleton".into(),
                serde_json::to_value(&h.narrative_skeleton).unwrap(),
            );
            doc.insert(
                "flags".into(),
                h.flags
                    .iter()
                    .map(|f| serde_json::Value::String(f.description.clone()))
                    .collect::<Vec<_>>()
                    .into(),
            );
        }
        let patches: Vec<serde_json::Value> = board
            .patches()
            .iter()
            .map(|p| serde_json::json!({"claim": p.claim, "sourceLabel": p.source_label}))
            .collect();
        doc.insert("patches".into(), patches.into());
        doc.insert("macroActions".into(), serde_json::to_value(macros).unwrap());

        let text = serde_json::Value::Object(doc).to_string();
        if text.chars().count() <= DIGEST_CHAR_CAP || stage == 2 {
            return text;
        }
    }
    unreachable!("stage 2 always returns")
}

// --- template backend -------------------------------------------------------

struct NameContext<'a> {
    bundle: &'a TransactionBundle,
    store: &'a CardStore,
    db: &'a SelectorDb,
}

impl<'a> NameContext<'a> {
    /// Display name for a counterparty with its citation, when carded.
    fn party(&self, addr: &Address) -> (String, Option<String>) {
        if let Some(card) = self.store.lookup(addr) {
            return (card.name.clone(), Some(card.source_label.clone()));
        }
        if let Some(info) = self.bundle.token_info(addr) {
            return (format!("the {} token contract", info.symbol), None);
        }
        (addr.short(), None)
    }

    /// Venue label (protocol name) for a swap counterparty.
    fn venue(&self, addr: &Address) -> (String, Option<String>) {
        if let Some(card) = self.store.lookup(addr) {
            let label = if card.protocol.is_empty() {
                card.name.clone()
            } else {
                card.protocol.clone()
            };
            return (label, Some(card.source_label.clone()));
        }
        (addr.short(), None)
    }

    fn symbol(&self, token: &Address) -> String {
        self.bundle.symbol(token)
    }

    fn render(&self, token: &Address, value: &Amount) -> String {
        render_amount_for(self.bundle, token, value)
    }
}

struct ClauseParts {
    clause: String,
    citations: Vec<String>,
    numbers: Vec<GroundedNumber>,
}

fn first_entry(map: &BTreeMap<Address, Amount>) -> Option<(&Address, &Amount)> {
    map.iter().next()
}

fn macro_flows<'b>(
    bundle: &'b TransactionBundle,
    action: &MacroAction,
) -> Vec<&'b crate::model::TokenTransfer> {
    action
        .member_flows
        .iter()
        .filter_map(|i| bundle.transfer_by_log_index(*i))
        .collect()
}

fn grounded(literal: &str, value: &Amount, token: &Address) -> GroundedNumber {
    GroundedNumber {
        literal: literal.to_string(),
        value: value.clone(),
        token: Some(token.clone()),
    }
}

/// Venue split for a swap: inflow counterparty -> summed amount, in first
/// appearance order.
fn swap_venues(
    bundle: &TransactionBundle,
    action: &MacroAction,
) -> Vec<(Address, Address, Amount)> {
    let user = bundle.user();
    let mut order: Vec<Address> = Vec::new();
    let mut sums: BTreeMap<Address, (Address, Amount)> = BTreeMap::new();
    for t in macro_flows(bundle, action) {
        if &t.to == user && &t.from != user {
            if !sums.contains_key(&t.from) {
                order.push(t.from.clone());
            }
            let entry = sums
                .entry(t.from.clone())
                .or_insert_with(|| (t.token.clone(), Amount::zero()));
            entry.1 .0 += &t.amount.0;
        }
    }
    order
        .into_iter()
        .map(|venue| {
            let (token, amount) = sums.remove(&venue).unwrap();
            (venue, token, amount)
        })
        .collect()
}

fn clause_for_macro(ctx: &NameContext<'_>, action: &MacroAction) -> ClauseParts {
    let mut citations = Vec::new();
    let mut numbers = Vec::new();
    let flows = macro_flows(ctx.bundle, action);

    let clause = match action.kind {
        ActionType::Swap => {
            let (out_token, out_amt) = first_entry(&action.aggregate_out)
                .map(|(t, a)| (t.clone(), a.clone()))
                .unwrap_or((Address::zero(), Amount::zero()));
            let (in_token, in_amt) = first_entry(&action.aggregate_in)
                .map(|(t, a)| (t.clone(), a.clone()))
                .unwrap_or((Address::zero(), Amount::zero()));
            let out_disp = ctx.render(&out_token, &out_amt);
            let in_disp = ctx.render(&in_token, &in_amt);
            numbers.push(grounded(&out_disp, &out_amt, &out_token));
            numbers.push(grounded(&in_disp, &in_amt, &in_token));
            let venues = swap_venues(ctx.bundle, action);
            let mut clause = format!(
                "swapped {out_disp} {} for a total of {in_disp} {}",
                ctx.symbol(&out_token),
                ctx.symbol(&in_token)
            );
            if venues.len() == 1 {
                let (name, citation) = ctx.venue(&venues[0].0);
                clause.push_str(&format!(" via {name}"));
                citations.extend(citation);
            }
            clause
        }
        ActionType::Transfer => {
            if let Some((token, amt)) = first_entry(&action.aggregate_out) {
                let disp = ctx.render(token, amt);
                numbers.push(grounded(&disp, amt, token));
                let to = flows
                    .iter()
                    .find(|t| t.from == *ctx.bundle.user())
                    .map(|t| t.to.clone())
                    .unwrap_or_else(Address::zero);
                let (name, citation) = ctx.party(&to);
                citations.extend(citation);
                format!("sent {disp} {} to {name}", ctx.symbol(token))
            } else if let Some((token, amt)) = first_entry(&action.aggregate_in) {
                let disp = ctx.render(token, amt);
                numbers.push(grounded(&disp, amt, token));
                let from = flows
                    .iter()
                    .find(|t| t.to == *ctx.bundle.user())
                    .map(|t| t.from.clone())
                    .unwrap_or_else(Address::zero);
                let (name, citation) = ctx.party(&from);
                citations.extend(citation);
                format!("received {disp} {} from {name}", ctx.symbol(token))
            } else if let Some(t) = flows.first() {
                let disp = ctx.render(&t.token, &t.amount);
                numbers.push(grounded(&disp, &t.amount, &t.token));
                format!("saw {disp} {} move between third parties", ctx.symbol(&t.token))
            } else {
                "saw no token movement".to_string()
            }
        }
        ActionType::Mint => {
            let (token, amt) = first_entry(&action.aggregate_in)
                .map(|(t, a)| (t.clone(), a.clone()))
                .unwrap_or((Address::zero(), Amount::zero()));
            let disp = ctx.render(&token, &amt);
            numbers.push(grounded(&disp, &amt, &token));
            format!("minted {disp} {}", ctx.symbol(&token))
        }
        ActionType::Burn => {
            let (token, amt) = first_entry(&action.aggregate_out)
                .map(|(t, a)| (t.clone(), a.clone()))
                .unwrap_or((Address::zero(), Amount::zero()));
            let disp = ctx.render(&token, &amt);
            numbers.push(grounded(&disp, &amt, &token));
            format!("burned {disp} {}", ctx.symbol(&token))
        }
        ActionType::Wrap | ActionType::Unwrap => {
            let (out_token, out_amt) = first_entry(&action.aggregate_out)
                .map(|(t, a)| (t.clone(), a.clone()))
                .unwrap_or((Address::zero(), Amount::zero()));
            let (in_token, in_amt) = first_entry(&action.aggregate_in)
                .map(|(t, a)| (t.clone(), a.clone()))
                .unwrap_or((Address::zero(), Amount::zero()));
            let out_disp = ctx.render(&out_token, &out_amt);
            let in_disp = ctx.render(&in_token, &in_amt);
            numbers.push(grounded(&out_disp, &out_amt, &out_token));
            numbers.push(grounded(&in_disp, &in_amt, &in_token));
            let verb = if action.kind == ActionType::Wrap {
                "wrapped"
            } else {
                "unwrapped"
            };
            format!(
                "{verb} {out_disp} {} into {in_disp} {}",
                ctx.symbol(&out_token),
                ctx.symbol(&in_token)
            )
        }
        ActionType::Deposit | ActionType::Stake => {
            let (token, amt) = first_entry(&action.aggregate_out)
                .map(|(t, a)| (t.clone(), a.clone()))
                .unwrap_or((Address::zero(), Amount::zero()));
            let disp = ctx.render(&token, &amt);
            numbers.push(grounded(&disp, &amt, &token));
            let counterparty = flows
                .iter()
                .find(|t| t.from == *ctx.bundle.user())
                .map(|t| t.to.clone())
                .unwrap_or_else(Address::zero);
            let (name, citation) = ctx.party(&counterparty);
            citations.extend(citation);
            let verb = if action.kind == ActionType::Deposit {
                "deposited"
            } else {
                "staked"
            };
            let mut clause = format!("{verb} {disp} {} into {name}", ctx.symbol(&token));
            if let Some((rt, ra)) = first_entry(&action.aggregate_in) {
                let rdisp = ctx.render(rt, ra);
                numbers.push(grounded(&rdisp, ra, rt));
                clause.push_str(&format!(", receiving {rdisp} {}", ctx.symbol(rt)));
            }
            clause
        }
        ActionType::Withdraw | ActionType::Unstake => {
            let (token, amt) = first_entry(&action.aggregate_in)
                .map(|(t, a)| (t.clone(), a.clone()))
                .unwrap_or((Address::zero(), Amount::zero()));
            let disp = ctx.render(&token, &amt);
            numbers.push(grounded(&disp, &amt, &token));
            let counterparty = flows
                .iter()
                .find(|t| t.to == *ctx.bundle.user())
                .map(|t| t.from.clone())
                .unwrap_or_else(Address::zero);
            let (name, citation) = ctx.party(&counterparty);
            citations.extend(citation);
            let verb = if action.kind == ActionType::Withdraw {
                "withdrew"
            } else {
                "unstaked"
            };
            format!("{verb} {disp} {} from {name}", ctx.symbol(&token))
        }
        ActionType::Borrow => {
            let (token, amt) = first_entry(&action.aggregate_in)
                .map(|(t, a)| (t.clone(), a.clone()))
                .unwrap_or((Address::zero(), Amount::zero()));
            let disp = ctx.render(&token, &amt);
            numbers.push(grounded(&disp, &amt, &token));
            let from = flows
                .iter()
                .find(|t| t.to == *ctx.bundle.user())
                .map(|t| t.from.clone())
                .unwrap_or_else(Address::zero);
            let (name, citation) = ctx.party(&from);
            citations.extend(citation);
            format!("borrowed {disp} {} from {name}", ctx.symbol(&token))
        }
        ActionType::Repay => {
            let (token, amt) = first_entry(&action.aggregate_out)
                .map(|(t, a)| (t.clone(), a.clone()))
                .unwrap_or((Address::zero(), Amount::zero()));
            let disp = ctx.render(&token, &amt);
            numbers.push(grounded(&disp, &amt, &token));
            let to = flows
                .iter()
                .find(|t| t.from == *ctx.bundle.user())
                .map(|t| t.to.clone())
                .unwrap_or_else(Address::zero);
            let (name, citation) = ctx.party(&to);
            citations.extend(citation);
            format!("repaid {disp} {} to {name}", ctx.symbol(&token))
        }
        ActionType::Fee => {
            let (token, amt) = first_entry(&action.aggregate_out)
                .map(|(t, a)| (t.clone(), a.clone()))
                .unwrap_or((Address::zero(), Amount::zero()));
            let disp = ctx.render(&token, &amt);
            numbers.push(grounded(&disp, &amt, &token));
            let to = flows
                .iter()
                .find(|t| t.from == *ctx.bundle.user())
                .map(|t| t.to.clone())
                .unwrap_or_else(Address::zero);
            let (name, citation) = ctx.party(&to);
            citations.extend(citation);
            format!("paid a fee of {disp} {} to {name}", ctx.symbol(&token))
        }
        ActionType::SwapIn | ActionType::SwapOut | ActionType::Unknown => {
            if let Some(t) = flows.first() {
                let disp = ctx.render(&t.token, &t.amount);
                numbers.push(grounded(&disp, &t.amount, &t.token));
                format!(
                    "moved {disp} {} in a step the profiler could not classify",
                    ctx.symbol(&t.token)
                )
            } else {
                "moved tokens in a step the profiler could not classify".to_string()
            }
        }
    };

    ClauseParts {
        clause,
        citations,
        numbers,
    }
}

fn venue_split_claim(ctx: &NameContext<'_>, action: &MacroAction) -> Option<AttributedClaim> {
    let venues = swap_venues(ctx.bundle, action);
    if venues.len() < 2 {
        return None;
    }
    let mut parts = Vec::new();
    let mut citations = Vec::new();
    let mut numbers = Vec::new();
    for (venue, token, amount) in &venues {
        let (name, citation) = ctx.venue(venue);
        let disp = ctx.render(token, amount);
        numbers.push(grounded(&disp, amount, token));
        citations.extend(citation);
        parts.push(format!("{name} ({disp} {})", ctx.symbol(token)));
    }
    let text = if parts.len() == 2 {
        format!("The trade was split between {} and {}.", parts[0], parts[1])
    } else {
        let head = parts[..parts.len() - 1].join(", ");
        format!(
            "The trade was split across {head}, and {}.",
            parts[parts.len() - 1]
        )
    };
    citations.dedup();
    Some(AttributedClaim {
        text,
        citations,
        grounded_numbers: numbers,
    })
}

fn net_outcome_claim(bundle: &TransactionBundle) -> AttributedClaim {
    let nets = compute_net_balances(&bundle.transfers, bundle.user());
    if nets.is_empty() {
        return AttributedClaim {
            text: "No net balance changes resulted for the user.".to_string(),
            citations: vec![],
            grounded_numbers: vec![],
        };
    }
    let mut parts = Vec::new();
    let mut numbers = Vec::new();
    for n in &nets {
        let magnitude = n.delta.magnitude();
        let disp = render_amount_for(bundle, &n.token, &magnitude);
        let sign = if n.delta.is_negative() { "-" } else { "+" };
        numbers.push(GroundedNumber {
            literal: disp.clone(),
            value: magnitude,
            token: Some(n.token.clone()),
        });
        parts.push(format!("{sign}{disp} {}", bundle.symbol(&n.token)));
    }
    AttributedClaim {
        text: format!("Net balance change: {}.", parts.join(", ")),
        citations: vec![],
        grounded_numbers: numbers,
    }
}

fn approval_call_exists(bundle: &TransactionBundle, token: &Address) -> bool {
    let approve = function_selector("approve(address,uint256)");
    bundle
        .root_call
        .preorder()
        .iter()
        .any(|n| n.selector == Some(approve) && &n.callee == token)
}

fn mechanism_for(ctx: &NameContext<'_>, action: &MacroAction) -> String {
    let node = ctx
        .bundle
        .root_call
        .node_at(&action.call_anchor)
        .unwrap_or(&ctx.bundle.root_call);
    let (name, _) = ctx.party(&node.callee);
    match node.selector {
        Some(sel) => match ctx.db.lookup(sel) {
            Some(entry) => format!("Call {}() on {name}", entry.human_name),
            None => format!("Call unknown function {sel} on {name}"),
        },
        None if !node.eth_value.is_zero() => format!("Native ETH transfer to {name}"),
        None => format!("Contract interaction with {name}"),
    }
}

fn step_for_macro(ctx: &NameContext<'_>, action: &MacroAction) -> StepAnnotation {
    let flows = macro_flows(ctx.bundle, action);
    let user = ctx.bundle.user();
    let out = first_entry(&action.aggregate_out).map(|(t, a)| (t.clone(), a.clone()));
    let inn = first_entry(&action.aggregate_in).map(|(t, a)| (t.clone(), a.clone()));

    let party_of_out = flows
        .iter()
        .find(|t| &t.from == user)
        .map(|t| ctx.party(&t.to).0);
    let party_of_in = flows
        .iter()
        .find(|t| &t.to == user)
        .map(|t| ctx.party(&t.from).0);

    let intent = match action.kind {
        ActionType::Swap => format!(
            "Exchange {} for {}",
            out.as_ref().map(|(t, _)| ctx.symbol(t)).unwrap_or_default(),
            inn.as_ref().map(|(t, _)| ctx.symbol(t)).unwrap_or_default()
        ),
        ActionType::Transfer => match (&out, party_of_out.as_ref()) {
            (Some((t, _)), Some(p)) => format!("Send {} to {p}", ctx.symbol(t)),
            _ => match (&inn, party_of_in.as_ref()) {
                (Some((t, _)), Some(p)) => format!("Receive {} from {p}", ctx.symbol(t)),
                _ => "Move tokens between accounts".to_string(),
            },
        },
        ActionType::Mint => format!(
            "Acquire newly minted {}",
            inn.as_ref().map(|(t, _)| ctx.symbol(t)).unwrap_or_default()
        ),
        ActionType::Burn => format!(
            "Remove {} from circulation",
            out.as_ref().map(|(t, _)| ctx.symbol(t)).unwrap_or_default()
        ),
        ActionType::Wrap => format!(
            "Wrap ETH into {}",
            inn.as_ref().map(|(t, _)| ctx.symbol(t)).unwrap_or_default()
        ),
        ActionType::Unwrap => format!(
            "Unwrap {} into ETH",
            out.as_ref().map(|(t, _)| ctx.symbol(t)).unwrap_or_default()
        ),
        ActionType::Deposit => format!(
            "Deposit {} into {}",
            out.as_ref().map(|(t, _)| ctx.symbol(t)).unwrap_or_default(),
            party_of_out.clone().unwrap_or_else(|| "the contract".into())
        ),
        ActionType::Withdraw => format!(
            "Withdraw {} from {}",
            inn.as_ref().map(|(t, _)| ctx.symbol(t)).unwrap_or_default(),
            party_of_in.clone().unwrap_or_else(|| "the contract".into())
        ),
        ActionType::Stake => format!(
            "Stake {} with {}",
            out.as_ref().map(|(t, _)| ctx.symbol(t)).unwrap_or_default(),
            party_of_out.clone().unwrap_or_else(|| "the contract".into())
        ),
        ActionType::Unstake => format!(
            "Unstake {} from {}",
            inn.as_ref().map(|(t, _)| ctx.symbol(t)).unwrap_or_default(),
            party_of_in.clone().unwrap_or_else(|| "the contract".into())
        ),
        ActionType::Borrow => format!(
            "Borrow {} from {}",
            inn.as_ref().map(|(t, _)| ctx.symbol(t)).unwrap_or_default(),
            party_of_in.clone().unwrap_or_else(|| "the lending pool".into())
        ),
        ActionType::Repay => format!(
            "Repay {} debt to {}",
            out.as_ref().map(|(t, _)| ctx.symbol(t)).unwrap_or_default(),
            party_of_out.clone().unwrap_or_else(|| "the lending pool".into())
        ),
        ActionType::Fee => "Pay the protocol fee".to_string(),
        ActionType::SwapIn | ActionType::SwapOut | ActionType::Unknown => {
            "Unclassified token movement".to_string()
        }
    };

    let mut preconditions = Vec::new();
    if let Some((t, a)) = &out {
        preconditions.push(format!(
            "Sufficient {} balance of at least {}",
            ctx.symbol(t),
            ctx.render(t, a)
        ));
        if approval_call_exists(ctx.bundle, t) {
            preconditions.push(format!("Sufficient {} allowance approved", ctx.symbol(t)));
        }
    }
    match action.kind {
        ActionType::Swap => preconditions.push("Sufficient liquidity in the pool".to_string()),
        ActionType::Mint => preconditions.push("Minting conditions of the contract are met".to_string()),
        ActionType::Withdraw | ActionType::Unstake => {
            preconditions.push("Sufficient withdrawable balance held by the contract".to_string())
        }
        ActionType::Borrow => {
            preconditions.push("Sufficient collateral backing the borrow".to_string())
        }
        _ => {}
    }
    if preconditions.is_empty() {
        preconditions.push("Transaction executes successfully".to_string());
    }

    let mut result_parts = Vec::new();
    if let Some((t, a)) = &out {
        result_parts.push(format!("sends {} {}", ctx.render(t, a), ctx.symbol(t)));
    }
    if let Some((t, a)) = &inn {
        result_parts.push(format!("receives {} {}", ctx.render(t, a), ctx.symbol(t)));
    }
    let result = if result_parts.is_empty() {
        "No balance change for the user".to_string()
    } else {
        format!("User {}", result_parts.join(" and "))
    };

    StepAnnotation {
        flow_refs: action.member_flows.clone(),
        action_type: action.kind,
        intent,
        mechanism: mechanism_for(ctx, action),
        preconditions,
        result,
    }
}

/// Deterministic template rendering of a draft from board facts.
pub fn render_template_draft(
    board: &EvidenceBoard,
    macros: &[MacroAction],
    db: &SelectorDb,
    store: &CardStore,
    iteration: u32,
) -> ExplanationDraft {
    let bundle = board.bundle();
    let ctx = NameContext { bundle, store, db };

    let mut claims: Vec<AttributedClaim> = Vec::new();
    let clauses: Vec<ClauseParts> = macros.iter().map(|m| clause_for_macro(&ctx, m)).collect();
    if clauses.is_empty() {
        claims.push(AttributedClaim {
            text: "The transaction completed without token movements.".to_string(),
            citations: vec![],
            grounded_numbers: vec![],
        });
    } else if clauses.len() <= 2 {
        for c in clauses {
            claims.push(AttributedClaim {
                text: format!("You {}.", c.clause),
                citations: c.citations,
                grounded_numbers: c.numbers,
            });
        }
    } else {
        let mut citations = Vec::new();
        let mut numbers = Vec::new();
        let mut texts = Vec::new();
        for c in clauses {
            texts.push(c.clause);
            citations.extend(c.citations);
            numbers.extend(c.numbers);
        }
        let last = texts.pop().unwrap();
        citations.dedup();
        claims.push(AttributedClaim {
            text: format!("You {}, and {}.", texts.join(", "), last),
            citations,
            grounded_numbers: numbers,
        });
    }

    // Venue-split sentence for a multi-venue swap; only when the summary
    // still fits in three sentences with the closing net-outcome claim.
    if claims.len() == 1 {
        if let Some(swap) = macros.iter().find(|m| m.kind == ActionType::Swap) {
            if let Some(venue_claim) = venue_split_claim(&ctx, swap) {
                claims.push(venue_claim);
            }
        }
    }

    claims.push(net_outcome_claim(bundle));

    let steps: Vec<StepAnnotation> = macros.iter().map(|m| step_for_macro(&ctx, m)).collect();

    ExplanationDraft {
        summary: claims,
        steps,
        iteration,
        backend: DraftBackendKind::Template,
    }
}

fn validate_draft_shape(
    draft: &ExplanationDraft,
    bundle: &TransactionBundle,
    macros: &[MacroAction],
) -> Result<(), SynthError> {
    let n = draft.summary.len();
    if !(2..=3).contains(&n) {
        return Err(SynthError::BackendProtocol(format!(
            "summary must hold 2..=3 claims, got {n}"
        )));
    }
    let sentences: usize = draft.summary.iter().map(|c| count_sentences(&c.text)).sum();
    if !(2..=3).contains(&sentences) {
        return Err(SynthError::BackendProtocol(format!(
            "summary must span 2..=3 sentences, got {sentences}"
        )));
    }
    if draft.summary.iter().any(|c| c.text.trim().is_empty()) {
        return Err(SynthError::BackendProtocol("empty claim text".into()));
    }
    let valid_indices: std::collections::BTreeSet<u64> =
        bundle.log_indices().into_iter().collect();
    for (i, step) in draft.steps.iter().enumerate() {
        if step.flow_refs.is_empty() {
            return Err(SynthError::BackendProtocol(format!(
                "step {i} references no flows"
            )));
        }
        if step.flow_refs.iter().any(|r| !valid_indices.contains(r)) {
            return Err(SynthError::BackendProtocol(format!(
                "step {i} references an unknown log index"
            )));
        }
        if step.intent.trim().is_empty()
            || step.mechanism.trim().is_empty()
            || step.result.trim().is_empty()
            || step.preconditions.is_empty()
            || step.preconditions.iter().any(|p| p.trim().is_empty())
        {
            return Err(SynthError::BackendProtocol(format!(
                "step {i} has an empty attribute field"
            )));
        }
    }
    for m in macros {
        let covered = draft.steps.iter().any(|s| {
            s.flow_refs
                .iter()
                .any(|r| m.member_flows.contains(r))
        });
        if !covered {
            return Err(SynthError::Coverage(format!(
                "macro-action {} has no covering step",
                m.id
            )));
        }
    }
    Ok(())
}

fn external_draft(
    response: BackendResponse,
    bundle: &TransactionBundle,
    macros: &[MacroAction],
    iteration: u32,
) -> Result<ExplanationDraft, SynthError> {
    let draft = ExplanationDraft {
        summary: response
            .summary
            .into_iter()
            .map(|c| AttributedClaim {
                text: c.text,
                citations: c.citations,
                grounded_numbers: vec![],
            })
            .collect(),
        steps: response.steps,
        iteration,
        backend: DraftBackendKind::External,
    };
    match validate_draft_shape(&draft, bundle, macros) {
        Ok(()) => Ok(draft),
        // Shape violations in an external response are protocol errors, not
        // internal coverage bugs.
        Err(SynthError::Coverage(msg)) => Err(SynthError::BackendProtocol(msg)),
        Err(e) => Err(e),
    }
}

/// Produce a draft from the board and append it. One backend request per
/// call.
pub fn synthesize(
    board: &mut EvidenceBoard,
    macros: &[MacroAction],
    db: &SelectorDb,
    store: &CardStore,
    backend: &BackendChoice,
) -> Result<ExplanationDraft, SynthError> {
    let draft = match backend {
        BackendChoice::Template => {
            let d = render_template_draft(board, macros, db, store, 1);
            validate_draft_shape(&d, board.bundle(), macros)?;
            d
        }
        BackendChoice::External(transport) => {
            let request = BackendRequest {
                board_digest: build_digest(board, macros),
                macro_actions: macros.to_vec(),
                prior_draft: None,
                audit_findings: None,
                constraints: Constraints { max_sentences: 3 },
            };
            let response = transport.roundtrip(&request)?;
            external_draft(response, board.bundle(), macros, 1)?
        }
    };
    let citation = match backend {
        BackendChoice::Template => format!("template set {TEMPLATE_VERSION}"),
        BackendChoice::External(t) => format!("external backend {}", t.name()),
    };
    board
        .append(
            EvidencePayload::Draft(draft.clone()),
            Stage::Synthesizer,
            citation,
        )
        .expect("draft is not a bundle");
    Ok(draft)
}

/// Revise a draft after a revise verdict. The template backend re-renders
/// from board facts (recomputing every number and dropping anything the
/// board cannot name); the external backend receives the findings.
pub fn revise(
    board: &mut EvidenceBoard,
    macros: &[MacroAction],
    prior: &ExplanationDraft,
    report: &crate::audit::AuditReport,
    db: &SelectorDb,
    store: &CardStore,
    backend: &BackendChoice,
) -> Result<ExplanationDraft, SynthError> {
    if report.verdict != crate::audit::Verdict::Revise {
        return Err(SynthError::VerdictNotRevise(format!("{:?}", report.verdict)));
    }
    let findings: &[AuditFinding] = &report.findings;
    let iteration = prior.iteration + 1;
    let draft = match backend {
        BackendChoice::Template => {
            let d = render_template_draft(board, macros, db, store, iteration);
            validate_draft_shape(&d, board.bundle(), macros)?;
            d
        }
        BackendChoice::External(transport) => {
            let request = BackendRequest {
                board_digest: build_digest(board, macros),
                macro_actions: macros.to_vec(),
                prior_draft: Some(prior.clone()),
                audit_findings: Some(findings.to_vec()),
                constraints: Constraints { max_sentences: 3 },
            };
            let response = transport.roundtrip(&request)?;
            external_draft(response, board.bundle(), macros, iteration)?
        }
    };
    let citation = match backend {
        BackendChoice::Template => format!("template set {TEMPLATE_VERSION} (revision)"),
        BackendChoice::External(t) => format!("external backend {} (revision)", t.name()),
    };
    board
        .append(
            EvidencePayload::Draft(draft.clone()),
            Stage::Synthesizer,
            citation,
        )
        .expect("draft is not a bundle");
    Ok(draft)
}
