//! Safety auditor: adversarial grounding checks over a draft. Every number
//! must trace to board evidence, every named entity to a token, card, or
//! patch; every flow must be covered by a step; every stated direction must
//! agree with the flows. Verdicts gate the refine loop.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::board::{EvidenceBoard, EvidencePayload, Stage};
use crate::flow::{compute_net_balances, MacroAction};
use crate::knowledge::{CardStore, PatchDetail};
use crate::model::{Address, TransactionBundle};
use crate::synth::{render_amount, DraftBackendKind, ExplanationDraft, GroundedNumber};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    UngroundedNumber,
    UngroundedEntity,
    UncoveredFlow,
    Contradiction,
}

/// Where a finding points. Coverage gaps belong to the draft as a whole.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Locus {
    Claim(usize),
    Step(usize),
    Draft,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuditFinding {
    pub kind: FindingKind,
    pub locus: Locus,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Revise,
    Unresolved,
}

/// Checked/violated counters backing the grounding-rate metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuditStats {
    pub numbers_checked: u64,
    pub numbers_violated: u64,
    pub entities_checked: u64,
    pub entities_violated: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuditReport {
    pub verdict: Verdict,
    pub findings: Vec<AuditFinding>,
    pub iteration: u32,
    pub stats: AuditStats,
}

// --- numeric literal extraction ---------------------------------------------

/// A literal found in prose: byte offset and raw text (commas retained).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoundLiteral {
    pub offset: usize,
    pub text: String,
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

/// Extract standalone numeric literals: optional comma grouping, optional
/// fraction. Digits embedded in identifiers (`V3`, `0x1f98`) are not
/// literals.
pub fn extract_literals(text: &str) -> Vec<FoundLiteral> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if !bytes[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        // must start at a word boundary
        if i > 0 && (is_word_byte(bytes[i - 1]) || bytes[i - 1] == b'.') {
            while i < bytes.len() && is_word_byte(bytes[i]) {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        // comma-grouped thousands: ",ddd" repeated
        loop {
            if i < bytes.len() && bytes[i] == b','
                && i + 3 < bytes.len() + 1
                && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)
                && bytes.get(i + 2).is_some_and(u8::is_ascii_digit)
                && bytes.get(i + 3).is_some_and(u8::is_ascii_digit)
                && !bytes.get(i + 4).is_some_and(u8::is_ascii_digit)
            {
                i += 4;
            } else {
                break;
            }
        }
        // fraction
        if i < bytes.len() && bytes[i] == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)
        {
            i += 1;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
        }
        // a trailing letter glues the digits into an identifier
        if i < bytes.len() && (bytes[i].is_ascii_alphabetic() || bytes[i] == b'_') {
            while i < bytes.len() && is_word_byte(bytes[i]) {
                i += 1;
            }
            continue;
        }
        out.push(FoundLiteral {
            offset: start,
            text: text[start..i].to_string(),
        });
    }
    out
}

/// Scale a display literal to base units for a token with `decimals`.
/// Returns `None` when the fraction does not fit the token's precision.
pub fn scale_literal(literal: &str, decimals: u32) -> Option<BigUint> {
    let cleaned: String = literal.chars().filter(|c| *c != ',').collect();
    let (int_part, frac_part) = match cleaned.split_once('.') {
        Some((a, b)) => (a, b),
        None => (cleaned.as_str(), ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if frac_part.len() as u32 > decimals {
        return None;
    }
    let int_val = if int_part.is_empty() {
        BigUint::from(0u32)
    } else {
        BigUint::parse_bytes(int_part.as_bytes(), 10)?
    };
    let frac_val = if frac_part.is_empty() {
        BigUint::from(0u32)
    } else {
        BigUint::parse_bytes(frac_part.as_bytes(), 10)?
    };
    let scale = BigUint::from(10u32).pow(decimals);
    let frac_scale = BigUint::from(10u32).pow(decimals - frac_part.len() as u32);
    Some(int_val * scale + frac_val * frac_scale)
}

// --- grounding index ---------------------------------------------------------

struct GroundingIndex {
    by_token: BTreeMap<Address, BTreeSet<BigUint>>,
    tokenless: BTreeSet<BigUint>,
    symbol_to_tokens: BTreeMap<String, Vec<Address>>,
}

impl GroundingIndex {
    fn build(bundle: &TransactionBundle, macros: &[MacroAction]) -> Self {
        let mut by_token: BTreeMap<Address, BTreeSet<BigUint>> = BTreeMap::new();
        let mut tokenless: BTreeSet<BigUint> = BTreeSet::new();
        let mut add = |token: &Address, v: &BigUint| {
            by_token.entry(token.clone()).or_default().insert(v.clone());
            tokenless.insert(v.clone());
        };
        for t in &bundle.transfers {
            add(&t.token, &t.amount.0);
        }
        for n in compute_net_balances(&bundle.transfers, bundle.user()) {
            add(&n.token, &n.delta.magnitude().0);
        }
        for m in macros {
            for (token, a) in m.aggregate_in.iter().chain(m.aggregate_out.iter()) {
                add(token, &a.0);
            }
        }
        let mut symbol_to_tokens: BTreeMap<String, Vec<Address>> = BTreeMap::new();
        for (addr, info) in &bundle.tokens {
            symbol_to_tokens
                .entry(info.symbol.clone())
                .or_default()
                .push(addr.clone());
        }
        GroundingIndex {
            by_token,
            tokenless,
            symbol_to_tokens,
        }
    }

    fn grounded_for_token(&self, token: &Address, v: &BigUint) -> bool {
        self.by_token.get(token).is_some_and(|s| s.contains(v))
    }

    fn decimals(&self, bundle: &TransactionBundle, token: &Address) -> u32 {
        bundle.token_info(token).map(|i| i.decimals).unwrap_or(18)
    }
}

/// Word-bounded occurrences of `needle` in `haystack`.
fn word_spans(haystack: &str, needle: &str) -> Vec<(usize, usize)> {
    if needle.is_empty() {
        return vec![];
    }
    let hb = haystack.as_bytes();
    let mut spans = Vec::new();
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        let left_ok = start == 0 || !is_word_byte(hb[start - 1]);
        let right_ok = end >= hb.len() || !is_word_byte(hb[end]);
        if left_ok && right_ok {
            spans.push((start, end));
        }
        from = start + needle.len().max(1);
    }
    spans
}

/// Nearest token symbol mentioned after a literal within the same text unit.
fn nearest_symbol_after<'a>(
    text: &str,
    after: usize,
    symbols: impl Iterator<Item = &'a String>,
) -> Option<String> {
    let mut best: Option<(usize, String)> = None;
    for sym in symbols {
        for (start, _) in word_spans(text, sym) {
            if start >= after {
                match &best {
                    Some((b, _)) if *b <= start => {}
                    _ => best = Some((start, sym.clone())),
                }
            }
        }
    }
    best.map(|(_, s)| s)
}

struct NumberCheck<'a> {
    bundle: &'a TransactionBundle,
    index: &'a GroundingIndex,
    stats: AuditStats,
    findings: Vec<AuditFinding>,
}

impl<'a> NumberCheck<'a> {
    /// Check one text unit. When a declared-number list is present (template
    /// claims), literals are matched against declarations by occurrence;
    /// undeclared literals in template scaffolding are exempt. With no
    /// declarations (external drafts, step results), every literal must
    /// ground through parse-and-scale.
    fn check_unit(
        &mut self,
        text: &str,
        declared: Option<&[GroundedNumber]>,
        template_exempt: bool,
        locus: Locus,
    ) {
        let literals = extract_literals(text);
        let mut used: Vec<bool> = vec![false; declared.map_or(0, |d| d.len())];
        for lit in literals {
            let declared_hit = declared.and_then(|decl| {
                decl.iter()
                    .enumerate()
                    .find(|(i, g)| !used[*i] && g.literal == lit.text)
                    .map(|(i, _)| i)
            });
            if let (Some(decl), Some(idx)) = (declared, declared_hit) {
                used[idx] = true;
                self.stats.numbers_checked += 1;
                let g = &decl[idx];
                let ok = match &g.token {
                    Some(token) => {
                        let renders = render_amount(
                            &g.value,
                            self.index.decimals(self.bundle, token),
                        ) == g.literal;
                        renders && self.index.grounded_for_token(token, &g.value.0)
                    }
                    None => self.index.tokenless.contains(&g.value.0),
                };
                if !ok {
                    self.stats.numbers_violated += 1;
                    self.findings.push(AuditFinding {
                        kind: FindingKind::UngroundedNumber,
                        locus,
                        detail: format!(
                            "literal \"{}\" (base units {}) matches no transfer amount, net balance, or aggregate",
                            g.literal, g.value
                        ),
                    });
                }
                continue;
            }
            if template_exempt {
                // scaffolding numbers in template text are declared-exempt
                continue;
            }
            self.stats.numbers_checked += 1;
            let token_syms = self.index.symbol_to_tokens.keys();
            let ok = match nearest_symbol_after(
                text,
                lit.offset + lit.text.len(),
                token_syms,
            ) {
                Some(sym) => self
                    .index
                    .symbol_to_tokens
                    .get(&sym)
                    .into_iter()
                    .flatten()
                    .any(|token| {
                        scale_literal(&lit.text, self.index.decimals(self.bundle, token))
                            .map(|v| self.index.grounded_for_token(token, &v))
                            .unwrap_or(false)
                    }),
                None => {
                    let raw: String = lit.text.chars().filter(|c| *c != ',').collect();
                    !raw.contains('.')
                        && BigUint::parse_bytes(raw.as_bytes(), 10)
                            .map(|v| self.index.tokenless.contains(&v))
                            .unwrap_or(false)
                }
            };
            if !ok {
                self.stats.numbers_violated += 1;
                self.findings.push(AuditFinding {
                    kind: FindingKind::UngroundedNumber,
                    locus,
                    detail: format!(
                        "literal \"{}\" matches no transfer amount, net balance, or aggregate",
                        lit.text
                    ),
                });
            }
        }
    }
}

// --- entity grounding --------------------------------------------------------

fn bundle_addresses(bundle: &TransactionBundle) -> BTreeSet<Address> {
    let mut set = BTreeSet::new();
    for t in &bundle.transfers {
        set.insert(t.from.clone());
        set.insert(t.to.clone());
        set.insert(t.token.clone());
    }
    for node in bundle.root_call.preorder() {
        set.insert(node.caller.clone());
        set.insert(node.callee.clone());
    }
    set
}

/// Names the board can vouch for: token symbols, knowledge-card names and
/// protocols for addresses that appear in the bundle, and names carried by
/// patches.
fn known_names(
    bundle: &TransactionBundle,
    store: &CardStore,
    board: &EvidenceBoard,
) -> Vec<String> {
    let addresses = bundle_addresses(bundle);
    let mut names: BTreeSet<String> = BTreeSet::new();
    for info in bundle.tokens.values() {
        names.insert(info.symbol.clone());
    }
    for card in store.cards() {
        if addresses.contains(&card.address) {
            names.insert(card.name.clone());
            names.insert(card.protocol.clone());
        }
    }
    for patch in board.patches() {
        match &patch.structured {
            Some(PatchDetail::Card(card)) => {
                names.insert(card.name.clone());
                names.insert(card.protocol.clone());
            }
            Some(PatchDetail::SelectorEntry(entry)) => {
                names.insert(entry.human_name.clone());
            }
            None => {}
        }
    }
    names.remove("");
    let mut sorted: Vec<String> = names.into_iter().collect();
    // longest first so multi-word names consume their parts
    sorted.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    sorted
}

fn sentence_starts(text: &str) -> BTreeSet<usize> {
    let bytes = text.as_bytes();
    let mut starts = BTreeSet::new();
    let mut expecting = true;
    for (i, b) in bytes.iter().enumerate() {
        if expecting && (b.is_ascii_alphanumeric()) {
            starts.insert(i);
            expecting = false;
        }
        if matches!(b, b'.' | b'!' | b'?')
            && !bytes.get(i + 1).is_some_and(u8::is_ascii_digit)
        {
            expecting = true;
        }
    }
    starts
}

struct EntityCheck {
    stats: AuditStats,
    findings: Vec<AuditFinding>,
}

impl EntityCheck {
    fn check_unit(&mut self, text: &str, known: &[String], locus: Locus) {
        let mut masked = text.to_string();

        // consume addresses (full and abbreviated forms)
        let mut consume_spans: Vec<(usize, usize)> = Vec::new();
        let bytes = text.as_bytes();
        let mut i = 0;
        while i + 1 < bytes.len() {
            if bytes[i] == b'0' && bytes[i + 1] == b'x' {
                let mut j = i + 2;
                while j < bytes.len()
                    && (bytes[j].is_ascii_hexdigit() || bytes[j] == b'.')
                {
                    j += 1;
                }
                consume_spans.push((i, j));
                i = j;
            } else {
                i += 1;
            }
        }
        let mut matched = 0u64;
        for name in known {
            for (s, e) in word_spans(&masked.clone(), name) {
                consume_spans.push((s, e));
                matched += 1;
            }
            mask(&mut masked, &consume_spans);
        }
        mask(&mut masked, &consume_spans);

        let starts = sentence_starts(text);
        let mb = masked.clone();
        let mut pos = 0;
        let bytes = mb.as_bytes();
        while pos < bytes.len() {
            if !(bytes[pos] as char).is_ascii_alphabetic() {
                pos += 1;
                continue;
            }
            let start = pos;
            while pos < bytes.len() && is_word_byte(bytes[pos]) {
                pos += 1;
            }
            let word = &mb[start..pos];
            let first_upper = word.chars().next().is_some_and(|c| c.is_ascii_uppercase());
            let all_caps = word.len() >= 2
                && word.chars().all(|c| c.is_ascii_uppercase() || c.is_ascii_digit());
            let candidate = (first_upper && !starts.contains(&start)) || (all_caps && !starts.contains(&start));
            if candidate {
                self.stats.entities_checked += 1;
                self.stats.entities_violated += 1;
                self.findings.push(AuditFinding {
                    kind: FindingKind::UngroundedEntity,
                    locus,
                    detail: format!(
                        "name \"{word}\" matches no token symbol, knowledge card, or patch"
                    ),
                });
            }
        }
        self.stats.entities_checked += matched;
    }
}

fn mask(text: &mut String, spans: &[(usize, usize)]) {
    let mut bytes = text.clone().into_bytes();
    for (s, e) in spans {
        for b in bytes.iter_mut().take(*e).skip(*s) {
            if b.is_ascii() {
                *b = b' ';
            }
        }
    }
    *text = String::from_utf8(bytes).unwrap_or_else(|_| text.clone());
}

// --- direction words ----------------------------------------------------------

const RECEIVE_WORDS: &[&str] = &[
    "receives", "received", "receive", "receiving", "gains", "gained", "earns", "earned",
];
const SEND_WORDS: &[&str] = &[
    "sends", "sent", "send", "sending", "pays", "paid", "spends", "spent",
];

fn has_direction_word(text: &str, words: &[&str]) -> bool {
    let lower = text.to_ascii_lowercase();
    words.iter().any(|w| !word_spans(&lower, w).is_empty())
}

/// Run the four grounding checks over the latest draft and append the
/// report to the board.
///
/// Precondition: `draft` is the most recent draft entry on `board`; the
/// pipeline upholds this.
pub fn audit(
    board: &mut EvidenceBoard,
    draft: &ExplanationDraft,
    macros: &[MacroAction],
    store: &CardStore,
) -> AuditReport {
    let report = {
        let bundle = board.bundle();
        let index = GroundingIndex::build(bundle, macros);
        let template = draft.backend == DraftBackendKind::Template;

        // 1: number grounding
        let mut numbers = NumberCheck {
            bundle,
            index: &index,
            stats: AuditStats::default(),
            findings: Vec::new(),
        };
        for (i, claim) in draft.summary.iter().enumerate() {
            numbers.check_unit(
                &claim.text,
                Some(&claim.grounded_numbers),
                template,
                Locus::Claim(i),
            );
        }
        for (i, step) in draft.steps.iter().enumerate() {
            numbers.check_unit(&step.result, None, false, Locus::Step(i));
        }

        // 2: entity grounding
        let known = known_names(bundle, store, board);
        let mut entities = EntityCheck {
            stats: AuditStats::default(),
            findings: Vec::new(),
        };
        for (i, claim) in draft.summary.iter().enumerate() {
            entities.check_unit(&claim.text, &known, Locus::Claim(i));
        }
        for (i, step) in draft.steps.iter().enumerate() {
            entities.check_unit(&step.mechanism, &known, Locus::Step(i));
            entities.check_unit(&step.result, &known, Locus::Step(i));
        }

        // 3: flow coverage
        let mut findings = Vec::new();
        findings.extend(numbers.findings);
        findings.extend(entities.findings);
        let covered: BTreeSet<u64> = draft
            .steps
            .iter()
            .flat_map(|s| s.flow_refs.iter().copied())
            .collect();
        for idx in bundle.log_indices() {
            if !covered.contains(&idx) {
                findings.push(AuditFinding {
                    kind: FindingKind::UncoveredFlow,
                    locus: Locus::Draft,
                    detail: format!("flow at log index {idx} is not covered by any step"),
                });
            }
        }

        // 4: direction consistency
        let user = bundle.user();
        for (i, step) in draft.steps.iter().enumerate() {
            let flows: Vec<_> = step
                .flow_refs
                .iter()
                .filter_map(|r| bundle.transfer_by_log_index(*r))
                .collect();
            let any_in = flows.iter().any(|t| &t.to == user);
            let any_out = flows.iter().any(|t| &t.from == user);
            if has_direction_word(&step.result, RECEIVE_WORDS) && !any_in {
                findings.push(AuditFinding {
                    kind: FindingKind::Contradiction,
                    locus: Locus::Step(i),
                    detail: format!(
                        "step {i} claims the user receives tokens but no referenced flow pays the user"
                    ),
                });
            }
            if has_direction_word(&step.result, SEND_WORDS) && !any_out {
                findings.push(AuditFinding {
                    kind: FindingKind::Contradiction,
                    locus: Locus::Step(i),
                    detail: format!(
                        "step {i} claims the user sends tokens but no referenced flow spends from the user"
                    ),
                });
            }
        }

        let stats = AuditStats {
            numbers_checked: numbers.stats.numbers_checked,
            numbers_violated: numbers.stats.numbers_violated,
            entities_checked: entities.stats.entities_checked,
            entities_violated: entities.stats.entities_violated,
        };
        let verdict = if findings.is_empty() {
            Verdict::Pass
        } else {
            Verdict::Revise
        };
        AuditReport {
            verdict,
            findings,
            iteration: draft.iteration,
            stats,
        }
    };

    board
        .append(
            EvidencePayload::Audit(report.clone()),
            Stage::Auditor,
            "grounding audit",
        )
        .expect("audit report is not a bundle");
    report
}
