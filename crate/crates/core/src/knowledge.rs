//! Selector database, protocol knowledge cards, and the Investigator that
//! turns uncertainty flags into citable knowledge patches.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::board::{EvidenceBoard, EvidencePayload, Stage};
use crate::explorer::{fetch_abi, HttpCache};
use crate::hash::function_selector;
use crate::ingest::EndpointConfig;
use crate::model::{Address, Selector};
use crate::profiler::{FlagKind, FlagSubject, UncertaintyFlag};

/// Signature lines compiled into the binary; parsed into a [`SelectorDb`]
/// at load time so every selector is computed, never transcribed.
pub const BUILTIN_SIGNATURES: &str = include_str!("../data/builtin_signatures.txt");

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("malformed signature {0:?}: {1}")]
    MalformedSignature(String, String),
    #[error("card store: {0}")]
    CardStore(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorSource {
    Builtin,
    Explorer,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SelectorEntry {
    pub selector: Selector,
    pub canonical_signature: String,
    pub human_name: String,
    pub source: SelectorSource,
}

/// Validate a canonical signature: identifier, parenthesized comma-separated
/// type list, no spaces. Nested parentheses cover tuple types.
pub fn validate_canonical_signature(sig: &str) -> Result<(), KnowledgeError> {
    let err = |reason: &str| {
        Err(KnowledgeError::MalformedSignature(
            sig.to_string(),
            reason.to_string(),
        ))
    };
    if sig.contains(char::is_whitespace) {
        return err("whitespace is not allowed in canonical form");
    }
    let open = match sig.find('(') {
        Some(i) => i,
        None => return err("missing parameter list"),
    };
    if open == 0 {
        return err("missing function name");
    }
    let name = &sig[..open];
    let mut chars = name.chars();
    let first = chars.next().unwrap();
    if !(first.is_ascii_alphabetic() || first == '_' || first == '$') {
        return err("function name must start with a letter");
    }
    if !chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '$') {
        return err("function name contains invalid characters");
    }
    if !sig.ends_with(')') {
        return err("signature must end with ')'");
    }
    let mut depth = 0i32;
    for c in sig[open..].chars() {
        match c {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return err("unbalanced parentheses");
                }
            }
            ',' | '[' | ']' => {}
            c if c.is_ascii_alphanumeric() => {}
            _ => return err("invalid character in parameter list"),
        }
    }
    if depth != 0 {
        return err("unbalanced parentheses");
    }
    Ok(())
}

/// Recorded selector collision: same 4 bytes, different signatures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SelectorConflict {
    pub selector: Selector,
    pub existing: String,
    pub incoming: String,
}

/// In-memory selector database. Conflicting signatures are both retained;
/// lookups return the earliest registration.
#[derive(Debug, Clone, Default)]
pub struct SelectorDb {
    by_selector: BTreeMap<Selector, Vec<SelectorEntry>>,
    conflicts: Vec<SelectorConflict>,
}

impl SelectorDb {
    pub fn new() -> Self {
        Self::default()
    }

    /// Database preloaded with the builtin signature file.
    pub fn builtin() -> Self {
        let mut db = Self::new();
        for line in BUILTIN_SIGNATURES.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            db.register(line, None, SelectorSource::Builtin)
                .expect("builtin signature file must be canonical");
        }
        db
    }

    /// Register a signature. The selector is computed from the signature.
    /// Registering the same signature twice is a no-op returning the existing
    /// entry; a different signature mapping to the same selector is retained
    /// alongside and recorded as a conflict.
    pub fn register(
        &mut self,
        canonical_signature: &str,
        human_name: Option<&str>,
        source: SelectorSource,
    ) -> Result<SelectorEntry, KnowledgeError> {
        validate_canonical_signature(canonical_signature)?;
        let selector = function_selector(canonical_signature);
        let name = match human_name {
            Some(n) => n.to_string(),
            None => canonical_signature[..canonical_signature.find('(').unwrap()].to_string(),
        };
        let bucket = self.by_selector.entry(selector).or_default();
        if let Some(existing) = bucket
            .iter()
            .find(|e| e.canonical_signature == canonical_signature)
        {
            return Ok(existing.clone());
        }
        if let Some(first) = bucket.first() {
            self.conflicts.push(SelectorConflict {
                selector,
                existing: first.canonical_signature.clone(),
                incoming: canonical_signature.to_string(),
            });
        }
        let entry = SelectorEntry {
            selector,
            canonical_signature: canonical_signature.to_string(),
            human_name: name,
            source,
        };
        bucket.push(entry.clone());
        Ok(entry)
    }

    /// Earliest-registered entry for a selector, if known.
    pub fn lookup(&self, selector: Selector) -> Option<&SelectorEntry> {
        self.by_selector.get(&selector).and_then(|v| v.first())
    }

    pub fn conflicts(&self) -> &[SelectorConflict] {
        &self.conflicts
    }

    pub fn entries(&self) -> impl Iterator<Item = &SelectorEntry> {
        self.by_selector.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.by_selector.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_selector.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CardKind {
    Router,
    Pool,
    Token,
    LendingPool,
    Vault,
    Staking,
    Unknown,
}

/// Curated description of a contract address; the local stand-in for live
/// protocol documentation retrieval.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct KnowledgeCard {
    pub address: Address,
    pub name: String,
    pub protocol: String,
    pub kind: CardKind,
    #[serde(default)]
    pub notes: String,
    pub source_label: String,
}

/// Immutable-after-load store of knowledge cards, one per address.
#[derive(Debug, Clone, Default)]
pub struct CardStore {
    by_address: BTreeMap<Address, KnowledgeCard>,
}

impl CardStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, card: KnowledgeCard) -> Result<(), KnowledgeError> {
        if self.by_address.contains_key(&card.address) {
            return Err(KnowledgeError::CardStore(format!(
                "duplicate card for address {}",
                card.address
            )));
        }
        self.by_address.insert(card.address.clone(), card);
        Ok(())
    }

    /// Load every `*.json` card file from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self, KnowledgeError> {
        let mut store = Self::new();
        if !dir.exists() {
            return Ok(store);
        }
        let mut paths: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let text = fs::read_to_string(&path)?;
            let card: KnowledgeCard = serde_json::from_str(&text).map_err(|e| {
                KnowledgeError::CardStore(format!("{}: {e}", path.display()))
            })?;
            store.insert(card)?;
        }
        Ok(store)
    }

    pub fn lookup(&self, address: &Address) -> Option<&KnowledgeCard> {
        self.by_address.get(address)
    }

    pub fn cards(&self) -> impl Iterator<Item = &KnowledgeCard> {
        self.by_address.values()
    }

    pub fn len(&self) -> usize {
        self.by_address.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_address.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSource {
    SelectorDb,
    ExplorerAbi,
    KnowledgeCard,
    /// Retrieval failed on every route; the flag stays visible as an
    /// unresolved patch rather than disappearing.
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum PatchDetail {
    SelectorEntry(SelectorEntry),
    Card(KnowledgeCard),
}

/// A retrieved, citable fact resolving (or failing to resolve) one
/// uncertainty flag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct KnowledgePatch {
    pub subject: FlagSubject,
    pub claim: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structured: Option<PatchDetail>,
    pub source: PatchSource,
    pub source_label: String,
    pub retrieved_at: u64,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn unresolved_patch(subject: FlagSubject) -> KnowledgePatch {
    KnowledgePatch {
        subject,
        claim: "unresolved".to_string(),
        structured: None,
        source: PatchSource::None,
        source_label: "none".to_string(),
        retrieved_at: now_unix(),
    }
}

/// Retrieval context handed to [`investigate`].
pub struct InvestigatorContext<'a> {
    pub endpoint: &'a EndpointConfig,
    pub db: &'a SelectorDb,
    pub store: &'a CardStore,
    pub cache: Option<&'a HttpCache>,
}

fn resolve_selector_flag(
    ctx: &InvestigatorContext<'_>,
    selector: Selector,
) -> KnowledgePatch {
    if let Some(entry) = ctx.db.lookup(selector) {
        return KnowledgePatch {
            subject: FlagSubject::Selector(selector),
            claim: format!("decodes to {}", entry.canonical_signature),
            structured: Some(PatchDetail::SelectorEntry(entry.clone())),
            source: PatchSource::SelectorDb,
            source_label: "builtin selector database".to_string(),
            retrieved_at: now_unix(),
        };
    }
    // Not in the database: only a verified ABI can still decode it. The flag
    // carries no contract address, so this route needs one recorded on the
    // flag description path; degrade when unavailable.
    unresolved_patch(FlagSubject::Selector(selector))
}

fn resolve_contract_flag(
    ctx: &InvestigatorContext<'_>,
    address: &Address,
) -> KnowledgePatch {
    if let Some(card) = ctx.store.lookup(address) {
        return KnowledgePatch {
            subject: FlagSubject::Address(address.clone()),
            claim: format!("identified as {} ({})", card.name, card.protocol),
            structured: Some(PatchDetail::Card(card.clone())),
            source: PatchSource::KnowledgeCard,
            source_label: card.source_label.clone(),
            retrieved_at: now_unix(),
        };
    }
    match fetch_abi(ctx.endpoint, ctx.cache, address) {
        Ok(entries) if !entries.is_empty() => KnowledgePatch {
            subject: FlagSubject::Address(address.clone()),
            claim: format!(
                "verified contract with {} known function signatures",
                entries.len()
            ),
            structured: Some(PatchDetail::SelectorEntry(entries[0].clone())),
            source: PatchSource::ExplorerAbi,
            source_label: "explorer verified ABI".to_string(),
            retrieved_at: now_unix(),
        },
        Ok(_) | Err(_) => unresolved_patch(FlagSubject::Address(address.clone())),
    }
}

/// Resolve each flag in order, appending one patch per flag to the board.
/// Retrieval failures degrade to unresolved patches; flags are never removed.
pub fn investigate(
    board: &mut EvidenceBoard,
    flags: &[UncertaintyFlag],
    ctx: &InvestigatorContext<'_>,
) -> Vec<KnowledgePatch> {
    let mut patches = Vec::with_capacity(flags.len());
    for flag in flags {
        let patch = match (&flag.kind, &flag.subject) {
            (FlagKind::UnknownSelector, FlagSubject::Selector(sel)) => {
                let mut p = resolve_selector_flag(ctx, *sel);
                // A selector absent from the builtin db may still resolve
                // through a verified ABI of the called contract.
                if p.source == PatchSource::None {
                    if let Some(addr) = flag.context_address.as_ref() {
                        if let Ok(entries) = fetch_abi(ctx.endpoint, ctx.cache, addr) {
                            if let Some(hit) = entries.iter().find(|e| e.selector == *sel) {
                                p = KnowledgePatch {
                                    subject: FlagSubject::Selector(*sel),
                                    claim: format!("decodes to {}", hit.canonical_signature),
                                    structured: Some(PatchDetail::SelectorEntry(hit.clone())),
                                    source: PatchSource::ExplorerAbi,
                                    source_label: "explorer verified ABI".to_string(),
                                    retrieved_at: now_unix(),
                                };
                            }
                        }
                    }
                }
                p
            }
            (FlagKind::UnverifiedContract, FlagSubject::Address(addr)) => {
                resolve_contract_flag(ctx, addr)
            }
            (_, subject) => unresolved_patch(subject.clone()),
        };
        let label = patch.source_label.clone();
        board
            .append(
                EvidencePayload::Patch(patch.clone()),
                Stage::Investigator,
                label,
            )
            .expect("patch append cannot duplicate the bundle");
        patches.push(patch);
    }
    patches
}
