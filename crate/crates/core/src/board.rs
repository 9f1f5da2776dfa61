//! The Evidence Board: an append-only, provenance-tagged record shared by
//! every pipeline stage. Entry 0 is always the transaction bundle; later
//! entries are hypotheses, flags, patches, drafts, and audit reports.

use serde::de::Error as DeError;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::audit::AuditReport;
use crate::knowledge::KnowledgePatch;
use crate::model::{ModelError, TransactionBundle, TxHash};
use crate::profiler::{Hypothesis, UncertaintyFlag};
use crate::synth::ExplanationDraft;

#[derive(Debug, Error)]
pub enum BoardError {
    #[error("a board holds exactly one bundle entry; refusing a second")]
    DuplicateBundle,
    #[error(transparent)]
    InvalidBundle(#[from] ModelError),
    #[error("board json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Bundle,
    Hypothesis,
    Flag,
    Patch,
    Draft,
    Audit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingestion,
    Profiler,
    Investigator,
    Synthesizer,
    Auditor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvidencePayload {
    Bundle(Box<TransactionBundle>),
    Hypothesis(Hypothesis),
    Flag(UncertaintyFlag),
    Patch(KnowledgePatch),
    Draft(ExplanationDraft),
    Audit(AuditReport),
}

impl EvidencePayload {
    pub fn kind(&self) -> EntryKind {
        match self {
            EvidencePayload::Bundle(_) => EntryKind::Bundle,
            EvidencePayload::Hypothesis(_) => EntryKind::Hypothesis,
            EvidencePayload::Flag(_) => EntryKind::Flag,
            EvidencePayload::Patch(_) => EntryKind::Patch,
            EvidencePayload::Draft(_) => EntryKind::Draft,
            EvidencePayload::Audit(_) => EntryKind::Audit,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceEntry {
    pub id: u64,
    pub produced_by: Stage,
    pub source_citation: String,
    pub payload: EvidencePayload,
}

impl EvidenceEntry {
    pub fn kind(&self) -> EntryKind {
        self.payload.kind()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct EntryRepr {
    id: u64,
    kind: EntryKind,
    produced_by: Stage,
    source_citation: String,
    payload: serde_json::Value,
}

impl Serialize for EvidenceEntry {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let payload = match &self.payload {
            EvidencePayload::Bundle(b) => serde_json::to_value(b),
            EvidencePayload::Hypothesis(h) => serde_json::to_value(h),
            EvidencePayload::Flag(f) => serde_json::to_value(f),
            EvidencePayload::Patch(p) => serde_json::to_value(p),
            EvidencePayload::Draft(d) => serde_json::to_value(d),
            EvidencePayload::Audit(a) => serde_json::to_value(a),
        }
        .map_err(serde::ser::Error::custom)?;
        EntryRepr {
            id: self.id,
            kind: self.kind(),
            produced_by: self.produced_by,
            source_citation: self.source_citation.clone(),
            payload,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for EvidenceEntry {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = EntryRepr::deserialize(d)?;
        let payload = match repr.kind {
            EntryKind::Bundle => serde_json::from_value(repr.payload)
                .map(|b| EvidencePayload::Bundle(Box::new(b))),
            EntryKind::Hypothesis => {
                serde_json::from_value(repr.payload).map(EvidencePayload::Hypothesis)
            }
            EntryKind::Flag => serde_json::from_value(repr.payload).map(EvidencePayload::Flag),
            EntryKind::Patch => serde_json::from_value(repr.payload).map(EvidencePayload::Patch),
            EntryKind::Draft => serde_json::from_value(repr.payload).map(EvidencePayload::Draft),
            EntryKind::Audit => serde_json::from_value(repr.payload).map(EvidencePayload::Audit),
        }
        .map_err(DeError::custom)?;
        Ok(EvidenceEntry {
            id: repr.id,
            produced_by: repr.produced_by,
            source_citation: repr.source_citation,
            payload,
        })
    }
}

/// Append-only evidence record for one transaction analysis. Single-writer:
/// one stage mutates at a time; snapshots may be shared read-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvidenceBoard {
    pub tx_hash: TxHash,
    entries: Vec<EvidenceEntry>,
}

impl EvidenceBoard {
    /// Build a board around a validated bundle; the bundle becomes entry 0.
    pub fn new(bundle: TransactionBundle) -> Result<Self, BoardError> {
        bundle.validate()?;
        let tx_hash = bundle.metadata.hash.clone();
        let citation = format!("on-chain data for {tx_hash}");
        Ok(EvidenceBoard {
            tx_hash,
            entries: vec![EvidenceEntry {
                id: 0,
                produced_by: Stage::Ingestion,
                source_citation: citation,
                payload: EvidencePayload::Bundle(Box::new(bundle)),
            }],
        })
    }

    /// Append a non-bundle entry; returns the new id (previous max + 1).
    pub fn append(
        &mut self,
        payload: EvidencePayload,
        produced_by: Stage,
        source_citation: impl Into<String>,
    ) -> Result<u64, BoardError> {
        if payload.kind() == EntryKind::Bundle {
            return Err(BoardError::DuplicateBundle);
        }
        let id = self.entries.len() as u64;
        self.entries.push(EvidenceEntry {
            id,
            produced_by,
            source_citation: source_citation.into(),
            payload,
        });
        Ok(id)
    }

    /// All entries of one kind, in id order.
    pub fn query(&self, kind: EntryKind) -> Vec<&EvidenceEntry> {
        self.entries.iter().filter(|e| e.kind() == kind).collect()
    }

    pub fn entries(&self) -> &[EvidenceEntry] {
        &self.entries
    }

    pub fn entry(&self, id: u64) -> Option<&EvidenceEntry> {
        self.entries.get(id as usize)
    }

    pub fn bundle(&self) -> &TransactionBundle {
        match &self.entries[0].payload {
            EvidencePayload::Bundle(b) => b,
            _ => unreachable!("entry 0 is always the bundle"),
        }
    }

    pub fn hypothesis(&self) -> Option<&Hypothesis> {
        self.entries.iter().rev().find_map(|e| match &e.payload {
            EvidencePayload::Hypothesis(h) => Some(h),
            _ => None,
        })
    }

    pub fn flags(&self) -> Vec<&UncertaintyFlag> {
        self.entries
            .iter()
            .filter_map(|e| match &e.payload {
                EvidencePayload::Flag(f) => Some(f),
                _ => None,
            })
            .collect()
    }

    pub fn patches(&self) -> Vec<&KnowledgePatch> {
        self.entries
            .iter()
            .filter_map(|e| match &e.payload {
                EvidencePayload::Patch(p) => Some(p),
                _ => None,
            })
            .collect()
    }

    pub fn latest_draft(&self) -> Option<&ExplanationDraft> {
        self.entries.iter().rev().find_map(|e| match &e.payload {
            EvidencePayload::Draft(d) => Some(d),
            _ => None,
        })
    }

    pub fn audits(&self) -> Vec<&AuditReport> {
        self.entries
            .iter()
            .filter_map(|e| match &e.payload {
                EvidencePayload::Audit(a) => Some(a),
                _ => None,
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String, BoardError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, BoardError> {
        Ok(serde_json::from_str(text)?)
    }
}
