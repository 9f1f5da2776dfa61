//! txlens-core: a transaction-explanation engine that turns chain-native
//! Ethereum data (metadata, call trace, token transfers, net balance
//! changes) into grounded natural-language summaries with five-attribute
//! step annotations.
//!
//! The pipeline runs Profiler → Investigator → Synthesizer → Auditor over a
//! shared append-only Evidence Board, with a bounded audit/refine loop.
//! Every number and named entity in the output is checked against board
//! evidence before a verdict of `pass` is issued.

pub use num_bigint;

pub mod audit;
pub mod board;
pub mod explorer;
pub mod flow;
pub mod harness;
pub mod hash;
pub mod ingest;
pub mod knowledge;
pub mod model;
pub mod pipeline;
pub mod profiler;
pub mod rpc;
pub mod synth;

pub use audit::{audit, AuditFinding, AuditReport, AuditStats, FindingKind, Locus, Verdict};
pub use board::{BoardError, EntryKind, EvidenceBoard, EvidenceEntry, EvidencePayload, Stage};
pub use explorer::{fetch_abi, AbiError, HttpCache};
pub use flow::{
    build_flow_graph, compute_net_balances, group_macro_actions, verify_conservation,
    ConservationReport, FlowEdge, MacroAction, TokenFlowGraph,
};
pub use harness::{
    emit_report, load_corpus, score_action_types, score_explanation, CorpusPair, EvalReport,
    GoldAnnotation, HarnessError, PerTxRow, ReportFormat,
};
pub use ingest::{
    decode_transfer_logs, extract_native_transfers, load_fixture, load_fixture_str,
    EndpointConfig, IngestError, RawLog,
};
pub use knowledge::{
    investigate, CardKind, CardStore, InvestigatorContext, KnowledgeCard, KnowledgeError,
    KnowledgePatch, PatchSource, SelectorDb, SelectorEntry, SelectorSource,
};
pub use model::{
    Address, Amount, CallKind, CallNode, Delta, ModelError, NetBalanceChange, Selector,
    TokenInfo, TokenStandard, TokenTransfer, TransactionBundle, TxHash, TxMetadata, TxStatus,
};
pub use pipeline::{run_pipeline, FinalExplanation, PipelineConfig, PipelineError};
pub use profiler::{
    classify_flows, profile, ActionType, Confidence, FlagKind, FlagLocation, FlagSubject,
    FlowClassification, Hypothesis, ProfileConfig, UncertaintyFlag,
};
pub use rpc::{fetch_transaction, FetchError, JsonRpcClient};
pub use synth::{
    render_amount, render_amount_for, synthesize, AttributedClaim, BackendChoice,
    BackendRequest, BackendResponse, CmdTransport, DraftBackendKind, ExplanationDraft,
    ExternalTransport, GroundedNumber, HttpTransport, StepAnnotation, SynthError,
};
