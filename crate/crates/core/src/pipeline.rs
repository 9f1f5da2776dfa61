//! End-to-end pipeline: board construction, profiling, investigation,
//! grouping, synthesis, and the bounded audit/refine loop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{audit, AuditReport, Verdict};
use crate::board::{BoardError, EvidenceBoard};
use crate::explorer::HttpCache;
use crate::flow::{build_flow_graph, group_macro_actions, MacroAction};
use crate::ingest::EndpointConfig;
use crate::knowledge::{investigate, CardStore, InvestigatorContext, SelectorDb};
use crate::model::TransactionBundle;
use crate::profiler::{profile, ProfileConfig};
use crate::synth::{revise, synthesize, BackendChoice, ExplanationDraft, SynthError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Board(#[from] BoardError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// Configuration for one pipeline run.
pub struct PipelineConfig {
    pub backend: BackendChoice,
    /// Maximum audit passes before the loop gives up with `unresolved`.
    pub max_refine: u32,
    pub profile: ProfileConfig,
    pub selector_db: SelectorDb,
    pub card_store: CardStore,
    pub endpoint: EndpointConfig,
    pub cache: Option<HttpCache>,
}

impl PipelineConfig {
    pub fn offline_template(selector_db: SelectorDb, card_store: CardStore) -> Self {
        PipelineConfig {
            backend: BackendChoice::Template,
            max_refine: 3,
            profile: ProfileConfig::default(),
            selector_db,
            card_store,
            endpoint: EndpointConfig::offline(),
            cache: None,
        }
    }
}

/// Final product of a run: the surviving draft, the gating report (`pass`
/// or `unresolved`, never `revise`), and the full board history.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FinalExplanation {
    pub draft: ExplanationDraft,
    pub report: AuditReport,
    pub board: EvidenceBoard,
    pub macro_actions: Vec<MacroAction>,
}

/// Run the full pipeline over a validated bundle.
///
/// Stage order: board → profile → investigate → group → synthesize → audit,
/// then revise/audit until the first pass or `max_refine` audits. The loop
/// never exceeds `max_refine` audit calls regardless of backend behavior;
/// surviving findings come back under an `unresolved` verdict.
pub fn run_pipeline(
    bundle: TransactionBundle,
    cfg: &PipelineConfig,
) -> Result<FinalExplanation, PipelineError> {
    if cfg.max_refine < 1 {
        return Err(PipelineError::InvalidConfig(
            "max_refine must be at least 1".into(),
        ));
    }

    let mut board = EvidenceBoard::new(bundle)?;
    let outcome = profile(&mut board, &cfg.selector_db, &cfg.card_store, &cfg.profile);

    let ctx = InvestigatorContext {
        endpoint: &cfg.endpoint,
        db: &cfg.selector_db,
        store: &cfg.card_store,
        cache: cfg.cache.as_ref(),
    };
    investigate(&mut board, &outcome.hypothesis.flags, &ctx);

    let graph = build_flow_graph(board.bundle());
    let macros = group_macro_actions(board.bundle(), &graph, &outcome.classification);

    let mut draft = synthesize(
        &mut board,
        &macros,
        &cfg.selector_db,
        &cfg.card_store,
        &cfg.backend,
    )?;

    let mut audits = 0u32;
    loop {
        let report = audit(&mut board, &draft, &macros, &cfg.card_store);
        audits += 1;
        match report.verdict {
            Verdict::Pass => {
                return Ok(FinalExplanation {
                    draft,
                    report,
                    board,
                    macro_actions: macros,
                });
            }
            Verdict::Revise if audits < cfg.max_refine => {
                draft = revise(
                    &mut board,
                    &macros,
                    &draft,
                    &report,
                    &cfg.selector_db,
                    &cfg.card_store,
                    &cfg.backend,
                )?;
            }
            _ => {
                // Iteration bound reached: surface the surviving findings
                // under an unresolved verdict instead of looping further.
                let unresolved = AuditReport {
                    verdict: Verdict::Unresolved,
                    findings: report.findings,
                    iteration: report.iteration,
                    stats: report.stats,
                };
                return Ok(FinalExplanation {
                    draft,
                    report: unresolved,
                    board,
                    macro_actions: macros,
                });
            }
        }
    }
}
