//! Evaluation harness: gold-annotated corpus loading, per-transaction
//! scoring, and report emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::Verdict;
use crate::flow::MacroAction;
use crate::ingest::{load_fixture, IngestError};
use crate::model::TransactionBundle;
use crate::pipeline::FinalExplanation;
use crate::profiler::ActionType;
use crate::synth::{count_sentences, StepAnnotation};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("schema error in {file}, field {field}: {reason}")]
    Schema {
        file: String,
        field: String,
        reason: String,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("explanation and gold annotation refer to different fixtures: {expected} vs {got}")]
    MismatchedFixture { expected: String, got: String },
}

/// Expert annotation paired with a fixture: per-step labels, the macro-action
/// grouping, and a short gold summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GoldAnnotation {
    pub fixture: String,
    pub steps: Vec<StepAnnotation>,
    pub macro_actions: Vec<MacroAction>,
    pub summary: String,
}

#[derive(Debug, Clone)]
pub struct CorpusPair {
    pub name: String,
    pub fixture_path: PathBuf,
    pub bundle: TransactionBundle,
    pub gold: GoldAnnotation,
}

fn validate_gold(
    file: &str,
    gold: &GoldAnnotation,
    bundle: &TransactionBundle,
) -> Result<(), HarnessError> {
    let schema = |field: &str, reason: String| HarnessError::Schema {
        file: file.to_string(),
        field: field.to_string(),
        reason,
    };
    let valid: std::collections::BTreeSet<u64> = bundle.log_indices().into_iter().collect();
    for (i, step) in gold.steps.iter().enumerate() {
        if step.flow_refs.is_empty() {
            return Err(schema(&format!("steps[{i}].flowRefs"), "empty".into()));
        }
        for r in &step.flow_refs {
            if !valid.contains(r) {
                return Err(schema(
                    &format!("steps[{i}].flowRefs"),
                    format!("log index {r} does not exist in the fixture"),
                ));
            }
        }
        if step.intent.trim().is_empty()
            || step.mechanism.trim().is_empty()
            || step.result.trim().is_empty()
            || step.preconditions.is_empty()
        {
            return Err(schema(
                &format!("steps[{i}]"),
                "all five attribute fields must be non-empty".into(),
            ));
        }
    }
    for (i, m) in gold.macro_actions.iter().enumerate() {
        for r in &m.member_flows {
            if !valid.contains(r) {
                return Err(schema(
                    &format!("macroActions[{i}].memberFlows"),
                    format!("log index {r} does not exist in the fixture"),
                ));
            }
        }
    }
    let sentences = count_sentences(&gold.summary);
    if !(2..=3).contains(&sentences) {
        return Err(schema(
            "summary",
            format!("expected 2..=3 sentences, found {sentences}"),
        ));
    }
    Ok(())
}

/// Load every `<name>.fixture.json` / `<name>.gold.json` pair from a
/// directory, strictly validated. A fixture without its gold file is a
/// schema error, never silently skipped.
pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusPair>, HarnessError> {
    let mut fixtures: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|source| HarnessError::Io {
            path: dir.display().to_string(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(".fixture.json"))
        })
        .collect();
    fixtures.sort();

    let mut pairs = Vec::new();
    for fixture_path in fixtures {
        let file_name = fixture_path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let name = file_name
            .strip_suffix(".fixture.json")
            .unwrap_or(&file_name)
            .to_string();
        let gold_path = fixture_path.with_file_name(format!("{name}.gold.json"));
        if !gold_path.exists() {
            return Err(HarnessError::Schema {
                file: file_name,
                field: "gold".into(),
                reason: format!("missing paired annotation {}", gold_path.display()),
            });
        }
        let bundle = load_fixture(&fixture_path)?;
        let gold_text = fs::read_to_string(&gold_path).map_err(|source| HarnessError::Io {
            path: gold_path.display().to_string(),
            source,
        })?;
        let gold: GoldAnnotation =
            serde_json::from_str(&gold_text).map_err(|e| HarnessError::Schema {
                file: gold_path.display().to_string(),
                field: "json".into(),
                reason: e.to_string(),
            })?;
        if gold.fixture != file_name {
            return Err(HarnessError::Schema {
                file: gold_path.display().to_string(),
                field: "fixture".into(),
                reason: format!("points at {:?}, expected {file_name:?}", gold.fixture),
            });
        }
        validate_gold(&file_name, &gold, &bundle)?;
        pairs.push(CorpusPair {
            name,
            fixture_path,
            bundle,
            gold,
        });
    }
    Ok(pairs)
}

/// Fraction of flows whose predicted type equals the gold step type covering
/// that flow. Fractions are IEEE doubles (exact for 0, 1, and small
/// denominators).
pub fn score_action_types(
    pred: &BTreeMap<u64, ActionType>,
    bundle: &TransactionBundle,
    gold: &GoldAnnotation,
) -> f64 {
    let total = bundle.transfers.len();
    if total == 0 {
        return 1.0;
    }
    let mut gold_map: BTreeMap<u64, ActionType> = BTreeMap::new();
    for step in &gold.steps {
        for r in &step.flow_refs {
            gold_map.entry(*r).or_insert(step.action_type);
        }
    }
    let correct = bundle
        .transfers
        .iter()
        .filter(|t| {
            matches!(
                (gold_map.get(&t.log_index), pred.get(&t.log_index)),
                (Some(g), Some(p)) if g == p
            )
        })
        .count();
    correct as f64 / total as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PerTxRow {
    pub tx: String,
    pub action_type_accuracy: f64,
    pub flow_coverage: f64,
    pub number_grounding_rate: f64,
    pub entity_grounding_rate: f64,
    pub audit_verdict: Verdict,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalAggregate {
    pub action_type_accuracy: f64,
    pub flow_coverage: f64,
    pub number_grounding_rate: f64,
    pub entity_grounding_rate: f64,
    pub verdicts: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub per_tx: Vec<PerTxRow>,
    pub aggregate: EvalAggregate,
}

impl EvalReport {
    /// Assemble a report; aggregates are plain means over rows.
    pub fn from_rows(per_tx: Vec<PerTxRow>) -> Self {
        let n = per_tx.len().max(1) as f64;
        let mut verdicts: BTreeMap<String, u64> = BTreeMap::new();
        for row in &per_tx {
            let key = match row.audit_verdict {
                Verdict::Pass => "pass",
                Verdict::Revise => "revise",
                Verdict::Unresolved => "unresolved",
            };
            *verdicts.entry(key.to_string()).or_default() += 1;
        }
        let aggregate = EvalAggregate {
            action_type_accuracy: per_tx.iter().map(|r| r.action_type_accuracy).sum::<f64>() / n,
            flow_coverage: per_tx.iter().map(|r| r.flow_coverage).sum::<f64>() / n,
            number_grounding_rate: per_tx
                .iter()
                .map(|r| r.number_grounding_rate)
                .sum::<f64>()
                / n,
            entity_grounding_rate: per_tx
                .iter()
                .map(|r| r.entity_grounding_rate)
                .sum::<f64>()
                / n,
            verdicts,
        };
        EvalReport { per_tx, aggregate }
    }
}

fn rate(checked: u64, violated: u64) -> f64 {
    if checked == 0 {
        1.0
    } else {
        (checked - violated.min(checked)) as f64 / checked as f64
    }
}

/// Score one pipeline output against its gold pair.
pub fn score_explanation(
    final_explanation: &FinalExplanation,
    pair: &CorpusPair,
) -> Result<PerTxRow, HarnessError> {
    let got = final_explanation.board.bundle().metadata.hash.to_string();
    let expected = pair.bundle.metadata.hash.to_string();
    if got != expected {
        return Err(HarnessError::MismatchedFixture { expected, got });
    }

    let total = pair.bundle.transfers.len();
    let covered: std::collections::BTreeSet<u64> = final_explanation
        .draft
        .steps
        .iter()
        .flat_map(|s| s.flow_refs.iter().copied())
        .collect();
    let valid: std::collections::BTreeSet<u64> = pair.bundle.log_indices().into_iter().collect();
    let flow_coverage = if total == 0 {
        1.0
    } else {
        covered.intersection(&valid).count() as f64 / total as f64
    };

    let pred = final_explanation
        .board
        .hypothesis()
        .map(|h| h.classified_flows.clone())
        .unwrap_or_default();
    let stats = &final_explanation.report.stats;

    Ok(PerTxRow {
        tx: pair.name.clone(),
        action_type_accuracy: score_action_types(&pred, &pair.bundle, &pair.gold),
        flow_coverage,
        number_grounding_rate: rate(stats.numbers_checked, stats.numbers_violated),
        entity_grounding_rate: rate(stats.entities_checked, stats.entities_violated),
        audit_verdict: final_explanation.report.verdict,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Text,
}

/// Deterministic rendering: same report in, byte-identical document out.
pub fn emit_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            serde_json::to_string_pretty(report).expect("report serializes")
        }
        ReportFormat::Text => {
            let mut out = String::new();
            out.push_str(&format!(
                "{:<24} {:>10} {:>10} {:>10} {:>10} {:>12}\n",
                "tx", "action", "coverage", "numbers", "entities", "verdict"
            ));
            for row in &report.per_tx {
                let verdict = match row.audit_verdict {
                    Verdict::Pass => "pass",
                    Verdict::Revise => "revise",
                    Verdict::Unresolved => "unresolved",
                };
                out.push_str(&format!(
                    "{:<24} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>12}\n",
                    row.tx,
                    row.action_type_accuracy,
                    row.flow_coverage,
                    row.number_grounding_rate,
                    row.entity_grounding_rate,
                    verdict
                ));
            }
            out.push_str(&format!(
                "aggregate                {:>10.4} {:>10.4} {:>10.4} {:>10.4}\n",
                report.aggregate.action_type_accuracy,
                report.aggregate.flow_coverage,
                report.aggregate.number_grounding_rate,
                report.aggregate.entity_grounding_rate,
            ));
            for (verdict, count) in &report.aggregate.verdicts {
                out.push_str(&format!("verdict {verdict}: {count}\n"));
            }
            out
        }
    }
}
