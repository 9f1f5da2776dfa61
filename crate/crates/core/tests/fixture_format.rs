//! Fixture-format contract: normalization, strict validation, and
//! byte-determinism of the serialized bundle.

use std::path::PathBuf;

use txlens_core::ingest::{load_fixture_str, IngestError};

fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn case_study_text() -> String {
    std::fs::read_to_string(fixtures_dir().join("case_study.fixture.json")).unwrap()
}

#[test]
fn out_of_order_transfers_are_resorted() {
    let text = case_study_text();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    let transfers = doc["transfers"].as_array_mut().unwrap();
    transfers.reverse();
    let shuffled = doc.to_string();

    let bundle = load_fixture_str(&shuffled).unwrap();
    let order: Vec<u64> = bundle.transfers.iter().map(|t| t.log_index).collect();
    assert_eq!(order, vec![0, 1, 2]);
    assert_eq!(bundle, load_fixture_str(&text).unwrap());
}

#[test]
fn missing_token_entry_is_a_validation_error() {
    let text = case_study_text();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    let tokens = doc["tokens"].as_object_mut().unwrap();
    tokens.remove("0xc02aaa39b223fe8d0a0e5c4f27ead9083c756cc2");
    let err = load_fixture_str(&doc.to_string()).unwrap_err();
    match err {
        IngestError::Validation(e) => {
            assert!(e.to_string().contains("token"), "{e}");
        }
        other => panic!("expected validation error, got {other}"),
    }
}

#[test]
fn oversized_hash_is_rejected_naming_the_hash() {
    let text = case_study_text().replace(
        "0x1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a",
        "0x1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a0",
    );
    let err = load_fixture_str(&text).unwrap_err();
    assert!(err.to_string().contains("hash"), "{err}");
}

#[test]
fn uppercase_addresses_are_normalized_on_load() {
    let text = case_study_text().replace(
        "0xc02aaa39b223fe8d0a0e5c4f27ead9083c756cc2",
        "0xC02AAA39B223FE8D0A0E5C4F27EAD9083C756CC2",
    );
    let bundle = load_fixture_str(&text).unwrap();
    assert!(bundle
        .tokens
        .keys()
        .any(|a| a.as_str() == "0xc02aaa39b223fe8d0a0e5c4f27ead9083c756cc2"));
}

#[test]
fn selector_is_derived_from_input_and_checked_when_present() {
    let text = case_study_text();
    let bundle = load_fixture_str(&text).unwrap();
    assert_eq!(
        bundle.root_call.selector.unwrap().to_string(),
        "0x38ed1739"
    );

    // a stated selector that contradicts the input prefix is rejected
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["calls"]["selector"] = serde_json::Value::String("0xaaaaaaaa".into());
    let err = load_fixture_str(&doc.to_string()).unwrap_err();
    assert!(err.to_string().contains("selector"), "{err}");
}

#[test]
fn same_bytes_serialize_to_identical_bundles() {
    for name in ["case_study", "wrap", "fee_swap"] {
        let path = fixtures_dir().join(format!("{name}.fixture.json"));
        let text = std::fs::read_to_string(path).unwrap();
        let a = serde_json::to_string(&load_fixture_str(&text).unwrap()).unwrap();
        let b = serde_json::to_string(&load_fixture_str(&text).unwrap()).unwrap();
        assert_eq!(a, b);
        // reloading the serialized form is a fixed point
        let c = serde_json::to_string(&load_fixture_str(&a).unwrap()).unwrap();
        assert_eq!(a, c);
    }
}

#[test]
fn fixture_token_map_has_no_inner_address_field() {
    let bundle = load_fixture_str(&case_study_text()).unwrap();
    let doc: serde_json::Value =
        serde_json::from_str(&serde_json::to_string(&bundle).unwrap()).unwrap();
    let entry = &doc["tokens"]["0xa0b86991c6218b36c1d19d4a2e9eb0ce3606eb48"];
    assert_eq!(entry["symbol"], "USDC");
    assert_eq!(entry["decimals"], 6);
    assert!(entry.get("address").is_none());
}
