//! Bundle ingestion: offline fixture files, receipt-log decoding, and
//! native-value transfer extraction from the call tree.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use num_bigint::BigUint;
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::event_topic;
use crate::model::{
    Address, Amount, CallNode, ModelError, TokenStandard, TokenTransfer, TransactionBundle,
};

/// Canonical ERC-20/ERC-721 Transfer event signature.
pub const TRANSFER_EVENT_SIGNATURE: &str = "Transfer(address,address,uint256)";

/// topic0 shared by ERC-20 and ERC-721 Transfer logs, computed once from the
/// signature string.
pub fn transfer_topic() -> &'static str {
    static TOPIC: OnceLock<String> = OnceLock::new();
    TOPIC.get_or_init(|| event_topic(TRANSFER_EVENT_SIGNATURE))
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("parse error at line {line}, column {column}: {reason}")]
    Parse {
        line: usize,
        column: usize,
        reason: String,
    },
    #[error("validation error: {0}")]
    Validation(#[from] ModelError),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LogDecodeError {
    #[error("malformed Transfer log at index {log_index}: {reason}")]
    MalformedLog { log_index: u64, reason: String },
}

/// A raw receipt log prior to decoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RawLog {
    pub address: Address,
    pub topics: Vec<String>,
    pub data: String,
    pub log_index: u64,
}

/// Endpoint configuration for live data sources. `offline` turns any network
/// attempt into an error before I/O happens.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EndpointConfig {
    pub rpc_url: Option<String>,
    pub explorer_api_url: Option<String>,
    pub explorer_api_key: Option<String>,
    pub offline: bool,
}

impl EndpointConfig {
    pub fn offline() -> Self {
        EndpointConfig {
            offline: true,
            ..Default::default()
        }
    }

    /// Read `TXLENS_RPC_URL` / `TXLENS_EXPLORER_KEY` from the environment.
    pub fn from_env() -> Self {
        EndpointConfig {
            rpc_url: std::env::var("TXLENS_RPC_URL").ok().filter(|s| !s.is_empty()),
            explorer_api_url: std::env::var("TXLENS_EXPLORER_URL")
                .ok()
                .filter(|s| !s.is_empty()),
            explorer_api_key: std::env::var("TXLENS_EXPLORER_KEY")
                .ok()
                .filter(|s| !s.is_empty()),
            offline: false,
        }
    }
}

/// Normalize a just-parsed bundle: sort transfers by log index, rebuild
/// trace paths, and derive call selectors from input data where absent.
pub fn normalize_bundle(bundle: &mut TransactionBundle) {
    bundle.transfers.sort_by_key(|t| t.log_index);
    bundle.root_call.assign_trace_paths(vec![]);
    derive_selectors(&mut bundle.root_call);
}

fn derive_selectors(node: &mut CallNode) {
    if node.selector.is_none() {
        if let Some(input) = &node.input_data {
            let body = input.strip_prefix("0x").unwrap_or(input);
            if body.len() >= 8 {
                if let Ok(sel) = crate::model::Selector::parse(&format!("0x{}", &body[..8])) {
                    node.selector = Some(sel);
                }
            }
        }
    }
    for child in &mut node.children {
        derive_selectors(child);
    }
}

/// Load and validate a fixture file. Transfers come back sorted by log
/// index regardless of file order.
pub fn load_fixture(path: &Path) -> Result<TransactionBundle, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_fixture_str(&text)
}

/// Parse a fixture from its JSON text.
pub fn load_fixture_str(text: &str) -> Result<TransactionBundle, IngestError> {
    let mut bundle: TransactionBundle =
        serde_json::from_str(text).map_err(|e| IngestError::Parse {
            line: e.line(),
            column: e.column(),
            reason: e.to_string(),
        })?;
    normalize_bundle(&mut bundle);
    bundle.validate()?;
    Ok(bundle)
}

fn hex_bytes(s: &str) -> Result<Vec<u8>, String> {
    let body = s.strip_prefix("0x").ok_or("missing 0x prefix")?;
    if body.len() % 2 != 0 {
        return Err("odd-length hex".into());
    }
    (0..body.len() / 2)
        .map(|i| u8::from_str_radix(&body[2 * i..2 * i + 2], 16).map_err(|e| e.to_string()))
        .collect()
}

fn topic_address(topic: &str) -> Result<Address, String> {
    let bytes = hex_bytes(topic)?;
    if bytes.len() != 32 {
        return Err(format!("topic is {} bytes, expected 32", bytes.len()));
    }
    if bytes[..12].iter().any(|&b| b != 0) {
        return Err("address topic has non-zero padding".into());
    }
    let body: String = bytes[12..].iter().map(|b| format!("{b:02x}")).collect();
    Address::parse(&format!("0x{body}")).map_err(|e| e.to_string())
}

fn topic_uint(topic: &str) -> Result<BigUint, String> {
    let bytes = hex_bytes(topic)?;
    if bytes.len() != 32 {
        return Err(format!("topic is {} bytes, expected 32", bytes.len()));
    }
    Ok(BigUint::from_bytes_be(&bytes))
}

/// Decode Transfer logs into token transfers. Logs with a different topic0
/// are skipped; logs claiming the Transfer topic but violating its shape are
/// errors. ERC-20 vs ERC-721 disambiguation is by indexed-topic count.
pub fn decode_transfer_logs(logs: &[RawLog]) -> Result<Vec<TokenTransfer>, LogDecodeError> {
    let topic0 = transfer_topic();
    let mut out = Vec::new();
    for log in logs {
        let Some(first) = log.topics.first() else {
            continue;
        };
        if !first.eq_ignore_ascii_case(topic0) {
            continue;
        }
        let malformed = |reason: String| LogDecodeError::MalformedLog {
            log_index: log.log_index,
            reason,
        };
        match log.topics.len() {
            3 => {
                let from = topic_address(&log.topics[1]).map_err(&malformed)?;
                let to = topic_address(&log.topics[2]).map_err(&malformed)?;
                let data = hex_bytes(&log.data).map_err(&malformed)?;
                if data.len() != 32 {
                    return Err(malformed(format!(
                        "erc20 Transfer data is {} bytes, expected 32",
                        data.len()
                    )));
                }
                out.push(TokenTransfer {
                    token: log.address.clone(),
                    standard: TokenStandard::Erc20,
                    from,
                    to,
                    amount: Amount(BigUint::from_bytes_be(&data)),
                    token_id: None,
                    log_index: log.log_index,
                });
            }
            4 => {
                let from = topic_address(&log.topics[1]).map_err(&malformed)?;
                let to = topic_address(&log.topics[2]).map_err(&malformed)?;
                let token_id = topic_uint(&log.topics[3]).map_err(&malformed)?;
                out.push(TokenTransfer {
                    token: log.address.clone(),
                    standard: TokenStandard::Erc721,
                    from,
                    to,
                    amount: Amount::from_u128(1),
                    token_id: Some(Amount(token_id)),
                    log_index: log.log_index,
                });
            }
            n => {
                return Err(malformed(format!(
                    "Transfer topic with {n} topics matches neither erc20 nor erc721"
                )));
            }
        }
    }
    Ok(out)
}

/// One native-ETH transfer per value-carrying call, in depth-first trace
/// order. Log indices are assigned starting at `first_log_index` so native
/// transfers always follow log-derived ones.
pub fn extract_native_transfers(root_call: &CallNode, first_log_index: u64) -> Vec<TokenTransfer> {
    let mut out = Vec::new();
    let mut next = first_log_index;
    for node in root_call.preorder() {
        if node.eth_value.0.is_zero() {
            continue;
        }
        out.push(TokenTransfer {
            token: Address::native_token(),
            standard: TokenStandard::Native,
            from: node.caller.clone(),
            to: node.callee.clone(),
            amount: node.eth_value.clone(),
            token_id: None,
            log_index: next,
        });
        next += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CallKind;

    fn addr(n: u8) -> Address {
        let body: String = [n; 20].iter().map(|b| format!("{b:02x}")).collect();
        Address::parse(&format!("0x{body}")).unwrap()
    }

    fn pad_address(a: &Address) -> String {
        format!("0x{}{}", "0".repeat(24), &a.as_str()[2..])
    }

    fn uint_word(v: u128) -> String {
        format!("0x{v:064x}")
    }

    #[test]
    fn transfer_topic_matches_known_constant() {
        assert_eq!(
            transfer_topic(),
            "0xddf252ad1be2c89b69c2b068fc378daa952ba7f163c4a11628f55a4df523b3ef"
        );
    }

    #[test]
    fn decodes_erc20_transfer() {
        let log = RawLog {
            address: addr(9),
            topics: vec![
                transfer_topic().to_string(),
                pad_address(&addr(1)),
                pad_address(&addr(2)),
            ],
            data: uint_word(2_500_000_000),
            log_index: 7,
        };
        let got = decode_transfer_logs(&[log]).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].standard, TokenStandard::Erc20);
        assert_eq!(got[0].amount, Amount::from_u128(2_500_000_000));
        assert_eq!(got[0].from, addr(1));
        assert_eq!(got[0].to, addr(2));
        assert_eq!(got[0].log_index, 7);
    }

    #[test]
    fn decodes_erc721_transfer_from_four_topics() {
        let log = RawLog {
            address: addr(9),
            topics: vec![
                transfer_topic().to_string(),
                pad_address(&addr(1)),
                pad_address(&addr(2)),
                uint_word(1234),
            ],
            data: "0x".to_string(),
            log_index: 0,
        };
        let got = decode_transfer_logs(&[log]).unwrap();
        assert_eq!(got[0].standard, TokenStandard::Erc721);
        assert_eq!(got[0].amount, Amount::from_u128(1));
        assert_eq!(got[0].token_id, Some(Amount::from_u128(1234)));
    }

    #[test]
    fn skips_unrelated_topics() {
        let log = RawLog {
            address: addr(9),
            topics: vec![format!("0x{}", "ab".repeat(32))],
            data: "0x".to_string(),
            log_index: 0,
        };
        assert_eq!(decode_transfer_logs(&[log]).unwrap(), vec![]);
        assert_eq!(decode_transfer_logs(&[]).unwrap(), vec![]);
    }

    #[test]
    fn rejects_wrong_shape_with_matching_topic() {
        let log = RawLog {
            address: addr(9),
            topics: vec![transfer_topic().to_string(), pad_address(&addr(1))],
            data: "0x".to_string(),
            log_index: 3,
        };
        let err = decode_transfer_logs(&[log]).unwrap_err();
        assert!(matches!(err, LogDecodeError::MalformedLog { log_index: 3, .. }));
    }

    #[test]
    fn rejects_short_erc20_data() {
        let log = RawLog {
            address: addr(9),
            topics: vec![
                transfer_topic().to_string(),
                pad_address(&addr(1)),
                pad_address(&addr(2)),
            ],
            data: "0x01".to_string(),
            log_index: 0,
        };
        assert!(decode_transfer_logs(&[log]).is_err());
    }

    fn call(value: u128, children: Vec<CallNode>) -> CallNode {
        CallNode {
            caller: addr(1),
            callee: addr(2),
            call_kind: CallKind::Call,
            selector: None,
            input_data: None,
            eth_value: Amount::from_u128(value),
            trace_path: vec![],
            children,
        }
    }

    #[test]
    fn native_extraction_zero_case() {
        assert_eq!(extract_native_transfers(&call(0, vec![]), 0), vec![]);
    }

    #[test]
    fn native_extraction_orders_and_indexes() {
        let root = call(24_700_000_000_000_000, vec![call(0, vec![]), call(5, vec![])]);
        let got = extract_native_transfers(&root, 10);
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].amount, Amount::from_u128(24_700_000_000_000_000));
        assert_eq!(got[0].log_index, 10);
        assert_eq!(got[1].amount, Amount::from_u128(5));
        assert_eq!(got[1].log_index, 11);
        assert!(got.iter().all(|t| t.standard == TokenStandard::Native));
        assert!(got.iter().all(|t| t.token == Address::native_token()));
    }
}
