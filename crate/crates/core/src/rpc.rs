//! JSON-RPC client: assembles a full bundle from a live node (transaction,
//! receipt, call-tracer trace, token metadata reads).

use std::time::Duration;

use num_bigint::BigUint;
use serde::Deserialize;
use serde_json::json;
use thiserror::Error;

use crate::hash::function_selector;
use crate::ingest::{decode_transfer_logs, extract_native_transfers, EndpointConfig, RawLog};
use crate::model::{
    Address, Amount, CallKind, CallNode, Selector, TokenInfo, TransactionBundle, TxHash,
    TxMetadata, TxStatus,
};

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("network error: {0}")]
    Network(String),
    #[error("transaction {0} not found")]
    NotFound(TxHash),
    #[error("node cannot trace transactions: {0}")]
    TraceUnavailable(String),
    #[error("malformed node response: {0}")]
    Malformed(String),
}

pub struct JsonRpcClient {
    url: String,
    agent: ureq::Agent,
    next_id: std::cell::Cell<u64>,
}

impl JsonRpcClient {
    pub fn new(url: String) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        JsonRpcClient {
            url,
            agent,
            next_id: std::cell::Cell::new(1),
        }
    }

    pub fn call(
        &self,
        method: &str,
        params: serde_json::Value,
    ) -> Result<serde_json::Value, FetchError> {
        let id = self.next_id.get();
        self.next_id.set(id + 1);
        let body = json!({"jsonrpc": "2.0", "id": id, "method": method, "params": params});
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(&body)
            .map_err(|e| FetchError::Network(format!("{method}: {e}")))?;
        let value: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| FetchError::Malformed(format!("{method}: {e}")))?;
        if let Some(err) = value.get("error") {
            return Err(FetchError::Network(format!("{method}: node error {err}")));
        }
        Ok(value.get("result").cloned().unwrap_or(serde_json::Value::Null))
    }
}

fn hex_u64(s: &str) -> Result<u64, FetchError> {
    let body = s.strip_prefix("0x").unwrap_or(s);
    u64::from_str_radix(body, 16).map_err(|e| FetchError::Malformed(format!("{s:?}: {e}")))
}

fn hex_biguint(s: &str) -> Result<BigUint, FetchError> {
    let body = s.strip_prefix("0x").unwrap_or(s);
    if body.is_empty() {
        return Ok(BigUint::from(0u32));
    }
    BigUint::parse_bytes(body.as_bytes(), 16)
        .ok_or_else(|| FetchError::Malformed(format!("{s:?} is not hex")))
}

#[derive(Debug, Deserialize)]
struct RpcTx {
    #[serde(rename = "blockNumber")]
    block_number: Option<String>,
    from: String,
    to: Option<String>,
    value: String,
}

#[derive(Debug, Deserialize)]
struct RpcLog {
    address: String,
    topics: Vec<String>,
    data: String,
    #[serde(rename = "logIndex")]
    log_index: String,
}

#[derive(Debug, Deserialize)]
struct RpcReceipt {
    status: Option<String>,
    logs: Vec<RpcLog>,
}

#[derive(Debug, Deserialize)]
struct TraceFrame {
    #[serde(rename = "type")]
    frame_type: String,
    from: String,
    #[serde(default)]
    to: Option<String>,
    #[serde(default)]
    value: Option<String>,
    #[serde(default)]
    input: Option<String>,
    #[serde(default)]
    calls: Vec<TraceFrame>,
}

fn frame_kind(raw: &str) -> CallKind {
    match raw.to_ascii_uppercase().as_str() {
        "DELEGATECALL" | "CALLCODE" => CallKind::Delegatecall,
        "STATICCALL" => CallKind::Staticcall,
        "CREATE" | "CREATE2" => CallKind::Create,
        _ => CallKind::Call,
    }
}

fn frame_to_call(frame: &TraceFrame) -> Result<CallNode, FetchError> {
    let caller = Address::parse(&frame.from).map_err(|e| FetchError::Malformed(e.to_string()))?;
    let callee = Address::parse(frame.to.as_deref().unwrap_or(crate::model::ZERO_ADDRESS))
        .map_err(|e| FetchError::Malformed(e.to_string()))?;
    let input = frame
        .input
        .clone()
        .filter(|i| i.len() > 2)
        .map(|i| i.to_ascii_lowercase());
    let selector = match &input {
        Some(i) if i.len() >= 10 => Selector::parse(&format!("0x{}", &i[2..10])).ok(),
        _ => None,
    };
    let children = frame
        .calls
        .iter()
        .map(frame_to_call)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CallNode {
        caller,
        callee,
        call_kind: frame_kind(&frame.frame_type),
        selector,
        input_data: input,
        eth_value: Amount(hex_biguint(frame.value.as_deref().unwrap_or("0x0"))?),
        trace_path: vec![],
        children,
    })
}

/// ABI-encode an `eth_call` for a no-argument function.
fn call_data(signature: &str) -> String {
    function_selector(signature).to_string()
}

fn decode_string_result(hex: &str) -> Option<String> {
    let body = hex.strip_prefix("0x")?;
    if body.is_empty() {
        return None;
    }
    let bytes: Vec<u8> = (0..body.len() / 2)
        .map(|i| u8::from_str_radix(&body[2 * i..2 * i + 2], 16).unwrap_or(0))
        .collect();
    if bytes.len() >= 64 {
        // dynamic string: offset word, length word, then data
        let len = BigUint::from_bytes_be(&bytes[32..64]);
        let len: usize = len.try_into().ok()?;
        if bytes.len() >= 64 + len {
            let text = String::from_utf8_lossy(&bytes[64..64 + len]).to_string();
            let trimmed = text.trim_matches('\0').trim().to_string();
            if !trimmed.is_empty() {
                return Some(trimmed);
            }
        }
    }
    if bytes.len() == 32 {
        // legacy bytes32 symbol
        let text = String::from_utf8_lossy(&bytes).to_string();
        let trimmed = text.trim_matches('\0').trim().to_string();
        if !trimmed.is_empty() {
            return Some(trimmed);
        }
    }
    None
}

/// Read symbol/decimals for a token via read-only calls. Missing data falls
/// back to an address-derived symbol and 18 decimals.
fn token_info(client: &JsonRpcClient, token: &Address) -> TokenInfo {
    let symbol = client
        .call(
            "eth_call",
            json!([{ "to": token.as_str(), "data": call_data("symbol()") }, "latest"]),
        )
        .ok()
        .and_then(|v| v.as_str().and_then(decode_string_result))
        .unwrap_or_else(|| format!("TKN-{}", token.prefix4()));
    let decimals = client
        .call(
            "eth_call",
            json!([{ "to": token.as_str(), "data": call_data("decimals()") }, "latest"]),
        )
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .and_then(|s| hex_biguint(&s).ok())
        .and_then(|v| u32::try_from(v).ok())
        .filter(|d| *d <= 36)
        .unwrap_or(18);
    TokenInfo {
        address: token.clone(),
        symbol,
        decimals,
    }
}

/// Assemble a full bundle for a transaction hash from a live node.
pub fn fetch_transaction(
    cfg: &EndpointConfig,
    hash: &TxHash,
) -> Result<TransactionBundle, FetchError> {
    if cfg.offline {
        return Err(FetchError::Network(
            "offline configuration refuses node requests".into(),
        ));
    }
    let url = cfg
        .rpc_url
        .clone()
        .ok_or_else(|| FetchError::Network("no RPC URL configured".into()))?;
    let client = JsonRpcClient::new(url);

    let tx_value = client.call("eth_getTransactionByHash", json!([hash.as_str()]))?;
    if tx_value.is_null() {
        return Err(FetchError::NotFound(hash.clone()));
    }
    let tx: RpcTx = serde_json::from_value(tx_value)
        .map_err(|e| FetchError::Malformed(format!("transaction: {e}")))?;

    let receipt_value = client.call("eth_getTransactionReceipt", json!([hash.as_str()]))?;
    if receipt_value.is_null() {
        return Err(FetchError::NotFound(hash.clone()));
    }
    let receipt: RpcReceipt = serde_json::from_value(receipt_value)
        .map_err(|e| FetchError::Malformed(format!("receipt: {e}")))?;

    let trace_value = client
        .call(
            "debug_traceTransaction",
            json!([hash.as_str(), { "tracer": "callTracer" }]),
        )
        .map_err(|e| FetchError::TraceUnavailable(e.to_string()))?;
    let frame: TraceFrame = serde_json::from_value(trace_value)
        .map_err(|e| FetchError::Malformed(format!("trace: {e}")))?;

    let block_number = hex_u64(
        tx.block_number
            .as_deref()
            .ok_or_else(|| FetchError::Malformed("transaction is pending".into()))?,
    )?;
    let block = client.call(
        "eth_getBlockByNumber",
        json!([format!("0x{block_number:x}"), false]),
    )?;
    let timestamp = block
        .get("timestamp")
        .and_then(|t| t.as_str())
        .map(hex_u64)
        .transpose()?
        .unwrap_or(0);

    let raw_logs: Vec<RawLog> = receipt
        .logs
        .iter()
        .map(|l| {
            Ok(RawLog {
                address: Address::parse(&l.address)
                    .map_err(|e| FetchError::Malformed(e.to_string()))?,
                topics: l.topics.clone(),
                data: l.data.clone(),
                log_index: hex_u64(&l.log_index)?,
            })
        })
        .collect::<Result<Vec<_>, FetchError>>()?;
    let mut transfers =
        decode_transfer_logs(&raw_logs).map_err(|e| FetchError::Malformed(e.to_string()))?;

    let mut root_call = frame_to_call(&frame)?;
    root_call.assign_trace_paths(vec![]);

    let next_index = transfers.iter().map(|t| t.log_index + 1).max().unwrap_or(0);
    transfers.extend(extract_native_transfers(&root_call, next_index));

    let mut tokens = std::collections::BTreeMap::new();
    for t in &transfers {
        if tokens.contains_key(&t.token) {
            continue;
        }
        let info = if t.token.is_native_token() {
            TokenInfo {
                address: t.token.clone(),
                symbol: "ETH".to_string(),
                decimals: 18,
            }
        } else {
            token_info(&client, &t.token)
        };
        tokens.insert(t.token.clone(), info);
    }

    let status = match receipt.status.as_deref() {
        Some("0x0") => TxStatus::Failure,
        _ => TxStatus::Success,
    };
    let metadata = TxMetadata {
        hash: hash.clone(),
        block_number,
        timestamp,
        sender: Address::parse(&tx.from).map_err(|e| FetchError::Malformed(e.to_string()))?,
        recipient: tx
            .to
            .as_deref()
            .map(Address::parse)
            .transpose()
            .map_err(|e| FetchError::Malformed(e.to_string()))?,
        eth_value: Amount(hex_biguint(&tx.value)?),
        status,
    };

    let mut bundle = TransactionBundle {
        metadata,
        root_call,
        transfers,
        tokens,
        declared_net_balances: None,
    };
    crate::ingest::normalize_bundle(&mut bundle);
    bundle
        .validate()
        .map_err(|e| FetchError::Malformed(e.to_string()))?;
    Ok(bundle)
}

/// Raw `eth_call` against a token's `balanceOf(address)` at a block tag;
/// used to cross-check recomputed net balances against chain state.
pub fn erc20_balance_of(
    client: &JsonRpcClient,
    token: &Address,
    holder: &Address,
    block_tag: &str,
) -> Result<BigUint, FetchError> {
    let selector = function_selector("balanceOf(address)");
    let data = format!("{selector}{}{}", "0".repeat(24), &holder.as_str()[2..]);
    let result = client.call(
        "eth_call",
        json!([{ "to": token.as_str(), "data": data }, block_tag]),
    )?;
    hex_biguint(result.as_str().unwrap_or("0x0"))
}
