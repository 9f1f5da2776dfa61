//! Live-endpoint behavior against a local mock server: full bundle assembly
//! over JSON-RPC, the net-balance cross-check against chain balance reads,
//! explorer ABI fetching with cache and rate-limit handling, and the
//! subprocess/HTTP backend transports.

mod common;

use std::sync::Arc;

use num_bigint::BigInt;
use serde_json::json;

use common::MockHttpServer;
use txlens_core::explorer::{fetch_abi, AbiError, HttpCache};
use txlens_core::ingest::EndpointConfig;
use txlens_core::model::{Address, TokenStandard, TxHash, TxStatus};
use txlens_core::rpc::{erc20_balance_of, fetch_transaction, FetchError, JsonRpcClient};
use txlens_core::synth::{
    BackendRequest, Constraints, ExternalTransport, HttpTransport,
};
use txlens_core::compute_net_balances;

const USER: &str = "0x1111111111111111111111111111111111111111";
const POOL: &str = "0x5000000000000000000000000000000000000002";
const TOKEN: &str = "0xa0b86991c6218b36c1d19d4a2e9eb0ce3606eb48";
const HASH: &str = "0x1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a1a";

const TRANSFER_TOPIC: &str =
    "0xddf252ad1be2c89b69c2b068fc378daa952ba7f163c4a11628f55a4df523b3ef";

fn pad_addr(addr: &str) -> String {
    format!("0x{}{}", "0".repeat(24), &addr[2..])
}

fn word(v: u128) -> String {
    format!("0x{v:064x}")
}

/// A node serving one pool->user transfer of 2,500 USDC (6 decimals) plus
/// consistent balance reads one block before and at the tx block.
fn rpc_handler(_path: &str, body: &str) -> String {
    let req: serde_json::Value = serde_json::from_str(body).unwrap();
    let id = req["id"].clone();
    let method = req["method"].as_str().unwrap_or_default();
    let params = &req["params"];
    let result = match method {
        "eth_getTransactionByHash" => json!({
            "blockNumber": "0x166e6a1",
            "from": USER,
            "to": POOL,
            "value": "0x0",
            "hash": HASH,
        }),
        "eth_getTransactionReceipt" => json!({
            "status": "0x1",
            "logs": [{
                "address": TOKEN,
                "topics": [TRANSFER_TOPIC, pad_addr(POOL), pad_addr(USER)],
                "data": word(2_500_000_000),
                "logIndex": "0x0",
            }],
        }),
        "debug_traceTransaction" => json!({
            "type": "CALL",
            "from": USER,
            "to": POOL,
            "value": "0x0",
            "input": "0x022c0d9f",
            "calls": [{
                "type": "CALL",
                "from": POOL,
                "to": TOKEN,
                "value": "0x0",
                "input": "0xa9059cbb",
            }],
        }),
        "eth_getBlockByNumber" => json!({ "timestamp": "0x68e7a8c4" }),
        "eth_call" => {
            let data = params[0]["data"].as_str().unwrap_or_default();
            let block = params[1].as_str().unwrap_or("latest");
            if data.starts_with("0x95d89b41") {
                // symbol() -> "USDC"
                let sym = format!("0x{:064x}{:064x}{}{}", 32, 4, "55534443", "0".repeat(56));
                json!(sym)
            } else if data.starts_with("0x313ce567") {
                json!(word(6))
            } else if data.starts_with("0x70a08231") {
                // balanceOf(user): 1,000 USDC before, 3,500 after
                let holder = &data[10 + 24..];
                if holder == &USER[2..] {
                    if block == "0x166e6a0" {
                        json!(word(1_000_000_000))
                    } else {
                        json!(word(3_500_000_000))
                    }
                } else {
                    json!(word(0))
                }
            } else {
                json!("0x")
            }
        }
        _ => json!(null),
    };
    json!({"jsonrpc": "2.0", "id": id, "result": result}).to_string()
}

#[test]
fn fetch_transaction_assembles_a_bundle_and_net_balances_match_chain_diffs() {
    let server = MockHttpServer::start(rpc_handler);
    let cfg = EndpointConfig {
        rpc_url: Some(server.url.clone()),
        explorer_api_url: None,
        explorer_api_key: None,
        offline: false,
    };
    let hash = TxHash::parse(HASH).unwrap();
    let bundle = fetch_transaction(&cfg, &hash).unwrap();

    assert_eq!(bundle.metadata.block_number, 0x166e6a1);
    assert_eq!(bundle.metadata.status, TxStatus::Success);
    assert_eq!(bundle.transfers.len(), 1);
    assert_eq!(bundle.transfers[0].standard, TokenStandard::Erc20);
    assert_eq!(bundle.transfers[0].amount.0, 2_500_000_000u64.into());
    let info = bundle.tokens.values().next().unwrap();
    assert_eq!(info.symbol, "USDC");
    assert_eq!(info.decimals, 6);
    assert_eq!(bundle.root_call.children.len(), 1);

    // cross-check: recomputed net balance equals the on-chain balance diff
    // between block N-1 and N
    let client = JsonRpcClient::new(server.url.clone());
    let user = Address::parse(USER).unwrap();
    let token = Address::parse(TOKEN).unwrap();
    let before = erc20_balance_of(&client, &token, &user, "0x166e6a0").unwrap();
    let after = erc20_balance_of(&client, &token, &user, "0x166e6a1").unwrap();
    let chain_diff = BigInt::from(after) - BigInt::from(before);
    let recomputed = compute_net_balances(&bundle.transfers, &user);
    assert_eq!(recomputed.len(), 1);
    assert_eq!(recomputed[0].delta.0, chain_diff);
}

#[test]
fn unknown_hash_is_not_found() {
    let server = MockHttpServer::start(|_path, body| {
        let req: serde_json::Value = serde_json::from_str(body).unwrap();
        json!({"jsonrpc": "2.0", "id": req["id"], "result": null}).to_string()
    });
    let cfg = EndpointConfig {
        rpc_url: Some(server.url.clone()),
        ..Default::default()
    };
    let hash = TxHash::parse(&format!("0x{}", "77".repeat(32))).unwrap();
    assert!(matches!(
        fetch_transaction(&cfg, &hash),
        Err(FetchError::NotFound(_))
    ));
}

#[test]
fn missing_tracer_is_trace_unavailable() {
    let server = MockHttpServer::start(|_path, body| {
        let req: serde_json::Value = serde_json::from_str(body).unwrap();
        let id = req["id"].clone();
        match req["method"].as_str().unwrap_or_default() {
            "eth_getTransactionByHash" => json!({
                "jsonrpc": "2.0", "id": id,
                "result": {"blockNumber": "0x1", "from": USER, "to": POOL, "value": "0x0"}
            })
            .to_string(),
            "eth_getTransactionReceipt" => {
                json!({"jsonrpc": "2.0", "id": id, "result": {"status": "0x1", "logs": []}})
                    .to_string()
            }
            _ => json!({
                "jsonrpc": "2.0", "id": id,
                "error": {"code": -32601, "message": "the method debug_traceTransaction does not exist"}
            })
            .to_string(),
        }
    });
    let cfg = EndpointConfig {
        rpc_url: Some(server.url.clone()),
        ..Default::default()
    };
    let hash = TxHash::parse(HASH).unwrap();
    assert!(matches!(
        fetch_transaction(&cfg, &hash),
        Err(FetchError::TraceUnavailable(_))
    ));
}

const ROUTER_ABI: &str = r#"[
    {"type":"function","name":"swapExactTokensForTokens","inputs":[
        {"type":"uint256"},{"type":"uint256"},{"type":"address[]"},
        {"type":"address"},{"type":"uint256"}]},
    {"type":"function","name":"factory","inputs":[]}
]"#;

#[test]
fn fetch_abi_caches_and_replays_offline() {
    let server = MockHttpServer::start(|path, _body| {
        assert!(path.contains("module=contract"));
        assert!(path.contains("action=getabi"));
        json!({"status": "1", "message": "OK", "result": ROUTER_ABI}).to_string()
    });
    let dir = tempfile::tempdir().unwrap();
    let cache = HttpCache::new(dir.path().to_path_buf()).unwrap();
    let addr = Address::parse("0x7a250d5630b4cf539739df2c5dacb4c659f2488d").unwrap();

    let online = EndpointConfig {
        explorer_api_url: Some(server.url.clone()),
        explorer_api_key: Some("KEY".into()),
        ..Default::default()
    };
    let entries = fetch_abi(&online, Some(&cache), &addr).unwrap();
    assert_eq!(entries.len(), 2);
    let swap = entries
        .iter()
        .find(|e| e.human_name == "swapExactTokensForTokens")
        .unwrap();
    assert_eq!(swap.selector.to_string(), "0x38ed1739");
    assert_eq!(server.hit_count(), 1);

    // warm cache serves identical entries with networking disabled
    let offline = EndpointConfig::offline();
    let replay = fetch_abi(&offline, Some(&cache), &addr).unwrap();
    assert_eq!(replay, entries);
    assert_eq!(server.hit_count(), 1);
}

#[test]
fn unverified_contract_is_reported() {
    let server = MockHttpServer::start(|_path, _body| {
        json!({
            "status": "0", "message": "NOTOK",
            "result": "Contract source code not verified"
        })
        .to_string()
    });
    let cfg = EndpointConfig {
        explorer_api_url: Some(server.url.clone()),
        ..Default::default()
    };
    let addr = Address::parse("0x9999999999999999999999999999999999999999").unwrap();
    assert!(matches!(
        fetch_abi(&cfg, None, &addr),
        Err(AbiError::UnverifiedContract(_))
    ));
}

#[test]
fn rate_limit_retries_twice_then_succeeds() {
    let server = MockHttpServer::start({
        let state = std::sync::atomic::AtomicUsize::new(0);
        move |_path, _body| {
            let n = state.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            if n < 2 {
                json!({"status": "0", "message": "NOTOK", "result": "Max rate limit reached"})
                    .to_string()
            } else {
                json!({"status": "1", "message": "OK", "result": ROUTER_ABI}).to_string()
            }
        }
    });
    let cfg = EndpointConfig {
        explorer_api_url: Some(server.url.clone()),
        ..Default::default()
    };
    let addr = Address::parse("0x7a250d5630b4cf539739df2c5dacb4c659f2488d").unwrap();
    let entries = fetch_abi(&cfg, None, &addr).unwrap();
    assert_eq!(entries.len(), 2);
    assert_eq!(server.hit_count(), 3);
}

#[test]
fn persistent_rate_limit_degrades_after_two_retries() {
    let server = MockHttpServer::start(|_path, _body| {
        json!({"status": "0", "message": "NOTOK", "result": "Max rate limit reached"}).to_string()
    });
    let cfg = EndpointConfig {
        explorer_api_url: Some(server.url.clone()),
        ..Default::default()
    };
    let addr = Address::parse("0x7a250d5630b4cf539739df2c5dacb4c659f2488d").unwrap();
    assert!(matches!(
        fetch_abi(&cfg, None, &addr),
        Err(AbiError::RateLimited)
    ));
    assert_eq!(server.hit_count(), 3);
}

#[test]
fn cmd_backend_transport_round_trips_and_times_out() {
    use std::os::unix::fs::PermissionsExt;
    use txlens_core::synth::CmdTransport;

    let dir = tempfile::tempdir().unwrap();
    let ok_script = dir.path().join("ok.sh");
    std::fs::write(
        &ok_script,
        "#!/bin/sh\ncat > /dev/null\nprintf '%s' '{\"summary\":[{\"text\":\"One.\"},{\"text\":\"Two.\"}],\"steps\":[]}'\n",
    )
    .unwrap();
    let slow_script = dir.path().join("slow.sh");
    std::fs::write(&slow_script, "#!/bin/sh\nsleep 5\n").unwrap();
    for script in [&ok_script, &slow_script] {
        let mut perms = std::fs::metadata(script).unwrap().permissions();
        perms.set_mode(0o755);
        std::fs::set_permissions(script, perms).unwrap();
    }

    let request = BackendRequest {
        board_digest: "{}".into(),
        macro_actions: vec![],
        prior_draft: None,
        audit_findings: None,
        constraints: Constraints { max_sentences: 3 },
    };

    let transport = CmdTransport::new(ok_script);
    let response = transport.roundtrip(&request).unwrap();
    assert_eq!(response.summary.len(), 2);

    let mut slow = CmdTransport::new(slow_script);
    slow.timeout = std::time::Duration::from_millis(200);
    let err = slow.roundtrip(&request).unwrap_err();
    assert!(err.to_string().contains("timed out"), "{err}");
}

#[test]
fn http_backend_transport_round_trips() {
    let server = MockHttpServer::start(|_path, body| {
        let req: serde_json::Value = serde_json::from_str(body).unwrap();
        assert!(req["boardDigest"].is_string());
        assert_eq!(req["constraints"]["maxSentences"], 3);
        json!({
            "summary": [
                {"text": "Claim one.", "citations": []},
                {"text": "Claim two.", "citations": []}
            ],
            "steps": []
        })
        .to_string()
    });
    let transport = HttpTransport::new(server.url.clone());
    let response = transport
        .roundtrip(&BackendRequest {
            board_digest: "{}".into(),
            macro_actions: vec![],
            prior_draft: None,
            audit_findings: None,
            constraints: Constraints { max_sentences: 3 },
        })
        .unwrap();
    assert_eq!(response.summary.len(), 2);
    let _ = Arc::new(transport);
}
