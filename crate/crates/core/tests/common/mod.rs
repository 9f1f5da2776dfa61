//! Shared helpers for integration tests: a minimal HTTP server for mocking
//! node/explorer endpoints and small bundle builders.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use txlens_core::model::{
    Address, Amount, CallKind, CallNode, TokenInfo, TokenStandard, TokenTransfer,
    TransactionBundle, TxHash, TxMetadata, TxStatus,
};

/// One-thread HTTP mock. The handler receives (path-with-query, body) and
/// returns the response body; every response is 200 with a JSON content
/// type unless the body starts with "HTTP/"-style raw status marker
/// `\x01<code>\x01<body>`.
pub struct MockHttpServer {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
    shutdown: Arc<AtomicUsize>,
    handle: Option<JoinHandle<()>>,
}

impl MockHttpServer {
    pub fn start<F>(handler: F) -> Self
    where
        F: Fn(&str, &str) -> String + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock server");
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let shutdown = Arc::new(AtomicUsize::new(0));
        let hits_clone = hits.clone();
        let shutdown_clone = shutdown.clone();
        let handle = std::thread::spawn(move || {
            listener
                .set_nonblocking(false)
                .expect("blocking listener");
            for stream in listener.incoming() {
                if shutdown_clone.load(Ordering::SeqCst) == 1 {
                    break;
                }
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                if reader.read_line(&mut request_line).is_err() {
                    continue;
                }
                let path = request_line
                    .split_whitespace()
                    .nth(1)
                    .unwrap_or("/")
                    .to_string();
                let mut content_length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).is_err() || line.trim().is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap_or(0);
                    }
                }
                let mut body = vec![0u8; content_length];
                if content_length > 0 {
                    let _ = reader.read_exact(&mut body);
                }
                let body_str = String::from_utf8_lossy(&body).to_string();
                hits_clone.fetch_add(1, Ordering::SeqCst);
                let response_body = handler(&path, &body_str);
                let (status, payload) = match response_body.strip_prefix('\u{1}') {
                    Some(rest) => {
                        let (code, body) = rest.split_once('\u{1}').unwrap_or(("200", rest));
                        (code.parse::<u16>().unwrap_or(200), body.to_string())
                    }
                    None => (200, response_body),
                };
                let response = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{payload}",
                    payload.len()
                );
                let _ = stream.write_all(response.as_bytes());
                let _ = stream.flush();
            }
        });
        MockHttpServer {
            url: format!("http://{addr}"),
            hits,
            shutdown,
            handle: Some(handle),
        }
    }

    pub fn hit_count(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for MockHttpServer {
    fn drop(&mut self) {
        self.shutdown.store(1, Ordering::SeqCst);
        // unblock the accept loop
        let _ = std::net::TcpStream::connect(self.url.trim_start_matches("http://"));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

pub fn addr(n: u8) -> Address {
    let body: String = [n; 20].iter().map(|b| format!("{b:02x}")).collect();
    Address::parse(&format!("0x{body}")).unwrap()
}

pub fn tx_hash(n: u8) -> TxHash {
    let body: String = [n; 32].iter().map(|b| format!("{b:02x}")).collect();
    TxHash::parse(&format!("0x{body}")).unwrap()
}

pub fn erc20_transfer(
    token: &Address,
    from: &Address,
    to: &Address,
    amount: u128,
    log_index: u64,
) -> TokenTransfer {
    TokenTransfer {
        token: token.clone(),
        standard: TokenStandard::Erc20,
        from: from.clone(),
        to: to.clone(),
        amount: Amount::from_u128(amount),
        token_id: None,
        log_index,
    }
}

/// Minimal valid bundle around a list of ERC-20 transfers; tokens are
/// registered with 18 decimals and generated symbols.
pub fn bundle_with_transfers(
    sender: &Address,
    recipient: &Address,
    transfers: Vec<TokenTransfer>,
) -> TransactionBundle {
    let mut tokens = std::collections::BTreeMap::new();
    for (i, t) in transfers.iter().enumerate() {
        tokens.entry(t.token.clone()).or_insert_with(|| TokenInfo {
            address: t.token.clone(),
            symbol: format!("TK{i}"),
            decimals: 18,
        });
    }
    TransactionBundle {
        metadata: TxMetadata {
            hash: tx_hash(0xfe),
            block_number: 1,
            timestamp: 1_760_000_000,
            sender: sender.clone(),
            recipient: Some(recipient.clone()),
            eth_value: Amount::zero(),
            status: TxStatus::Success,
        },
        root_call: CallNode {
            caller: sender.clone(),
            callee: recipient.clone(),
            call_kind: CallKind::Call,
            selector: None,
            input_data: None,
            eth_value: Amount::zero(),
            trace_path: vec![],
            children: vec![],
        },
        transfers,
        tokens,
        declared_net_balances: None,
    }
}
