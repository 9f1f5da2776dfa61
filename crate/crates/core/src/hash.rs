//! Keccak-256 helpers for selectors and event topics.

use sha3::{Digest, Keccak256};

use crate::model::Selector;

/// Keccak-256 over raw bytes.
pub fn keccak256(data: impl AsRef<[u8]>) -> [u8; 32] {
    let mut hasher = Keccak256::new();
    hasher.update(data.as_ref());
    hasher.finalize().into()
}

/// Function selector: first 4 bytes of keccak-256 over the canonical
/// signature string.
pub fn function_selector(signature: &str) -> Selector {
    let h = keccak256(signature.as_bytes());
    Selector::new([h[0], h[1], h[2], h[3]])
}

/// Event topic: full keccak-256 of the canonical event signature, as
/// lowercase 0x-hex.
pub fn event_topic(signature: &str) -> String {
    let h = keccak256(signature.as_bytes());
    let body: String = h.iter().map(|b| format!("{b:02x}")).collect();
    format!("0x{body}")
}
