//! Chain-native domain types: transaction metadata, call tree, token
//! transfers, and the validated bundle that feeds the pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_bigint::{BigInt, BigUint};
use num_traits::Zero;
use serde::de::Error as DeError;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Sentinel token address used for native ETH flows.
pub const NATIVE_TOKEN_ADDRESS: &str = "0xeeeeeeeeeeeeeeeeeeeeeeeeeeeeeeeeeeeeeeee";
/// The zero address; mint/burn counterparty.
pub const ZERO_ADDRESS: &str = "0x0000000000000000000000000000000000000000";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid bundle: field `{field}`: {reason}")]
    InvalidBundle { field: String, reason: String },
    #[error("malformed {what}: {value:?} ({reason})")]
    Malformed {
        what: &'static str,
        value: String,
        reason: String,
    },
}

impl ModelError {
    pub fn bundle(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ModelError::InvalidBundle {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

fn is_lower_hex(s: &str) -> bool {
    s.bytes()
        .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

fn check_hex(what: &'static str, s: &str, hex_len: usize) -> Result<String, ModelError> {
    let lower = s.trim().to_ascii_lowercase();
    let body = lower.strip_prefix("0x").ok_or_else(|| ModelError::Malformed {
        what,
        value: s.to_string(),
        reason: "missing 0x prefix".into(),
    })?;
    if body.len() != hex_len {
        return Err(ModelError::Malformed {
            what,
            value: s.to_string(),
            reason: format!("expected {hex_len} hex chars, got {}", body.len()),
        });
    }
    if !is_lower_hex(body) {
        return Err(ModelError::Malformed {
            what,
            value: s.to_string(),
            reason: "non-hex characters".into(),
        });
    }
    Ok(lower)
}

/// A 20-byte account address, normalized to lowercase `0x`-prefixed hex.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address(String);

impl Address {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        Ok(Address(check_hex("address", s, 40)?))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn zero() -> Self {
        Address(ZERO_ADDRESS.to_string())
    }

    pub fn native_token() -> Self {
        Address(NATIVE_TOKEN_ADDRESS.to_string())
    }

    pub fn is_zero(&self) -> bool {
        self.0 == ZERO_ADDRESS
    }

    pub fn is_native_token(&self) -> bool {
        self.0 == NATIVE_TOKEN_ADDRESS
    }

    /// Abbreviated display form, e.g. `0x1111...1111`.
    pub fn short(&self) -> String {
        format!("{}...{}", &self.0[..6], &self.0[self.0.len() - 4..])
    }

    /// First four bytes of the address as bare hex (symbol fallbacks).
    pub fn prefix4(&self) -> &str {
        &self.0[2..10]
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Address({})", self.0)
    }
}

impl FromStr for Address {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Address::parse(s)
    }
}

impl Serialize for Address {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        Address::parse(&raw).map_err(DeError::custom)
    }
}

/// A 32-byte transaction hash, normalized to lowercase `0x`-prefixed hex.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TxHash(String);

impl TxHash {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        Ok(TxHash(check_hex("tx hash", s, 64)?))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TxHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for TxHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TxHash({})", self.0)
    }
}

impl Serialize for TxHash {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for TxHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        TxHash::parse(&raw).map_err(DeError::custom)
    }
}

/// A 4-byte function selector.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Selector([u8; 4]);

impl Selector {
    pub fn new(bytes: [u8; 4]) -> Self {
        Selector(bytes)
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        let lower = check_hex("selector", s, 8)?;
        let mut bytes = [0u8; 4];
        for (i, b) in bytes.iter_mut().enumerate() {
            *b = u8::from_str_radix(&lower[2 + 2 * i..4 + 2 * i], 16).expect("validated hex");
        }
        Ok(Selector(bytes))
    }

    pub fn bytes(&self) -> [u8; 4] {
        self.0
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "0x{:02x}{:02x}{:02x}{:02x}",
            self.0[0], self.0[1], self.0[2], self.0[3]
        )
    }
}

impl fmt::Debug for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Selector({self})")
    }
}

impl Serialize for Selector {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Selector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        Selector::parse(&raw).map_err(DeError::custom)
    }
}

/// Unsigned token amount in base units. Arbitrary precision; serialized as a
/// decimal string.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Amount(pub BigUint);

impl Amount {
    pub fn zero() -> Self {
        Amount(BigUint::zero())
    }

    pub fn from_u128(v: u128) -> Self {
        Amount(BigUint::from(v))
    }

    pub fn parse_dec(s: &str) -> Result<Self, ModelError> {
        let t = s.trim();
        if t.is_empty() || !t.bytes().all(|b| b.is_ascii_digit()) {
            return Err(ModelError::Malformed {
                what: "amount",
                value: s.to_string(),
                reason: "expected unsigned decimal string".into(),
            });
        }
        Ok(Amount(BigUint::parse_bytes(t.as_bytes(), 10).expect("validated digits")))
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}

impl fmt::Display for Amount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Debug for Amount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Amount({})", self.0)
    }
}

impl From<BigUint> for Amount {
    fn from(v: BigUint) -> Self {
        Amount(v)
    }
}

impl Serialize for Amount {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for Amount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        Amount::parse_dec(&raw).map_err(DeError::custom)
    }
}

/// Signed balance delta in base units. Serialized as a decimal string with
/// optional leading minus.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Delta(pub BigInt);

impl Delta {
    pub fn zero() -> Self {
        Delta(BigInt::zero())
    }

    pub fn from_i128(v: i128) -> Self {
        Delta(BigInt::from(v))
    }

    pub fn parse_dec(s: &str) -> Result<Self, ModelError> {
        let t = s.trim();
        let body = t.strip_prefix('-').unwrap_or(t);
        if body.is_empty() || !body.bytes().all(|b| b.is_ascii_digit()) {
            return Err(ModelError::Malformed {
                what: "delta",
                value: s.to_string(),
                reason: "expected signed decimal string".into(),
            });
        }
        Ok(Delta(BigInt::parse_bytes(t.as_bytes(), 10).expect("validated digits")))
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn is_negative(&self) -> bool {
        self.0.sign() == num_bigint::Sign::Minus
    }

    /// Absolute value as an unsigned amount.
    pub fn magnitude(&self) -> Amount {
        Amount(self.0.magnitude().clone())
    }
}

impl fmt::Display for Delta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Debug for Delta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Delta({})", self.0)
    }
}

impl Serialize for Delta {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for Delta {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        Delta::parse_dec(&raw).map_err(DeError::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxStatus {
    Success,
    Failure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Call,
    Delegatecall,
    Staticcall,
    Create,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenStandard {
    Erc20,
    Erc721,
    Native,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TxMetadata {
    pub hash: TxHash,
    pub block_number: u64,
    pub timestamp: u64,
    #[serde(rename = "from")]
    pub sender: Address,
    #[serde(rename = "to", default, skip_serializing_if = "Option::is_none")]
    pub recipient: Option<Address>,
    #[serde(rename = "value")]
    pub eth_value: Amount,
    pub status: TxStatus,
}

/// One node of the internal call tree. `trace_path` is the sequence of child
/// indices from the root and is rebuilt on load rather than serialized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CallNode {
    #[serde(rename = "from")]
    pub caller: Address,
    #[serde(rename = "to")]
    pub callee: Address,
    #[serde(rename = "callType")]
    pub call_kind: CallKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selector: Option<Selector>,
    #[serde(rename = "input", default, skip_serializing_if = "Option::is_none")]
    pub input_data: Option<String>,
    #[serde(rename = "value")]
    pub eth_value: Amount,
    #[serde(skip)]
    pub trace_path: Vec<usize>,
    #[serde(default)]
    pub children: Vec<CallNode>,
}

impl CallNode {
    /// Assign `trace_path` for this node (given its own path) and all
    /// descendants.
    pub fn assign_trace_paths(&mut self, own: Vec<usize>) {
        self.trace_path = own;
        for (i, child) in self.children.iter_mut().enumerate() {
            let mut p = self.trace_path.clone();
            p.push(i);
            child.assign_trace_paths(p);
        }
    }

    /// Depth-first preorder walk.
    pub fn walk<'a>(&'a self, out: &mut Vec<&'a CallNode>) {
        out.push(self);
        for c in &self.children {
            c.walk(out);
        }
    }

    pub fn preorder(&self) -> Vec<&CallNode> {
        let mut v = Vec::new();
        self.walk(&mut v);
        v
    }

    /// Node at a trace path, if the path is valid.
    pub fn node_at(&self, path: &[usize]) -> Option<&CallNode> {
        let mut cur = self;
        for &i in path {
            cur = cur.children.get(i)?;
        }
        Some(cur)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TokenTransfer {
    pub token: Address,
    pub standard: TokenStandard,
    pub from: Address,
    pub to: Address,
    pub amount: Amount,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_id: Option<Amount>,
    pub log_index: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TokenInfo {
    pub address: Address,
    pub symbol: String,
    pub decimals: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NetBalanceChange {
    pub holder: Address,
    pub token: Address,
    pub delta: Delta,
}

/// The four chain-native inputs in one validated record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TransactionBundle {
    pub metadata: TxMetadata,
    #[serde(rename = "calls", deserialize_with = "deserialize_root_call")]
    pub root_call: CallNode,
    pub transfers: Vec<TokenTransfer>,
    #[serde(with = "tokens_map")]
    pub tokens: BTreeMap<Address, TokenInfo>,
    #[serde(
        rename = "netBalances",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub declared_net_balances: Option<Vec<NetBalanceChange>>,
}

/// `trace_path` is derived from tree position, not stored; rebuild it
/// whenever a call tree is parsed.
fn deserialize_root_call<'de, D: Deserializer<'de>>(d: D) -> Result<CallNode, D::Error> {
    let mut node = CallNode::deserialize(d)?;
    node.assign_trace_paths(vec![]);
    Ok(node)
}

/// Fixture-format token map: `{"<address>": {"symbol", "decimals"}}`. The
/// entry address is the map key, not a repeated field.
mod tokens_map {
    use super::*;
    use serde::ser::SerializeMap;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        symbol: String,
        decimals: u32,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<Address, TokenInfo>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(map.len()))?;
        for (addr, info) in map {
            m.serialize_entry(
                addr,
                &Entry {
                    symbol: info.symbol.clone(),
                    decimals: info.decimals,
                },
            )?;
        }
        m.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<Address, TokenInfo>, D::Error> {
        let raw: BTreeMap<Address, Entry> = BTreeMap::deserialize(d)?;
        Ok(raw
            .into_iter()
            .map(|(addr, e)| {
                let info = TokenInfo {
                    address: addr.clone(),
                    symbol: e.symbol,
                    decimals: e.decimals,
                };
                (addr, info)
            })
            .collect())
    }
}

fn hex_body_len(data: &str) -> Result<usize, ModelError> {
    let body = data.strip_prefix("0x").ok_or_else(|| ModelError::Malformed {
        what: "input data",
        value: data.to_string(),
        reason: "missing 0x prefix".into(),
    })?;
    if body.len() % 2 != 0 || !is_lower_hex(&body.to_ascii_lowercase()) {
        return Err(ModelError::Malformed {
            what: "input data",
            value: data.to_string(),
            reason: "not an even-length hex string".into(),
        });
    }
    Ok(body.len() / 2)
}

impl TransactionBundle {
    /// Check every structural invariant. Declared-vs-recomputed net balance
    /// agreement is deliberately not checked here: the flow engine reports it
    /// and the profiler flags it, so a disagreeing bundle stays observable.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.metadata.recipient.is_none() && self.root_call.call_kind != CallKind::Create {
            return Err(ModelError::bundle(
                "metadata.to",
                "recipient absent but root call is not a contract creation",
            ));
        }

        let mut prev: Option<u64> = None;
        for (i, t) in self.transfers.iter().enumerate() {
            if let Some(p) = prev {
                if t.log_index <= p {
                    return Err(ModelError::bundle(
                        format!("transfers[{i}].logIndex"),
                        "transfers must be strictly ordered by log index",
                    ));
                }
            }
            prev = Some(t.log_index);

            if !self.tokens.contains_key(&t.token) {
                return Err(ModelError::bundle(
                    format!("transfers[{i}].token"),
                    format!("token {} has no entry in the tokens map", t.token),
                ));
            }
            match t.standard {
                TokenStandard::Erc721 => {
                    if t.amount != Amount::from_u128(1) {
                        return Err(ModelError::bundle(
                            format!("transfers[{i}].amount"),
                            "erc721 transfer amount must be 1",
                        ));
                    }
                    if t.token_id.is_none() {
                        return Err(ModelError::bundle(
                            format!("transfers[{i}].tokenId"),
                            "erc721 transfer requires a token id",
                        ));
                    }
                }
                TokenStandard::Erc20 | TokenStandard::Native => {
                    if t.token_id.is_some() {
                        return Err(ModelError::bundle(
                            format!("transfers[{i}].tokenId"),
                            "token id is only valid for erc721 transfers",
                        ));
                    }
                }
            }
            if (t.standard == TokenStandard::Native) != t.token.is_native_token() {
                return Err(ModelError::bundle(
                    format!("transfers[{i}].token"),
                    "native transfers use the sentinel token address, and only they do",
                ));
            }
        }

        for (addr, info) in &self.tokens {
            if addr != &info.address {
                return Err(ModelError::bundle(
                    format!("tokens[{addr}]"),
                    "token map key differs from entry address",
                ));
            }
            if info.decimals > 36 {
                return Err(ModelError::bundle(
                    format!("tokens[{addr}].decimals"),
                    "decimals out of range [0, 36]",
                ));
            }
            if addr.is_native_token() && (info.decimals != 18 || info.symbol != "ETH") {
                return Err(ModelError::bundle(
                    format!("tokens[{addr}]"),
                    "native token entry must be ETH with 18 decimals",
                ));
            }
        }

        if let Some(declared) = &self.declared_net_balances {
            for (i, n) in declared.iter().enumerate() {
                if n.delta.is_zero() {
                    return Err(ModelError::bundle(
                        format!("netBalances[{i}].delta"),
                        "zero-delta entries are dropped, not declared",
                    ));
                }
            }
        }

        self.validate_calls(&self.root_call, &[])
    }

    fn validate_calls(&self, node: &CallNode, expected_path: &[usize]) -> Result<(), ModelError> {
        let field = if expected_path.is_empty() {
            "calls".to_string()
        } else {
            format!("calls[{expected_path:?}]")
        };
        if node.trace_path != expected_path {
            return Err(ModelError::bundle(
                field,
                format!(
                    "trace path {:?} does not match position {:?}",
                    node.trace_path, expected_path
                ),
            ));
        }
        let input_len = match &node.input_data {
            Some(data) => Some(hex_body_len(data).map_err(|e| {
                ModelError::bundle(format!("{field}.input"), e.to_string())
            })?),
            None => None,
        };
        match (&node.selector, input_len) {
            (Some(_), None) => {
                return Err(ModelError::bundle(
                    format!("{field}.selector"),
                    "selector present without input data",
                ));
            }
            (Some(sel), Some(n)) => {
                if n < 4 {
                    return Err(ModelError::bundle(
                        format!("{field}.selector"),
                        "selector present but input data is shorter than 4 bytes",
                    ));
                }
                let body = node.input_data.as_ref().unwrap().to_ascii_lowercase();
                let derived = Selector::parse(&format!("0x{}", &body[2..10]))
                    .map_err(|e| ModelError::bundle(format!("{field}.input"), e.to_string()))?;
                if derived != *sel {
                    return Err(ModelError::bundle(
                        format!("{field}.selector"),
                        format!("selector {sel} does not match input prefix {derived}"),
                    ));
                }
            }
            (None, Some(n)) if n >= 4 => {
                return Err(ModelError::bundle(
                    format!("{field}.selector"),
                    "input data has >= 4 bytes but no selector",
                ));
            }
            _ => {}
        }
        for (i, child) in node.children.iter().enumerate() {
            let mut p = expected_path.to_vec();
            p.push(i);
            self.validate_calls(child, &p)?;
        }
        Ok(())
    }

    /// Symbol for a token address; falls back to an address-derived tag.
    pub fn symbol(&self, token: &Address) -> String {
        match self.tokens.get(token) {
            Some(info) => info.symbol.clone(),
            None => format!("TKN-{}", token.prefix4()),
        }
    }

    pub fn token_info(&self, token: &Address) -> Option<&TokenInfo> {
        self.tokens.get(token)
    }

    /// The initiating user (transaction sender).
    pub fn user(&self) -> &Address {
        &self.metadata.sender
    }

    /// All log indices in order.
    pub fn log_indices(&self) -> Vec<u64> {
        self.transfers.iter().map(|t| t.log_index).collect()
    }

    pub fn transfer_by_log_index(&self, idx: u64) -> Option<&TokenTransfer> {
        self.transfers.iter().find(|t| t.log_index == idx)
    }
}
