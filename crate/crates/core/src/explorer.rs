//! Explorer ABI retrieval with a content-addressed response cache.
//!
//! Cache layout: one file per request under the cache directory, named by
//! the sha-256 of the request key (`abi:<address>`), holding
//! `{key, retrievedAt, body}`. Entries never expire on their own; refresh is
//! an explicit caller action.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hash::function_selector;
use crate::ingest::EndpointConfig;
use crate::knowledge::{SelectorEntry, SelectorSource};
use crate::model::Address;

#[derive(Debug, Error)]
pub enum AbiError {
    #[error("network error: {0}")]
    Network(String),
    #[error("contract {0} is not verified on the explorer")]
    UnverifiedContract(Address),
    #[error("explorer rate limit persisted after retries")]
    RateLimited,
    #[error("malformed explorer response: {0}")]
    Malformed(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct CacheRecord {
    key: String,
    retrieved_at: u64,
    body: String,
}

/// File-backed response cache shared safely between concurrent analyses:
/// writes go to a temp file first and land with an atomic rename.
#[derive(Debug, Clone)]
pub struct HttpCache {
    dir: PathBuf,
}

impl HttpCache {
    pub fn new(dir: PathBuf) -> std::io::Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(HttpCache { dir })
    }

    fn path_for(&self, key: &str) -> PathBuf {
        let digest = Sha256::digest(key.as_bytes());
        let name: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.dir.join(name)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let text = fs::read_to_string(self.path_for(key)).ok()?;
        let record: CacheRecord = serde_json::from_str(&text).ok()?;
        if record.key != key {
            return None;
        }
        Some(record.body)
    }

    pub fn put(&self, key: &str, body: &str) -> std::io::Result<()> {
        let record = CacheRecord {
            key: key.to_string(),
            retrieved_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            body: body.to_string(),
        };
        let final_path = self.path_for(key);
        let tmp_path = final_path.with_extension(format!("tmp.{}", std::process::id()));
        fs::write(&tmp_path, serde_json::to_string(&record)?)?;
        fs::rename(&tmp_path, final_path)
    }

    pub fn remove(&self, key: &str) -> std::io::Result<()> {
        match fs::remove_file(self.path_for(key)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

#[derive(Debug, Deserialize)]
struct ExplorerEnvelope {
    status: String,
    #[serde(default)]
    message: String,
    #[serde(default)]
    result: serde_json::Value,
}

#[derive(Debug, Deserialize)]
struct AbiParam {
    #[serde(rename = "type")]
    type_name: String,
    #[serde(default)]
    components: Vec<AbiParam>,
}

#[derive(Debug, Deserialize)]
struct AbiItem {
    #[serde(rename = "type", default)]
    item_type: String,
    #[serde(default)]
    name: String,
    #[serde(default)]
    inputs: Vec<AbiParam>,
}

fn canonical_type(param: &AbiParam) -> String {
    if let Some(rest) = param.type_name.strip_prefix("tuple") {
        let inner: Vec<String> = param.components.iter().map(canonical_type).collect();
        format!("({}){rest}", inner.join(","))
    } else {
        param.type_name.clone()
    }
}

/// Extract selector entries from a verified-ABI JSON document.
pub fn parse_abi_functions(abi_json: &str) -> Result<Vec<SelectorEntry>, AbiError> {
    let items: Vec<AbiItem> =
        serde_json::from_str(abi_json).map_err(|e| AbiError::Malformed(e.to_string()))?;
    let mut entries = Vec::new();
    for item in items.iter().filter(|i| i.item_type == "function") {
        if item.name.is_empty() {
            continue;
        }
        let params: Vec<String> = item.inputs.iter().map(canonical_type).collect();
        let signature = format!("{}({})", item.name, params.join(","));
        entries.push(SelectorEntry {
            selector: function_selector(&signature),
            canonical_signature: signature,
            human_name: item.name.clone(),
            source: SelectorSource::Explorer,
        });
    }
    Ok(entries)
}

fn http_get(url: &str) -> Result<(u16, String), AbiError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(30)))
        .http_status_as_error(false)
        .build()
        .into();
    let mut resp = agent
        .get(url)
        .call()
        .map_err(|e| AbiError::Network(e.to_string()))?;
    let status = resp.status().as_u16();
    let body = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| AbiError::Network(e.to_string()))?;
    Ok((status, body))
}

fn is_rate_limited(status: u16, envelope: Option<&ExplorerEnvelope>) -> bool {
    if status == 429 {
        return true;
    }
    envelope.is_some_and(|e| {
        e.status == "0"
            && (e.result.as_str().unwrap_or("").contains("rate limit")
                || e.message.contains("rate limit"))
    })
}

/// Fetch the verified ABI for a contract, serving from cache when possible.
/// Rate-limited responses retry at most twice with one-second spacing.
pub fn fetch_abi(
    cfg: &EndpointConfig,
    cache: Option<&HttpCache>,
    address: &Address,
) -> Result<Vec<SelectorEntry>, AbiError> {
    let key = format!("abi:{address}");
    if let Some(cache) = cache {
        if let Some(body) = cache.get(&key) {
            return parse_abi_functions(&body);
        }
    }
    if cfg.offline {
        return Err(AbiError::Network(
            "offline configuration refuses explorer requests".into(),
        ));
    }
    let base = cfg
        .explorer_api_url
        .as_deref()
        .ok_or_else(|| AbiError::Network("no explorer API URL configured".into()))?;
    let api_key = cfg.explorer_api_key.as_deref().unwrap_or("");
    let url =
        format!("{base}?module=contract&action=getabi&address={address}&apikey={api_key}");

    let mut attempts = 0;
    loop {
        let (status, body) = http_get(&url)?;
        let envelope: Option<ExplorerEnvelope> = serde_json::from_str(&body).ok();
        if is_rate_limited(status, envelope.as_ref()) {
            attempts += 1;
            if attempts > 2 {
                return Err(AbiError::RateLimited);
            }
            std::thread::sleep(Duration::from_secs(1));
            continue;
        }
        if status != 200 {
            return Err(AbiError::Network(format!("explorer returned HTTP {status}")));
        }
        let envelope = envelope.ok_or_else(|| AbiError::Malformed("not a JSON envelope".into()))?;
        if envelope.status != "1" {
            let text = envelope.result.as_str().unwrap_or(&envelope.message);
            if text.to_ascii_lowercase().contains("not verified") {
                return Err(AbiError::UnverifiedContract(address.clone()));
            }
            return Err(AbiError::Malformed(format!(
                "explorer rejected the request: {text}"
            )));
        }
        let abi_json = envelope
            .result
            .as_str()
            .ok_or_else(|| AbiError::Malformed("result is not an ABI string".into()))?
            .to_string();
        let entries = parse_abi_functions(&abi_json)?;
        if let Some(cache) = cache {
            let _ = cache.put(&key, &abi_json);
        }
        return Ok(entries);
    }
}
