//! Canonical `.lamlab.json` bundles.
//!
//! A bundle file is `{"content_hash", "payload", "schema_version"}` where the
//! hash is the hex SHA-256 of the compact payload bytes. Object keys are
//! sorted and every number inside payloads is a decimal or `p/q` string, so
//! equal bundles serialize to identical bytes.

use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SCHEMA_VERSION: u64 = 1;
pub const EXTENSION: &str = ".lamlab.json";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a bundle: {0}")]
    Malformed(String),
    #[error("schema version {found} is not supported (expected {expected})")]
    Version { found: u64, expected: u64 },
    #[error("content hash mismatch: stored {stored}, computed {computed}")]
    HashMismatch { stored: String, computed: String },
}

/// Named artifact payloads plus the seed and configuration that made them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArtifactBundle {
    pub seed: Option<u64>,
    pub config: Value,
    pub triangulation: Option<Value>,
    pub map: Option<Value>,
    pub measure: Option<Value>,
    pub selection: Option<Value>,
    pub report: Option<Value>,
    pub certificate: Option<Value>,
}

const SLOTS: [&str; 6] = ["triangulation", "map", "measure", "selection", "report", "certificate"];

impl ArtifactBundle {
    fn slot(&self, name: &str) -> &Option<Value> {
        match name {
            "triangulation" => &self.triangulation,
            "map" => &self.map,
            "measure" => &self.measure,
            "selection" => &self.selection,
            "report" => &self.report,
            _ => &self.certificate,
        }
    }

    fn slot_mut(&mut self, name: &str) -> &mut Option<Value> {
        match name {
            "triangulation" => &mut self.triangulation,
            "map" => &mut self.map,
            "measure" => &mut self.measure,
            "selection" => &mut self.selection,
            "report" => &mut self.report,
            _ => &mut self.certificate,
        }
    }

    pub fn payload(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("config".into(), self.config.clone());
        obj.insert("seed".into(), self.seed.map_or(Value::Null, |s| Value::String(s.to_string())));
        for name in SLOTS {
            if let Some(v) = self.slot(name) {
                obj.insert(name.into(), v.clone());
            }
        }
        Value::Object(obj)
    }

    pub fn from_payload(v: &Value) -> Result<Self, BundleError> {
        let obj = v.as_object().ok_or_else(|| BundleError::Malformed("payload is not an object".into()))?;
        let seed = match obj.get("seed") {
            None | Some(Value::Null) => None,
            Some(s) => Some(
                s.as_str()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| BundleError::Malformed("seed".into()))?,
            ),
        };
        let mut bundle = ArtifactBundle { seed, config: obj.get("config").cloned().unwrap_or(Value::Null), ..Default::default() };
        for name in SLOTS {
            *bundle.slot_mut(name) = obj.get(name).cloned();
        }
        Ok(bundle)
    }

    pub fn content_hash(&self) -> String {
        hash_payload(&self.payload())
    }
}

fn hash_payload(payload: &Value) -> String {
    let bytes = serde_json::to_vec(payload).expect("values always serialize");
    hex::encode(Sha256::digest(&bytes))
}

/// Canonical file bytes of a bundle.
pub fn to_canonical_bytes(bundle: &ArtifactBundle) -> Vec<u8> {
    let payload = bundle.payload();
    let doc = json!({
        "content_hash": hash_payload(&payload),
        "payload": payload,
        "schema_version": SCHEMA_VERSION,
    });
    let mut bytes = serde_json::to_vec_pretty(&doc).expect("values always serialize");
    bytes.push(b'\n');
    bytes
}

pub fn from_bytes(bytes: &[u8]) -> Result<ArtifactBundle, BundleError> {
    let doc: Value = serde_json::from_slice(bytes).map_err(|e| BundleError::Malformed(e.to_string()))?;
    let found = doc
        .get("schema_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| BundleError::Malformed("missing schema_version".into()))?;
    if found != SCHEMA_VERSION {
        return Err(BundleError::Version { found, expected: SCHEMA_VERSION });
    }
    let payload = doc.get("payload").ok_or_else(|| BundleError::Malformed("missing payload".into()))?;
    let stored = doc
        .get("content_hash")
        .and_then(Value::as_str)
        .ok_or_else(|| BundleError::Malformed("missing content_hash".into()))?;
    let computed = hash_payload(payload);
    if stored != computed {
        return Err(BundleError::HashMismatch { stored: stored.into(), computed });
    }
    ArtifactBundle::from_payload(payload)
}

pub fn write_bundle(bundle: &ArtifactBundle, path: &Path) -> Result<(), BundleError> {
    fs::write(path, to_canonical_bytes(bundle))
        .map_err(|source| BundleError::Io { path: path.display().to_string(), source })
}

pub fn read_bundle(path: &Path) -> Result<ArtifactBundle, BundleError> {
    let bytes = fs::read(path).map_err(|source| BundleError::Io { path: path.display().to_string(), source })?;
    from_bytes(&bytes)
}
