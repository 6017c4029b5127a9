use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use numkit::Tensor;
use serde::{Deserialize, Serialize};

use super::{sha256_hex, TOOL_VERSION};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "resprune-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Length in bytes.
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub tool_version: String,
    pub config_digest: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: u64,
    pub blob_sha256: String,
    /// Digest of this header serialized with this field empty.
    pub header_sha256: String,
}

fn header_bytes(h: &CheckpointHeader) -> Result<Vec<u8>> {
    let mut json = serde_json::to_vec_pretty(h).map_err(|e| Error::Parse(e.to_string()))?;
    json.push(b'\n');
    Ok(json)
}

impl CheckpointHeader {
    fn self_digest(&self) -> Result<String> {
        let mut h = self.clone();
        h.header_sha256.clear();
        Ok(sha256_hex(&header_bytes(&h)?))
    }
}

/// Named tensors plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config_digest: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Serializes to `(header JSON, blob)`.
    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut seen = BTreeSet::new();
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::State(format!("duplicate tensor name {name}")));
            }
            let offset = blob.len() as u64;
            for &v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                bytes: blob.len() as u64 - offset,
            });
        }
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: self.kind.clone(),
            tool_version: TOOL_VERSION.into(),
            config_digest: self.config_digest.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
            blob_bytes: blob.len() as u64,
            blob_sha256: sha256_hex(&blob),
            header_sha256: String::new(),
        };
        let mut header = header;
        header.header_sha256 = header.self_digest()?;
        Ok((header_bytes(&header)?, blob))
    }

    /// Parses and checks a header. Format and version are checked first; any
    /// other edit, whitespace included, is reported as corruption because the
    /// header must re-serialize to the same bytes and match its own digest.
    pub fn parse_header(json: &[u8]) -> Result<CheckpointHeader> {
        let header: CheckpointHeader = serde_json::from_slice(json)
            .map_err(|e| Error::Parse(format!("checkpoint header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!(
                "not a checkpoint: format {:?}",
                header.format
            )));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: header.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if header_bytes(&header)? != json {
            return Err(Error::Corrupt(
                "checkpoint header is not in canonical form".into(),
            ));
        }
        if header.self_digest()? != header.header_sha256 {
            return Err(Error::Corrupt("checkpoint header digest mismatch".into()));
        }
        Ok(header)
    }

    pub fn decode(json: &[u8], blob: &[u8]) -> Result<Self> {
        let header = Self::parse_header(json)?;
        let mut expected_offset = 0u64;
        let mut seen = BTreeSet::new();
        for e in &header.tensors {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Corrupt(format!("duplicate tensor entry {}", e.name)));
            }
            let count = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .and_then(|c| c.checked_mul(4))
                .ok_or_else(|| {
                    Error::Corrupt(format!("entry {} has an overflowing shape", e.name))
                })?;
            if count != e.bytes || e.offset != expected_offset {
                return Err(Error::Corrupt(format!(
                    "entry {} has inconsistent layout (offset {}, {} bytes for shape {:?})",
                    e.name, e.offset, e.bytes, e.shape
                )));
            }
            let end = e.offset + e.bytes;
            if end > blob.len() as u64 {
                return Err(Error::Size(format!(
                    "entry {} needs bytes {}..{} but the blob has {}",
                    e.name,
                    e.offset,
                    end,
                    blob.len()
                )));
            }
            expected_offset = end;
        }
        if blob.len() as u64 != header.blob_bytes || expected_offset != header.blob_bytes {
            return Err(Error::Size(format!(
                "blob has {} bytes, header declares {} and entries cover {}",
                blob.len(),
                header.blob_bytes,
                expected_offset
            )));
        }
        let digest = sha256_hex(blob);
        if digest != header.blob_sha256 {
            return Err(Error::Corrupt(format!(
                "blob digest {digest} does not match header {}",
                header.blob_sha256
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let bytes = &blob[e.offset as usize..(e.offset + e.bytes) as usize];
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::checked(e.shape.clone(), data)
                .map_err(|err| Error::Corrupt(format!("entry {}: {err}", e.name)))?;
            tensors.push((e.name.clone(), t));
        }
        Ok(Self {
            kind: header.kind,
            config_digest: header.config_digest,
            metadata: header.metadata,
            tensors,
        })
    }

    /// Paths of the header (`<stem>.json`) and blob (`<stem>.bin`).
    /// The suffix is appended, so a stem may itself contain dots.
    pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        let with = |ext: &str| {
            let mut s = stem.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        (with(".json"), with(".bin"))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let (json, blob) = self.encode()?;
        let (jp, bp) = Self::paths(stem);
        if let Some(dir) = jp.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))?;
        std::fs::write(&jp, json).map_err(|e| Error::io(&jp, e))?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (jp, bp) = Self::paths(stem);
        let json = std::fs::read(&jp).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(jp.display().to_string()),
            _ => Error::io(&jp, e),
        })?;
        let blob = match std::fs::read(&bp) {
            Ok(b) => b,
            // A missing blob is reported by `decode` as a size error naming
            // the first entry that cannot be read.
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(&bp, e)),
        };
        Self::decode(&json, &blob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: "test".into(),
            config_digest: "abc".into(),
            metadata: serde_json::json!({"note": "x", "n": 2}),
            tensors: vec![
                (
                    "a".into(),
                    Tensor::from_rows(&[&[1.0, -2.5], &[3.0, 0.125]]).unwrap(),
                ),
                ("b".into(), Tensor::scalar(7.0)),
            ],
        }
    }

    #[test]
    fn encode_decode_encode_is_identity() {
        let c = sample();
        let (j, b) = c.encode().unwrap();
        let back = Checkpoint::decode(&j, &b).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode().unwrap(), (j, b));
    }

    #[test]
    fn flipped_byte_is_detected() {
        let (j, mut b) = sample().encode().unwrap();
        b[3] ^= 0x10;
        assert!(matches!(Checkpoint::decode(&j, &b), Err(Error::Corrupt(_))));
    }

    #[test]
    fn every_single_byte_header_flip_is_detected() {
        let (j, b) = sample().encode().unwrap();
        for i in 0..j.len() {
            let mut bad = j.clone();
            bad[i] ^= 0x01;
            assert!(
                Checkpoint::decode(&bad, &b).is_err(),
                "flip at header byte {i} went unnoticed"
            );
        }
    }

    #[test]
    fn missing_blob_names_entry() {
        let (j, _) = sample().encode().unwrap();
        match Checkpoint::decode(&j, &[]) {
            Err(Error::Size(msg)) => assert!(msg.contains("entry a"), "{msg}"),
            other => panic!("expected size error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let (j, b) = sample().encode().unwrap();
        let text = String::from_utf8(j)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(
            Checkpoint::decode(text.as_bytes(), &b),
            Err(Error::Version { found: 9, .. })
        ));
    }

    #[test]
    fn garbage_header_is_a_parse_error() {
        assert!(matches!(
            Checkpoint::decode(b"{not json", &[]),
            Err(Error::Parse(_))
        ));
    }
}
