//! Versioned checkpoint container: a JSON manifest followed by a binary blob
//! of little-endian f64 parameter arrays.
//!
//! ```text
//! b"DTIPCKPT" | u32 format version | u64 manifest length | manifest JSON | blob
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::{ParamEntry, ParamGroup, ParamStore};
use crate::rssm::RunningNorm;
use crate::tensor::Mat;

const MAGIC: &[u8; 8] = b"DTIPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("config digest mismatch: checkpoint has {found}, expected {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error("checkpoint has no section `{0}`")]
    MissingSection(String),
    #[error("section `{section}` does not match the model layout: {reason}")]
    Layout { section: String, reason: String },
}

/// SHA-256 of the canonical (key-sorted, compact) JSON form of a config.
pub fn config_digest<T: Serialize>(config: &T) -> String {
    let v = serde_json::to_value(config).expect("config serializes");
    hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("value serializes")))
}

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Word position as a decimal string (it is a u128).
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl RngState {
    pub fn capture(seed: u64, rng: &rand_chacha::ChaCha8Rng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    group: ParamGroup,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config_digest: String,
    config: serde_json::Value,
    sections: BTreeMap<String, Vec<TensorRecord>>,
    freeze_mask: BTreeSet<ParamGroup>,
    normalizers: BTreeMap<String, RunningNorm>,
    rng: Option<RngState>,
    metadata: serde_json::Value,
}

/// In-memory checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub config_digest: String,
    pub sections: BTreeMap<String, ParamStore>,
    pub freeze_mask: BTreeSet<ParamGroup>,
    pub normalizers: BTreeMap<String, RunningNorm>,
    pub rng: Option<RngState>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new<T: Serialize>(config: &T) -> Self {
        Self {
            config: serde_json::to_value(config).expect("config serializes"),
            config_digest: config_digest(config),
            sections: BTreeMap::new(),
            freeze_mask: BTreeSet::new(),
            normalizers: BTreeMap::new(),
            rng: None,
            metadata: serde_json::Value::Null,
        }
    }

    pub fn section(&self, name: &str) -> Result<&ParamStore, CheckpointError> {
        self.sections
            .get(name)
            .ok_or_else(|| CheckpointError::MissingSection(name.to_string()))
    }

    /// Copies a stored section into `target`, which must have the same
    /// names and shapes.
    pub fn restore_into(&self, name: &str, target: &mut ParamStore) -> Result<(), CheckpointError> {
        let src = self.section(name)?;
        let layout_err = |reason: String| CheckpointError::Layout {
            section: name.to_string(),
            reason,
        };
        if src.entries.len() != target.entries.len() {
            return Err(layout_err(format!(
                "{} tensors stored, {} expected",
                src.entries.len(),
                target.entries.len()
            )));
        }
        for (s, t) in src.entries.iter().zip(&target.entries) {
            if s.name != t.name || s.value.shape() != t.value.shape() || s.group != t.group {
                return Err(layout_err(format!("tensor `{}` vs `{}`", s.name, t.name)));
            }
        }
        target.entries = src.entries.clone();
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blob: Vec<u8> = Vec::new();
        let mut sections = BTreeMap::new();
        let mut offset = 0usize;
        for (name, store) in &self.sections {
            let mut recs = Vec::with_capacity(store.entries.len());
            for e in &store.entries {
                recs.push(TensorRecord {
                    name: e.name.clone(),
                    group: e.group,
                    rows: e.value.rows,
                    cols: e.value.cols,
                    offset,
                });
                for v in &e.value.data {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                offset += e.value.len();
            }
            sections.insert(name.clone(), recs);
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config_digest: self.config_digest.clone(),
            config: self.config.clone(),
            sections,
            freeze_mask: self.freeze_mask.clone(),
            normalizers: self.normalizers.clone(),
            rng: self.rng,
            metadata: self.metadata.clone(),
        };
        let mjson = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + mjson.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&mjson);
        out.extend_from_slice(&blob);
        out
    }

    /// Parses a container and checks that the stored digest matches the
    /// stored config.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mend = 20usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| CheckpointError::Manifest("truncated manifest".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[20..mend]).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let blob = &bytes[mend..];
        let recomputed = hex::encode(Sha256::digest(
            serde_json::to_vec(&manifest.config).map_err(|e| CheckpointError::Manifest(e.to_string()))?,
        ));
        if recomputed != manifest.config_digest {
            return Err(CheckpointError::DigestMismatch {
                expected: manifest.config_digest,
                found: recomputed,
            });
        }
        let mut sections = BTreeMap::new();
        for (name, recs) in manifest.sections {
            let mut store = ParamStore::new();
            for r in recs {
                let n = r.rows * r.cols;
                let (start, end) = (r.offset * 8, (r.offset + n) * 8);
                if end > blob.len() {
                    return Err(CheckpointError::Manifest(format!("tensor `{}` past end of blob", r.name)));
                }
                let data = blob[start..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                store.entries.push(ParamEntry {
                    name: r.name,
                    group: r.group,
                    value: Mat::from_vec(r.rows, r.cols, data),
                });
            }
            sections.insert(name, store);
        }
        Ok(Self {
            config: manifest.config,
            config_digest: manifest.config_digest,
            sections,
            freeze_mask: manifest.freeze_mask,
            normalizers: manifest.normalizers,
            rng: manifest.rng,
            metadata: manifest.metadata,
        })
    }

    /// Writes atomically via a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Loads a checkpoint; with `expected_digest` set, also rejects any
    /// checkpoint written under a different config.
    pub fn load(path: &Path, expected_digest: Option<&str>) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let ck = Self::from_bytes(&bytes)?;
        if let Some(exp) = expected_digest {
            if exp != ck.config_digest {
                return Err(CheckpointError::DigestMismatch {
                    expected: exp.to_string(),
                    found: ck.config_digest,
                });
            }
        }
        Ok(ck)
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
