//! Named-tensor store and its binary file format.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "DEEW" | version u32 | metadata_len u32 | metadata (UTF-8 JSON)
//! | tensor_count u32
//! | per tensor: name_len u16 | name (UTF-8) | rank u8 | dims (u32 × rank) | data (f32 × numel)
//! ```
//!
//! Float payloads are copied bit for bit, so NaN payloads survive a round trip.

use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Normalization;
use crate::error::{Error, FormatError, Result};
use crate::model::BranchNetSpec;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DEEW";
pub const FORMAT_VERSION: u32 = 1;

/// Lower-case hex sha256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Typed view of the JSON metadata block. Unknown keys are preserved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightMetadata {
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec_fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub students: Option<usize>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Default for WeightMetadata {
    fn default() -> Self {
        Self {
            normalization: Normalization::default(),
            spec_fingerprint: None,
            students: None,
            extra: serde_json::Map::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore {
    metadata: String,
    entries: IndexMap<String, Tensor>,
}

impl Default for WeightStore {
    fn default() -> Self {
        Self::new()
    }
}

impl WeightStore {
    pub fn new() -> Self {
        Self::with_metadata(&WeightMetadata::default())
    }

    pub fn with_metadata(meta: &WeightMetadata) -> Self {
        Self {
            metadata: serde_json::to_string(meta).expect("metadata serializes"),
            entries: IndexMap::new(),
        }
    }

    /// Inserts or replaces a tensor, keeping the original position on replace.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.entries.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn metadata_json(&self) -> &str {
        &self.metadata
    }

    pub fn metadata(&self) -> Result<WeightMetadata> {
        Ok(serde_json::from_str(&self.metadata)?)
    }

    pub fn set_metadata(&mut self, meta: &WeightMetadata) {
        self.metadata = serde_json::to_string(meta).expect("metadata serializes");
    }

    /// Student count implied by the fusion head's input width.
    pub fn student_count(&self, spec: &BranchNetSpec) -> Result<usize> {
        let w = self.require("fusion.fc.weight")?;
        match *w.shape() {
            [_, cols] if cols % spec.feature_dim == 0 && cols > 0 => Ok(cols / spec.feature_dim),
            _ => Err(Error::WeightShape {
                name: "fusion.fc.weight".into(),
                expected: vec![spec.class_count, spec.feature_dim],
                actual: w.shape().to_vec(),
            }),
        }
    }

    /// Checks that every tensor a `students`-student model reads is present
    /// with its exact shape. Extra entries are ignored.
    pub fn validate(&self, spec: &BranchNetSpec, students: usize) -> Result<()> {
        for (name, shape) in spec.param_shapes(students) {
            let t = self.require(&name)?;
            if t.shape() != shape {
                return Err(Error::WeightShape {
                    name,
                    expected: shape,
                    actual: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Randomly initialised weights for `students` students: He-normal
    /// convolutions, uniform fully connected layers, and jittered batchnorm
    /// statistics so normalization is not an identity.
    pub fn random(spec: &BranchNetSpec, students: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let meta = WeightMetadata {
            spec_fingerprint: Some(spec.fingerprint()),
            students: Some(students),
            ..WeightMetadata::default()
        };
        let mut store = Self::with_metadata(&meta);
        for (name, shape) in spec.param_shapes(students) {
            let n: usize = shape.iter().product();
            let param = name.rsplit('.').next().unwrap_or_default();
            let data: Vec<f32> = match (param, shape.len()) {
                ("weight", 4) => {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
                ("weight", _) => {
                    let bound = 1.0 / (shape[1] as f32).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                ("gamma" | "running_var", _) => {
                    (0..n).map(|_| rng.random_range(0.8..1.2)).collect()
                }
                ("beta" | "running_mean", _) => {
                    (0..n).map(|_| rng.random_range(-0.05..0.05)).collect()
                }
                _ => (0..n).map(|_| rng.random_range(-0.05..0.05)).collect(),
            };
            store.insert(name, Tensor::new(shape, data).expect("shape from spec"));
        }
        store
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.entries.values().map(|t| t.byte_len() + 32).sum();
        let mut out = Vec::with_capacity(16 + self.metadata.len() + payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let meta_len = r.u32("metadata length")? as usize;
        let metadata = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .map_err(|_| FormatError::InvalidUtf8("metadata".into()))?
            .to_string();
        match serde_json::from_str::<serde_json::Value>(&metadata) {
            Ok(serde_json::Value::Object(_)) => {}
            Ok(_) => return Err(FormatError::InvalidMetadata("not a JSON object".into())),
            Err(e) => return Err(FormatError::InvalidMetadata(e.to_string())),
        }
        let count = r.u32("tensor count")?;
        let mut entries = IndexMap::new();
        for i in 0..count {
            let name_len = r.u16(&format!("name length of tensor {i}"))? as usize;
            let name = std::str::from_utf8(r.take(name_len, &format!("name of tensor {i}"))?)
                .map_err(|_| FormatError::InvalidUtf8(format!("name of tensor {i}")))?
                .to_string();
            let rank = r.u8(&format!("rank of `{name}`"))?;
            if rank == 0 || rank as usize > Tensor::MAX_RANK {
                return Err(FormatError::InvalidRank { name, rank });
            }
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(r.u32(&format!("dims of `{name}`"))? as usize);
            }
            if shape.contains(&0) {
                return Err(FormatError::ZeroDimension { name });
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| FormatError::Truncated(format!("data of `{name}`")))?;
            let raw = r.take(numel, &format!("data of `{name}`"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data).expect("validated shape");
            if entries.contains_key(&name) {
                return Err(FormatError::DuplicateName(name));
            }
            entries.insert(name, tensor);
        }
        if r.pos != bytes.len() {
            return Err(FormatError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self { metadata, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        for name in self.entries.keys() {
            if name.len() > u16::MAX as usize {
                return Err(FormatError::NameTooLong(name.len()).into());
            }
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_bytes(&std::fs::read(path)?)?)
    }

    /// Hex SHA-256 of the serialized store.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| FormatError::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}
