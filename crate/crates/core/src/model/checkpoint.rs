//! Binary checkpoint files: a magic line, a little-endian `u64` header
//! length, a JSON header describing every tensor, then raw `f64` LE data.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Parameterized};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 16] = b"PRIORSEG-CKPT-1\n";

const ADAM_M: &str = "optim.m";
const ADAM_V: &str = "optim.v";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data section, in elements.
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    epoch: usize,
    optimizer_step: u64,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Model parameters plus optimizer state and free-form training metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    /// Number of completed epochs.
    pub epoch: usize,
    pub optimizer_step: u64,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data: Vec<f64> = Vec::new();
        self.model.visit("", &mut |name, shape, v| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: shape.to_vec(),
                offset: data.len(),
                len: v.len(),
            });
            data.extend_from_slice(v);
        });
        for (name, v) in [(ADAM_M, &self.adam_m), (ADAM_V, &self.adam_v)] {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: vec![v.len()],
                offset: data.len(),
                len: v.len(),
            });
            data.extend_from_slice(v);
        }
        let header = Header {
            model_config: self.model.config.clone(),
            epoch: self.epoch,
            optimizer_step: self.optimizer_step,
            metadata: self.metadata.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + json.len() + data.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < CHECKPOINT_MAGIC.len() + 8 || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut pos = CHECKPOINT_MAGIC.len();
        let hlen = u64::from_le_bytes(bytes[pos..pos + 8].try_into().expect("8 bytes")) as usize;
        pos += 8;
        let header_bytes = bytes
            .get(pos..pos.saturating_add(hlen))
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(header_bytes)?;
        pos += hlen;
        let raw = &bytes[pos..];
        if !raw.len().is_multiple_of(8) {
            return Err(bad("data section is not a whole number of f64 values"));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut index: HashMap<&str, &TensorEntry> = HashMap::new();
        for t in &header.tensors {
            if t.offset.checked_add(t.len).is_none_or(|e| e > data.len())
                || t.shape.iter().product::<usize>() != t.len
            {
                return Err(Error::Checkpoint(format!("tensor {} out of bounds", t.name)));
            }
            index.insert(t.name.as_str(), t);
        }
        let mut model = Model::new(header.model_config.clone(), 0)?;
        let mut expected: HashMap<String, Vec<usize>> = HashMap::new();
        model.visit("", &mut |n, s, _| {
            expected.insert(n.to_string(), s.to_vec());
        });
        let mut missing = None;
        model.visit_mut("", &mut |name, v| match index.get(name) {
            Some(t) if t.len == v.len() && expected.get(name) == Some(&t.shape) => {
                v.copy_from_slice(&data[t.offset..t.offset + t.len]);
            }
            _ => {
                missing.get_or_insert_with(|| name.to_string());
            }
        });
        if let Some(name) = missing {
            return Err(Error::Checkpoint(format!("tensor {name} missing or mis-shaped")));
        }
        let take = |name: &str| -> Vec<f64> {
            index
                .get(name)
                .map(|t| data[t.offset..t.offset + t.len].to_vec())
                .unwrap_or_default()
        };
        let adam_m = take(ADAM_M);
        let adam_v = take(ADAM_V);
        let n = model.num_parameters();
        for (name, v) in [(ADAM_M, &adam_m), (ADAM_V, &adam_v)] {
            if !v.is_empty() && v.len() != n {
                return Err(Error::Checkpoint(format!("{name} has {} values, expected {n}", v.len())));
            }
        }
        Ok(Self {
            model,
            epoch: header.epoch,
            optimizer_step: header.optimizer_step,
            adam_m,
            adam_v,
            metadata: header.metadata,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}
